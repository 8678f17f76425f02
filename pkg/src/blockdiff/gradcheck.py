"""Central finite-difference checks of reverse-mode gradients (float64)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .corruption import corrupt_block, corrupt_full
from .model import AttentionMaskSpec, ModelConfig, build_attention_mask, init_params
from .objectives import ar_loss, diffusion_mask, dllm_loss

FD_EPS = 1e-5
# Central differences at this step carry ~1e-9 absolute error, so entries far
# below 1e-4 in magnitude are compared on an absolute scale of 1e-4 instead.
REL_FLOOR = 1e-4


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / den))


def numeric_grads(fn: Callable[[], float], arrays: list[np.ndarray], eps: float = FD_EPS) -> list[np.ndarray]:
    """Central differences of ``fn`` w.r.t. each array, perturbed in place."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = fn()
            flat[i] = old - eps
            down = fn()
            flat[i] = old
            gflat[i] = (up - down) / (2 * eps)
        out.append(g)
    return out


def check(build: Callable[..., T.Tensor], inputs: list[np.ndarray]) -> float:
    """Max relative error for the scalar ``build(*tensors)``."""
    leaves = [T.Tensor(x, requires_grad=True) for x in inputs]
    with T.Tape() as tape:
        loss = build(*leaves)
    analytic = T.backward(tape, loss, leaves)

    def value():
        with T.no_grad():
            return float(build(*leaves).data)

    numeric = numeric_grads(value, [t.data for t in leaves])
    return max(rel_error(a, n) for a, n in zip(analytic, numeric))


def _project(rng, shape):
    """Random linear functional that turns any output into a scalar."""
    w = rng.standard_normal(shape)
    return lambda y: T.weighted_sum(y, w)


@dataclass
class CheckResult:
    name: str
    error: float


def primitive_checks(seed: int) -> list[CheckResult]:
    rng = np.random.default_rng([seed, 1])
    r = lambda *s: rng.standard_normal(s)
    out = []

    def run(name, fn, inputs, out_shape):
        proj = _project(rng, out_shape)
        out.append(CheckResult(name, check(lambda *ts: proj(fn(*ts)), inputs)))

    run("add", T.add, [r(3, 4), r(3, 4)], (3, 4))
    run("sub", T.sub, [r(3, 4), r(3, 4)], (3, 4))
    run("mul", T.mul, [r(3, 4), r(3, 4)], (3, 4))
    run("scale", lambda a: T.scale(a, 0.7), [r(5)], (5,))
    run("add_bias", T.add_bias, [r(2, 3, 4), r(4)], (2, 3, 4))
    run("gelu", T.gelu, [r(4, 5)], (4, 5))
    run("square", T.square, [r(6)], (6,))
    run("reshape", lambda a: T.reshape(a, (6, 2)), [r(3, 4)], (6, 2))
    run("transpose", lambda a: T.transpose(a, 0, 2), [r(2, 3, 4)], (4, 3, 2))
    run("permute", lambda a: T.permute(a, (1, 2, 0)), [r(2, 3, 4)], (3, 4, 2))
    idx = np.array([0, 2, 2, 1])
    run("index", lambda a: T.index(a, idx), [r(3, 4)], (4, 4))
    run("concat", lambda a, b: T.concat([a, b], axis=1), [r(2, 3), r(2, 2)], (2, 5))
    run("matmul", T.matmul, [r(2, 3, 4), r(2, 4, 5)], (2, 3, 5))
    run("linear", T.linear, [r(2, 3, 4), r(4, 5)], (2, 3, 5))
    ids = rng.integers(0, 6, size=(2, 3))
    run("embedding", lambda tab: T.embedding(tab, ids), [r(6, 4)], (2, 3, 4))
    out.append(CheckResult("sum_all", check(T.sum_all, [r(3, 4)])))
    w = r(3, 4)
    out.append(CheckResult("weighted_sum", check(lambda a: T.weighted_sum(a, w), [r(3, 4)])))
    run("rms_norm", T.rms_norm, [r(3, 5), r(5)], (3, 5))
    allow = build_attention_mask(AttentionMaskSpec("block_causal", 2), 5)
    run("masked_softmax_rows", lambda a: T.masked_softmax_rows(a, allow), [r(2, 5, 5)], (2, 5, 5))
    tg = rng.integers(0, 7, size=4)
    run("cross_entropy", lambda z: T.cross_entropy(z, tg), [r(4, 7)], (4,))
    out.append(CheckResult("cross_entropy_scalar", check(lambda z: T.cross_entropy(z, 3), [r(7)])))
    return out


LOSS_KINDS = ("AR", "ARDLLM", "BiDLLM", "BlockDLLM")


def model_loss_check(seed: int, kind: str | None = None) -> CheckResult:
    """Every parameter of a small 2-layer float64 model against one loss."""
    kind = kind or LOSS_KINDS[seed % len(LOSS_KINDS)]
    V, L, B = 11, 6, 2
    cfg = ModelConfig(vocab_size=V, d_model=8, n_layers=2, n_heads=2, max_len=L, dtype="float64",
                      init_std=0.5, parametrization="shifted" if kind == "AR" else "unshifted")
    model = init_params(cfg, seed)
    rng = np.random.default_rng([seed, 2])
    for p in model.params.values():  # move norms and biases off their constant init
        p.data += 0.1 * rng.standard_normal(p.shape)
    tokens = rng.integers(0, V - 1, size=(2, L))
    if kind == "AR":
        build = lambda: ar_loss(model, tokens).loss
    else:
        if kind == "BlockDLLM":
            sample = corrupt_block(tokens, np.array([1, 2]), 0.6, B, rng, cfg.mask_token)
        else:
            sample = corrupt_full(tokens, 0.5, rng, cfg.mask_token)
            sample.mask_flags[:, 0] = True
            sample.xt[:, 0] = cfg.mask_token
        mask = diffusion_mask(kind, B)
        build = lambda: dllm_loss(model, sample, mask).loss
    leaves = list(model.params.values())
    with T.Tape() as tape:
        loss = build()
    analytic = T.backward(tape, loss, leaves)

    def value():
        with T.no_grad():
            return float(build().data)

    numeric = numeric_grads(value, [p.data for p in leaves])
    return CheckResult(f"model[{kind}]", max(rel_error(a, n) for a, n in zip(analytic, numeric)))


def run_suite(seed: int) -> list[CheckResult]:
    return primitive_checks(seed) + [model_loss_check(seed)]
