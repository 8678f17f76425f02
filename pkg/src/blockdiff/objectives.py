"""Training objectives: next-token AR, ELBO-weighted masked diffusion and the
unweighted warmup variant, plus the corruption-cap ramp used during warmup.

Losses are normalized by the number of supervised tokens in the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .corruption import CorruptionSample
from .model import AttentionMaskSpec
from .tensor import Tensor


@dataclass(frozen=True)
class WarmupConfig:
    steps: int
    u_init: float = 1e-3

    def __post_init__(self):
        if not 0 < self.u_init <= 1:
            raise ValueError(f"u_init must lie in (0, 1], got {self.u_init}")
        if self.steps < 0:
            raise ValueError("warmup steps must be >= 0")


def warmup_umax(cfg: WarmupConfig, step: int) -> float:
    """Cap on the corruption level at ``step``: linear from ``u_init`` to 1."""
    if not 0 <= step <= cfg.steps:
        raise ValueError(f"step {step} outside [0, {cfg.steps}]")
    if cfg.steps == 0:
        return 1.0
    return cfg.u_init + (1.0 - cfg.u_init) * step / cfg.steps


@dataclass
class LossReport:
    loss: Tensor
    per_token: np.ndarray
    n_supervised: int
    mean_weight: float
    weights: np.ndarray
    positions: tuple[np.ndarray, np.ndarray]

    @property
    def value(self) -> float:
        return float(self.loss.data)


def _weighted_mean(ce: Tensor, weights: np.ndarray) -> Tensor:
    return T.weighted_sum(ce, weights / len(weights))


def _gather_rows(logits: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    B, L, V = logits.shape
    flat = T.reshape(logits, (B * L, V))
    return T.index(flat, rows * L + cols)


def ar_loss(model, tokens, loss_mask=None, bos_id: int | None = None) -> LossReport:
    """Mean next-token cross-entropy under causal attention.

    With ``bos_id`` a begin-of-sequence column is prepended so the first real
    token is predicted too. ``loss_mask`` marks which target tokens count.
    """
    if model.config.parametrization != "shifted":
        raise ValueError("ar_loss needs the shifted (next-token) parametrization")
    tokens = np.atleast_2d(np.asarray(tokens))
    if loss_mask is None:
        loss_mask = np.ones(tokens.shape, dtype=bool)
    loss_mask = np.atleast_2d(np.asarray(loss_mask, dtype=bool))
    if bos_id is not None:
        tokens = np.concatenate([np.full((len(tokens), 1), bos_id), tokens], axis=1)
        loss_mask = np.concatenate([np.zeros((len(tokens), 1), bool), loss_mask], axis=1)
    if tokens.shape[1] < 2:
        raise ValueError("ar_loss needs at least two positions (or a BOS token)")
    logits = model.forward(tokens, AttentionMaskSpec("causal"))
    rows, cols = np.nonzero(loss_mask[:, 1:])
    if rows.size == 0:
        raise ValueError("ar_loss: no target tokens")
    ce = T.cross_entropy(_gather_rows(logits, rows, cols), tokens[rows, cols + 1])
    w = np.ones(rows.size)
    return LossReport(_weighted_mean(ce, w), ce.data.copy(), int(rows.size), 1.0, w, (rows, cols + 1))


def diffusion_mask(objective: str, block_size: int | None = None) -> AttentionMaskSpec:
    kinds = {"ARDLLM": "causal", "BiDLLM": "bidirectional", "BlockDLLM": "block_causal"}
    if objective not in kinds:
        raise ValueError(f"not a diffusion objective: {objective!r}")
    return AttentionMaskSpec(kinds[objective], block_size if objective == "BlockDLLM" else None)


def dllm_loss(model, sample: CorruptionSample, mask: AttentionMaskSpec, weighted: bool = True) -> LossReport:
    """Cross-entropy at masked positions only, each weighted by its row's
    ``token_weight`` (``1/u_eff``) when ``weighted``.

    Unshifted heads read the prediction for a masked position at that
    position; shifted heads read it one position earlier, which requires
    position 0 to stay clean and is incompatible with block-causal attention
    for blocks longer than one token.
    """
    shifted = model.config.parametrization == "shifted"
    xt = np.atleast_2d(sample.xt)
    x0 = np.atleast_2d(sample.x0)
    flags = np.atleast_2d(sample.mask_flags)
    rows, cols = np.nonzero(flags)
    if rows.size == 0:
        raise ValueError("dllm_loss: no masked tokens to supervise")
    if shifted:
        if np.any(cols == 0):
            raise ValueError("shifted parametrization cannot predict position 0")
        if mask.kind == "block_causal" and (mask.block_size or 1) > 1:
            raise ValueError("shifted parametrization is incompatible with block-causal blocks > 1")
    row_w = np.atleast_1d(np.asarray(sample.token_weight, dtype=np.float64))
    w = row_w[rows] if weighted else np.ones(rows.size)
    if not np.all(np.isfinite(w)):
        raise ValueError("non-finite token weight on a supervised position")
    logits = model.forward(xt, mask)
    ce = T.cross_entropy(_gather_rows(logits, rows, cols - 1 if shifted else cols), x0[rows, cols])
    return LossReport(_weighted_mean(ce, w), ce.data.copy(), int(rows.size), float(w.mean()), w, (rows, cols))


def warmup_loss(model, sample: CorruptionSample, mask: AttentionMaskSpec) -> LossReport:
    """:func:`dllm_loss` with every token weight set to one."""
    return dllm_loss(model, sample, mask, weighted=False)
