"""Forward masking processes and their statistics.

Convention: the corruption time ``t`` is the mask rate itself, ``u(t) = t``.
Writing the schedule as ``u(t) = 1 - t`` instead gives the same distribution
of rates when ``t`` is uniform, so every statistic below is unchanged; only the
ELBO weight reads more directly as ``w = 1/t`` here.

All samplers accept a single sequence ``(L,)`` or a batch ``(n, L)`` with one
rate (and block index) per row, and draw from an explicit
``numpy.random.Generator``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class CorruptionSample:
    x0: np.ndarray
    xt: np.ndarray
    mask_flags: np.ndarray
    t: np.ndarray
    u_eff: np.ndarray
    token_weight: np.ndarray
    block_index: np.ndarray | None = None
    block_size: int | None = None

    @property
    def n_masked(self) -> np.ndarray:
        return self.mask_flags.sum(axis=-1)


def mask_rate_linear(t):
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any((t_arr < 0) | (t_arr > 1)) or np.any(np.isnan(t_arr)):
        raise ValueError(f"corruption time must lie in [0, 1], got {t}")
    return float(t_arr) if t_arr.ndim == 0 else t_arr


def clip_block_rate(u, B: int):
    """``min(1, max(u, 1/B))``: at least one expected masked token per block."""
    if B < 1:
        raise ValueError(f"block size must be >= 1, got {B}")
    u_arr = np.asarray(u, dtype=np.float64)
    if np.any((u_arr < 0) | (u_arr > 1)):
        raise ValueError(f"mask rate must lie in [0, 1], got {u}")
    out = np.minimum(1.0, np.maximum(u_arr, 1.0 / B))
    return float(out) if out.ndim == 0 else out


def zero_mask_fraction_analytic(B: int) -> float:
    """Expected fraction of steps with no masked token in a block of size ``B``
    under the unclipped linear schedule: the integral of ``(1-t)^B`` over [0, 1]."""
    if B < 1:
        raise ValueError(f"block size must be >= 1, got {B}")
    return 1.0 / (B + 1)


def _as_batch(x0, *per_row):
    x0 = np.asarray(x0)
    single = x0.ndim == 1
    if single:
        x0 = x0[None]
    if x0.ndim != 2 or x0.shape[1] == 0:
        raise ValueError("corruption needs a non-empty sequence")
    rows = [np.broadcast_to(np.asarray(v), (x0.shape[0],)) for v in per_row]
    return single, x0, rows


def _eligible(eligible, shape):
    if eligible is None:
        return np.ones(shape, dtype=bool)
    el = np.asarray(eligible, dtype=bool)
    return np.broadcast_to(el if el.ndim == 2 else el[None], shape)


def _finish(single, **fields):
    if single:
        fields = {k: (v[0] if isinstance(v, np.ndarray) else v) for k, v in fields.items()}
    return CorruptionSample(**fields)


def corrupt_full(x0, t, rng: np.random.Generator, mask_id: int, eligible=None) -> CorruptionSample:
    """Mask every eligible position independently with probability ``t``."""
    single, x0, (t,) = _as_batch(x0, t)
    t = t.astype(np.float64)
    u = np.asarray(mask_rate_linear(t), dtype=np.float64).reshape(-1)
    el = _eligible(eligible, x0.shape)
    flags = (rng.random(x0.shape) < u[:, None]) & el
    xt = np.where(flags, mask_id, x0)
    with np.errstate(divide="ignore"):
        weight = 1.0 / u
    return _finish(single, x0=x0, xt=xt, mask_flags=flags, t=t.copy(), u_eff=u, token_weight=weight)


def corrupt_block(x0, block_index, u_blk, B: int, rng: np.random.Generator, mask_id: int,
                  eligible=None, t=None) -> CorruptionSample:
    """Mask one block per row with rate ``u_blk``; everything else stays clean.

    If no in-block position is masked, one eligible in-block position is drawn
    uniformly and forced to the mask, so each row supervises at least one token.
    """
    if B < 1:
        raise ValueError(f"block size must be >= 1, got {B}")
    single, x0, (bi, u) = _as_batch(x0, block_index, u_blk)
    n, L = x0.shape
    n_blocks = -(-L // B)
    bi = bi.astype(np.int64)
    u = u.astype(np.float64)
    if np.any((bi < 0) | (bi >= n_blocks)):
        raise ValueError(f"block index out of range [0, {n_blocks}) for length {L}, B={B}")
    if np.any((u < 1.0 / B - 1e-12) | (u > 1.0)):
        raise ValueError(f"block mask rate must lie in [1/B, 1] = [{1.0 / B}, 1]")
    el = _eligible(eligible, x0.shape)
    in_block = ((np.arange(L) // B)[None, :] == bi[:, None]) & el
    counts = in_block.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("chosen block has no eligible position")
    flags = (rng.random(x0.shape) < u[:, None]) & in_block
    empty = np.flatnonzero(~flags.any(axis=1))
    if empty.size:
        pick = (rng.random(empty.size) * counts[empty]).astype(np.int64)
        rank = np.cumsum(in_block[empty], axis=1) - 1
        hit = in_block[empty] & (rank == pick[:, None])
        flags[empty] |= hit
    xt = np.where(flags, mask_id, x0)
    t_rows = u.copy() if t is None else np.broadcast_to(np.asarray(t, np.float64), (n,)).copy()
    return _finish(single, x0=x0, xt=xt, mask_flags=flags, t=t_rows, u_eff=u.copy(),
                   token_weight=1.0 / u, block_index=bi.copy(), block_size=B)


@dataclass
class ScheduleReport:
    B: int
    clipped: bool
    n: int
    zero_mask_fraction: float
    stderr: float
    mean_masked: float
    min_masked: int
    max_weight: float
    weight_histogram: dict

    def to_record(self) -> dict:
        return {
            "B": self.B,
            "clipped": self.clipped,
            "n": self.n,
            "zero_mask_fraction": self.zero_mask_fraction,
            "stderr": self.stderr,
            "mean_masked": self.mean_masked,
            "max_weight": self.max_weight,
        }


def schedule_stats(B: int, clipped: bool, n_samples: int, rng: np.random.Generator,
                   chunk: int = 1 << 17) -> ScheduleReport:
    """Monte-Carlo statistics of one-block corruption under the linear schedule.

    Unclipped: each of the ``B`` tokens is masked with rate ``t ~ U(0, 1)`` and
    nothing else happens. Clipped: rates go through :func:`clip_block_rate`
    and the sample goes through :func:`corrupt_block`, fallback included.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    zeros = 0
    total_masked = 0
    min_masked = B
    max_weight = 0.0
    edges = np.geomspace(1.0, 1e6, 13)
    hist = np.zeros(len(edges) - 1, dtype=np.int64)
    x0 = np.zeros((min(chunk, n_samples), B), dtype=np.int64)
    done = 0
    while done < n_samples:
        n = min(chunk, n_samples - done)
        t = 1.0 - rng.random(n)  # (0, 1]
        if clipped:
            u = clip_block_rate(t, B)
            s = corrupt_block(x0[:n], 0, u, B, rng, mask_id=1)
            m = s.n_masked
            w = s.token_weight
        else:
            u = t
            m = (rng.random((n, B)) < u[:, None]).sum(axis=1)
            w = 1.0 / u
        zeros += int((m == 0).sum())
        total_masked += int(m.sum())
        min_masked = min(min_masked, int(m.min()))
        max_weight = max(max_weight, float(w.max()))
        hist += np.histogram(np.clip(w, edges[0], edges[-1]), bins=edges)[0]
        done += n
    p = zeros / n_samples
    return ScheduleReport(
        B=B,
        clipped=clipped,
        n=n_samples,
        zero_mask_fraction=p,
        stderr=float(np.sqrt(p * (1 - p) / n_samples)),
        mean_masked=total_masked / n_samples,
        min_masked=min_masked,
        max_weight=max_weight,
        weight_histogram={"edges": edges.tolist(), "counts": hist.tolist()},
    )
