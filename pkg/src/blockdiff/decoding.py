"""Block-wise iterative denoising and greedy autoregressive decoding."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import AttentionMaskSpec, block_visibility
from .tensor import softmax_np

VISIBILITIES = ("block_causal", "bidirectional", "causal")


@dataclass(frozen=True)
class DecodeConfig:
    block_size: int = 1
    commits_per_step: int = 1
    steps_per_block: int | None = None
    max_new_tokens: int = 16
    visibility: str = "block_causal"
    eos_id: int | None = None

    def __post_init__(self):
        if self.block_size < 1 or self.commits_per_step < 1:
            raise ValueError("block_size and commits_per_step must be >= 1")
        if self.visibility not in VISIBILITIES:
            raise ValueError(f"unknown visibility {self.visibility!r}")
        if self.max_new_tokens < 0:
            raise ValueError("max_new_tokens must be >= 0")
        if self.commits_per_step * self.steps < self.block_size:
            raise ValueError(
                f"{self.steps} steps x {self.commits_per_step} commits cannot fill a block of {self.block_size}"
            )

    @property
    def steps(self) -> int:
        if self.steps_per_block is None:
            return math.ceil(self.block_size / self.commits_per_step)
        return self.steps_per_block


@dataclass
class DecodeState:
    committed: list[int]
    block: list[int]
    block_masked: list[bool]
    confidence: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _visibility(kind: str, block_ids: list[int]) -> np.ndarray:
    n = len(block_ids)
    if kind == "bidirectional":
        return np.ones((n, n), dtype=bool)
    if kind == "causal":
        return block_visibility(np.arange(n))
    return block_visibility(np.asarray(block_ids))


def decode_blockwise(model, prompt, cfg: DecodeConfig, trace: list | None = None) -> np.ndarray:
    """Left-to-right over blocks; inside a block, repeatedly commit the
    ``commits_per_step`` most confident masked positions (ties to the lowest
    index) until the block is full.

    Returns the prompt followed by the generated tokens, cut before the first
    committed end-of-sequence token. Block ids for the prompt are ``i // B``;
    each generated block gets the next id, so with ``B = 1`` visibility is
    causal.
    """
    mc = model.config
    shifted = mc.parametrization == "shifted"
    B = cfg.block_size
    if shifted and cfg.visibility != "bidirectional" and B > 1:
        raise ValueError(f"shifted heads cannot decode blocks > 1 under {cfg.visibility} visibility")
    seq = [int(t) for t in prompt]
    if shifted and not seq:
        raise ValueError("shifted heads need a non-empty prompt")
    if len(seq) + cfg.max_new_tokens > mc.max_len:
        raise ValueError(f"prompt {len(seq)} + {cfg.max_new_tokens} new tokens exceeds max_len {mc.max_len}")
    mask_id = mc.mask_token
    ids = [i // B for i in range(len(seq))]
    next_id = ids[-1] + 1 if ids else 0
    remaining = cfg.max_new_tokens
    while remaining > 0:
        b = min(B, remaining)
        block = [mask_id] * b
        masked = [True] * b
        block_ids = ids + [next_id] * b
        allow = _visibility(cfg.visibility, block_ids)
        start = len(seq)
        stop_at = None
        while any(masked):
            logits = model.logits_np(np.asarray(seq + block), allow)
            rows = np.arange(start, start + b) - (1 if shifted else 0)
            z = logits[rows].astype(np.float64)
            z[:, mask_id] = -np.inf
            probs = softmax_np(z)
            conf = probs.max(axis=1)
            best = probs.argmax(axis=1)
            open_pos = [j for j in range(b) if masked[j]]
            open_pos.sort(key=lambda j: (-conf[j], j))
            for j in open_pos[: cfg.commits_per_step]:
                block[j] = int(best[j])
                masked[j] = False
            if trace is not None:
                trace.append(DecodeState(list(seq), list(block), list(masked), conf.copy()))
            if cfg.eos_id is not None:
                for j in range(b):
                    if masked[j]:
                        break
                    if block[j] == cfg.eos_id:
                        stop_at = j
                        break
                if stop_at is not None:
                    break
        if stop_at is not None:
            seq.extend(block[:stop_at])
            break
        seq.extend(block)
        ids.extend([next_id] * b)
        next_id += 1
        remaining -= b
    return np.asarray(seq, dtype=np.int64)


def decode_ar(model, prompt, max_new_tokens: int, eos_id: int | None = None) -> np.ndarray:
    """Greedy next-token decoding with a shifted (next-token) model."""
    if model.config.parametrization != "shifted":
        raise ValueError("decode_ar needs a shifted (next-token) model")
    seq = [int(t) for t in prompt]
    if not seq:
        raise ValueError("decode_ar needs a non-empty prompt")
    if len(seq) + max_new_tokens > model.config.max_len:
        raise ValueError("prompt plus new tokens exceeds max_len")
    mask_id = model.config.mask_token
    for _ in range(max_new_tokens):
        z = next_token_logits(model, seq).astype(np.float64)
        z[mask_id] = -np.inf
        tok = int(np.argmax(z))
        if eos_id is not None and tok == eos_id:
            break
        seq.append(tok)
    return np.asarray(seq, dtype=np.int64)


def next_token_logits(model, seq) -> np.ndarray:
    fn = getattr(model, "next_token_logits", None)
    if fn is not None:
        return fn(seq)
    return model.logits_np(np.asarray(seq), AttentionMaskSpec("causal"))[-1]


VISIBILITY_FOR_OBJECTIVE = {
    "AR": "causal",
    "ARDLLM": "causal",
    "BiDLLM": "bidirectional",
    "BlockDLLM": "block_causal",
}


def exact_match(model, prompts, targets, block_size: int, visibility: str, eos_id: int | None = None) -> float:
    """Fraction of prompts whose first generated tokens equal the target.

    At least one full block is decoded so the block size matters.
    """
    if not prompts:
        raise ValueError("no prompts to evaluate")
    hits = 0
    for prompt, target in zip(prompts, targets):
        n_new = max(len(target), block_size)
        cfg = DecodeConfig(block_size=block_size, max_new_tokens=n_new, visibility=visibility, eos_id=eos_id)
        out = decode_blockwise(model, prompt, cfg)[len(prompt):]
        hits += int(len(out) >= len(target) and np.array_equal(out[: len(target)], target))
    return hits / len(prompts)
