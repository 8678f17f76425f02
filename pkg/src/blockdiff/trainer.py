"""Sequence packing, AdamW, and multi-stage curriculum training."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .corruption import CorruptionSample, clip_block_rate, corrupt_block, corrupt_full
from .decoding import VISIBILITY_FOR_OBJECTIVE, exact_match
from .knowledge import ArithmeticCorpusConfig, gen_arithmetic
from .model import ModelConfig, Transformer, init_params, save_model
from .objectives import WarmupConfig, ar_loss, diffusion_mask, dllm_loss, warmup_umax

log = logging.getLogger(__name__)

OBJECTIVES = ("AR", "ARDLLM", "BiDLLM", "BlockDLLM")


# ------------------------------------------------------------------ packing


@dataclass
class PackedBuffers:
    tokens: np.ndarray
    segment_ids: np.ndarray
    eos_runs: list[int]


def pack_sequences(corpus, context_len: int, rng: np.random.Generator, eos_id: int, pad_id: int,
                   eos_min: int = 1, eos_max: int = 4) -> PackedBuffers:
    """Greedily concatenate samples, each followed by ``k ~ U{eos_min..eos_max}``
    end-of-sequence tokens, into buffers of ``context_len``; a sample that does
    not fit starts a new buffer and the old one is padded.

    Segment ids count samples within a buffer (-1 on padding); the eos run
    belongs to its sample.
    """
    if not 1 <= eos_min <= eos_max:
        raise ValueError("need 1 <= eos_min <= eos_max")
    for i, s in enumerate(corpus):
        if len(s) >= context_len:
            raise ValueError(f"sample {i} has length {len(s)} >= context_len {context_len}")
    buffers, segments, runs = [], [], []
    cur: list[int] = []
    seg: list[int] = []
    n_seg = 0

    def flush():
        nonlocal cur, seg, n_seg
        if cur:
            pad = context_len - len(cur)
            buffers.append(cur + [pad_id] * pad)
            segments.append(seg + [-1] * pad)
        cur, seg, n_seg = [], [], 0

    for s in corpus:
        k = int(rng.integers(eos_min, eos_max + 1))
        runs.append(k)
        piece = [int(t) for t in s] + [eos_id] * k
        if len(cur) + len(piece) > context_len:
            flush()
        piece = piece[:context_len]
        cur.extend(piece)
        seg.extend([n_seg] * len(piece))
        n_seg += 1
    flush()
    if not buffers:
        empty = np.zeros((0, context_len), dtype=np.int64)
        return PackedBuffers(empty, empty.copy(), runs)
    return PackedBuffers(np.asarray(buffers, np.int64), np.asarray(segments, np.int64), runs)


# ---------------------------------------------------------------- optimizer


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip: float = 1.0


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def adamw_update(params: dict, grads: dict[str, np.ndarray], state: AdamState, lr: float,
                 cfg: OptimConfig = OptimConfig()) -> float:
    """Clip by global norm, then one decoupled-weight-decay Adam step in place.

    Weight decay applies to matrices only. Returns the norm before clipping.
    """
    norm = global_norm(grads)
    scale = cfg.clip / norm if cfg.clip and norm > cfg.clip else 1.0
    state.step += 1
    bc1 = 1.0 - cfg.beta1**state.step
    bc2 = 1.0 - cfg.beta2**state.step
    for name, p in params.items():
        data = p.data if isinstance(p, T.Tensor) else p
        g = grads[name] * scale
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(data)
            state.v[name] = np.zeros_like(data)
        v = state.v[name]
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * g * g
        if data.ndim >= 2 and cfg.weight_decay:
            data -= data.dtype.type(lr * cfg.weight_decay) * data
        data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)).astype(data.dtype)
    return norm


# ------------------------------------------------------------------- stages


@dataclass(frozen=True)
class CurriculumStage:
    objective: str
    steps: int
    block_size: int = 1
    lr: float | None = None
    lr_warmup: int = 0
    warmdown: float = 0.0
    warmup: WarmupConfig | None = None
    parametrization: str | None = None
    clipped: bool = True
    name: str | None = None

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.steps < 1:
            raise ValueError("stage steps must be >= 1")
        if self.block_size < 1:
            raise ValueError("block size must be >= 1")
        if self.objective == "AR" and self.warmup is not None:
            raise ValueError("corruption warmup applies to diffusion stages only")
        if self.objective == "AR" and self.parametrization not in (None, "shifted"):
            raise ValueError("AR stages use the shifted parametrization")
        if not 0 <= self.warmdown <= 1:
            raise ValueError("warmdown is a fraction in [0, 1]")

    @property
    def head(self) -> str:
        if self.parametrization:
            return self.parametrization
        return "shifted" if self.objective == "AR" else "unshifted"

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        return f"BlockDLLM(B={self.block_size})" if self.objective == "BlockDLLM" else self.objective

    def lr_at(self, step: int, peak: float) -> float:
        f = 1.0
        if self.lr_warmup:
            f *= min(1.0, (step + 1) / self.lr_warmup)
        if self.warmdown:
            start = self.steps * (1.0 - self.warmdown)
            if step >= start:
                f *= max(0.0, (self.steps - step) / (self.steps - start))
        return peak * f


@dataclass(frozen=True)
class DataConfig:
    lo: int = 0
    hi: int = 9
    min_clauses: int = 1
    max_clauses: int = 4
    n_train: int = 4000
    n_eval: int = 100
    context_len: int = 128
    batch_size: int = 8
    eos_min: int = 1
    eos_max: int = 4
    max_value: int | None = None

    @property
    def corpus_config(self) -> ArithmeticCorpusConfig:
        return ArithmeticCorpusConfig(self.lo, self.hi, self.min_clauses, self.max_clauses, max_value=self.max_value)


@dataclass(frozen=True)
class EvalConfig:
    every: int = 0
    block_sizes: tuple[int, ...] = (1,)
    n_prompts: int = 100


@dataclass(frozen=True)
class TrainRun:
    stages: tuple[CurriculumStage, ...]
    model: ModelConfig
    data: DataConfig = DataConfig()
    optim: OptimConfig = OptimConfig()
    eval: EvalConfig = EvalConfig()
    seed: int = 0
    budget: int | None = None

    def validate(self, start: Transformer | None = None) -> None:
        if not self.stages:
            raise ValueError("a run needs at least one stage")
        if self.budget is not None:
            total = sum(s.steps for s in self.stages)
            if total != self.budget:
                raise ValueError(f"stage steps sum to {total}, compute budget is {self.budget}")
        if self.data.context_len > self.model.max_len:
            raise ValueError("context_len exceeds the model's max_len")
        if start is not None:
            from .model import param_shapes
            want = param_shapes(self.model)
            have = {k: v.shape for k, v in start.params.items()}
            if want != have:
                raise ValueError("initial checkpoint shapes do not match the model config")


@dataclass
class MetricsRecord:
    step: int
    stage: str
    loss: float
    grad_norm: float
    u_max: float | None
    tokens_seen: int
    lr: float
    n_supervised: int
    ce: float = float("nan")
    wall_time: float = 0.0

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("wall_time")
        return json.dumps(d, sort_keys=True)


class TrainingDiverged(RuntimeError):
    def __init__(self, record: MetricsRecord):
        super().__init__(f"non-finite loss at step {record.step} ({record.stage})")
        self.record = record


# --------------------------------------------------------------------- data


class ArithmeticData:
    """Training stream of packed buffers plus held-out exact-match prompts."""

    def __init__(self, cfg: DataConfig, seed: int, corpus=None):
        self.cfg = cfg
        cc = cfg.corpus_config
        self.vocab = cc.vocab
        v = self.vocab
        raw = corpus if corpus is not None else gen_arithmetic(cc, cfg.n_train, seed=[seed, 101])
        self.samples = [np.concatenate([[v.bos_id], np.asarray(s, np.int64)]) for s in raw]
        if not self.samples:
            raise ValueError("empty training corpus")
        self.rng = np.random.default_rng([seed, 202])
        self._queue: list[np.ndarray] = []
        held = gen_arithmetic(cc, cfg.n_eval, seed=[seed, 303])
        eq = v.id("=")
        self.prompts, self.targets = [], []
        for s in held:
            cut = int(np.flatnonzero(s == eq)[-1]) + 1
            self.prompts.append(np.concatenate([[v.bos_id], s[:cut]]))
            self.targets.append(s[cut : cut + 2])

    def _refill(self):
        order = self.rng.permutation(len(self.samples))
        packed = pack_sequences([self.samples[i] for i in order], self.cfg.context_len, self.rng,
                                self.vocab.eos_id, self.vocab.pad_id, self.cfg.eos_min, self.cfg.eos_max)
        self._queue.extend(packed.tokens)

    def next_batch(self) -> np.ndarray:
        while len(self._queue) < self.cfg.batch_size:
            self._refill()
        batch, self._queue = self._queue[: self.cfg.batch_size], self._queue[self.cfg.batch_size :]
        return np.stack(batch)

    def eligible(self, tokens: np.ndarray) -> np.ndarray:
        return (tokens != self.vocab.pad_id) & (tokens != self.vocab.bos_id)


def ensure_supervised(sample: CorruptionSample, eligible: np.ndarray, rng: np.random.Generator,
                      mask_id: int) -> CorruptionSample:
    """Force one uniformly drawn eligible position in every row without a mask."""
    flags = sample.mask_flags.copy()
    for r in np.flatnonzero(~flags.any(axis=1)):
        cand = np.flatnonzero(eligible[r])
        if cand.size:
            flags[r, cand[rng.integers(cand.size)]] = True
    xt = np.where(flags, mask_id, sample.x0)
    return replace(sample, xt=xt, mask_flags=flags)


def corrupt_batch(stage: CurriculumStage, tokens: np.ndarray, eligible: np.ndarray, u_max: float,
                  rng: np.random.Generator, mask_id: int) -> CorruptionSample:
    n, L = tokens.shape
    t = u_max * (1.0 - rng.random(n))
    if stage.objective == "BlockDLLM":
        B = stage.block_size
        n_blocks = -(-L // B)
        has = np.zeros((n, n_blocks), dtype=bool)
        rows, cols = np.nonzero(eligible)
        has[rows, cols // B] = True
        bi = np.array([rng.choice(np.flatnonzero(h)) for h in has])
        u = clip_block_rate(t, B) if stage.clipped else np.maximum(t, 1.0 / B)
        return corrupt_block(tokens, bi, u, B, rng, mask_id, eligible=eligible, t=t)
    sample = corrupt_full(tokens, t, rng, mask_id, eligible=eligible)
    return ensure_supervised(sample, eligible, rng, mask_id)


# ------------------------------------------------------------------ training


@dataclass
class TrainState:
    model: Transformer
    opt: AdamState
    step: int = 0
    tokens_seen: int = 0


def stage_loss(model: Transformer, stage: CurriculumStage, tokens, eligible, step_in_stage: int,
               rng: np.random.Generator):
    """Loss report and the corruption cap used at this step."""
    m = model.with_parametrization(stage.head)
    if stage.objective == "AR":
        return ar_loss(m, tokens, loss_mask=eligible), None
    warming = stage.warmup is not None and step_in_stage < stage.warmup.steps
    u_max = warmup_umax(stage.warmup, step_in_stage) if warming else 1.0
    el = eligible.copy()
    if stage.head == "shifted":
        el[:, 0] = False
    sample = corrupt_batch(stage, tokens, el, u_max, rng, model.config.mask_token)
    mask = diffusion_mask(stage.objective, stage.block_size)
    report = dllm_loss(m, sample, mask, weighted=not warming)
    return report, (u_max if warming else None)


def train_step(state: TrainState, tokens: np.ndarray, eligible: np.ndarray, stage: CurriculumStage,
               step_in_stage: int, lr: float, optim: OptimConfig, rng: np.random.Generator) -> MetricsRecord:
    t0 = time.perf_counter()
    params = state.model.params
    with T.Tape() as tape:
        report, u_max = stage_loss(state.model, stage, tokens, eligible, step_in_stage, rng)
    loss = report.value
    state.step += 1
    state.tokens_seen += int(tokens.size)
    record = MetricsRecord(state.step, stage.label, loss, float("nan"), u_max, state.tokens_seen, lr,
                           report.n_supervised, float(report.per_token.mean()))
    if not math.isfinite(loss):
        raise TrainingDiverged(record)
    grads = T.backward(tape, report.loss, params)
    record.grad_norm = adamw_update(params, grads, state.opt, lr, optim)
    record.wall_time = time.perf_counter() - t0
    return record


@dataclass
class EvalRecord:
    step: int
    stage: str
    block_size: int
    exact_match: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def evaluate(model: Transformer, stage: CurriculumStage, data: ArithmeticData, block_size: int,
             n_prompts: int | None = None) -> float:
    """Held-out exact match of ``sum ;`` after ``a + b =``, decoding the way
    the stage's objective attends.

    A shifted head under causal visibility can only decode token by token,
    so its block size is forced to 1.
    """
    m = model.with_parametrization(stage.head)
    vis = VISIBILITY_FOR_OBJECTIVE[stage.objective]
    if m.config.parametrization == "shifted" and vis == "block_causal":
        vis = "causal"
    if m.config.parametrization == "shifted" and vis == "causal":
        block_size = 1
    n = n_prompts or len(data.prompts)
    return exact_match(m, data.prompts[:n], data.targets[:n], block_size, vis, data.vocab.eos_id)


@dataclass
class RunResult:
    model: Transformer
    metrics: list[MetricsRecord]
    evals: list[EvalRecord]
    stage_checkpoints: list[Path] = field(default_factory=list)


def run_curriculum(run: TrainRun, model: Transformer | None = None, out_dir=None,
                   data: ArithmeticData | None = None) -> RunResult:
    """Run the stages in order, carrying parameters and optimizer moments
    across stage boundaries.

    With ``out_dir``: ``metrics.jsonl`` (one record per step, flushed),
    ``eval.jsonl``, ``timing.jsonl`` and one checkpoint per stage.
    """
    run.validate(model)
    if model is None:
        model = init_params(run.model, run.seed)
    data = data or ArithmeticData(run.data, run.seed)
    if len(data.vocab) != run.model.vocab_size:
        raise ValueError(f"vocabulary has {len(data.vocab)} tokens, model expects {run.model.vocab_size}")
    state = TrainState(model, AdamState())
    metrics: list[MetricsRecord] = []
    evals: list[EvalRecord] = []
    ckpts: list[Path] = []
    out = Path(out_dir) if out_dir is not None else None
    files = {}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        files = {k: open(out / f"{k}.jsonl", "w") for k in ("metrics", "eval", "timing")}
    try:
        for si, stage in enumerate(run.stages):
            peak = stage.lr if stage.lr is not None else run.optim.lr
            for s in range(stage.steps):
                tokens = data.next_batch()
                eligible = data.eligible(tokens)
                rng = np.random.default_rng([run.seed, si, s, 7])
                rec = train_step(state, tokens, eligible, stage, s, stage.lr_at(s, peak), run.optim, rng)
                metrics.append(rec)
                if files:
                    files["metrics"].write(rec.to_json() + "\n")
                    files["metrics"].flush()
                    files["timing"].write(json.dumps({"step": rec.step, "wall_time": rec.wall_time}) + "\n")
                last = s == stage.steps - 1
                if run.eval.every and (last or (s + 1) % run.eval.every == 0):
                    for B in run.eval.block_sizes:
                        em = evaluate(state.model, stage, data, B, run.eval.n_prompts)
                        ev = EvalRecord(state.step, stage.label, B, em)
                        evals.append(ev)
                        if files:
                            files["eval"].write(ev.to_json() + "\n")
                            files["eval"].flush()
                if rec.step % 50 == 0:
                    log.info("step %d %s loss %.4f gnorm %.3f", rec.step, stage.label, rec.loss, rec.grad_norm)
            if out is not None:
                path = out / f"stage{si}_{stage.objective}.sdc"
                save_model(path, state.model.with_parametrization(stage.head),
                           {"vocab": data.vocab.to_list(), "stage": stage.label, "step": state.step})
                ckpts.append(path)
    finally:
        for fh in files.values():
            fh.close()
    return RunResult(state.model, metrics, evals, ckpts)
