"""Small directional experiments on the arithmetic corpus.

Both start from an AR-pretrained checkpoint:

* warmup stability: continue training it as a bidirectional diffusion model
  with and without the corruption-cap warmup and compare early gradient norms;
* curriculum ranking: learn a wider operand range under three equal-budget
  curricula and compare held-out exact match with block-1 decoding.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import ModelConfig, Transformer
from .objectives import WarmupConfig
from .trainer import (ArithmeticData, CurriculumStage, DataConfig, EvalConfig, OptimConfig, TrainRun,
                      evaluate, run_curriculum)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Scale:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    context_len: int = 64
    lr: float = 3e-3

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, d_model=self.d_model, n_layers=self.n_layers,
                           n_heads=self.n_heads, max_len=self.context_len, parametrization="shifted")


def pretrain_ar(scale: Scale, data_cfg: DataConfig, steps: int, seed: int) -> Transformer:
    """AR checkpoint every experiment starts from."""
    vocab = data_cfg.corpus_config.vocab
    run = TrainRun((CurriculumStage("AR", steps, lr_warmup=max(1, steps // 10)),), scale.model_config(len(vocab)),
                   data_cfg, OptimConfig(lr=scale.lr), seed=seed)
    return run_curriculum(run).model


# ------------------------------------------------------------ loss shape


def smooth(values, window: int) -> np.ndarray:
    """Centered moving average; windows shrink at the ends."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(len(v))
    lo = np.maximum(0, idx - window // 2)
    hi = np.minimum(len(v), idx + window // 2 + 1)
    return (c[hi] - c[lo]) / (hi - lo)


def dip_rise_dip(values, window: int | None = None, rel_margin: float = 0.1) -> bool:
    """True if the smoothed curve falls, then rises, then falls again.

    The window defaults to a tenth of the curve. Each of the three moves must
    exceed ``rel_margin`` of the smoothed curve's range so that step-to-step
    noise does not count.
    """
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 3:
        return False
    s = smooth(v, window or max(3, len(v) // 10))
    delta = rel_margin * float(s.max() - s.min())
    if delta <= 0:
        return False
    prefix_min = np.minimum.accumulate(s)
    suffix_min = np.minimum.accumulate(s[::-1])[::-1]
    for k in range(1, len(s) - 1):
        m = prefix_min[k - 1]
        if s[0] - m > delta and s[k] - m > delta and s[k] - suffix_min[k + 1] > delta:
            return True
    return False


# ---------------------------------------------------- warmup experiment


@dataclass(frozen=True)
class WarmupExperiment:
    seeds: tuple[int, ...] = (0, 1, 2)
    pretrain_steps: int = 300
    cpt_steps: int = 300
    warmup_steps: int = 150
    u_init: float = 1e-3
    head: str = "shifted"
    scale: Scale = Scale()
    data: DataConfig = DataConfig(lo=0, hi=9, max_clauses=3, n_train=2000, n_eval=50, context_len=64, batch_size=16)


@dataclass
class WarmupSeedResult:
    seed: int
    peak_grad_warmup: float
    peak_grad_plain: float
    signature_warmup: bool
    signature_plain: bool
    ce_warmup: list[float] = field(repr=False, default_factory=list)
    ce_plain: list[float] = field(repr=False, default_factory=list)
    grad_warmup: list[float] = field(repr=False, default_factory=list)
    grad_plain: list[float] = field(repr=False, default_factory=list)

    @property
    def warmup_lower(self) -> bool:
        return self.peak_grad_warmup < self.peak_grad_plain

    def to_record(self) -> dict:
        d = asdict(self)
        for k in ("ce_warmup", "ce_plain", "grad_warmup", "grad_plain"):
            d.pop(k)
        d["warmup_lower"] = self.warmup_lower
        return d


def run_warmup_experiment(exp: WarmupExperiment = WarmupExperiment()) -> list[WarmupSeedResult]:
    out = []
    early = max(1, exp.cpt_steps // 10)
    for seed in exp.seeds:
        base = pretrain_ar(exp.scale, exp.data, exp.pretrain_steps, seed)
        curves = {}
        for tag, warm in (("warmup", WarmupConfig(exp.warmup_steps, exp.u_init)), ("plain", None)):
            stage = CurriculumStage("BiDLLM", exp.cpt_steps, warmup=warm, parametrization=exp.head)
            run = TrainRun((stage,), base.config, exp.data, OptimConfig(lr=exp.scale.lr), seed=seed)
            res = run_curriculum(run, model=base.copy())
            curves[tag] = ([r.ce for r in res.metrics], [r.grad_norm for r in res.metrics])
        (cw, gw), (cp, gp) = curves["warmup"], curves["plain"]
        r = WarmupSeedResult(seed, max(gw[:early]), max(gp[:early]), dip_rise_dip(cw), dip_rise_dip(cp),
                             cw, cp, gw, gp)
        log.info("warmup seed %d: %s", seed, r.to_record())
        out.append(r)
    return out


# ------------------------------------------------ curriculum experiment


SCHEMES = {
    1: "AR -> BiDLLM",
    2: "ARDLLM -> BiDLLM",
    3: "BiDLLM",
}


@dataclass(frozen=True)
class CurriculumExperiment:
    seeds: tuple[int, ...] = (0, 1, 2)
    pretrain_steps: int = 300
    budget: int = 600
    first_stage: int = 400
    warmup_steps: int = 100
    head: str = "shifted"
    cpt_lr: float | None = 1e-3
    scale: Scale = Scale()
    base_data: DataConfig = DataConfig(lo=0, hi=4, max_clauses=3, n_train=2000, n_eval=50, context_len=64,
                                       max_value=18)
    new_data: DataConfig = DataConfig(lo=0, hi=9, max_clauses=3, n_train=2000, n_eval=100, context_len=64)

    def stages(self, scheme: int) -> tuple[CurriculumStage, ...]:
        warm = WarmupConfig(self.warmup_steps)
        rest = self.budget - self.first_stage
        lr = self.cpt_lr
        if scheme == 1:
            return (CurriculumStage("AR", self.first_stage),
                    CurriculumStage("BiDLLM", rest, lr=lr, warmup=warm, parametrization=self.head))
        if scheme == 2:
            return (CurriculumStage("ARDLLM", self.first_stage, lr=lr, warmup=warm, parametrization=self.head),
                    CurriculumStage("BiDLLM", rest, lr=lr, parametrization=self.head))
        if scheme == 3:
            return (CurriculumStage("BiDLLM", self.budget, lr=lr, warmup=warm, parametrization=self.head),)
        raise ValueError(f"unknown scheme {scheme}")


@dataclass
class CurriculumSeedResult:
    seed: int
    base_exact_match: float
    exact_match: dict[int, float]
    before_cpt: dict[int, float]

    def to_record(self) -> dict:
        return asdict(self)


def run_curriculum_experiment(exp: CurriculumExperiment = CurriculumExperiment()) -> list[CurriculumSeedResult]:
    """Every scheme sees the same batches for the same number of steps."""
    out = []
    for seed in exp.seeds:
        base = pretrain_ar(exp.scale, exp.base_data, exp.pretrain_steps, seed)
        probe = ArithmeticData(exp.new_data, seed)
        base_em = evaluate(base, CurriculumStage("AR", 1), probe, 1)
        scores, before = {}, {}
        for scheme in SCHEMES:
            stages = exp.stages(scheme)
            run = TrainRun(stages, base.config, exp.new_data, OptimConfig(lr=exp.scale.lr),
                           EvalConfig(every=exp.budget, block_sizes=(1,), n_prompts=exp.new_data.n_eval),
                           seed=seed, budget=exp.budget)
            res = run_curriculum(run, model=base.copy())
            by_stage = {}
            for ev in res.evals:
                by_stage[ev.stage] = ev.exact_match
            scores[scheme] = res.evals[-1].exact_match
            if len(stages) > 1:
                before[scheme] = by_stage.get(stages[0].label, float("nan"))
        r = CurriculumSeedResult(seed, base_em, scores, before)
        log.info("curriculum seed %d: %s", seed, r.to_record())
        out.append(r)
    return out
