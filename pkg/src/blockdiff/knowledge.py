"""Synthetic arithmetic corpus and brute-force candidate-set analysis.

A clause reads ``a = x , b = y , a + b = s ;`` with ``s = x + y``. For a
context (a token pattern with wildcard slots) the clean-data conditional of a
target slot is estimated by exact pattern matching over the corpus; the
candidate set keeps the values with probability at least ``epsilon``, and its
size ``K`` together with the top probability places the context in one of
three regimes: reasoning, correlation or noise.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .corruption import clip_block_rate, corrupt_block, corrupt_full
from .vocab import Vocab

REGIMES = ("reasoning", "correlation", "noise")


@dataclass(frozen=True)
class ArithmeticCorpusConfig:
    lo: int = 0
    hi: int = 9
    min_clauses: int = 1
    max_clauses: int = 1
    names: tuple[str, str] = ("a", "b")
    max_value: int | None = None

    def __post_init__(self):
        if self.hi < self.lo or self.lo < 0:
            raise ValueError(f"invalid value range [{self.lo}, {self.hi}]")
        if not 1 <= self.min_clauses <= self.max_clauses:
            raise ValueError("need 1 <= min_clauses <= max_clauses")
        if len(self.names) != 2 or self.names[0] == self.names[1]:
            raise ValueError("exactly two distinct variable names required")
        if self.max_value is not None and 2 * self.hi > self.max_value:
            raise ValueError(f"sums up to {2 * self.hi} exceed the vocabulary's largest number {self.max_value}")

    @property
    def vocab(self) -> Vocab:
        return Vocab.arithmetic(self.max_value if self.max_value is not None else 2 * self.hi, self.names)


CLAUSE_LEN = 14
# slots inside a clause: a = x , b = y , a + b = s ;
X_SLOT, Y_SLOT, SUM_SLOT = 2, 6, 12


def clause_ids(vocab: Vocab, x: int, y: int, names=("a", "b")) -> list[int]:
    a, b = names
    return vocab.encode(f"{a} = {x} , {b} = {y} , {a} + {b} = {x + y} ;")


def gen_arithmetic(config: ArithmeticCorpusConfig, n_sequences: int, seed) -> list[np.ndarray]:
    """Sequences of clauses with operands drawn uniformly from ``[lo, hi]``."""
    vocab = config.vocab
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_sequences):
        n_clauses = int(rng.integers(config.min_clauses, config.max_clauses + 1))
        ops = rng.integers(config.lo, config.hi + 1, size=(n_clauses, 2))
        ids = []
        for x, y in ops:
            ids.extend(clause_ids(vocab, int(x), int(y), config.names))
        out.append(np.asarray(ids, dtype=np.int64))
    return out


def enumerate_clauses(config: ArithmeticCorpusConfig) -> list[np.ndarray]:
    """Every single-clause sequence exactly once."""
    vocab = config.vocab
    vals = range(config.lo, config.hi + 1)
    return [np.asarray(clause_ids(vocab, x, y, config.names), dtype=np.int64) for x, y in product(vals, vals)]


def parse_clauses(vocab: Vocab, ids) -> list[tuple[int, int, int]]:
    """``(x, y, s)`` triples of every complete clause in ``ids``."""
    ids = list(ids)
    out = []
    for start in range(0, len(ids) - CLAUSE_LEN + 1, CLAUSE_LEN):
        toks = [vocab.tokens[i] for i in ids[start : start + CLAUSE_LEN]]
        try:
            out.append((int(toks[X_SLOT]), int(toks[Y_SLOT]), int(toks[SUM_SLOT])))
        except ValueError:
            raise ValueError(f"malformed clause at {start}: {' '.join(toks)}") from None
    return out


# ------------------------------------------------------------------ queries


@dataclass(frozen=True)
class ContextQuery:
    """Token pattern with ``None`` for wildcard (masked or hidden) slots."""

    pattern: tuple
    target: int
    anchored: bool = False

    def __post_init__(self):
        if not 0 <= self.target < len(self.pattern):
            raise ValueError("target position outside the pattern")
        if self.pattern[self.target] is not None:
            raise ValueError("target position must be a wildcard slot")

    @classmethod
    def parse(cls, vocab: Vocab, text: str, wildcard: str = "▁", target: int | None = None,
              anchored: bool = False) -> "ContextQuery":
        """Parse ``"a = 1 , b = 2 , a + b = ▁"``; the target defaults to the last wildcard."""
        text = text.replace(wildcard, f" {wildcard} ")
        pattern = []
        for chunk in text.split():
            pattern.extend([None] if chunk == wildcard else vocab.encode(chunk))
        wild = [i for i, p in enumerate(pattern) if p is None]
        if not wild:
            raise ValueError("query has no wildcard slot")
        return cls(tuple(pattern), wild[-1] if target is None else target, anchored)


class CorpusIndex:
    """Corpus grouped by sequence length for vectorized pattern matching."""

    def __init__(self, corpus, vocab_size: int):
        self.vocab_size = vocab_size
        groups: dict[int, list] = {}
        for seq in corpus:
            groups.setdefault(len(seq), []).append(np.asarray(seq, dtype=np.int64))
        self.groups = {L: np.stack(rows) for L, rows in sorted(groups.items())}
        self.n_sequences = sum(len(g) for g in self.groups.values())

    def windows(self, P: int, anchored: bool):
        for L, arr in self.groups.items():
            if anchored:
                if L == P:
                    yield arr
            else:
                for off in range(L - P + 1):
                    yield arr[:, off : off + P]


@dataclass
class Conditional:
    counts: np.ndarray
    n_matches: int
    achievable: int

    @property
    def empty(self) -> bool:
        return self.n_matches == 0

    @property
    def probs(self) -> np.ndarray:
        if self.empty:
            raise ValueError("empty conditional: context never occurs")
        return self.counts / self.n_matches


def empirical_conditional(corpus, query: ContextQuery, vocab_size: int | None = None) -> Conditional:
    """Frequency of the target token over every corpus window matching the
    query's visible slots."""
    index = corpus if isinstance(corpus, CorpusIndex) else CorpusIndex(corpus, vocab_size)
    V = index.vocab_size
    P = len(query.pattern)
    fixed = np.array([i for i, p in enumerate(query.pattern) if p is not None], dtype=np.int64)
    values = np.array([query.pattern[i] for i in fixed], dtype=np.int64)
    counts = np.zeros(V, dtype=np.int64)
    seen = np.zeros(V, dtype=bool)
    for win in index.windows(P, query.anchored):
        col = win[:, query.target]
        seen[col] = True
        hit = np.all(win[:, fixed] == values, axis=1) if fixed.size else np.ones(len(win), bool)
        counts += np.bincount(col[hit], minlength=V)
    return Conditional(counts, int(counts.sum()), int(seen.sum()))


@dataclass
class CandidateSetReport:
    probs: np.ndarray
    epsilon: float
    members: list[int]
    K: int
    p_max: float
    achievable: int
    degenerate: bool
    regime: str | None = None

    def to_record(self, vocab: Vocab | None = None) -> dict:
        name = (lambda i: vocab.tokens[i]) if vocab else (lambda i: i)
        support = np.flatnonzero(self.probs)
        return {
            "epsilon": self.epsilon,
            "K": self.K,
            "p_max": self.p_max,
            "members": [name(int(i)) for i in self.members],
            "distribution": {str(name(int(i))): float(self.probs[i]) for i in support},
            "achievable": self.achievable,
            "degenerate": self.degenerate,
            "regime": self.regime,
        }


def candidate_set(dist: Conditional, epsilon: float) -> CandidateSetReport:
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    p = dist.probs
    members = [int(i) for i in np.flatnonzero(p >= epsilon)]
    return CandidateSetReport(
        probs=p,
        epsilon=epsilon,
        members=members,
        K=len(members),
        p_max=float(p.max()),
        achievable=dist.achievable,
        degenerate=not members,
    )


@dataclass(frozen=True)
class RegimeThresholds:
    k_reasoning: int = 2
    p_reasoning: float = 0.7
    noise_fraction: float = 0.8


def classify_regime(report: CandidateSetReport, thresholds: RegimeThresholds = RegimeThresholds()) -> str:
    if report.degenerate:
        raise ValueError("cannot classify a degenerate candidate set (K = 0)")
    K, p = report.K, report.p_max
    if K <= thresholds.k_reasoning and p >= thresholds.p_reasoning:
        return "reasoning"
    if K >= thresholds.noise_fraction * report.achievable and p <= 2.0 / K:
        return "noise"
    return "correlation"


def analyze(corpus, query: ContextQuery, epsilon: float, vocab_size: int | None = None,
            thresholds: RegimeThresholds = RegimeThresholds()) -> CandidateSetReport | None:
    """Conditional, candidate set and regime in one call; ``None`` when the
    context never occurs."""
    dist = empirical_conditional(corpus, query, vocab_size)
    if dist.empty:
        return None
    report = candidate_set(dist, epsilon)
    if not report.degenerate:
        report.regime = classify_regime(report, thresholds)
    return report


# ------------------------------------------------------------------- census


@dataclass(frozen=True)
class FullMasking:
    t: float


@dataclass(frozen=True)
class BlockMasking:
    B: int
    u: float
    clipped: bool = True


@dataclass
class CensusResult:
    histogram: Counter = field(default_factory=Counter)
    n_contexts: int = 0

    def fraction(self, regime: str) -> float:
        return self.histogram[regime] / self.n_contexts if self.n_contexts else 0.0

    def to_record(self) -> dict:
        return {
            "n_contexts": self.n_contexts,
            "histogram": {r: self.histogram.get(r, 0) for r in (*REGIMES, "degenerate")},
            "fractions": {r: self.fraction(r) for r in REGIMES},
        }


def mask_regime_census(corpus, mode, n_samples: int, rng: np.random.Generator, mask_id: int,
                       epsilon: float = 0.1, vocab_size: int | None = None,
                       thresholds: RegimeThresholds = RegimeThresholds()) -> CensusResult:
    """Corrupt random corpus sequences and classify every masked target's context.

    Full masking exposes all unmasked tokens. Block masking exposes earlier
    blocks plus the unmasked part of the corrupted block; later blocks are
    hidden, matching block-causal visibility.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    corpus = list(corpus)
    index = CorpusIndex(corpus, vocab_size if vocab_size is not None else mask_id + 1)
    result = CensusResult()
    cache: dict[tuple, str] = {}
    for _ in range(n_samples):
        x0 = corpus[int(rng.integers(len(corpus)))]
        L = len(x0)
        if isinstance(mode, FullMasking):
            s = corrupt_full(x0, mode.t, rng, mask_id)
            hidden = s.mask_flags.copy()
        elif isinstance(mode, BlockMasking):
            n_blocks = -(-L // mode.B)
            bi = int(rng.integers(n_blocks))
            u = clip_block_rate(mode.u, mode.B) if mode.clipped else mode.u
            s = corrupt_block(x0, bi, u, mode.B, rng, mask_id)
            hidden = s.mask_flags | (np.arange(L) // mode.B > bi)
        else:
            raise TypeError(f"unknown masking mode {mode!r}")
        pattern = tuple(None if h else int(v) for h, v in zip(hidden, x0))
        for target in np.flatnonzero(s.mask_flags):
            key = (pattern, int(target))
            regime = cache.get(key)
            if regime is None:
                dist = empirical_conditional(index, ContextQuery(pattern, int(target), anchored=True))
                report = candidate_set(dist, epsilon)
                regime = "degenerate" if report.degenerate else classify_regime(report, thresholds)
                cache[key] = regime
            result.histogram[regime] += 1
            result.n_contexts += 1
    return result
