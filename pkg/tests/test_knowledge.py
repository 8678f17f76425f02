import numpy as np
import pytest

from blockdiff.knowledge import (CLAUSE_LEN, SUM_SLOT, X_SLOT, Y_SLOT, ArithmeticCorpusConfig, BlockMasking,
                                 Conditional, ContextQuery, CorpusIndex, FullMasking, analyze, candidate_set,
                                 classify_regime, clause_ids, empirical_conditional, enumerate_clauses,
                                 gen_arithmetic, mask_regime_census, parse_clauses)

CC14 = ArithmeticCorpusConfig(1, 4)
V14 = CC14.vocab


def test_small_range_generates_only_enumerated_sequences():
    cc = ArithmeticCorpusConfig(1, 2)
    allowed = {tuple(s) for s in enumerate_clauses(cc)}
    assert len(allowed) == 4
    seen = {tuple(s) for s in gen_arithmetic(cc, 200, seed=0)}
    assert seen == allowed
    assert cc.vocab.decode(clause_ids(cc.vocab, 1, 2)) == "a = 1 , b = 2 , a + b = 3 ;"


def test_two_clause_example_is_producible():
    cc = ArithmeticCorpusConfig(1, 4, 2, 2)
    target = clause_ids(cc.vocab, 1, 2) + clause_ids(cc.vocab, 3, 4)
    assert parse_clauses(cc.vocab, target) == [(1, 2, 3), (3, 4, 7)]
    found = any(list(s) == target for s in gen_arithmetic(cc, 5000, seed=1))
    assert found


def test_sums_are_always_correct():
    cc = ArithmeticCorpusConfig(0, 9, 1, 3)
    bad = 0
    for s in gen_arithmetic(cc, 10_000, seed=2):
        assert len(s) % CLAUSE_LEN == 0
        bad += sum(x + y != z for x, y, z in parse_clauses(cc.vocab, s))
    assert bad == 0


def test_range_must_fit_vocabulary():
    with pytest.raises(ValueError):
        ArithmeticCorpusConfig(0, 9, max_value=10)
    with pytest.raises(ValueError):
        ArithmeticCorpusConfig(5, 4)


def test_clean_context_pins_the_sum():
    corpus = enumerate_clauses(CC14)
    q = ContextQuery.parse(V14, "a = 1 , b = 2 , a + b = ▁")
    for eps in (1e-3, 0.5, 1.0):
        rep = analyze(corpus, q, eps, len(V14))
        assert rep.K == 1 and rep.members == [V14.id("3")] and rep.regime == "reasoning"


def test_masked_evidence_spreads_the_sum(oracles):
    corpus = enumerate_clauses(CC14)
    q = ContextQuery.parse(V14, "a = ▁ , b = ▁ , a + b = ▁ ;", anchored=True)
    dist = empirical_conditional(corpus, q, len(V14))
    p = dist.probs
    expected = oracles["sum_distribution_1_4"]
    assert dist.achievable == 7
    for s, v in expected.items():
        assert p[V14.id(s)] == pytest.approx(v)
    assert p.sum() == pytest.approx(1.0)


def test_unseen_context_is_empty():
    corpus = enumerate_clauses(CC14)
    q = ContextQuery.parse(V14, "a = 1 , b = 1 , a + b = ▁ ; a = ▁")
    dist = empirical_conditional(corpus, q, len(V14))
    assert dist.empty
    assert analyze(corpus, q, 0.1, len(V14)) is None
    with pytest.raises(ValueError):
        dist.probs


def test_query_target_must_be_wildcard():
    with pytest.raises(ValueError):
        ContextQuery((1, None, 3), 0)
    with pytest.raises(ValueError):
        ContextQuery.parse(V14, "a = 1")


def test_candidate_set_edges():
    V = 20
    det = Conditional(np.eye(V, dtype=int)[3] * 5, 5, 1)
    assert candidate_set(det, 0.1).K == 1
    sums = sorted({int(s[SUM_SLOT]) for s in enumerate_clauses(CC14)})
    assert len(sums) == 7
    counts = np.zeros(V, dtype=int)
    counts[sums] = 1
    uni = candidate_set(Conditional(counts, 7, 7), 0.1)
    assert uni.K == 7 and uni.regime is None
    deg = candidate_set(Conditional(counts, 7, 7), 0.5)
    assert deg.K == 0 and deg.degenerate
    with pytest.raises(ValueError):
        classify_regime(deg)
    with pytest.raises(ValueError):
        candidate_set(det, 0.0)


def _report(probs, achievable, eps=0.1):
    counts = np.round(np.asarray(probs) * 1000).astype(int)
    return candidate_set(Conditional(counts, int(counts.sum()), achievable), eps)


def test_regime_thresholds():
    assert classify_regime(_report([1.0], 1)) == "reasoning"
    assert classify_regime(_report([0.1] * 10, 10)) == "noise"
    assert classify_regime(_report([0.4, 0.2, 0.2, 0.2, 0, 0, 0, 0, 0, 0], 10)) == "correlation"
    assert classify_regime(_report([0.75, 0.25], 10)) == "reasoning"


def test_enumerated_query_lands_in_correlation():
    # revealing only b = 1 leaves the sum uniform over {2, 3, 4, 5} of 7 achievable sums
    corpus = enumerate_clauses(CC14)
    rep = analyze(corpus, ContextQuery.parse(V14, "a = ▁ , b = 1 , a + b = ▁"), 0.1, len(V14))
    assert rep.K == 4 and rep.p_max == pytest.approx(0.25) and rep.regime == "correlation"


def test_generated_conditional_matches_enumeration_within_three_sigma(oracles):
    corpus = gen_arithmetic(CC14, 20_000, seed=3)
    dist = empirical_conditional(corpus, ContextQuery.parse(V14, "a = ▁ , b = ▁ , a + b = ▁"), len(V14))
    n = dist.n_matches
    for s, p in oracles["sum_distribution_1_4"].items():
        assert abs(dist.probs[V14.id(s)] - p) < 3 * np.sqrt(p * (1 - p) / n)


def test_revealing_an_operand_never_grows_the_candidate_set():
    corpus = enumerate_clauses(CC14)
    index = CorpusIndex(corpus, len(V14))
    slots = (X_SLOT, Y_SLOT, SUM_SLOT)
    for seq in corpus:
        for target in slots:
            others = [s for s in slots if s != target]
            for revealed in ([], others[:1], others[1:]):
                def k(vis):
                    pat = tuple(int(v) if (i not in slots or i in vis) else None for i, v in enumerate(seq))
                    return candidate_set(empirical_conditional(index, ContextQuery(pat, target, True)), 0.1).K
                for extra in others:
                    if extra not in revealed:
                        assert k(revealed + [extra]) <= k(revealed)


def test_census_edge_cases_and_determinism():
    corpus = gen_arithmetic(ArithmeticCorpusConfig(0, 4), 100, seed=4)
    mask = len(ArithmeticCorpusConfig(0, 4).vocab) - 1
    empty = mask_regime_census(corpus, FullMasking(0.0), 20, np.random.default_rng(0), mask)
    assert empty.n_contexts == 0 and sum(empty.histogram.values()) == 0
    a = mask_regime_census(corpus, BlockMasking(2, 0.5), 50, np.random.default_rng(1), mask)
    b = mask_regime_census(corpus, BlockMasking(2, 0.5), 50, np.random.default_rng(1), mask)
    assert a.histogram == b.histogram and a.n_contexts > 0
    with pytest.raises(ValueError):
        mask_regime_census(corpus, FullMasking(0.5), 0, np.random.default_rng(0), mask)


def test_small_blocks_see_more_reasoning_contexts():
    cc = ArithmeticCorpusConfig(0, 4)
    corpus = gen_arithmetic(cc, 500, seed=5)
    mask = cc.vocab.mask_id
    block = mask_regime_census(corpus, BlockMasking(1, 1.0), 300, np.random.default_rng(6), mask)
    full = mask_regime_census(corpus, FullMasking(0.8), 300, np.random.default_rng(6), mask)
    assert block.fraction("reasoning") > full.fraction("reasoning")
