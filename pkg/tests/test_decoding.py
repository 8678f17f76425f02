import numpy as np
import pytest

from blockdiff import tensor as T
from blockdiff.decoding import DecodeConfig, decode_ar, decode_blockwise, exact_match
from blockdiff.model import MaskQueryAR
from blockdiff.objectives import ar_loss
from blockdiff.trainer import AdamState, OptimConfig, adamw_update
from conftest import tiny_model


def test_block_one_matches_ar_greedy():
    m = tiny_model(seed=1, L=24)
    rng = np.random.default_rng(0)
    for _ in range(20):
        prompt = rng.integers(0, 12, size=rng.integers(1, 10))
        a = decode_blockwise(m, prompt, DecodeConfig(block_size=1, max_new_tokens=8))
        b = decode_ar(MaskQueryAR(m), prompt, 8)
        assert np.array_equal(a, b)


def test_config_completion_bound():
    with pytest.raises(ValueError):
        DecodeConfig(block_size=4, commits_per_step=1, steps_per_block=3)
    assert DecodeConfig(block_size=4, commits_per_step=3).steps == 2


def test_parallel_block_takes_one_forward_per_block():
    m = tiny_model()
    trace = []
    out = decode_blockwise(m, [1, 2], DecodeConfig(block_size=4, commits_per_step=4, steps_per_block=1,
                                                    max_new_tokens=8), trace)
    assert len(trace) == 2 and len(out) == 10
    assert not any(trace[0].block_masked)


def test_prompt_is_preserved_and_mask_never_emitted():
    m = tiny_model()
    m.params["out_bias"].data[m.config.mask_token] = 50.0  # the mask would win an unrestricted argmax
    prompt = np.array([3, 1, 4])
    out = decode_blockwise(m, prompt, DecodeConfig(block_size=2, max_new_tokens=6))
    assert np.array_equal(out[:3], prompt)
    assert m.config.mask_token not in out[3:]


def test_commitment_is_monotone_and_blocks_isolated():
    m = tiny_model(seed=2)
    trace = []
    k, B = 2, 5
    decode_blockwise(m, [1, 2, 3], DecodeConfig(block_size=B, commits_per_step=k, max_new_tokens=10), trace)
    prev = None
    for st in trace:
        assert len(st.block) == B and len(st.block_masked) == B
        if prev is not None and prev.committed == st.committed:
            opened = sum(prev.block_masked) - sum(st.block_masked)
            assert opened == min(k, sum(prev.block_masked))
            for j in range(B):
                if not prev.block_masked[j]:
                    assert st.block[j] == prev.block[j] and not st.block_masked[j]
        elif prev is not None:
            assert st.committed[: len(prev.committed)] == prev.committed
            assert st.committed[len(prev.committed):] == prev.block
        prev = st
    assert len(trace[-1].committed) == 3 + 5


def test_ties_commit_lowest_index_first():
    m = tiny_model()
    m.params["tok_emb"].data[:] = 0.0
    m.params["out_bias"].data[:] = 0.0
    trace = []
    decode_blockwise(m, [1], DecodeConfig(block_size=4, max_new_tokens=4), trace)
    for step, st in enumerate(trace):
        assert st.block_masked == [j > step for j in range(4)]


def test_eos_truncates_output():
    m = tiny_model()
    eos = 2
    m.params["out_bias"].data[eos] = 100.0
    out = decode_blockwise(m, [1, 5], DecodeConfig(block_size=2, max_new_tokens=6, eos_id=eos))
    assert np.array_equal(out, [1, 5])
    sm = tiny_model(parametrization="shifted")
    sm.params["out_bias"].data[eos] = 100.0
    assert np.array_equal(decode_ar(sm, [1, 5], 6, eos_id=eos), [1, 5])


def test_zero_budget_and_determinism():
    m = tiny_model()
    sm = m.with_parametrization("shifted")
    assert np.array_equal(decode_ar(sm, [4, 2], 0), [4, 2])
    assert np.array_equal(decode_blockwise(m, [4, 2], DecodeConfig(max_new_tokens=0)), [4, 2])
    a = decode_blockwise(m, [4, 2], DecodeConfig(block_size=3, max_new_tokens=6))
    b = decode_blockwise(m, [4, 2], DecodeConfig(block_size=3, max_new_tokens=6))
    assert np.array_equal(a, b)


def test_guards():
    m = tiny_model(L=8)
    with pytest.raises(ValueError, match="max_len"):
        decode_blockwise(m, [1, 2, 3], DecodeConfig(max_new_tokens=6))
    sm = m.with_parametrization("shifted")
    with pytest.raises(ValueError):
        decode_blockwise(sm, [1], DecodeConfig(block_size=2, max_new_tokens=2))
    with pytest.raises(ValueError):
        decode_ar(m, [1], 2)


def test_ar_model_trained_on_periodic_corpus_continues_the_period():
    m = tiny_model(seed=0, V=8, L=24, parametrization="shifted", dtype="float32", d=16, init_std=0.1)
    period = [3, 4, 5, 6]
    rng = np.random.default_rng(0)
    st = AdamState()
    for _ in range(150):
        offs = rng.integers(0, 4, size=8)
        batch = np.array([[period[(o + i) % 4] for i in range(16)] for o in offs])
        with T.Tape() as tape:
            rep = ar_loss(m, batch)
        adamw_update(m.params, T.backward(tape, rep.loss, m.params), st, 1e-2, OptimConfig(weight_decay=0.0))
    out = decode_ar(m, [5, 6, 3], 9)
    assert list(out[3:]) == [4, 5, 6, 3, 4, 5, 6, 3, 4]


def test_exact_match_scoring():
    m = tiny_model()
    m.params["tok_emb"].data[:] = 0.0
    m.params["out_bias"].data[:] = 0.0
    m.params["out_bias"].data[7] = 10.0
    prompts = [np.array([1, 2]), np.array([3])]
    assert exact_match(m, prompts, [np.array([7, 7]), np.array([7, 8])], 1, "block_causal") == 0.5
    with pytest.raises(ValueError):
        exact_match(m, [], [], 1, "block_causal")
