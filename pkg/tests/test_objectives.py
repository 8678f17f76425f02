from dataclasses import replace

import numpy as np
import pytest

from blockdiff import tensor as T
from blockdiff.corruption import corrupt_block, corrupt_full
from blockdiff.model import AttentionMaskSpec, MaskQueryAR
from blockdiff.objectives import (WarmupConfig, ar_loss, diffusion_mask, dllm_loss, warmup_loss,
                                  warmup_umax)
from conftest import tiny_model


def test_warmup_ramp_endpoints_and_midpoint(oracles):
    cfg = WarmupConfig(1000)
    assert warmup_umax(cfg, 0) == 1e-3
    assert warmup_umax(cfg, 1000) == 1.0
    assert warmup_umax(cfg, 500) == pytest.approx(oracles["warmup_umax_half"], abs=1e-15)
    with pytest.raises(ValueError):
        warmup_umax(cfg, 1001)
    with pytest.raises(ValueError):
        WarmupConfig(10, u_init=0.0)


def test_uniform_logits_give_log_vocab(oracles):
    m = tiny_model(V=23)
    m.params["tok_emb"].data[:] = 0.0
    m.params["out_bias"].data[:] = 0.0
    x0 = np.random.default_rng(0).integers(0, 22, size=(2, 10))
    for t in (0.2, 0.9):
        s = corrupt_full(x0, t, np.random.default_rng(1), m.config.mask_token)
        rep = dllm_loss(m, s, AttentionMaskSpec("bidirectional"), weighted=False)
        assert rep.value == pytest.approx(oracles["uniform_logit_loss_V23"], abs=1e-12)


def test_fully_masked_loss_is_mean_cross_entropy():
    m = tiny_model()
    x0 = np.array([3, 1, 4, 1, 5, 9])
    s = corrupt_full(x0, 1.0, np.random.default_rng(0), m.config.mask_token)
    rep = dllm_loss(m, s, AttentionMaskSpec("bidirectional"))
    logits = m.logits_np(np.full(6, m.config.mask_token), AttentionMaskSpec("bidirectional"))
    z = logits - logits.max(axis=1, keepdims=True)
    ce = -(z[np.arange(6), x0] - np.log(np.exp(z).sum(axis=1)))
    assert rep.value == pytest.approx(ce.mean(), abs=1e-12)


def test_weighted_is_ten_times_warmup_at_ten_percent():
    m = tiny_model()
    x0 = np.random.default_rng(2).integers(0, 12, size=(4, 16))
    s = corrupt_full(x0, 0.1, np.random.default_rng(3), m.config.mask_token)
    spec = AttentionMaskSpec("bidirectional")
    assert dllm_loss(m, s, spec).value == pytest.approx(10 * warmup_loss(m, s, spec).value, rel=1e-12)


def test_weight_one_makes_warmup_equal_weighted():
    m = tiny_model()
    x0 = np.random.default_rng(4).integers(0, 12, size=(2, 8))
    s = corrupt_block(x0, np.array([0, 1]), 1.0, 4, np.random.default_rng(5), m.config.mask_token)
    spec = AttentionMaskSpec("block_causal", 4)
    assert dllm_loss(m, s, spec).value == warmup_loss(m, s, spec).value


def test_unmasked_labels_do_not_matter():
    m = tiny_model()
    x0 = np.random.default_rng(6).integers(0, 12, size=12)
    s = corrupt_full(x0, 0.5, np.random.default_rng(7), m.config.mask_token)
    spec = AttentionMaskSpec("bidirectional")
    base = dllm_loss(m, s, spec).value
    for i in np.flatnonzero(~s.mask_flags):
        x0b = s.x0.copy()
        x0b[i] = (x0b[i] + 1) % 12
        assert dllm_loss(m, replace(s, x0=x0b), spec).value == base


def test_block_one_diffusion_equals_ar_per_token():
    m = tiny_model(seed=3)
    x0 = np.random.default_rng(8).integers(0, 12, size=10)
    ar = ar_loss(MaskQueryAR(m), x0)
    spec = AttentionMaskSpec("block_causal", 1)
    per = []
    for i in range(1, 10):
        s = corrupt_block(x0, i, 1.0, 1, np.random.default_rng(i), m.config.mask_token)
        per.append(dllm_loss(m, s, spec).per_token[0])
    assert np.max(np.abs(np.array(per) - ar.per_token)) < 1e-6


def test_ar_loss_requires_shifted_head_and_supports_bos():
    m = tiny_model()
    with pytest.raises(ValueError, match="shifted"):
        ar_loss(m, np.array([1, 2, 3]))
    sm = m.with_parametrization("shifted")
    rep = ar_loss(sm, np.array([4, 5, 6]), bos_id=1)
    assert rep.n_supervised == 3


def test_ar_loss_mask_selects_targets():
    sm = tiny_model(parametrization="shifted")
    toks = np.array([[1, 2, 3, 4]])
    full = ar_loss(sm, toks)
    part = ar_loss(sm, toks, loss_mask=np.array([[True, True, False, True]]))
    assert part.n_supervised == 2
    assert part.value == pytest.approx(full.per_token[[0, 2]].mean())


def test_shifted_diffusion_reads_previous_position():
    m = tiny_model()
    sm = m.with_parametrization("shifted")
    x0 = np.array([1, 2, 3, 4, 5])
    s = corrupt_full(x0, 0.5, np.random.default_rng(0), m.config.mask_token)
    flags = np.array([False, False, True, False, True])
    s = replace(s, mask_flags=flags, xt=np.where(flags, m.config.mask_token, x0))
    spec = AttentionMaskSpec("bidirectional")
    logits = T.Tensor(m.logits_np(s.xt, spec))
    expected = T.cross_entropy(T.index(logits, np.array([1, 3])), x0[[2, 4]]).data
    assert np.allclose(dllm_loss(sm, s, spec).per_token, expected)


def test_shifted_diffusion_guards():
    sm = tiny_model(parametrization="shifted")
    x0 = np.arange(6)
    s = corrupt_full(x0, 1.0, np.random.default_rng(0), sm.config.mask_token)
    with pytest.raises(ValueError, match="position 0"):
        dllm_loss(sm, s, AttentionMaskSpec("bidirectional"))
    el = np.arange(6) > 0
    s = corrupt_full(x0, 1.0, np.random.default_rng(0), sm.config.mask_token, eligible=el)
    with pytest.raises(ValueError, match="block"):
        dllm_loss(sm, s, AttentionMaskSpec("block_causal", 2))


def test_no_masked_tokens_is_an_error():
    m = tiny_model()
    s = corrupt_full(np.arange(5), 0.0, np.random.default_rng(0), m.config.mask_token)
    with pytest.raises(ValueError, match="no masked"):
        dllm_loss(m, s, AttentionMaskSpec("bidirectional"))


def test_diffusion_mask_kinds():
    assert diffusion_mask("ARDLLM").kind == "causal"
    assert diffusion_mask("BiDLLM").kind == "bidirectional"
    assert diffusion_mask("BlockDLLM", 4) == AttentionMaskSpec("block_causal", 4)
    with pytest.raises(ValueError):
        diffusion_mask("AR")
