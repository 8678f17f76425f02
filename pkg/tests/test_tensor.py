import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockdiff import tensor as T
from blockdiff.gradcheck import check, primitive_checks


def test_primitives_match_finite_differences():
    for r in primitive_checks(3):
        assert r.error < 1e-4, r


def test_add_and_matmul_values():
    a = T.Tensor(np.arange(6.0).reshape(2, 3))
    b = T.Tensor(np.ones((3, 2)))
    assert np.allclose(T.matmul(a, b).data, [[3, 3], [12, 12]])
    assert np.allclose((a + a).data, 2 * a.data)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_elementwise_requires_equal_shapes():
    with pytest.raises(ValueError):
        T.add(T.Tensor(np.ones(3)), T.Tensor(np.ones(4)))


def test_backward_rejects_non_scalar():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        y = T.square(x)
    with pytest.raises(ValueError, match="scalar"):
        T.backward(tape, y)


def test_unrelated_parameter_gets_zero_grad():
    x = T.Tensor(np.ones(3), requires_grad=True)
    z = T.Tensor(np.ones(2), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_all(T.square(x))
    gx, gz = T.backward(tape, loss, [x, z])
    assert np.allclose(gx, 2.0)
    assert np.array_equal(gz, np.zeros(2))


def test_reused_tensor_accumulates():
    x = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_all(T.mul(x, x) + x)
    (g,) = T.backward(tape, loss, [x])
    assert np.allclose(g, 2 * x.data + 1)


def test_no_grad_records_nothing():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        with T.no_grad():
            T.square(x)
    assert tape.nodes == []


def test_cross_entropy_stable_for_huge_logits():
    z = T.Tensor(np.array([[1e4, 0.0, -1e4]]))
    ce = T.cross_entropy(z, np.array([0]))
    assert np.isfinite(ce.data).all() and ce.data[0] == pytest.approx(0.0, abs=1e-12)
    ce = T.cross_entropy(z, np.array([1]))
    assert ce.data[0] == pytest.approx(1e4)


def test_cross_entropy_rejects_bad_targets():
    z = T.Tensor(np.zeros((2, 4)))
    with pytest.raises(ValueError):
        T.cross_entropy(z, np.array([0, 4]))
    with pytest.raises(TypeError):
        T.cross_entropy(z, np.array([0.0, 1.0]))


def test_rms_norm_unit_rms():
    x = T.Tensor(np.random.default_rng(0).standard_normal((4, 8)) * 5)
    y = T.rms_norm(x, T.Tensor(np.ones(8))).data
    assert np.allclose(np.sqrt((y**2).mean(axis=-1)), 1.0, atol=1e-6)


def test_masked_softmax_rejects_empty_row():
    allow = np.array([[True, False], [False, False]])
    with pytest.raises(ValueError):
        T.masked_softmax_rows(T.Tensor(np.zeros((2, 2))), allow)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 6), seed=st.integers(0, 10_000))
def test_masked_softmax_properties(n, seed):
    rng = np.random.default_rng(seed)
    allow = rng.random((n, n)) < 0.5
    allow[np.arange(n), rng.integers(0, n, size=n)] = True
    x = T.Tensor(rng.standard_normal((n, n)) * 10)
    p = T.masked_softmax_rows(x, allow).data
    assert np.allclose(p.sum(axis=-1), 1.0)
    assert np.all(p[~allow] == 0.0)
    assert np.all(p >= 0)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_masked_softmax_gradient(seed):
    rng = np.random.default_rng(seed)
    allow = rng.random((4, 4)) < 0.6
    allow[np.arange(4), np.arange(4)] = True
    w = rng.standard_normal((4, 4))
    err = check(lambda a: T.weighted_sum(T.masked_softmax_rows(a, allow), w), [rng.standard_normal((4, 4))])
    assert err < 1e-4
