"""Compiled kernels against the NumPy fallback."""
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from talkstyle import kernels
from talkstyle.kernels import _pykernels as py

pytestmark = pytest.mark.skipif("cython" not in kernels.available_backends(), reason="extension not built")


if "cython" in kernels.available_backends():
    from talkstyle.kernels import _ckernels as ck


def _attn_inputs(seed, n, m, heads, masked):
    r = np.random.default_rng(seed)
    d = 4 * heads
    q, k, v = r.normal(size=(n, d)), r.normal(size=(m, d)), r.normal(size=(m, d))
    bias = None
    if masked:
        bias = np.where(r.random((n, m)) < 0.4, -np.inf, r.normal(size=(n, m)))
        bias[np.arange(n), r.integers(0, m, n)] = 0.0  # every row keeps a key
    return q, k, v, bias


@given(st.integers(0, 10**6), st.integers(1, 6), st.integers(1, 9), st.integers(1, 4), st.booleans())
def test_attention_matches_fallback(seed, n, m, heads, masked):
    q, k, v, bias = _attn_inputs(seed, n, m, heads, masked)
    o1, p1 = py.attention_forward(q, k, v, bias, heads, 0.5)
    o2, p2 = ck.attention_forward(q, k, v, bias, heads, 0.5)
    np.testing.assert_allclose(o2, o1, atol=1e-12)
    np.testing.assert_allclose(p2, p1, atol=1e-12)
    g = np.random.default_rng(seed + 1).normal(size=o1.shape)
    for a, b in zip(py.attention_backward(g, q, k, v, p1, heads, 0.5), ck.attention_backward(g, q, k, v, p2, heads, 0.5)):
        np.testing.assert_allclose(b, a, atol=1e-12)


def test_attention_fully_masked_row_raises():
    q, k, v, _ = _attn_inputs(0, 2, 3, 1, False)
    bias = np.zeros((2, 3))
    bias[1] = -np.inf
    for impl in (py, ck):
        with pytest.raises(FloatingPointError):
            impl.attention_forward(q, k, v, bias, 1, 1.0)


def test_attention_accepts_strided_views():
    q, k, v, _ = _attn_inputs(3, 3, 5, 2, False)
    kv = np.concatenate([k, v], axis=1)
    a = ck.attention_forward(q, kv[:, :8], kv[:, 8:], None, 2, 0.3)[0]
    b = py.attention_forward(q, k, v, None, 2, 0.3)[0]
    np.testing.assert_allclose(a, b, atol=1e-12)


@given(st.integers(0, 10**6), st.sampled_from([(1, 8), (3, 16), (2, 3, 5)]))
def test_layer_norm_matches_fallback(seed, shape):
    r = np.random.default_rng(seed)
    x = r.normal(size=shape)
    g, b = r.normal(size=shape[-1]), r.normal(size=shape[-1])
    f1, f2 = py.layer_norm_forward(x, g, b, 1e-5), ck.layer_norm_forward(x, g, b, 1e-5)
    for a, c in zip(f1, f2):
        assert a.shape == c.shape
        np.testing.assert_allclose(c, a, atol=1e-12)
    gr = r.normal(size=shape)
    for a, c in zip(py.layer_norm_backward(gr, *f1[1:], g), ck.layer_norm_backward(gr, *f2[1:], g)):
        np.testing.assert_allclose(c, a, atol=1e-12)


@given(st.integers(0, 10**6), st.integers(1, 7), st.integers(1, 7))
def test_dtw_matches_fallback_exactly(seed, n, m):
    cost = np.random.default_rng(seed).integers(0, 3, size=(n, m)).astype(float)  # many ties
    assert ck.dtw_accumulate(cost) == py.dtw_accumulate(cost)


def test_backend_switch_round_trip():
    start = kernels.BACKEND
    try:
        kernels.set_backend("python")
        assert kernels.attention_forward is py.attention_forward
        kernels.set_backend("cython")
        assert kernels.BACKEND == "cython"
    finally:
        kernels.set_backend(start)
    with pytest.raises(ValueError):
        kernels.set_backend("fortran")
