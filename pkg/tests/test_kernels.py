"""The compiled kernels and the numpy fallback must agree."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orchestra import _kernels_py as py
from orchestra import kernels

try:
    from orchestra import _kernels as cy
except ImportError:  # extension not built
    cy = None

needs_ext = pytest.mark.skipif(cy is None, reason="compiled extension not built")


def _net(rng, arch):
    ws = [rng.normal(size=(a, b)) for a, b in zip(arch[:-1], arch[1:])]
    bs = [rng.normal(size=b) for b in arch[1:]]
    return ws, bs


def test_backend_is_reported():
    assert kernels.BACKEND in ("cython", "python")


@needs_ext
@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.lists(st.integers(1, 9), min_size=2, max_size=4))
def test_mlp_forward_agrees(seed, arch):
    rng = np.random.default_rng(seed)
    ws, bs = _net(rng, arch)
    x = rng.normal(size=arch[0])
    assert np.allclose(cy.mlp_forward(ws, bs, x), py.mlp_forward(ws, bs, x), rtol=1e-12, atol=1e-12)


@needs_ext
@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 12))
def test_masked_softmax_and_sampling_agree(seed, n):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=5.0, size=n)
    mask = (rng.random(n) < 0.6).astype(np.uint8)
    mask[rng.integers(n)] = 1
    p_cy, p_py = cy.masked_softmax(logits, mask), py.masked_softmax(logits, mask)
    assert np.allclose(p_cy, p_py, rtol=1e-12, atol=1e-15)
    assert abs(p_cy.sum() - 1.0) <= 1e-9
    assert np.all(p_cy[mask == 0] == 0.0)
    for u in rng.random(20):
        assert cy.sample_index(p_py, u) == py.sample_index(p_py, u)


@needs_ext
@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 10))
def test_fits_agrees(seed, n):
    rng = np.random.default_rng(seed)
    residual = rng.uniform(-0.2, 1.0, size=(n, 3))
    demand = rng.uniform(0.0, 0.6, size=3)
    active = rng.random(n) < 0.8
    assert np.array_equal(cy.fits(residual, demand, active), py.fits(residual, demand, active))


@pytest.mark.parametrize("impl", [py] + ([cy] if cy is not None else []), ids=lambda m: m.__name__)
def test_sample_never_returns_zero_probability_index(impl):
    probs = np.array([0.0, 0.3, 0.0, 0.7, 0.0])
    for u in np.concatenate([np.linspace(0.0, 1.0, 101), [np.nextafter(1.0, 0.0)]]):
        assert probs[impl.sample_index(probs, u)] > 0


@pytest.mark.parametrize("impl", [py] + ([cy] if cy is not None else []), ids=lambda m: m.__name__)
def test_fits_exact_boundary(impl):
    residual = np.array([[0.3, 1.0, 1.0], [0.2999, 1.0, 1.0]])
    out = impl.fits(residual, np.array([0.3, 0.0, 0.0]), np.array([True, True]))
    assert list(out) == [1, 0]
