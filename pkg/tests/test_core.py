import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svq.core import (
    Codebook,
    ConfigurationError,
    DegenerateResponseError,
    LeakageKernel,
    ResponseModel,
    Topology,
    apply_leakage,
    build_gaussian_leakage,
    dumps_model,
    encode,
    load_model,
    loads_model,
    mean_reconstruction,
    posterior,
    posterior_finite,
    posterior_infinite,
    reconstruct,
    response,
    save_model,
)


def model_with_q(q):
    """Response model with zero weights whose responses equal ``q``."""
    q = np.asarray(q, dtype=float)
    return ResponseModel(np.zeros((len(q), 2)), np.log(q / (1 - q)))


def random_model(rng, m, dim, scale=1.0):
    return ResponseModel(rng.normal(0, scale, (m, dim)), rng.normal(0, scale, m))


# --- types -----------------------------------------------------------------

def test_codebook_rejects_non_finite():
    with pytest.raises(ConfigurationError):
        Codebook(np.array([[0.0, np.nan]]))


def test_response_model_rejects_shape_mismatch():
    with pytest.raises(ConfigurationError):
        ResponseModel(np.zeros((3, 2)), np.zeros(2))


@pytest.mark.parametrize("topo", [Topology.ring(7, 2), Topology.line(5, 1),
                                  Topology.grid(3, 4, wrap=True, radius=1),
                                  Topology.grid(3, 4, wrap=False, radius=1)])
def test_neighbourhood_contains_self(topo):
    a = topo.membership()
    assert np.all(np.diag(a))


@pytest.mark.parametrize("topo", [Topology.ring(7, 2), Topology.grid(4, 5, wrap=True, radius=1)])
def test_wrap_membership_symmetric(topo):
    a = topo.membership()
    assert np.array_equal(a, a.T)


def test_line_truncates_at_edges():
    assert list(Topology.line(5, 1).neighbours(0)) == [0, 1]
    assert list(Topology.ring(5, 1).neighbours(0)) == [0, 1, 4]


# --- response --------------------------------------------------------------

def test_response_zero_argument():
    m = ResponseModel(np.zeros((1, 3)), np.zeros(1))
    assert response(m, 0, [4.0, -1.0, 2.0]) == 0.5


def test_response_ln3():
    m = ResponseModel(np.array([[1.0, 0.0]]), np.zeros(1))
    assert response(m, 0, [math.log(3), 7.0]) == pytest.approx(0.75, abs=1e-15)


def test_response_saturation():
    m = ResponseModel(np.zeros((1, 1)), np.array([30.0]))
    v = response(m, 0, [0.0])
    assert abs(v - 1.0) < 1e-12 and v < 1.0


def test_response_stable_for_large_negative():
    m = ResponseModel(np.zeros((1, 1)), np.array([-700.0]))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert 0.0 < response(m, 0, [0.0]) < 1e-300


def test_response_dimension_mismatch():
    m = ResponseModel(np.zeros((2, 3)), np.zeros(2))
    with pytest.raises(ConfigurationError):
        response(m, 0, [1.0, 2.0])
    with pytest.raises(ConfigurationError):
        response(m, 2, [1.0, 2.0, 3.0])


# --- posteriors ------------------------------------------------------------

def test_infinite_equal_q_uniform():
    p = posterior_infinite(model_with_q([0.3] * 5), [0.0, 0.0])
    assert np.allclose(p, 0.2, atol=1e-15)


def test_infinite_arithmetic():
    assert np.allclose(posterior_infinite(model_with_q([0.2, 0.6]), [0, 0]), [0.25, 0.75], atol=1e-12)
    assert np.allclose(posterior_infinite(model_with_q([0.5, 0.25, 0.25]), [0, 0]),
                       [0.5, 0.25, 0.25], atol=1e-12)


def test_infinite_underflow_raises():
    m = ResponseModel(np.zeros((3, 1)), np.full(3, -800.0))
    with pytest.raises(DegenerateResponseError):
        posterior_infinite(m, [0.0])


def test_finite_underflow_names_context():
    q_bias = np.array([0.0, -800.0, -800.0, -800.0, 0.0])
    m = ResponseModel(np.zeros((5, 1)), q_bias)
    with pytest.raises(DegenerateResponseError) as info:
        posterior_finite(m, Topology.line(5, 1), [0.0])
    assert info.value.context == 2
    assert "code 3" in str(info.value)


def test_finite_full_radius_matches_infinite(rng):
    m = random_model(rng, 6, 3)
    x = rng.normal(size=(20, 3))
    assert np.allclose(posterior_finite(m, Topology.full(6), x), posterior_infinite(m, x),
                       atol=1e-12, rtol=0)
    assert np.allclose(posterior_finite(m, Topology.ring(6, 3), x), posterior_infinite(m, x),
                       atol=1e-12, rtol=0)


def test_finite_radius_zero_uniform(rng):
    m = random_model(rng, 5, 2, scale=3.0)
    p = posterior_finite(m, Topology.ring(5, 0), rng.normal(size=(10, 2)))
    assert np.allclose(p, 0.2, atol=1e-15)


def test_finite_ring_unit_sum_100_draws(rng):
    topo = Topology.ring(6, 1)
    for _ in range(100):
        m = random_model(rng, 6, 3, scale=2.0)
        p = posterior_finite(m, topo, rng.normal(size=3))
        assert abs(p.sum() - 1.0) <= 1e-12 and p.min() >= 0


def test_finite_matches_direct_formula(rng):
    topo = Topology.grid(3, 3, wrap=False, radius=1)
    m = random_model(rng, 9, 2)
    x = rng.normal(size=2)
    q = np.array([response(m, y, x) for y in range(9)])
    direct = np.zeros(9)
    for ctx in range(9):
        nb = topo.neighbours(ctx)
        direct[nb] += q[nb] / q[nb].sum() / 9
    assert np.allclose(posterior_finite(m, topo, x), direct, atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), m=st.integers(1, 9), radius=st.integers(0, 4),
       leak=st.integers(0, 2), scale=st.floats(0.01, 5.0))
def test_posterior_unit_sum_property(seed, m, radius, leak, scale):
    r = np.random.default_rng(seed)
    topo = Topology.ring(m, radius)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        kernel = build_gaussian_leakage(topo, leak, 1.0)
    model = random_model(r, m, 3, scale)
    p = posterior(model, topo, kernel, r.normal(size=(4, 3)))
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12, rtol=0)


# --- leakage ---------------------------------------------------------------

def test_identity_leakage_passthrough(rng):
    p = rng.dirichlet(np.ones(5))
    assert np.array_equal(apply_leakage(LeakageKernel.identity(5), p), p)


def test_uniform_leakage_total_mixing(rng):
    k = LeakageKernel(np.full((4, 4), 0.25))
    assert np.allclose(apply_leakage(k, rng.dirichlet(np.ones(4))), 0.25, atol=1e-15)


def test_ring_leak_support():
    k = build_gaussian_leakage(Topology.ring(4, 0), 1, 1.0)
    out = apply_leakage(k, [1.0, 0.0, 0.0, 0.0])
    assert abs(out.sum() - 1.0) < 1e-15
    assert set(np.flatnonzero(out)) == {3, 0, 1}


def test_leak_radius_zero_identity():
    assert build_gaussian_leakage(Topology.grid(3, 3), 0, 1.0).is_identity


def test_leak_line_large_sigma_equal_weights():
    k = build_gaussian_leakage(Topology.line(5), 1, 1e6)
    for c in (1, 2, 3):
        assert np.allclose(k.matrix[c - 1:c + 2, c], 1 / 3, atol=1e-9)


def test_leak_grid_closed_form():
    k = build_gaussian_leakage(Topology.grid(3, 3, wrap=True), 1, 1.0)
    raw = np.array([1.0, math.exp(-0.5), math.exp(-1.0)])
    total = raw[0] + 4 * raw[1] + 4 * raw[2]
    centre = 4  # (1, 1)
    col = k.matrix[:, centre]
    assert col[centre] == pytest.approx(raw[0] / total, abs=1e-15)
    assert col[1] == pytest.approx(raw[1] / total, abs=1e-15)
    assert col[0] == pytest.approx(raw[2] / total, abs=1e-15)


def test_leak_radius_clipped_with_warning():
    with pytest.warns(UserWarning):
        k = build_gaussian_leakage(Topology.line(3), 5, 1.0)
    assert k.radius == 2 and k.notes


def test_leakage_rejects_bad_columns():
    with pytest.raises(ConfigurationError):
        LeakageKernel(np.array([[0.5, 0.0], [0.4, 1.0]]))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), m=st.integers(1, 8))
def test_leakage_conserves_mass(seed, m):
    r = np.random.default_rng(seed)
    mat = r.random((m, m))
    k = LeakageKernel(mat / mat.sum(axis=0))
    out = apply_leakage(k, r.dirichlet(np.ones(m)))
    assert abs(out.sum() - 1.0) < 1e-12 and out.min() >= 0


# --- encode / reconstruct --------------------------------------------------

def test_encode_point_mass(rng):
    assert list(encode([1.0, 0, 0, 0], 5, rng)) == [0] * 5


def test_encode_uniform_frequencies():
    codes = encode(np.full(4, 0.25), 100_000, np.random.default_rng(7))
    freq = np.bincount(codes, minlength=4) / len(codes)
    assert np.all(np.abs(freq - 0.25) < 0.01)


def test_encode_two_codes():
    r = np.random.default_rng(8)
    draws = np.array([encode([0.3, 0.7], 1, r)[0] for _ in range(100_000)])
    assert abs(np.mean(draws == 1) - 0.7) < 0.01


def test_encode_deterministic():
    p = [0.1, 0.2, 0.3, 0.4]
    a = encode(p, 50, np.random.default_rng(3))
    b = encode(p, 50, np.random.default_rng(3))
    assert np.array_equal(a, b)


def test_encode_rejects_zero_n(rng):
    with pytest.raises(ConfigurationError):
        encode([1.0], 0, rng)


def test_reconstruct_examples():
    cb = Codebook(np.array([[0.0, 0.0], [2.0, 4.0], [5.0, 1.0]]))
    assert np.array_equal(reconstruct(cb, [2]), cb.recon[2])
    assert np.array_equal(reconstruct(cb, [0, 1]), [1.0, 2.0])
    assert np.allclose(reconstruct(cb, [2, 0, 1, 1]), reconstruct(cb, [1, 1, 0, 2]))


def test_mean_reconstruction_examples():
    cb = Codebook(np.array([[0.0, 0.0], [2.0, 4.0], [4.0, 2.0]]))
    assert np.array_equal(mean_reconstruction(cb, [0, 1, 0]), [2.0, 4.0])
    assert np.allclose(mean_reconstruction(cb, np.full(3, 1 / 3)), [2.0, 2.0])


def test_sampled_reconstruction_converges(rng):
    cb = Codebook(rng.normal(size=(4, 3)))
    p = rng.dirichlet(np.ones(4))
    n, draws = 3, 100_000
    r = np.random.default_rng(1)
    cdf = np.cumsum(p)
    codes = np.minimum(np.searchsorted(cdf, r.random((draws, n)) * cdf[-1], side="right"), 3)
    samples = cb.recon[codes].mean(axis=1)
    se = samples.std(axis=0, ddof=1) / np.sqrt(draws)
    assert np.all(np.abs(samples.mean(axis=0) - mean_reconstruction(cb, p)) <= 3 * se)


# --- persistence -----------------------------------------------------------

def test_model_round_trip_bit_exact(tmp_path, rng):
    topo = Topology.grid(2, 3, wrap=True, radius=1)
    kernel = build_gaussian_leakage(topo, 1, 0.7)
    cb = Codebook(rng.normal(size=(6, 4)) * 1e-7)
    m = random_model(rng, 6, 4)
    path = tmp_path / "m.svq"
    save_model(path, cb, m, topo, kernel)
    cb2, m2, topo2, k2 = load_model(path)
    assert np.array_equal(cb2.recon, cb.recon)
    assert np.array_equal(m2.weights, m.weights) and np.array_equal(m2.biases, m.biases)
    assert topo2 == topo
    assert np.array_equal(k2.matrix, kernel.matrix) and k2.radius == 1 and k2.sigma == 0.7
    assert dumps_model(cb2, m2, topo2, k2) == dumps_model(cb, m, topo, kernel)


def test_load_rejects_garbage():
    with pytest.raises(ConfigurationError):
        loads_model("not a model\n")
