import numpy as np
import pytest

from svq.analysis import (
    SWEEP_HEADER,
    arc_profile,
    classify_encoding,
    classify_posterior_grid,
    cyclic_correlation,
    dominance_map,
    dominant_period,
    encode_image,
    label_contiguity,
    localization_metrics,
    match_waveforms,
    stability_sweep,
    stationarity_residual_posterior,
    stationarity_residual_recon,
    topographic_order,
    torus_grid,
    write_rows_csv,
)
from svq.core import (
    Codebook,
    ConfigurationError,
    LeakageKernel,
    ResponseModel,
    Topology,
    mean_reconstruction,
    posterior,
)
from svq.datagen import ImageData, interdigitate, reference_waveforms


def random_setup(rng, m, dim):
    model = ResponseModel(rng.normal(size=(m, dim)), rng.normal(size=m))
    return Codebook(rng.normal(size=(m, dim))), model, Topology.full(m), LeakageKernel.identity(m)


# --- stationarity ----------------------------------------------------------

def test_recon_residual_single_code(rng):
    x = rng.normal(size=(50, 3))
    _, model, top, ker = random_setup(rng, 1, 3)
    centroid = Codebook(x.mean(axis=0, keepdims=True))
    assert stationarity_residual_recon(centroid, model, top, ker, 1, x)[0] == pytest.approx(0.0, abs=1e-14)
    off = Codebook(centroid.recon + [[1.0, 0.0, 0.0]])
    assert stationarity_residual_recon(off, model, top, ker, 1, x)[0] == pytest.approx(1.0)


def test_recon_residual_n1_is_conditional_mean(rng):
    x = rng.normal(size=(40, 2))
    cb, model, top, ker = random_setup(rng, 3, 2)
    p = posterior(model, top, ker, x)
    direct = np.linalg.norm((p.T @ x) / p.sum(axis=0)[:, None] - cb.recon, axis=1)
    assert np.allclose(stationarity_residual_recon(cb, model, top, ker, 1, x), direct)


def one_hot_setup():
    model = ResponseModel(np.array([[1000.0], [-1000.0]]), np.zeros(2))
    return Codebook(np.array([[1.0], [-1.0]])), model, Topology.full(2), LeakageKernel.identity(2)


def test_residuals_zero_for_one_hot():
    cb, model, top, ker = one_hot_setup()
    x = np.array([[1.0], [-1.0]])
    assert np.array_equal(posterior(model, top, ker, x), np.eye(2))
    for n in (1, 5):
        assert np.all(stationarity_residual_recon(cb, model, top, ker, n, x) == 0.0)
        assert stationarity_residual_posterior(cb, model, top, ker, n, x) == 0.0


def test_posterior_residual_zero_single_code(rng):
    cb, model, top, ker = random_setup(rng, 1, 3)
    for n in (1, 4):
        assert stationarity_residual_posterior(cb, model, top, ker, n, rng.normal(size=(30, 3))) == 0.0


def test_posterior_residual_positive_generic(rng):
    cb, model, top, ker = random_setup(rng, 4, 2)
    assert stationarity_residual_posterior(cb, model, top, ker, 3, rng.normal(size=(30, 2))) > 0


def test_unreached_code_is_nan():
    model = ResponseModel(np.array([[1000.0], [-1000.0]]), np.zeros(2))
    cb = Codebook(np.array([[1.0], [-1.0]]))
    res = stationarity_residual_recon(cb, model, Topology.full(2), LeakageKernel.identity(2), 2, np.ones((5, 1)))
    assert res[0] == 0.0 and np.isnan(res[1])


# --- joint / factorial ------------------------------------------------------

def test_collar_is_factorial():
    theta, _ = torus_grid(32)
    p0 = np.broadcast_to(((1 + np.cos(theta)) / 2)[:, None], (32, 32))
    lab = classify_posterior_grid(np.stack([p0, 1 - p0], axis=-1))
    assert np.all(lab.ratios == 0.0)
    assert lab.label == "factorial" and lab.factorial_fraction == 1.0


def test_symmetric_bump_is_joint():
    theta, _ = torus_grid(32)
    t1, t2 = np.meshgrid(theta, theta, indexing="ij")
    d = lambda t: np.angle(np.exp(1j * (t - np.pi)))
    p0 = np.exp(-(d(t1) ** 2 + d(t2) ** 2))
    lab = classify_posterior_grid(np.stack([p0, 1 - p0], axis=-1))
    assert np.allclose(lab.ratios, 1.0) and lab.label == "joint"


def test_mixed_and_inactive():
    theta, _ = torus_grid(16)
    t1, t2 = np.meshgrid(theta, theta, indexing="ij")
    collar = (1 + np.cos(t1)) / 4
    bump = (1 + np.cos(t1) * np.cos(t2)) / 4
    dead = np.zeros_like(t1)
    lab = classify_posterior_grid(np.stack([collar, bump, 1 - collar - bump, dead], axis=-1))
    assert not lab.active[3] and np.isnan(lab.ratios[3])
    assert lab.label == "mixed"


def test_classify_encoding_model():
    # responses driven by the first circle only
    m = 4
    ang = np.arange(m) * np.pi / 2
    w = np.zeros((m, 4))
    w[:, 0], w[:, 1] = 8 * np.cos(ang), 8 * np.sin(ang)
    model = ResponseModel(w, np.zeros(m))
    lab = classify_encoding(Codebook(np.zeros((m, 4))), model, Topology.full(m), LeakageKernel.identity(m), 32)
    assert lab.label == "factorial"
    with pytest.raises(ConfigurationError):
        classify_encoding(Codebook(np.zeros((2, 2))), ResponseModel(np.zeros((2, 2)), np.zeros(2)),
                          Topology.full(2), LeakageKernel.identity(2))


# --- arc profiles -----------------------------------------------------------

def test_uniform_arc_is_full_circle():
    model = ResponseModel(np.zeros((4, 2)), np.zeros(4))
    _, prof, width = arc_profile(None, model, Topology.full(4), LeakageKernel.identity(4), 0)
    assert np.allclose(prof, 0.25) and width == pytest.approx(2 * np.pi)


def test_arc_profiles_sum_to_one(rng):
    cb, model, top, ker = random_setup(rng, 4, 2)
    total = sum(arc_profile(cb, model, top, ker, y)[1] for y in range(4))
    assert np.max(np.abs(total - 1.0)) < 1e-12


def test_quadrant_arcs():
    ang = np.arange(4) * np.pi / 2
    model = ResponseModel(20 * np.stack([np.cos(ang), np.sin(ang)], axis=1), np.full(4, -10.0))
    for y in range(4):
        theta, prof, width = arc_profile(None, model, Topology.full(4), LeakageKernel.identity(4), y)
        assert width == pytest.approx(np.pi / 2, abs=0.02)
        assert theta[np.argmax(prof)] == pytest.approx(ang[y], abs=0.01)


# --- localisation -----------------------------------------------------------

def test_localization_extremes():
    rows = np.zeros((3, 16))
    rows[0, 5] = 2.0
    rows[1] = 0.7
    rows[2, [2, 10]] = 1.0
    pr, runs = localization_metrics(Codebook(rows))
    assert pr[0] * 16 == pytest.approx(1.0) and runs[0] == 1
    assert pr[1] * 16 == pytest.approx(16.0) and runs[1] == 1
    assert pr[2] * 16 == pytest.approx(2.0) and runs[2] == 2


def test_localization_wraps_around():
    row = np.zeros(16)
    row[[15, 0, 1]] = [0.8, 1.0, 0.8]
    assert localization_metrics(Codebook(row[None]))[1][0] == 1


# --- waveforms --------------------------------------------------------------

def test_shifted_reference_matches_exactly():
    refs = reference_waveforms(64)
    rows = np.stack([np.roll(refs[0], 5), 3.0 * np.roll(refs[1], 11) + 2.0])
    m = match_waveforms(Codebook(rows), refs)
    assert (m[0].reference, m[0].shift) == (0, 5) and m[0].correlation == pytest.approx(1.0)
    assert (m[1].reference, m[1].shift) == (1, 11) and m[1].correlation == pytest.approx(1.0)


def test_noise_rows_correlate_weakly():
    refs = reference_waveforms(256)
    noise = np.random.default_rng(0).normal(size=(200, 256))
    assert all(m.correlation < 0.3 for m in match_waveforms(Codebook(noise), refs))


def test_cyclic_correlation_flat():
    assert np.all(cyclic_correlation(np.ones(8), np.arange(8.0)) == 0.0)


def test_reference_length_checked():
    with pytest.raises(ConfigurationError):
        match_waveforms(Codebook(np.zeros((1, 32))), reference_waveforms(64))


def test_dominant_period():
    t = np.arange(4000)
    s = np.exp(-0.5 * ((t % 27.0) - 13) ** 2)
    assert dominant_period(s) == pytest.approx(27.0, rel=0.01)


# --- topographic order ------------------------------------------------------

def smooth_grid_codebook(top):
    ang = np.linspace(0, 2 * np.pi, 16, endpoint=False)
    return Codebook(np.stack([np.cos(ang + 0.3 * r) + np.cos(2 * ang + 0.3 * c) for r, c in top.positions()]))


def test_topographic_order_smooth_and_shuffled():
    top = Topology.grid(10, 10)
    rng = np.random.default_rng(1)
    cb = smooth_grid_codebook(top)
    assert topographic_order(cb, top, rng) > 0.5
    shuffled = [topographic_order(Codebook(cb.recon[rng.permutation(100)]), top, rng) for _ in range(20)]
    assert abs(np.mean(shuffled)) < 0.05


def test_topographic_order_is_seeded():
    top = Topology.grid(6, 6)
    cb = Codebook(np.random.default_rng(2).normal(size=(36, 5)))
    a = topographic_order(cb, top, np.random.default_rng(3))
    assert a == topographic_order(cb, top, np.random.default_rng(3))


# --- images -----------------------------------------------------------------

def image_model(rng, rows=3, cols=3, window=3):
    m = rows * cols
    top = Topology.grid(rows, cols, radius=1)
    model = ResponseModel(rng.normal(size=(m, window * window)), rng.normal(size=m))
    return Codebook(rng.normal(size=(m, window * window))), model, top, LeakageKernel.identity(m)


def test_blockwise_reconstruction(rng):
    cb, model, top, ker = image_model(rng)
    img = ImageData(rng.random((12, 9)))
    coding = encode_image(cb, model, top, ker, img, 3, 3)
    assert len(coding.positions) == 12
    for r in range(0, 12, 3):
        for c in range(0, 9, 3):
            patch = img.pixels[r:r + 3, c:c + 3].reshape(1, -1)
            block = mean_reconstruction(cb, posterior(model, top, ker, patch)).reshape(3, 3)
            # equal up to summation order inside the batched matrix product
            np.testing.assert_allclose(coding.reconstruction.pixels[r:r + 3, c:c + 3], block,
                                       rtol=0, atol=1e-14)


def test_flat_image_gives_identical_posteriors(rng):
    cb, model, top, ker = image_model(rng)
    coding = encode_image(cb, model, top, ker, ImageData(np.full((10, 10), 0.4)), 3, 1)
    assert np.all(coding.posteriors == coding.posteriors[0])
    assert coding.activity.shape == (3, 3)
    assert 0 < coding.sparsity <= 1


def test_window_must_fit(rng):
    cb, model, top, ker = image_model(rng)
    with pytest.raises(ConfigurationError):
        encode_image(cb, model, top, ker, ImageData(np.zeros((2, 8))), 3, 1)


def test_dominance_parity_models(rng):
    window = 3
    even = (np.add.outer(np.arange(window), np.arange(window)) % 2 == 0).reshape(-1)
    want = np.array([1, 1, 0, 0])
    w = np.where(want[:, None] == 1, 5.0 * even, 5.0 * ~even)
    model = ResponseModel(w.astype(float), np.full(4, -2.0))
    top = Topology.grid(2, 2, radius=1)
    img = ImageData(0.5 + 0.5 * rng.random((20, 20)))
    dom = dominance_map(Codebook(np.zeros((4, 9))), model, top, LeakageKernel.identity(4), img, window,
                        np.random.default_rng(0), patches=200)
    assert np.array_equal(dom.labels.reshape(-1), want)
    assert dom.contiguity == label_contiguity(want, top)


def test_dominance_identical_images_at_chance():
    rng = np.random.default_rng(4)
    top = Topology.grid(10, 10, radius=1)
    img = ImageData(rng.random((30, 30)))
    same = interdigitate(img, img)
    scores = []
    for _ in range(5):
        model = ResponseModel(rng.normal(size=(100, 9)), rng.normal(size=100))
        dom = dominance_map(Codebook(np.zeros((100, 9))), model, top, LeakageKernel.identity(100), same, 3,
                            rng, patches=300)
        scores.append(dom.contiguity)
    assert abs(np.mean(scores) - 0.5) < 0.1


# --- sweep ------------------------------------------------------------------

def test_sweep_structure(tmp_path):
    rows = stability_sweep([2], [1, 3], 2, {"steps": 30, "batch_size": 4, "trace_every": 10, "holdout_size": 20})
    assert [r[:3] for r in rows] == [[2, 1, 2], [2, 3, 2]]
    for r in rows:
        assert sum(r[3:7]) == 2
    write_rows_csv(tmp_path / "s.csv", SWEEP_HEADER, rows)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == ",".join(SWEEP_HEADER) and len(lines) == 3


def test_sweep_records_failed_cells():
    rows = stability_sweep([3], [2], 1, {"steps": 200, "learning_rate": 1e6, "final_learning_rate": 1e6,
                                         "batch_size": 4, "holdout_size": 20})
    assert rows[0][6] == 1 and np.isnan(rows[0][7])


def test_sweep_parallel_matches_serial():
    cfg = {"steps": 20, "batch_size": 4, "holdout_size": 20}
    assert stability_sweep([2], [2], [0, 1], cfg) == stability_sweep([2], [2], [0, 1], cfg, workers=2)
