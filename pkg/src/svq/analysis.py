"""Diagnostics that turn trained models into measurable findings."""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import Codebook, ConfigurationError, LeakageKernel, SVQError, Topology, posterior
from .datagen import ImageData, extract_patches, parity_mask, sample_torus
from .objective import _coerce_batch, forward
from .trainer import TrainConfig, init_model, seeded_rngs, train

# --- stationarity ----------------------------------------------------------


def stationarity_residual_recon(codebook, model, topology, kernel, n, batch) -> np.ndarray:
    """Per-code norm of  n E[x|y] - x'(y) - (n-1) E[sum_y' Pr(y'|x) x'(y') | y].

    Conditional expectations weight the batch by Pr(y|x). Codes with no
    posterior mass on the batch get NaN (not applicable).
    """
    batch = _coerce_batch(batch)
    ws = forward(codebook, model, topology, kernel, batch.samples)
    w = batch.normalised_weights()[:, None] * ws.post          # (B, M)
    mass = w.sum(axis=0)
    out = np.full(codebook.num_codes, np.nan)
    ok = mass > 0
    xhat = ws.post @ codebook.recon
    cond_x = (w.T @ ws.x)[ok] / mass[ok, None]
    cond_xhat = (w.T @ xhat)[ok] / mass[ok, None]
    diff = n * cond_x - codebook.recon[ok] - (n - 1) * cond_xhat
    out[ok] = np.linalg.norm(diff, axis=1)
    return out


def stationarity_residual_posterior(codebook, model, topology, kernel, n, batch,
                                    mass_floor=1e-6) -> float:
    """Largest |sum_y' (Pr(y'|x) - delta) x'(y').(x'(y')/2 - n x + (n-1) xhat)| on the support."""
    batch = _coerce_batch(batch)
    ws = forward(codebook, model, topology, kernel, batch.samples)
    r = codebook.recon
    # renormalise so the Pr - delta factor cancels exactly when the posterior is one-hot
    post = ws.post / ws.post.sum(axis=1, keepdims=True)
    xhat = post @ r
    # s[b, y'] = x'(y') . (x'(y')/2 - n x_b + (n-1) xhat_b)
    s = 0.5 * np.sum(r * r, axis=1)[None, :] + (ws.x * -n + (n - 1) * xhat) @ r.T
    expected = np.sum(post * s, axis=1, keepdims=True)        # sum_y' Pr(y'|x) s_y'
    bracket = expected - s                                     # value for each y
    live = post > mass_floor
    if not np.any(live):
        return 0.0
    return float(np.max(np.abs(bracket[live])))


# --- joint vs factorial ----------------------------------------------------

@dataclass
class EncodingLabel:
    label: str
    ratios: np.ndarray        # per-code min(V1, V2) / max(V1, V2); NaN for inactive codes
    active: np.ndarray
    factorial_fraction: float


def torus_grid(resolution):
    theta = np.linspace(0.0, 2.0 * np.pi, resolution, endpoint=False)
    t1, t2 = np.meshgrid(theta, theta, indexing="ij")
    x = np.stack([np.cos(t1), np.sin(t1), np.cos(t2), np.sin(t2)], axis=-1)
    return theta, x.reshape(-1, 4)


def classify_posterior_grid(grid, ratio_threshold=0.25, majority=0.75) -> EncodingLabel:
    """Label a (G, G, M) table of Pr(y | theta1, theta2)."""
    grid = np.asarray(grid, dtype=float)
    m = grid.shape[2]
    v1 = grid.mean(axis=1).var(axis=0)     # variation with theta1 of the theta2-average
    v2 = grid.mean(axis=0).var(axis=0)
    active = grid.max(axis=(0, 1)) >= 1.0 / (10.0 * m)
    hi = np.maximum(v1, v2)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratios = np.where(hi > 0, np.minimum(v1, v2) / hi, 1.0)
    ratios = np.where(active, ratios, np.nan)
    if not np.any(active):
        return EncodingLabel("mixed", ratios, active, float("nan"))
    frac = float(np.mean(ratios[active] < ratio_threshold))
    if frac >= majority:
        label = "factorial"
    elif frac <= 1.0 - majority:
        label = "joint"
    else:
        label = "mixed"
    return EncodingLabel(label, ratios, active, frac)


def classify_encoding(codebook, model, topology, kernel, resolution=64, **kwargs) -> EncodingLabel:
    if model.dim != 4:
        raise ConfigurationError("classify_encoding needs a torus (dim 4) model")
    _, x = torus_grid(resolution)
    grid = posterior(model, topology, kernel, x).reshape(resolution, resolution, -1)
    return classify_posterior_grid(grid, **kwargs)


# --- circle ----------------------------------------------------------------

def arc_profile(codebook, model, topology, kernel, y, resolution=1024):
    """Pr(y | (cos t, sin t)) on a uniform grid and the measure of {t : Pr > max/2}."""
    if model.dim != 2:
        raise ConfigurationError("arc_profile needs a circle (dim 2) model")
    theta = np.linspace(0.0, 2.0 * np.pi, resolution, endpoint=False)
    x = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    prof = posterior(model, topology, kernel, x)[:, y]
    above = prof >= 0.5 * prof.max() - 1e-15
    return theta, prof, float(above.mean() * 2.0 * np.pi)


# --- localisation ----------------------------------------------------------

def _circular_runs(mask):
    mask = np.asarray(mask, dtype=bool)
    if mask.all():
        return 1
    # count rising edges on the ring
    return int(np.sum(mask & ~np.roll(mask, 1)))


def localization_metrics(codebook: Codebook):
    """Per-row participation ratio over dim and the count of circular half-max runs.

    Runs are counted above the midpoint between each row's minimum and maximum,
    so a constant baseline does not merge separate bumps.
    """
    v = codebook.recon
    sq = np.sum(v * v, axis=1)
    quart = np.sum(v ** 4, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        pr = np.where(quart > 0, sq * sq / quart, 0.0) / v.shape[1]
    lo, hi = v.min(axis=1, keepdims=True), v.max(axis=1, keepdims=True)
    runs = np.array([_circular_runs(row >= l + 0.5 * (h - l) - 1e-12)
                     for row, l, h in zip(v, lo[:, 0], hi[:, 0])])
    return pr, runs


# --- waveforms -------------------------------------------------------------

def cyclic_correlation(a, b) -> np.ndarray:
    """Normalised (mean-removed) cross-correlation of a with every cyclic shift of b."""
    a = np.asarray(a, dtype=float) - np.mean(a)
    b = np.asarray(b, dtype=float) - np.mean(b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return np.zeros(len(a))
    # entry s correlates a with b shifted right by s
    corr = np.real(np.fft.ifft(np.fft.fft(a) * np.conj(np.fft.fft(b))))
    return corr / (na * nb)


@dataclass
class WaveformMatch:
    code: int
    reference: int
    correlation: float
    shift: int
    all_correlations: tuple


def match_waveforms(codebook: Codebook, references) -> list:
    out = []
    for y, row in enumerate(codebook.recon):
        best = []
        for ref in references:
            if len(ref) != codebook.dim:
                raise ConfigurationError("reference waveform length differs from codebook dim")
            c = cyclic_correlation(row, ref)
            best.append((float(c.max()), int(np.argmax(c))))
        k = int(np.argmax([b[0] for b in best]))
        out.append(WaveformMatch(y, k, best[k][0], best[k][1], tuple(b[0] for b in best)))
    return out


def active_codes(codebook, model, topology, kernel, data, floor=None) -> np.ndarray:
    """Codes whose mean posterior mass over ``data`` is at least 1/(10 M)."""
    p = posterior(model, topology, kernel, data).mean(axis=0)
    floor = 1.0 / (10.0 * codebook.num_codes) if floor is None else floor
    return p >= floor


# --- spike periods ---------------------------------------------------------

def dominant_period(series, min_lag=5, max_lag=None) -> float:
    """Lag of the first major autocorrelation peak (parabolic refinement)."""
    s = np.asarray(series, dtype=float)
    s = s - s.mean()
    n = len(s)
    max_lag = max_lag or n // 4
    spec = np.fft.rfft(s, 2 * n)
    ac = np.fft.irfft(spec * np.conj(spec))[:max_lag + 2]
    if ac[0] <= 0:
        return float("nan")
    ac = ac / ac[0]
    peaks = [k for k in range(max(min_lag, 1), max_lag + 1) if ac[k] >= ac[k - 1] and ac[k] >= ac[k + 1]]
    if not peaks:
        return float("nan")
    top = max(ac[k] for k in peaks)
    k = next(k for k in peaks if ac[k] >= 0.5 * top)
    a, b, c = ac[k - 1], ac[k], ac[k + 1]
    denom = a - 2 * b + c
    return float(k + (0.5 * (a - c) / denom if denom != 0 else 0.0))


# --- topographic order -----------------------------------------------------

def _cosine(a, b):
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    return np.sum(a * b, axis=-1) / np.maximum(na * nb, 1e-300)


def topographic_order(codebook: Codebook, topology, rng, pairs=1000) -> float:
    """Mean cosine similarity of adjacent rows minus that of random non-adjacent pairs."""
    if topology.num_codes != codebook.num_codes:
        raise ConfigurationError("topology and codebook disagree on M")
    v = codebook.recon - codebook.recon.mean(axis=0)
    adj = topology.adjacent_pairs()
    near = _cosine(v[adj[:, 0]], v[adj[:, 1]]).mean()
    dist = topology.chebyshev()
    m = codebook.num_codes
    i = rng.integers(0, m, 4 * pairs)
    j = rng.integers(0, m, 4 * pairs)
    keep = dist[i, j] > 1.5
    i, j = i[keep][:pairs], j[keep][:pairs]
    far = _cosine(v[i], v[j]).mean()
    return float(near - far)


# --- images ----------------------------------------------------------------

@dataclass
class ImageCoding:
    activity: np.ndarray         # per-code max posterior over positions, grid-shaped
    reconstruction: ImageData
    sparsity: float
    posteriors: np.ndarray       # (positions, M)
    positions: np.ndarray


def _positions(size, window, stride):
    pos = list(range(0, size - window + 1, stride))
    if pos[-1] != size - window:
        pos.append(size - window)
    return pos


def encode_image(codebook, model, topology, kernel, img: ImageData, window, stride) -> ImageCoding:
    """Slide a window over ``img``, encode each patch and rebuild the image.

    The reconstruction averages the overlapping mean-reconstruction patches.
    Positions cover the whole image; a final window is added flush with the
    right and bottom edges when the stride does not land there.
    """
    if window > min(img.width, img.height):
        raise ConfigurationError("window does not fit the image")
    rows = _positions(img.height, window, stride)
    cols = _positions(img.width, window, stride)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    rr, cc = rr.ravel(), cc.ravel()
    patches = extract_patches(img, window, rr, cc)
    post = posterior(model, topology, kernel, patches)
    recon_patches = post @ codebook.recon
    acc = np.zeros_like(img.pixels)
    cnt = np.zeros_like(img.pixels)
    for k, (r, c) in enumerate(zip(rr, cc)):
        acc[r:r + window, c:c + window] += recon_patches[k].reshape(window, window)
        cnt[r:r + window, c:c + window] += 1.0
    recon = np.where(cnt > 0, acc / np.maximum(cnt, 1.0), 0.0)
    activity = post.max(axis=0)
    sparsity = float(np.mean(activity >= 0.5 * activity.max()))
    return ImageCoding(activity.reshape(topology.rows, topology.cols), ImageData(recon),
                       sparsity, post, np.stack([rr, cc], axis=1))


reconstruct_image = encode_image


@dataclass
class DominanceMap:
    labels: np.ndarray           # grid-shaped, 1 where image a dominates
    difference: np.ndarray       # mean response to a minus mean response to b
    contiguity: float


def label_contiguity(labels, topology) -> float:
    flat = np.asarray(labels).reshape(-1)
    adj = topology.adjacent_pairs()
    if len(adj) == 0:
        return float("nan")
    return float(np.mean(flat[adj[:, 0]] == flat[adj[:, 1]]))


def dominance_map(codebook, model, topology, kernel, image: ImageData, window, rng,
                  patches=2000) -> DominanceMap:
    """Per code, whether the even-parity (a) or odd-parity (b) pixels drive it harder.

    ``image`` is the preprocessed interdigitated image. Windows are sampled at
    even (row + col) offsets, so inside every window the even-parity pixels
    come from image a. Each patch is presented twice, once with the b pixels
    zeroed and once with the a pixels zeroed.
    """
    h, w = image.height, image.width
    r = rng.integers(0, h - window + 1, 4 * patches)
    c = rng.integers(0, w - window + 1, 4 * patches)
    keep = (r + c) % 2 == 0
    r, c = r[keep][:patches], c[keep][:patches]
    x = extract_patches(image, window, r, c)
    mask = parity_mask((window, window)).reshape(-1)
    resp_a = posterior(model, topology, kernel, np.where(mask, x, 0.0)).mean(axis=0)
    resp_b = posterior(model, topology, kernel, np.where(mask, 0.0, x)).mean(axis=0)
    diff = resp_a - resp_b
    labels = (diff > 0).astype(int)
    grid = labels.reshape(topology.rows, topology.cols)
    return DominanceMap(grid, diff.reshape(topology.rows, topology.cols),
                        label_contiguity(labels, topology))


def even_parity_source(image: ImageData, window):
    """Patch sampler restricted to even (row + col) offsets."""
    def source(rng, count):
        out = np.empty((count, window * window))
        filled = 0
        while filled < count:
            r = rng.integers(0, image.height - window + 1, 2 * (count - filled))
            c = rng.integers(0, image.width - window + 1, 2 * (count - filled))
            keep = (r + c) % 2 == 0
            r, c = r[keep][:count - filled], c[keep][:count - filled]
            out[filled:filled + len(r)] = extract_patches(image, window, r, c)
            filled += len(r)
        return out
    return source


# --- stability sweep -------------------------------------------------------

SWEEP_HEADER = ["M", "n", "seeds", "factorial", "joint", "mixed", "failed", "factorial_fraction"]


def _sweep_cell(args):
    m, n, seed, config = args
    cfg = TrainConfig(**{**config, "n": n, "seed": seed})
    init_rng, data_rng = seeded_rngs(seed)
    codebook, model = init_model(4, m, cfg.init_scale, init_rng)
    topology = Topology.full(m)
    kernel = LeakageKernel.identity(m)
    try:
        res = train(codebook, model, topology, kernel, cfg, sample_torus, data_rng=data_rng)
        return classify_encoding(res.codebook, res.model, topology, kernel).label
    except SVQError:
        return "failed"


def stability_sweep(m_values, n_values, seeds, config=None, workers=1) -> list:
    """Train and classify one torus model per (M, n, seed); one summary row per (M, n).

    Diverged or degenerate runs count as failed cells. ``config`` holds
    ``TrainConfig`` keyword overrides shared by every cell.
    """
    config = dict(config or {})
    seeds = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    cells = [(int(m), int(n), int(s), config) for m in m_values for n in n_values for s in seeds]
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            labels = list(pool.map(_sweep_cell, cells))
    else:
        labels = [_sweep_cell(c) for c in cells]
    rows = []
    k = 0
    for m in m_values:
        for n in n_values:
            chunk = labels[k:k + len(seeds)]
            k += len(seeds)
            counts = {lab: chunk.count(lab) for lab in ("factorial", "joint", "mixed", "failed")}
            done = len(chunk) - counts["failed"]
            frac = counts["factorial"] / done if done else float("nan")
            rows.append([int(m), int(n), len(chunk), counts["factorial"], counts["joint"],
                         counts["mixed"], counts["failed"], frac])
    return rows


# --- writers ---------------------------------------------------------------

def write_rows_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for row in rows:
            out.writerow([repr(v) if isinstance(v, float) else v for v in row])
