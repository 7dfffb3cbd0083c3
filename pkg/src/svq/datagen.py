"""Seeded synthetic data generators and image preprocessing.

Samplers follow numpy's ``size`` convention: ``size=None`` returns one
vector, an integer returns a ``(size, dim)`` array.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, signal

from .core import ConfigurationError

KINDS = ("circle", "torus", "multi_targets", "correlated_pair", "waveforms",
         "ecg_synth", "texture", "interdigitated")


def _finish(out, size):
    return out[0] if size is None else out


def _count(size):
    return 1 if size is None else int(size)


def sample_circle(rng, size=None):
    theta = rng.uniform(0.0, 2.0 * np.pi, _count(size))
    return _finish(np.stack([np.cos(theta), np.sin(theta)], axis=1), size)


def sample_torus(rng, size=None):
    t = rng.uniform(0.0, 2.0 * np.pi, (_count(size), 2))
    out = np.stack([np.cos(t[:, 0]), np.sin(t[:, 0]), np.cos(t[:, 1]), np.sin(t[:, 1])], axis=1)
    return _finish(out, size)


def bump(dim, center, sigma):
    """Unit-height Gaussian bump on a ring of ``dim`` pixels."""
    k = np.arange(dim)[None, :] - np.asarray(center, dtype=float).reshape(-1, 1)
    k = (k + dim / 2.0) % dim - dim / 2.0
    return np.exp(-k ** 2 / (2.0 * sigma ** 2))


def sample_multi_targets(rng, dim=32, num_targets=2, size=None, sigma=2.0, noise_high=0.5):
    """Sum of unit-height bumps at independent uniform integer centres plus U[0, noise_high] noise."""
    if dim < 8:
        raise ConfigurationError("multi_targets needs dim >= 8")
    count = _count(size)
    out = rng.uniform(0.0, noise_high, (count, dim)) if noise_high > 0 else np.zeros((count, dim))
    for _ in range(num_targets):
        out += bump(dim, rng.integers(0, dim, count), sigma)
    return _finish(out, size)


def sample_correlated_pair(rng, dim=32, separation_range=(6, 10), size=None, sigma=1.5):
    """Two bumps, the second a uniform integer separation after the first (wrapping)."""
    lo, hi = separation_range
    if not (0 < lo <= hi < dim / 2):
        raise ConfigurationError(f"separation range {separation_range} must satisfy 0 < min <= max < dim/2")
    count = _count(size)
    first = rng.integers(0, dim, count)
    sep = rng.integers(lo, hi + 1, count)
    out = bump(dim, first, sigma) + bump(dim, (first + sep) % dim, sigma)
    return _finish(out, size)


def reference_waveforms(dim=64, square_amplitude=0.5):
    """The two generator waveforms: a 2-cycle sinusoid and a period dim/4 square wave."""
    t = np.arange(dim)
    sine = np.sin(2.0 * np.pi * 2.0 * t / dim)
    period = dim // 4
    square = np.where((t % period) < period // 2, square_amplitude, -square_amplitude).astype(float)
    return sine, square


def sample_waveforms(rng, dim=64, size=None, noise_std=0.05, square_amplitude=0.5):
    """Sinusoid and square wave at independent uniform cyclic shifts, plus Gaussian noise."""
    if dim < 16 or dim % 8:
        raise ConfigurationError("waveforms needs dim >= 16 and a multiple of 8")
    count = _count(size)
    sine, square = reference_waveforms(dim, square_amplitude)
    idx = np.arange(dim)
    s1 = rng.integers(0, dim, count)
    s2 = rng.integers(0, dim, count)
    out = sine[(idx[None, :] - s1[:, None]) % dim] + square[(idx[None, :] - s2[:, None]) % dim]
    if noise_std > 0:
        out = out + rng.normal(0.0, noise_std, (count, dim))
    return _finish(out, size)


def spike_train(length, period, phase=0.0, width=1.0):
    """Periodic train of unit Gaussian pulses at ``phase + k * period``."""
    t = np.arange(length, dtype=float)
    rel = (t - phase) % period
    dist = np.minimum(rel, period - rel)
    return np.exp(-dist ** 2 / (2.0 * width ** 2))


@dataclass
class EcgRecording:
    """Synthetic maternal + foetal ECG: latent trains, mixing matrix and the mixture."""

    latent: np.ndarray      # (length, 2): maternal, foetal
    mixing: np.ndarray      # (channels, 2)
    signals: np.ndarray     # (length, channels)
    maternal_period: float
    foetal_period: float


def sample_ecg_synth(rng, channels=8, length=20000, maternal_period=60.0, ratio=1.8,
                     foetal_amplitude=0.25, noise_std=0.1, width=1.5):
    """Two incommensurate spike trains mixed into ``channels`` noisy channels."""
    if channels < 2:
        raise ConfigurationError("ecg_synth needs at least 2 channels")
    foetal_period = maternal_period / ratio
    mixing = rng.normal(size=(channels, 2))
    phases = rng.uniform(0.0, [maternal_period, foetal_period])
    latent = np.stack([
        spike_train(length, maternal_period, phases[0], width),
        foetal_amplitude * spike_train(length, foetal_period, phases[1], width),
    ], axis=1)
    clean = latent @ mixing.T
    noisy = clean + rng.normal(0.0, noise_std, clean.shape) if noise_std > 0 else clean
    return EcgRecording(latent, mixing, noisy, maternal_period, foetal_period)


@dataclass
class WhiteningTransform:
    mean: np.ndarray
    matrix: np.ndarray

    def apply(self, batch):
        return (np.asarray(batch, dtype=float) - self.mean) @ self.matrix.T


def whiten(batch, rank_tol=1e-10):
    """Zero-mean, identity-covariance copy via the symmetric inverse square root."""
    x = np.array(batch, dtype=float, ndmin=2)
    if x.shape[0] < 2:
        raise ConfigurationError("whitening needs at least two samples")
    mean = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False, bias=True))
    evals, evecs = np.linalg.eigh(cov)
    null = int(np.sum(evals <= rank_tol * max(evals.max(), 1e-300)))
    if null:
        raise ConfigurationError(f"covariance is rank deficient ({null} null direction(s))")
    transform = WhiteningTransform(mean, (evecs / np.sqrt(evals)) @ evecs.T)
    return transform.apply(x), transform


@dataclass
class ImageData:
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.array(self.pixels, dtype=float)
        if self.pixels.ndim != 2 or min(self.pixels.shape) < 1:
            raise ConfigurationError("images must be non-empty 2-D arrays")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


def _oriented_kernel(sigma_long, sigma_short, angle, radius):
    r = np.arange(-radius, radius + 1, dtype=float)
    yy, xx = np.meshgrid(r, r, indexing="ij")
    u = xx * np.cos(angle) + yy * np.sin(angle)
    v = -xx * np.sin(angle) + yy * np.cos(angle)
    k = np.exp(-u ** 2 / (2 * sigma_long ** 2) - v ** 2 / (2 * sigma_short ** 2))
    return k / k.sum()


def _rescale(img):
    lo, hi = img.min(), img.max()
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.full_like(img, 0.5)
    return (img - lo) / (hi - lo)


def make_texture(rng, width=128, height=128, correlation_length=7.0, orientation_bands=False,
                 kernel=None):
    """Filtered Gaussian noise with autocorrelation falling below 1/e by ``correlation_length``.

    The isotropic filter is a difference of Gaussians (centre width
    ``correlation_length / 2.5``, surround 2.5x wider at a quarter weight), so
    the texture is band-pass rather than simple blur. With
    ``orientation_bands`` the image is split into horizontal bands, each
    filtered by an elongated kernel at its own orientation. An explicit
    ``kernel`` replaces the filter entirely (circular convolution).
    """
    if not 2.0 <= correlation_length <= 20.0:
        raise ConfigurationError("correlation_length must lie in [2, 20]")
    noise = rng.normal(size=(height, width))
    if kernel is not None:
        kernel = np.asarray(kernel, dtype=float)
        spectrum = np.fft.fft2(noise) * np.fft.fft2(kernel, s=noise.shape)
        return ImageData(_rescale(np.real(np.fft.ifft2(spectrum))))
    s = correlation_length / 2.5
    if not orientation_bands:
        img = (ndimage.gaussian_filter(noise, s, mode="wrap")
               - 0.25 * ndimage.gaussian_filter(noise, 2.5 * s, mode="wrap"))
        return ImageData(_rescale(img))
    bands = 4
    angles = rng.uniform(0.0, np.pi, bands)
    radius = int(np.ceil(3 * 1.6 * s))
    img = np.empty_like(noise)
    edges = np.linspace(0, height, bands + 1).astype(int)
    for k in range(bands):
        filt = _oriented_kernel(1.6 * s, 0.6 * s, angles[k], radius)
        full = signal.fftconvolve(np.pad(noise, radius, mode="wrap"), filt, mode="valid")
        img[edges[k]:edges[k + 1]] = full[edges[k]:edges[k + 1]]
    return ImageData(_rescale(img))


def autocorrelation(img: ImageData, max_lag: int) -> np.ndarray:
    """Mean normalised autocorrelation along rows and columns for lags 0..max_lag."""
    p = img.pixels - img.pixels.mean()
    var = (p * p).mean()
    out = np.empty(max_lag + 1)
    for lag in range(max_lag + 1):
        if lag == 0:
            out[0] = 1.0
            continue
        h = (p[:, :-lag] * p[:, lag:]).mean()
        v = (p[:-lag, :] * p[lag:, :]).mean()
        out[lag] = 0.5 * (h + v) / var
    return out


def interdigitate(a: ImageData, b: ImageData) -> ImageData:
    """Chessboard merge: ``a`` on even (i + j), ``b`` on odd."""
    if a.pixels.shape != b.pixels.shape:
        raise ConfigurationError(f"image sizes differ: {a.pixels.shape} vs {b.pixels.shape}")
    return ImageData(np.where(parity_mask(a.pixels.shape), a.pixels, b.pixels))


def parity_mask(shape) -> np.ndarray:
    """True where (i + j) is even."""
    i, j = np.indices(shape)
    return (i + j) % 2 == 0


def local_normalize(img: ImageData, window=5, epsilon=1e-3) -> ImageData:
    if window < 3 or window % 2 == 0:
        raise ConfigurationError("local normalisation window must be odd and >= 3")
    p = img.pixels
    mean = ndimage.uniform_filter(p, window, mode="nearest")
    sq = ndimage.uniform_filter(p * p, window, mode="nearest")
    var = np.maximum(sq - mean * mean, 0.0)
    return ImageData((p - mean) / np.sqrt(var + epsilon))


def sample_patch(img: ImageData, window, rng, size=None, return_offsets=False):
    """Row-major window x window patches at uniform positions."""
    if window > min(img.width, img.height) or window < 1:
        raise ConfigurationError(f"window {window} does not fit a {img.height}x{img.width} image")
    count = _count(size)
    r = rng.integers(0, img.height - window + 1, count)
    c = rng.integers(0, img.width - window + 1, count)
    out = extract_patches(img, window, r, c)
    out = _finish(out, size)
    return (out, np.stack([r, c], axis=1)) if return_offsets else out


def extract_patches(img: ImageData, window, rows, cols) -> np.ndarray:
    view = np.lib.stride_tricks.sliding_window_view(img.pixels, (window, window))
    return view[np.asarray(rows), np.asarray(cols)].reshape(len(rows), window * window)


# --- file formats ----------------------------------------------------------

def write_vectors_csv(rows, path, prefix="x") -> None:
    rows = np.array(rows, dtype=float, ndmin=2)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow([f"{prefix}{i + 1}" for i in range(rows.shape[1])])
        for r in rows:
            out.writerow([repr(float(v)) for v in r])


def read_vectors_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def to_bytes(pixels) -> np.ndarray:
    """Clamp to [0, 1] and round half up to 0..255."""
    p = np.clip(np.asarray(pixels, dtype=float), 0.0, 1.0)
    return np.floor(p * 255.0 + 0.5).astype(np.uint8)


def write_pgm(path, pixels, maxval=255, raw=False) -> None:
    """Binary P5 greyscale. ``raw=True`` writes integer labels unscaled."""
    data = np.asarray(pixels)
    if raw:
        data = np.asarray(data, dtype=np.int64)
        if data.min() < 0 or data.max() > maxval:
            raise ConfigurationError("label values out of PGM range")
        data = data.astype(np.uint8)
    else:
        data = to_bytes(data)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        end = pos
        while not blob[end:end + 1].isspace():
            end += 1
        tokens.append(blob[pos:end].decode("ascii"))
        pos = end
    if tokens[0] != "P5":
        raise ConfigurationError("only binary P5 PGM is supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(blob[pos + 1:pos + 1 + w * h], dtype=np.uint8)
    return data.reshape(h, w)
