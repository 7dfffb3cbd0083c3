"""Model representation and forward computations for the stochastic vector quantiser.

Codes are stored 0-based internally. Anything written to a report uses
1-based code numbers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

LAYOUTS = ("ring", "line", "grid")


class SVQError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(SVQError, ValueError):
    """Inconsistent shapes, sizes or parameters."""


class DegenerateResponseError(SVQError, FloatingPointError):
    """Every response in some normalisation context underflowed to zero."""

    def __init__(self, message, context=None):
        super().__init__(message)
        self.context = context


@dataclass
class Codebook:
    """Reconstruction vectors, one row per code."""

    recon: np.ndarray

    def __post_init__(self):
        self.recon = np.array(self.recon, dtype=float, ndmin=2)
        if self.recon.ndim != 2 or self.recon.shape[0] < 1 or self.recon.shape[1] < 1:
            raise ConfigurationError(f"codebook must be a non-empty M x dim matrix, got {self.recon.shape}")
        if not np.all(np.isfinite(self.recon)):
            raise ConfigurationError("codebook contains non-finite entries")

    @property
    def num_codes(self) -> int:
        return self.recon.shape[0]

    @property
    def dim(self) -> int:
        return self.recon.shape[1]

    def copy(self) -> "Codebook":
        return Codebook(self.recon.copy())


@dataclass
class ResponseModel:
    """Sigmoid response parameters: a weight row and a bias per code."""

    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=float, ndmin=2)
        self.biases = np.array(self.biases, dtype=float).reshape(-1)
        if self.weights.shape[0] != self.biases.shape[0]:
            raise ConfigurationError(
                f"{self.weights.shape[0]} weight rows but {self.biases.shape[0]} biases")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.biases))):
            raise ConfigurationError("response model contains non-finite entries")

    @property
    def num_codes(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "ResponseModel":
        return ResponseModel(self.weights.copy(), self.biases.copy())


@dataclass(frozen=True)
class Topology:
    """Layout of the code array and the lateral-inhibition neighbourhood.

    ``layout`` is one of ``ring``, ``line`` or ``grid``. Neighbourhoods are
    Chebyshev balls of ``neighbourhood_radius`` in layout coordinates;
    non-wrapping layouts truncate them at the array edge.
    """

    layout: str
    rows: int
    cols: int = 1
    wrap: bool = False
    neighbourhood_radius: int = 0

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ConfigurationError(f"unknown layout {self.layout!r}")
        if self.rows < 1 or self.cols < 1:
            raise ConfigurationError("layout sizes must be positive")
        if self.layout != "grid" and self.cols != 1:
            raise ConfigurationError(f"{self.layout} layout is one-dimensional")
        if self.neighbourhood_radius < 0:
            raise ConfigurationError("neighbourhood_radius must be non-negative")
        if self.layout == "ring":
            object.__setattr__(self, "wrap", True)
        elif self.layout == "line":
            object.__setattr__(self, "wrap", False)

    @classmethod
    def ring(cls, m, radius=0):
        return cls("ring", m, 1, True, radius)

    @classmethod
    def line(cls, m, radius=0):
        return cls("line", m, 1, False, radius)

    @classmethod
    def grid(cls, rows, cols, wrap=False, radius=0):
        return cls("grid", rows, cols, wrap, radius)

    @classmethod
    def full(cls, m):
        """Single neighbourhood spanning every code (infinite-range posterior)."""
        return cls("line", m, 1, False, max(m - 1, 0))

    @property
    def num_codes(self) -> int:
        return self.rows * self.cols

    @property
    def extent(self) -> int:
        """Largest Chebyshev distance between two codes."""
        if self.wrap:
            return max(self.rows // 2, self.cols // 2)
        return max(self.rows - 1, self.cols - 1)

    def positions(self) -> np.ndarray:
        """(M, 2) array of (row, col) coordinates in storage order."""
        r, c = np.divmod(np.arange(self.num_codes), self.cols)
        return np.stack([r, c], axis=1).astype(float)

    def offsets(self) -> np.ndarray:
        """(M, M, 2) signed per-axis displacements, toroidal when wrapping."""
        pos = self.positions()
        delta = pos[None, :, :] - pos[:, None, :]
        if self.wrap:
            size = np.array([self.rows, self.cols], dtype=float)
            delta = delta - size * np.round(delta / size)
        return delta

    def chebyshev(self) -> np.ndarray:
        return np.abs(self.offsets()).max(axis=2)

    def membership(self, radius=None) -> np.ndarray:
        """Boolean ``A`` with ``A[y, y2]`` true when code y lies in N(y2)."""
        radius = self.neighbourhood_radius if radius is None else radius
        return self.chebyshev() <= radius + 1e-9

    def neighbours(self, y: int) -> np.ndarray:
        return np.flatnonzero(self.membership()[:, y])

    def adjacent_pairs(self) -> np.ndarray:
        """Distinct code pairs at Chebyshev distance exactly 1 (i < j)."""
        dist = self.chebyshev()
        i, j = np.nonzero(np.triu(np.abs(dist - 1.0) < 1e-9, k=1))
        return np.stack([i, j], axis=1)


@dataclass
class LeakageKernel:
    """Column-stochastic leak table: ``matrix[y, y2] = Pr(y | y2)``."""

    matrix: np.ndarray
    radius: int = 0
    sigma: float = 1.0
    notes: list = field(default_factory=list)

    def __post_init__(self):
        self.matrix = np.array(self.matrix, dtype=float)
        m = self.matrix
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ConfigurationError(f"leakage matrix must be square, got {m.shape}")
        if np.any(m < 0):
            raise ConfigurationError("leakage probabilities must be non-negative")
        if not np.allclose(m.sum(axis=0), 1.0, atol=1e-12, rtol=0):
            raise ConfigurationError("every leakage column must sum to 1")

    @property
    def num_codes(self) -> int:
        return self.matrix.shape[0]

    @property
    def is_identity(self) -> bool:
        return bool(np.array_equal(self.matrix, np.eye(self.num_codes)))

    @classmethod
    def identity(cls, m):
        return cls(np.eye(m), 0, 1.0)


def build_gaussian_leakage(topology: Topology, radius: int, sigma: float) -> LeakageKernel:
    """Discretised Gaussian leakage truncated to a Chebyshev window.

    Weights are ``exp(-|pos(y) - pos(y2)|^2 / (2 sigma^2))`` for every y within
    ``radius`` of the source y2, renormalised so each source leaks unit mass.
    """
    if not sigma > 0:
        raise ConfigurationError("leakage sigma must be positive")
    if radius < 0:
        raise ConfigurationError("leakage radius must be non-negative")
    notes = []
    if radius > topology.extent:
        msg = f"leakage radius {radius} exceeds layout extent {topology.extent}; clipped"
        warnings.warn(msg, stacklevel=2)
        notes.append(msg)
        radius = topology.extent
    if radius == 0:
        return LeakageKernel(np.eye(topology.num_codes), 0, sigma, notes)
    delta = topology.offsets()
    sq = (delta ** 2).sum(axis=2)
    inside = np.abs(delta).max(axis=2) <= radius + 1e-9
    table = np.where(inside, np.exp(-sq / (2.0 * sigma * sigma)), 0.0)
    table /= table.sum(axis=0, keepdims=True)
    return LeakageKernel(table, radius, sigma, notes)


def _check_input(model: ResponseModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.dim:
        raise ConfigurationError(f"input has dimension {x.shape[-1]}, model expects {model.dim}")
    return x


def activation(model: ResponseModel, x) -> np.ndarray:
    """Sigmoid arguments ``w(y).x + b(y)``; last axis runs over codes."""
    x = _check_input(model, x)
    return x @ model.weights.T + model.biases


def response(model: ResponseModel, y: int, x) -> float:
    """Sigmoid response Q(x|y) of code ``y`` (0-based) to a single input."""
    if not 0 <= y < model.num_codes:
        raise ConfigurationError(f"code index {y} out of range 0..{model.num_codes - 1}")
    x = _check_input(model, x)
    if x.ndim != 1:
        raise ConfigurationError("response takes a single input vector")
    return float(expit(model.weights[y] @ x + model.biases[y]))


def responses(model: ResponseModel, x) -> np.ndarray:
    return expit(activation(model, x))


def _normalisers(q: np.ndarray, member: np.ndarray) -> np.ndarray:
    z = q @ member
    bad = z <= 0.0
    if np.any(bad):
        ctx = int(np.argwhere(bad)[0][-1])
        raise DegenerateResponseError(
            f"all responses in the neighbourhood of code {ctx + 1} underflowed to zero", ctx)
    return z


def posterior_infinite(model: ResponseModel, x) -> np.ndarray:
    """Pr(y|x) = Q(x|y) / sum_y' Q(x|y'). Accepts one input or a batch."""
    q = responses(model, x)
    z = q.sum(axis=-1, keepdims=True)
    if np.any(z <= 0.0):
        raise DegenerateResponseError("all responses underflowed to zero")
    return q / z


def posterior_finite(model: ResponseModel, topology: Topology, x) -> np.ndarray:
    """Neighbourhood-normalised posterior averaged over all M contexts."""
    if topology.num_codes != model.num_codes:
        raise ConfigurationError("topology and response model disagree on M")
    member = topology.membership().astype(float)
    q = responses(model, x)
    z = _normalisers(q, member)
    return q * ((1.0 / z) @ member.T) / model.num_codes


def apply_leakage(kernel: LeakageKernel, posterior) -> np.ndarray:
    posterior = np.asarray(posterior, dtype=float)
    if posterior.shape[-1] != kernel.num_codes:
        raise ConfigurationError("posterior and leakage kernel disagree on M")
    return posterior @ kernel.matrix.T


def posterior(model: ResponseModel, topology: Topology, kernel: LeakageKernel, x) -> np.ndarray:
    """Leakage-smoothed finite-neighbourhood posterior (the full forward model)."""
    return apply_leakage(kernel, posterior_finite(model, topology, x))


def encode(probs, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` codes from ``probs`` by inverse CDF in ascending code order."""
    if n < 1:
        raise ConfigurationError("sample count n must be at least 1")
    cdf = np.cumsum(np.asarray(probs, dtype=float))
    u = rng.random(n) * cdf[-1]
    codes = np.searchsorted(cdf, u, side="right")
    return np.minimum(codes, len(cdf) - 1)


def reconstruct(codebook: Codebook, sample) -> np.ndarray:
    sample = np.asarray(sample, dtype=int)
    if np.any(sample < 0) or np.any(sample >= codebook.num_codes):
        raise ConfigurationError("code sample contains an invalid code")
    return codebook.recon[sample].mean(axis=0)


def mean_reconstruction(codebook: Codebook, probs) -> np.ndarray:
    probs = np.asarray(probs, dtype=float)
    if probs.shape[-1] != codebook.num_codes:
        raise ConfigurationError("posterior and codebook disagree on M")
    return probs @ codebook.recon


# --- persistence -----------------------------------------------------------

_FORMAT = "svq-model 1"


def _fmt(v: float) -> str:
    return repr(float(v))


def save_model(path, codebook: Codebook, model: ResponseModel, topology: Topology,
               kernel: LeakageKernel) -> None:
    """Write a self-describing text model file (full ``repr`` precision)."""
    with open(path, "w") as fh:
        fh.write(dumps_model(codebook, model, topology, kernel))


def dumps_model(codebook, model, topology, kernel) -> str:
    m, d = codebook.num_codes, codebook.dim
    if model.num_codes != m or model.dim != d or topology.num_codes != m or kernel.num_codes != m:
        raise ConfigurationError("model parts disagree on M or dim")
    lines = [
        _FORMAT,
        f"dim {d}",
        f"codes {m}",
        f"layout {topology.layout} {topology.rows} {topology.cols} {int(topology.wrap)}",
        f"neighbourhood_radius {topology.neighbourhood_radius}",
        f"leakage {kernel.radius} {_fmt(kernel.sigma)}",
        "biases " + " ".join(_fmt(v) for v in model.biases),
        "weights",
    ]
    lines += [" ".join(_fmt(v) for v in row) for row in model.weights]
    lines.append("recon")
    lines += [" ".join(_fmt(v) for v in row) for row in codebook.recon]
    lines.append("leak_matrix")
    lines += [" ".join(_fmt(v) for v in row) for row in kernel.matrix]
    return "\n".join(lines) + "\n"


def load_model(path):
    with open(path) as fh:
        return loads_model(fh.read())


def loads_model(text: str):
    """Inverse of :func:`dumps_model`; returns (codebook, model, topology, kernel)."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != _FORMAT:
        raise ConfigurationError("not an svq model file")
    it = iter(lines[1:])

    def field_line(name):
        parts = next(it).split()
        if parts[0] != name:
            raise ConfigurationError(f"expected {name!r}, found {parts[0]!r}")
        return parts[1:]

    d = int(field_line("dim")[0])
    m = int(field_line("codes")[0])
    kind, rows, cols, wrap = field_line("layout")
    radius = int(field_line("neighbourhood_radius")[0])
    leak_radius, leak_sigma = field_line("leakage")
    biases = [float(v) for v in field_line("biases")]

    def block(name, nrows):
        field_line(name)
        return np.array([[float(v) for v in next(it).split()] for _ in range(nrows)]).reshape(nrows, -1)

    weights = block("weights", m)
    recon = block("recon", m)
    leak = block("leak_matrix", m)
    topology = Topology(kind, int(rows), int(cols), bool(int(wrap)), radius)
    kernel = LeakageKernel(leak, int(leak_radius), float(leak_sigma))
    if weights.shape != (m, d) or recon.shape != (m, d):
        raise ConfigurationError("model file blocks have inconsistent shapes")
    return Codebook(recon), ResponseModel(weights, np.array(biases)), topology, kernel


def chebyshev_radius_for_window(window: int) -> int:
    """Radius of a square ``window x window`` neighbourhood (window odd)."""
    if window < 1 or window % 2 == 0:
        raise ConfigurationError("window sizes must be odd and positive")
    return (window - 1) // 2


__all__ = [
    "Codebook", "ResponseModel", "Topology", "LeakageKernel", "SVQError",
    "ConfigurationError", "DegenerateResponseError", "activation", "response",
    "responses", "posterior_infinite", "posterior_finite", "apply_leakage",
    "posterior", "build_gaussian_leakage", "encode", "reconstruct",
    "mean_reconstruction", "save_model", "load_model", "dumps_model",
    "loads_model", "chebyshev_radius_for_window",
]
