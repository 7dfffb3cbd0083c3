"""D1 + D2 distortion bound, its hand-coded gradients, and a finite-difference oracle.

Integrals over the input density are replaced by (optionally weighted)
averages over a batch of samples. Per-sample quantities follow the
shorthand used for the gradients:

    P[y, c]  = Pr(y | x; context c)   (zero outside N(c))
    p[y]     = sum_c P[y, c]
    post[y]  = (1/M) (L p)[y]         (leakage-smoothed posterior)
    d[y]     = x - x'(y),   e[y] = |d[y]|^2

Derivatives w.r.t. the posterior are pulled back to the sigmoid arguments
by :func:`posterior_vjp`, which is shared by the single-stage gradients and
the chained encoder.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .core import (
    Codebook,
    ConfigurationError,
    LeakageKernel,
    ResponseModel,
    Topology,
    _normalisers,
    build_gaussian_leakage,
    expit,
)


@dataclass
class Batch:
    samples: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.samples = np.array(self.samples, dtype=float, ndmin=2)
        if self.samples.shape[0] == 0:
            raise ConfigurationError("batch is empty")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
            if self.weights.shape[0] != self.samples.shape[0]:
                raise ConfigurationError("batch weights and samples differ in length")
            if np.any(self.weights < 0) or self.weights.sum() <= 0:
                raise ConfigurationError("batch weights must be non-negative with positive sum")

    def __len__(self):
        return self.samples.shape[0]

    def normalised_weights(self) -> np.ndarray:
        if self.weights is None:
            return np.full(len(self), 1.0 / len(self))
        return self.weights / self.weights.sum()


@dataclass
class GradientWorkspace:
    """Per-sample forward intermediates, batched along axis 0."""

    x: np.ndarray
    act: np.ndarray       # sigmoid arguments, (B, M)
    q: np.ndarray         # responses Q(x|y)
    z: np.ndarray         # neighbourhood normalisers, z[:, c] = sum_{y in N(c)} Q
    p: np.ndarray         # p[:, y] = sum_c P[y, c]
    post: np.ndarray      # leakage-smoothed posterior, (B, M)
    member: np.ndarray    # float membership matrix, member[y, c] = y in N(c)
    leak: np.ndarray      # L[y, c] = Pr(y | c)
    d: np.ndarray         # x - x'(y), (B, M, dim)
    e: np.ndarray         # squared errors, (B, M)
    dbar: np.ndarray      # x - sum_y post[y] x'(y), (B, dim)

    @property
    def num_codes(self):
        return self.q.shape[1]

    def conditional_table(self) -> np.ndarray:
        """Dense (B, M, M) table P[b, y, c]; only for diagnostics and tests."""
        return self.q[:, :, None] * self.member[None] / self.z[:, None, :]


@dataclass(frozen=True)
class ObjectiveValue:
    d1: float
    d2: float

    @property
    def total(self) -> float:
        return self.d1 + self.d2


def _coerce_batch(batch) -> Batch:
    return batch if isinstance(batch, Batch) else Batch(batch)


def forward(codebook: Codebook, model: ResponseModel, topology: Topology,
            kernel: LeakageKernel, x) -> GradientWorkspace:
    x = np.array(x, dtype=float, ndmin=2)
    m = codebook.num_codes
    if not (model.num_codes == topology.num_codes == kernel.num_codes == m):
        raise ConfigurationError("codebook, response model, topology and leakage disagree on M")
    if model.dim != codebook.dim or x.shape[1] != model.dim:
        raise ConfigurationError(
            f"input dim {x.shape[1]}, response dim {model.dim}, codebook dim {codebook.dim}")
    member = topology.membership().astype(float)
    act = x @ model.weights.T + model.biases
    q = expit(act)
    z = _normalisers(q, member)
    p = q * ((1.0 / z) @ member.T)
    post = (p @ kernel.matrix.T) / m
    d = x[:, None, :] - codebook.recon[None, :, :]
    e = np.einsum("bmk,bmk->bm", d, d)
    dbar = x - post @ codebook.recon
    return GradientWorkspace(x, act, q, z, p, post, member, kernel.matrix, d, e, dbar)


def posterior_vjp(ws: GradientWorkspace, g: np.ndarray) -> np.ndarray:
    """Gradient of ``sum_b sum_y post[b, y] g[b, y]`` w.r.t. the sigmoid arguments.

    Differentiates through the leakage, the neighbourhood normalisation and
    the sigmoid: d/dlogQ_k = (1/M) (p_k h_k - (P P^T h)_k) with h = L^T g,
    then multiplies by dlogQ/da = 1 - Q.
    """
    h = g @ ws.leak
    u = ((ws.q * h) @ ws.member) / ws.z
    pp_h = ws.q * ((u / ws.z) @ ws.member.T)
    dlogq = (ws.p * h - pp_h) / ws.num_codes
    return dlogq * (1.0 - ws.q)


def _prefactors(n: int):
    if n < 1:
        raise ConfigurationError("sample count n must be at least 1")
    return 2.0 / n, 2.0 * (n - 1) / n


def objective_from_workspace(ws: GradientWorkspace, n: int, w: np.ndarray) -> ObjectiveValue:
    c1, c2 = _prefactors(n)
    d1 = c1 * float(w @ (ws.post * ws.e).sum(axis=1))
    d2 = c2 * float(w @ np.einsum("bk,bk->b", ws.dbar, ws.dbar))
    return ObjectiveValue(max(d1, 0.0), max(d2, 0.0))


@dataclass
class StageGradient:
    recon: np.ndarray
    weights: np.ndarray
    biases: np.ndarray
    inputs: np.ndarray | None = None


def gradients_from_workspace(ws: GradientWorkspace, n: int, w: np.ndarray,
                             response_weights: np.ndarray | None = None) -> StageGradient:
    """All parameter gradients of the weighted-average D1 + D2.

    Passing ``response_weights`` also returns the per-sample gradient w.r.t.
    the inputs, which a chained encoder pulls back into the previous stage.
    """
    c1, c2 = _prefactors(n)
    # recon: -2 c1 post_y d_y - 2 c2 post_y dbar, averaged over the batch
    wp = w[:, None] * ws.post
    g_recon = -2.0 * c1 * np.einsum("bm,bmk->mk", wp, ws.d) - 2.0 * c2 * wp.T @ ws.dbar
    # dD/dpost_y = c1 e_y + 2 c2 d_y . dbar  (terms constant in y drop out)
    dd_post = c1 * ws.e + 2.0 * c2 * np.einsum("bmk,bk->bm", ws.d, ws.dbar)
    g_act = posterior_vjp(ws, w[:, None] * dd_post)
    out = StageGradient(g_recon, g_act.T @ ws.x, g_act.sum(axis=0))
    if response_weights is not None:
        direct = (2.0 * c1 + 2.0 * c2) * ws.dbar
        out.inputs = w[:, None] * direct + g_act @ response_weights
    return out


def eval_objective(codebook, model, topology, kernel, n, batch) -> ObjectiveValue:
    batch = _coerce_batch(batch)
    ws = forward(codebook, model, topology, kernel, batch.samples)
    return objective_from_workspace(ws, n, batch.normalised_weights())


def grad_recon(codebook, model, topology, kernel, n, batch) -> np.ndarray:
    batch = _coerce_batch(batch)
    ws = forward(codebook, model, topology, kernel, batch.samples)
    return gradients_from_workspace(ws, n, batch.normalised_weights()).recon


def grad_response(codebook, model, topology, kernel, n, batch):
    """(weight gradient (M, dim), bias gradient (M,)) of D1 + D2."""
    batch = _coerce_batch(batch)
    ws = forward(codebook, model, topology, kernel, batch.samples)
    g = gradients_from_workspace(ws, n, batch.normalised_weights())
    return g.weights, g.biases


def estimate_true_distortion(codebook, model, topology, kernel, n, batch, draws, rng):
    """Monte-Carlo estimate of 2 avg_x E|x - mean_i x'(y_i)|^2 and its standard error.

    Every draw encodes each batch sample with ``n`` codes; the draw's value is
    the batch-weighted squared reconstruction error, so the only randomness is
    in the code samples.
    """
    if draws < 1:
        raise ConfigurationError("draws must be at least 1")
    batch = _coerce_batch(batch)
    ws = forward(codebook, model, topology, kernel, batch.samples)
    w = batch.normalised_weights()
    cdf = np.cumsum(ws.post, axis=1)
    values = np.zeros(draws)
    for b in range(len(batch)):
        u = rng.random((draws, n)) * cdf[b, -1]
        codes = np.minimum(np.searchsorted(cdf[b], u, side="right"), codebook.num_codes - 1)
        recon = codebook.recon[codes].mean(axis=1)
        values += w[b] * 2.0 * ((batch.samples[b] - recon) ** 2).sum(axis=1)
    mean = float(values.mean())
    if draws == 1 or np.ptp(values) == 0.0:
        return (float(values[0]) if np.ptp(values) == 0.0 else mean), 0.0
    return mean, float(values.std(ddof=1) / np.sqrt(draws))


# --- finite-difference oracle ----------------------------------------------

def numerical_gradient(f, theta: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at every entry of ``theta`` (in place, restored)."""
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        g[i] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Block-wise relative error: max |a - n| over max |n|, floored at ``floor``."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    scale = max(float(np.max(np.abs(numeric), initial=0.0)), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def random_instance(rng, m, dim, n, layout="ring", radius=1, leak_radius=0, batch_size=8,
                    scale=1.0):
    """Random model + batch for oracle checks."""
    codebook = Codebook(rng.normal(scale=scale, size=(m, dim)))
    model = ResponseModel(rng.normal(scale=scale, size=(m, dim)), rng.normal(scale=scale, size=m))
    if layout == "ring":
        topology = Topology.ring(m, radius)
    else:
        topology = Topology.line(m, radius)
    kernel = build_gaussian_leakage(topology, min(leak_radius, topology.extent), 1.0)
    batch = Batch(rng.normal(size=(batch_size, dim)))
    return codebook, model, topology, kernel, n, batch


def check_instance(codebook, model, topology, kernel, n, batch, step=1e-5, floor=1e-8):
    """Max relative error of each analytic gradient block against central differences."""
    def total():
        return eval_objective(codebook, model, topology, kernel, n, batch).total

    gr = grad_recon(codebook, model, topology, kernel, n, batch)
    gw, gb = grad_response(codebook, model, topology, kernel, n, batch)
    return {
        "recon": relative_error(gr, numerical_gradient(total, codebook.recon, step), floor),
        "weights": relative_error(gw, numerical_gradient(total, model.weights, step), floor),
        "biases": relative_error(gb, numerical_gradient(total, model.biases, step), floor),
    }


@dataclass
class GradCheckRow:
    instance_id: int
    block: str
    max_rel_err: float
    passed: bool


def check_gradients(rng, instances=24, tolerance=1e-5, single=False, step=1e-5):
    """Compare analytic and finite-difference gradients over a seeded family.

    The default family cycles through M <= 8, dim <= 6, n in {1, 2, 5} and
    leakage radius 0 and 1. Neighbourhood radius 0 is left out: it pins the
    posterior at 1/M so the response gradients are exactly zero and the
    comparison would only measure finite-difference round-off.
    ``single=True`` checks one M=2, dim=2, n=2 instance on a ring of radius 1.
    """
    rows = []
    if single:
        configs = [dict(m=2, dim=2, n=2, radius=1, leak_radius=0)]
    else:
        configs = []
        for i in range(instances):
            configs.append(dict(
                m=int(rng.integers(2, 9)), dim=int(rng.integers(1, 7)),
                n=(1, 2, 5)[i % 3], radius=int(rng.integers(1, 3)),
                leak_radius=i % 2))
    for i, cfg in enumerate(configs):
        inst = random_instance(rng, cfg["m"], cfg["dim"], cfg["n"], radius=cfg["radius"],
                               leak_radius=cfg["leak_radius"])
        for block, err in check_instance(*inst, step=step).items():
            rows.append(GradCheckRow(i, block, err, err <= tolerance))
    return rows


def write_gradcheck_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["instance_id", "block", "max_rel_err", "pass"])
        for r in rows:
            out.writerow([r.instance_id, r.block, repr(r.max_rel_err), str(r.passed).lower()])
