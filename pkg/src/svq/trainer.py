"""Plain SGD training of single and chained stochastic vector quantisers."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .core import (
    Codebook,
    ConfigurationError,
    LeakageKernel,
    ResponseModel,
    SVQError,
    Topology,
    save_model,
)
from .objective import forward, gradients_from_workspace, objective_from_workspace, posterior_vjp

log = logging.getLogger(__name__)

SCHEDULES = ("constant", "linear", "step")


class TrainingDiverged(SVQError):
    """Raised when the objective exceeds the divergence guard."""

    def __init__(self, message, step=None, trace=None):
        super().__init__(message)
        self.step = step
        self.trace = trace


@dataclass
class TrainConfig:
    n: int = 10
    batch_size: int = 32
    steps: int = 20000
    learning_rate: float = 0.05
    schedule: str = "linear"
    final_learning_rate: float = 0.005
    step_every: int = 5000
    step_factor: float = 0.5
    seed: int = 0
    reproducible: bool = True
    trace_every: int = 10
    holdout_size: int = 500
    divergence_factor: float = 10.0
    init_scale: float = 0.01

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigurationError("steps must be at least 1")
        if self.learning_rate < 0 or self.final_learning_rate < 0:
            raise ConfigurationError("learning rates must be non-negative")
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(f"schedule must be one of {SCHEDULES}")
        if self.n < 1 or self.batch_size < 1 or self.trace_every < 1:
            raise ConfigurationError("n, batch_size and trace_every must be positive")

    def rate(self, step: int) -> float:
        if self.schedule == "constant":
            return self.learning_rate
        if self.schedule == "step":
            return self.learning_rate * self.step_factor ** (step // self.step_every)
        t = step / max(self.steps - 1, 1)
        return (1.0 - t) * self.learning_rate + t * self.final_learning_rate


@dataclass
class Stage:
    """One encoder in a chain, with its own M, n, topology and leakage."""

    codebook: Codebook
    model: ResponseModel
    topology: Topology
    kernel: LeakageKernel
    n: int

    @property
    def num_codes(self):
        return self.codebook.num_codes

    @property
    def dim(self):
        return self.codebook.dim

    def copy(self) -> "Stage":
        return Stage(self.codebook.copy(), self.model.copy(), self.topology, self.kernel, self.n)


@dataclass
class ChainSpec:
    stages: list
    start_weights: np.ndarray
    end_weights: np.ndarray | None = None

    def __post_init__(self):
        if not self.stages:
            raise ConfigurationError("a chain needs at least one stage")
        for k in range(1, len(self.stages)):
            if self.stages[k].dim != self.stages[k - 1].num_codes:
                raise ConfigurationError(
                    f"stage {k + 1} input dimension {self.stages[k].dim} != "
                    f"stage {k} code count {self.stages[k - 1].num_codes}")
        self.start_weights = np.asarray(self.start_weights, dtype=float).reshape(-1)
        if self.end_weights is None:
            self.end_weights = self.start_weights.copy()
        self.end_weights = np.asarray(self.end_weights, dtype=float).reshape(-1)
        for w in (self.start_weights, self.end_weights):
            if w.shape[0] != len(self.stages):
                raise ConfigurationError("one objective weight per stage is required")
            if np.any(w < 0) or not np.any(w > 0):
                raise ConfigurationError("stage weights must be non-negative and not all zero")

    def weights_at(self, step: int, steps: int) -> np.ndarray:
        t = step / max(steps - 1, 1)
        return (1.0 - t) * self.start_weights + t * self.end_weights


@dataclass
class TrainResult:
    stages: list
    trace: list = field(default_factory=list)
    holdout_start: list = field(default_factory=list)
    holdout_end: list = field(default_factory=list)

    @property
    def codebook(self):
        return self.stages[0].codebook

    @property
    def model(self):
        return self.stages[0].model


def init_model(dim: int, m: int, scale: float, rng: np.random.Generator):
    """Codebook and response parameters drawn uniformly in [-scale, scale]."""
    if not scale > 0:
        raise ConfigurationError("init scale must be positive")
    recon = rng.uniform(-scale, scale, size=(m, dim))
    weights = rng.uniform(-scale, scale, size=(m, dim))
    biases = rng.uniform(-scale, scale, size=m)
    return Codebook(recon), ResponseModel(weights, biases)


def seeded_rngs(seed: int):
    """Independent (init, data) generators derived from one master seed."""
    ss = np.random.SeedSequence(seed)
    init_ss, data_ss = ss.spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(data_ss)


def chain_forward(stages, x):
    """Workspaces for every stage; stage k consumes stage k-1's posterior."""
    out = []
    for st in stages:
        ws = forward(st.codebook, st.model, st.topology, st.kernel, x)
        out.append(ws)
        x = ws.post
    return out


def chain_objectives(stages, x, batch_w=None):
    wss = chain_forward(stages, x)
    if batch_w is None:
        batch_w = np.full(wss[0].x.shape[0], 1.0 / wss[0].x.shape[0])
    return [objective_from_workspace(ws, st.n, batch_w) for ws, st in zip(wss, stages)]


def chain_gradients(stages, x, stage_weights, batch_w=None):
    """Objectives and parameter gradients of sum_k weight_k (D1 + D2)_k.

    Later stages feed back into earlier ones through the chain rule: the
    input gradient of stage k is pulled back through stage k-1's posterior.
    """
    wss = chain_forward(stages, x)
    if batch_w is None:
        batch_w = np.full(wss[0].x.shape[0], 1.0 / wss[0].x.shape[0])
    values = [objective_from_workspace(ws, st.n, batch_w) for ws, st in zip(wss, stages)]
    grads = [None] * len(stages)
    upstream = None
    for k in range(len(stages) - 1, -1, -1):
        st, ws, wk = stages[k], wss[k], stage_weights[k]
        need_inputs = k > 0
        g = gradients_from_workspace(ws, st.n, batch_w,
                                     st.model.weights if need_inputs else None)
        recon, weights, biases = wk * g.recon, wk * g.weights, wk * g.biases
        inputs = wk * g.inputs if need_inputs else None
        if upstream is not None:
            g_act = posterior_vjp(ws, upstream)
            weights = weights + g_act.T @ ws.x
            biases = biases + g_act.sum(axis=0)
            if need_inputs:
                inputs = inputs + g_act @ st.model.weights
        grads[k] = (recon, weights, biases)
        upstream = inputs
    return values, grads


def _trace_rows(step, values, rate, weights):
    rows = []
    for k, v in enumerate(values):
        row = {"step": step, "stage": k + 1, "d1": v.d1, "d2": v.d2, "total": v.total,
               "learning_rate": rate}
        for j, w in enumerate(weights):
            row[f"weight_{j + 1}"] = float(w)
        rows.append(row)
    return rows


def train_chain(spec: ChainSpec, config: TrainConfig, source, data_rng=None,
                checkpoint_every=None, checkpoint_dir=None) -> TrainResult:
    """Minimise the weighted sum of per-stage D1 + D2 by SGD on fresh batches.

    ``source(rng, count)`` returns a ``(count, dim)`` array of training inputs.
    """
    if data_rng is None:
        data_rng = seeded_rngs(config.seed)[1]
    stages = [st.copy() for st in spec.stages]
    holdout = np.asarray(source(data_rng, config.holdout_size), dtype=float)
    if holdout.shape[1] != stages[0].dim:
        raise ConfigurationError(
            f"data dimension {holdout.shape[1]} != model dimension {stages[0].dim}")
    result = TrainResult(stages)
    result.holdout_start = chain_objectives(stages, holdout)
    reference = None
    for step in range(config.steps):
        x = np.asarray(source(data_rng, config.batch_size), dtype=float)
        sw = spec.weights_at(step, config.steps)
        rate = config.rate(step)
        values, grads = chain_gradients(stages, x, sw)
        weighted = float(sum(w * v.total for w, v in zip(sw, values)))
        if reference is None:
            reference = weighted
        if not np.isfinite(weighted) or weighted > config.divergence_factor * max(reference, 1e-12):
            raise TrainingDiverged(
                f"objective {weighted:.6g} at step {step} exceeds "
                f"{config.divergence_factor:g}x its initial value {reference:.6g}; "
                f"learning rate {rate:g}", step, result.trace)
        if step % config.trace_every == 0 or step == config.steps - 1:
            result.trace.extend(_trace_rows(step, values, rate, sw))
        if rate > 0:
            for st, (gr, gw, gb) in zip(stages, grads):
                st.codebook.recon -= rate * gr
                st.model.weights -= rate * gw
                st.model.biases -= rate * gb
        if checkpoint_every and checkpoint_dir and (step + 1) % checkpoint_every == 0:
            for k, st in enumerate(stages):
                save_model(os.path.join(checkpoint_dir, f"checkpoint_{step + 1:07d}_stage{k + 1}.svq"),
                           st.codebook, st.model, st.topology, st.kernel)
    result.holdout_end = chain_objectives(stages, holdout)
    log.debug("trained %d steps: holdout %s -> %s", config.steps,
              [v.total for v in result.holdout_start], [v.total for v in result.holdout_end])
    return result


def train(codebook: Codebook, model: ResponseModel, topology: Topology, kernel: LeakageKernel,
          config: TrainConfig, source, data_rng=None, **kwargs) -> TrainResult:
    """Single-stage training; identical to a one-stage chain with weight 1."""
    spec = ChainSpec([Stage(codebook, model, topology, kernel, config.n)], [1.0])
    return train_chain(spec, config, source, data_rng=data_rng, **kwargs)


def write_trace_csv(trace, path) -> None:
    if not trace:
        raise ConfigurationError("empty trace")
    fields = list(trace[0].keys())
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(fields)
        for row in trace:
            out.writerow([repr(row[f]) if isinstance(row[f], float) else row[f] for f in fields])


def total_series(trace, stage=1) -> np.ndarray:
    return np.array([r["total"] for r in trace if r["stage"] == stage])
