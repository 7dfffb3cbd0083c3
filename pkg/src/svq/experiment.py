"""Declarative experiment specs: parsing, validation and the artifact-producing runner.

A spec is a flat text file of ``key = value`` lines. Keys carry dotted section
prefixes (``generator.kind = torus``); ``#`` starts a comment. Per-stage values
of a chained model are comma-separated lists, and a single value is broadcast
to every stage.
"""

from __future__ import annotations

import hashlib
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import analysis
from .core import (
    ConfigurationError,
    LeakageKernel,
    SVQError,
    Topology,
    build_gaussian_leakage,
    posterior,
    save_model,
)
from .datagen import (
    bump,
    interdigitate,
    local_normalize,
    make_texture,
    reference_waveforms,
    sample_circle,
    sample_correlated_pair,
    sample_ecg_synth,
    sample_multi_targets,
    sample_patch,
    sample_torus,
    sample_waveforms,
    whiten,
    write_pgm,
)
from .trainer import (
    ChainSpec,
    Stage,
    TrainConfig,
    TrainingDiverged,
    init_model,
    seeded_rngs,
    train_chain,
    write_trace_csv,
)

EXIT_OK, EXIT_VALIDATION, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

# Fixed offsets that derive independent generator streams from the master seed.
GENERATOR_STREAM = 1001
ANALYSIS_STREAM = 2002


class SpecError(ConfigurationError):
    """Validation failure; ``messages`` are ``path:line: text`` strings."""

    def __init__(self, messages):
        self.messages = list(messages)
        super().__init__("\n".join(self.messages))


def _int(v):
    return int(v)


def _float(v):
    return float(v)


def _bool(v):
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v):
    return [int(p) for p in v.split(",")]


def _floats(v):
    return [float(p) for p in v.split(",")]


def _names(v):
    return [p.strip() for p in v.split(",") if p.strip()]


# key -> (parser, default); a default of None means optional without a value
SCHEMA = {
    "name": (str, None),
    "description": (str, ""),
    "seeds": (_ints, [0]),
    "analyses": (_names, []),
    "generator.kind": (str, None),
    "generator.dim": (_int, None),
    "generator.num_targets": (_int, 2),
    "generator.sigma": (_float, None),
    "generator.noise_high": (_float, 0.5),
    "generator.separation_min": (_int, 6),
    "generator.separation_max": (_int, 10),
    "generator.noise_std": (_float, None),
    "generator.square_amplitude": (_float, 0.5),
    "generator.channels": (_int, 8),
    "generator.length": (_int, 20000),
    "generator.maternal_period": (_float, 60.0),
    "generator.ratio": (_float, 1.8),
    "generator.foetal_amplitude": (_float, 0.25),
    "generator.whiten": (_bool, True),
    "generator.width": (_int, 128),
    "generator.height": (_int, 128),
    "generator.correlation_length": (_float, 7.0),
    "generator.orientation_bands": (_bool, False),
    "generator.window": (_int, 9),
    "generator.normalize_window": (_int, 0),
    "generator.epsilon": (_float, 1e-3),
    "model.dim": (_int, None),
    "model.layout": (str, "full"),
    "model.codes": (_ints, None),
    "model.rows": (_int, None),
    "model.cols": (_int, None),
    "model.wrap": (_bool, False),
    "model.neighbourhood_radius": (_ints, [0]),
    "model.leak_radius": (_ints, [0]),
    "model.leak_sigma": (_float, 1.0),
    "train.n": (_ints, [10]),
    "train.steps": (_int, 20000),
    "train.batch_size": (_int, 32),
    "train.learning_rate": (_float, 0.05),
    "train.schedule": (str, "linear"),
    "train.final_learning_rate": (_float, 0.005),
    "train.step_every": (_int, 5000),
    "train.step_factor": (_float, 0.5),
    "train.init_scale": (_float, 0.01),
    "train.trace_every": (_int, 10),
    "train.holdout_size": (_int, 500),
    "train.divergence_factor": (_float, 10.0),
    "train.reproducible": (_bool, True),
    "train.weights_start": (_floats, None),
    "train.weights_end": (_floats, None),
    "train.checkpoint_every": (_int, 0),
    "analysis.eval_samples": (_int, 4000),
    "analysis.grid_resolution": (_int, 64),
    "analysis.arc_resolution": (_int, 1024),
    "analysis.stride": (_int, 0),
    "analysis.patches": (_int, 2000),
    "analysis.response_length": (_int, 4000),
    "analysis.tolerance": (_float, 0.1),
}
REQUIRED = ("name", "generator.kind", "model.codes")
LAYOUTS = ("full", "ring", "line", "grid")
IMAGE_KINDS = ("texture", "interdigitated")

ANALYSES = {
    "arc_profiles": ("circle",),
    "stationarity": None,
    "classification": ("torus",),
    "localization": None,
    "waveform_match": ("waveforms",),
    "ecg_periods": ("ecg_synth",),
    "topographic_order": IMAGE_KINDS,
    "sparse_coding": IMAGE_KINDS,
    "dominance": ("interdigitated",),
}


@dataclass
class ExperimentSpec:
    values: dict
    lines: dict = field(default_factory=dict)
    path: str = "<spec>"

    def __getitem__(self, key):
        return self.values[key]

    @property
    def name(self):
        return self.values["name"]

    @property
    def kind(self):
        return self.values["generator.kind"]

    @property
    def num_stages(self):
        return len(self.values["model.codes"])

    def stage_value(self, key, k):
        vals = self.values[key]
        return vals[k] if len(vals) > 1 else vals[0]

    def with_seeds(self, seeds):
        vals = dict(self.values)
        vals["seeds"] = list(seeds)
        return ExperimentSpec(vals, dict(self.lines), self.path)


def parse_spec_text(text, path="<spec>") -> ExperimentSpec:
    """Parse and validate; raises SpecError with line-anchored messages."""
    errors, raw, lines = [], {}, {}
    for no, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            errors.append(f"{path}:{no}: expected 'key = value'")
            continue
        key, value = (p.strip() for p in body.split("=", 1))
        if key not in SCHEMA:
            errors.append(f"{path}:{no}: unknown key '{key}'")
            continue
        if key in raw:
            errors.append(f"{path}:{no}: duplicate key '{key}' (first set on line {lines[key]})")
            continue
        raw[key], lines[key] = value, no
    values = {}
    for key, (parse, default) in SCHEMA.items():
        if key in raw:
            try:
                values[key] = parse(raw[key])
            except ValueError as exc:
                errors.append(f"{path}:{lines[key]}: bad value for '{key}': {exc}")
        else:
            values[key] = default
    for key in REQUIRED:
        if key not in raw:
            errors.append(f"{path}:1: missing required key '{key}'")
    if errors:
        raise SpecError(errors)
    spec = ExperimentSpec(values, lines, path)
    _check_semantics(spec)
    return spec


def load_spec(path) -> ExperimentSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_spec_text(fh.read(), str(path))


def bundled_spec_names() -> list:
    pkg = resources.files("svq").joinpath("specs")
    return sorted(p.name[:-5] for p in pkg.iterdir() if p.name.endswith(".spec"))


def bundled_spec_text(name) -> str:
    return resources.files("svq").joinpath("specs", f"{name}.spec").read_text(encoding="utf-8")


def load_bundled(name) -> ExperimentSpec:
    if name not in bundled_spec_names():
        raise ConfigurationError(f"no bundled spec named {name!r}")
    return parse_spec_text(bundled_spec_text(name), f"{name}.spec")


def _check_semantics(spec: ExperimentSpec):
    v, errors = spec.values, []

    def err(key, msg):
        errors.append(f"{spec.path}:{spec.lines.get(key, 1)}: {msg}")

    kind = v["generator.kind"]
    if kind not in GENERATORS:
        err("generator.kind", f"unknown generator kind '{kind}' (expected one of {', '.join(GENERATORS)})")
        raise SpecError(errors)
    stages = len(v["model.codes"])
    for key in ("model.neighbourhood_radius", "model.leak_radius", "train.n"):
        if len(v[key]) not in (1, stages):
            err(key, f"'{key}' needs 1 or {stages} values")
    for key in ("train.weights_start", "train.weights_end"):
        if v[key] is not None and len(v[key]) != stages:
            err(key, f"'{key}' needs {stages} values")
    if v["model.layout"] not in LAYOUTS:
        err("model.layout", f"layout must be one of {', '.join(LAYOUTS)}")
    if v["model.layout"] == "grid":
        rows, cols = v["model.rows"], v["model.cols"]
        if rows is None or cols is None:
            err("model.layout", "grid layout needs model.rows and model.cols")
        elif stages != 1 or rows * cols != v["model.codes"][0]:
            err("model.codes", "grid layout needs a single stage with codes = rows * cols")
    if any(m < 1 for m in v["model.codes"]):
        err("model.codes", "code counts must be positive")
    if any(r < 0 for r in v["model.neighbourhood_radius"] + v["model.leak_radius"]):
        err("model.neighbourhood_radius", "radii must be non-negative")
    if v["model.leak_sigma"] <= 0:
        err("model.leak_sigma", "leak_sigma must be positive")
    if any(n < 1 for n in v["train.n"]):
        err("train.n", "n must be at least 1")
    if not v["seeds"]:
        err("seeds", "at least one seed is required")
    try:
        TrainConfig(**_train_kwargs(spec, 0))
    except ConfigurationError as exc:
        err("train.steps", str(exc))
    for name in v["analyses"]:
        if name not in ANALYSES:
            err("analyses", f"unknown analysis '{name}'")
        elif ANALYSES[name] is not None and kind not in ANALYSES[name]:
            err("analyses", f"analysis '{name}' does not apply to generator '{kind}'")
    if not errors:
        try:
            gen_dim = GENERATORS[kind].dim(spec)
        except ConfigurationError as exc:
            err("generator.kind", str(exc))
        else:
            if v["model.dim"] is not None and v["model.dim"] != gen_dim:
                err("model.dim", f"model.dim {v['model.dim']} does not match generator dimension {gen_dim}")
    if errors:
        raise SpecError(errors)


# --- generators ------------------------------------------------------------

class _Generator:
    """Binds a kind's parameters; ``prepare`` builds any fixed data (image, recording)."""

    def __init__(self, spec: ExperimentSpec, seed: int):
        self.spec = spec
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, GENERATOR_STREAM]))
        self.prepare()

    def prepare(self):
        pass

    def g(self, key, default=None):
        val = self.spec.values[f"generator.{key}"]
        return default if val is None else val


class CircleGen(_Generator):
    @staticmethod
    def dim(spec):
        return 2

    def sample(self, rng, count):
        return sample_circle(rng, count)


class TorusGen(_Generator):
    @staticmethod
    def dim(spec):
        return 4

    def sample(self, rng, count):
        return sample_torus(rng, count)


class MultiTargetsGen(_Generator):
    @staticmethod
    def dim(spec):
        d = spec.values["generator.dim"] or 32
        if d < 8:
            raise ConfigurationError("multi_targets needs generator.dim >= 8")
        return d

    def sample(self, rng, count):
        return sample_multi_targets(rng, self.dim(self.spec), self.g("num_targets"), count,
                                    sigma=self.g("sigma", 2.0), noise_high=self.g("noise_high"))


class CorrelatedPairGen(_Generator):
    @staticmethod
    def dim(spec):
        d = spec.values["generator.dim"] or 32
        lo, hi = spec.values["generator.separation_min"], spec.values["generator.separation_max"]
        if not 0 < lo <= hi < d / 2:
            raise ConfigurationError("separation range must satisfy 0 < min <= max < dim/2")
        return d

    def sample(self, rng, count):
        return sample_correlated_pair(rng, self.dim(self.spec),
                                      (self.g("separation_min"), self.g("separation_max")),
                                      count, sigma=self.g("sigma", 1.5))

    def eval_grid(self):
        """Every (first position, separation) pair once, noise-free."""
        d = self.dim(self.spec)
        seps = np.arange(self.g("separation_min"), self.g("separation_max") + 1)
        first, sep = np.meshgrid(np.arange(d), seps, indexing="ij")
        sigma = self.g("sigma", 1.5)
        return bump(d, first.ravel(), sigma) + bump(d, (first.ravel() + sep.ravel()) % d, sigma)


class WaveformsGen(_Generator):
    @staticmethod
    def dim(spec):
        d = spec.values["generator.dim"] or 64
        if d < 16 or d % 8:
            raise ConfigurationError("waveforms needs generator.dim >= 16 and a multiple of 8")
        return d

    def sample(self, rng, count):
        return sample_waveforms(rng, self.dim(self.spec), count,
                                noise_std=self.g("noise_std", 0.05),
                                square_amplitude=self.g("square_amplitude"))

    def references(self):
        return reference_waveforms(self.dim(self.spec), self.g("square_amplitude"))


class EcgGen(_Generator):
    @staticmethod
    def dim(spec):
        if spec.values["generator.channels"] < 2:
            raise ConfigurationError("ecg_synth needs at least 2 channels")
        return spec.values["generator.channels"]

    def prepare(self):
        self.recording = sample_ecg_synth(
            self.rng, self.g("channels"), self.g("length"), self.g("maternal_period"),
            self.g("ratio"), self.g("foetal_amplitude"), self.g("noise_std", 0.1))
        self.stream = self.recording.signals
        if self.g("whiten"):
            self.stream, self.transform = whiten(self.stream)

    def sample(self, rng, count):
        return self.stream[rng.integers(0, len(self.stream), count)]


class TextureGen(_Generator):
    @staticmethod
    def dim(spec):
        v = spec.values
        w = v["generator.window"]
        if w < 1 or w > min(v["generator.width"], v["generator.height"]):
            raise ConfigurationError("generator.window must fit inside the image")
        if not 2.0 <= v["generator.correlation_length"] <= 20.0:
            raise ConfigurationError("correlation_length must lie in [2, 20]")
        nw = v["generator.normalize_window"]
        if nw and (nw < 3 or nw % 2 == 0):
            raise ConfigurationError("generator.normalize_window must be 0 or odd and >= 3")
        return w * w

    def _texture(self):
        return make_texture(self.rng, self.g("width"), self.g("height"),
                            self.g("correlation_length"), self.g("orientation_bands"))

    def prepare(self):
        self.raw = self._texture()
        self.image = self._normalised(self.raw)

    def _normalised(self, img):
        nw = self.g("normalize_window")
        return local_normalize(img, nw, self.g("epsilon")) if nw else img

    def sample(self, rng, count):
        return sample_patch(self.image, self.g("window"), rng, count)


class InterdigitatedGen(TextureGen):
    def prepare(self):
        self.a = self._texture()
        self.b = self._texture()
        self.raw = interdigitate(self.a, self.b)
        self.image = self._normalised(self.raw)
        self._source = analysis.even_parity_source(self.image, self.g("window"))

    def sample(self, rng, count):
        return self._source(rng, count)


GENERATORS = {
    "circle": CircleGen,
    "torus": TorusGen,
    "multi_targets": MultiTargetsGen,
    "correlated_pair": CorrelatedPairGen,
    "waveforms": WaveformsGen,
    "ecg_synth": EcgGen,
    "texture": TextureGen,
    "interdigitated": InterdigitatedGen,
}


def make_generator(spec: ExperimentSpec, seed: int):
    return GENERATORS[spec.kind](spec, seed)


# --- models ----------------------------------------------------------------

def _train_kwargs(spec, seed):
    v = spec.values
    keys = ("steps", "batch_size", "learning_rate", "schedule", "final_learning_rate", "step_every",
            "step_factor", "init_scale", "trace_every", "holdout_size", "divergence_factor",
            "reproducible")
    kw = {k: v[f"train.{k}"] for k in keys}
    kw["n"] = v["train.n"][0]
    kw["seed"] = seed
    return kw


def build_topology(spec, k, m):
    v = spec.values
    r = spec.stage_value("model.neighbourhood_radius", k)
    layout = v["model.layout"] if k == 0 else ("full" if v["model.layout"] == "grid" else v["model.layout"])
    if layout == "full":
        return Topology.full(m)
    if layout == "ring":
        return Topology.ring(m, r)
    if layout == "line":
        return Topology.line(m, r)
    return Topology.grid(v["model.rows"], v["model.cols"], v["model.wrap"], r)


def build_kernel(spec, k, topology):
    r = spec.stage_value("model.leak_radius", k)
    if r == 0:
        return LeakageKernel.identity(topology.num_codes)
    return build_gaussian_leakage(topology, r, spec.values["model.leak_sigma"])


def build_chain(spec: ExperimentSpec, dim: int, init_rng) -> ChainSpec:
    v = spec.values
    stages = []
    for k, m in enumerate(v["model.codes"]):
        topo = build_topology(spec, k, m)
        kernel = build_kernel(spec, k, topo)
        codebook, model = init_model(dim, m, v["train.init_scale"], init_rng)
        stages.append(Stage(codebook, model, topo, kernel, spec.stage_value("train.n", k)))
        dim = m
    start = v["train.weights_start"] or [1.0] * len(stages)
    return ChainSpec(stages, start, v["train.weights_end"])


# --- analyses --------------------------------------------------------------

@dataclass
class Context:
    spec: ExperimentSpec
    generator: object
    stages: list
    seed: int
    out: str
    init_stages: list = None

    @property
    def first(self):
        return self.stages[0]

    def rng(self):
        return np.random.default_rng(np.random.SeedSequence([self.seed, ANALYSIS_STREAM]))

    def path(self, name):
        return os.path.join(self.out, name)

    def eval_batch(self):
        return self.generator.sample(self.rng(), self.spec.values["analysis.eval_samples"])

    def args(self, stage=None):
        st = stage or self.first
        return st.codebook, st.model, st.topology, st.kernel


def _arc_profiles(ctx):
    st = ctx.first
    res = ctx.spec.values["analysis.arc_resolution"]
    cols, widths = [], []
    for y in range(st.num_codes):
        theta, prof, width = analysis.arc_profile(*ctx.args(), y, res)
        cols.append(prof)
        widths.append([y + 1, width, float(np.linalg.norm(st.codebook.recon[y]))])
    rows = [[float(t)] + [float(c[i]) for c in cols] for i, t in enumerate(theta)]
    analysis.write_rows_csv(ctx.path("arc_profiles.csv"),
                            ["theta"] + [f"code_{y + 1}" for y in range(st.num_codes)], rows)
    analysis.write_rows_csv(ctx.path("arc_widths.csv"), ["code", "arc_width", "norm"], widths)
    return {"min_norm": min(w[2] for w in widths),
            "arc_widths": [w[1] for w in widths]}


def _stationarity(ctx):
    st = ctx.first
    batch = ctx.eval_batch()
    rows = []
    for label, stage in (("init", ctx.init_stages[0]), ("final", st)):
        recon = analysis.stationarity_residual_recon(*ctx.args(stage), stage.n, batch)
        post = analysis.stationarity_residual_posterior(*ctx.args(stage), stage.n, batch)
        rows.append([label, float(np.nanmax(recon)), post]
                    + [float(r) for r in recon])
    analysis.write_rows_csv(ctx.path("stationarity.csv"),
                            ["state", "max_recon_residual", "posterior_residual"]
                            + [f"recon_code_{y + 1}" for y in range(st.num_codes)], rows)
    return {"recon": (rows[0][1], rows[1][1]), "posterior": (rows[0][2], rows[1][2])}


def _classification(ctx):
    lab = analysis.classify_encoding(*ctx.args(), ctx.spec.values["analysis.grid_resolution"])
    rows = [[y + 1, float(r), int(a)] for y, (r, a) in enumerate(zip(lab.ratios, lab.active))]
    analysis.write_rows_csv(ctx.path("code_ratios.csv"), ["code", "ratio", "active"], rows)
    return {"label": lab.label, "factorial_fraction": lab.factorial_fraction}


def _localization(ctx):
    st = ctx.first
    pr, runs = analysis.localization_metrics(st.codebook)
    mass = posterior(st.model, st.topology, st.kernel, ctx.eval_batch()).mean(axis=0)
    rows = [[y + 1, float(p * st.dim), int(r), float(w)] for y, (p, r, w) in enumerate(zip(pr, runs, mass))]
    analysis.write_rows_csv(ctx.path("localization.csv"), ["code", "pr_dim", "runs", "mass"], rows)
    out = {"pr_dim": [r[1] for r in rows], "runs": [r[2] for r in rows]}
    if isinstance(ctx.generator, CorrelatedPairGen):
        # position vs separation tuning of each stage-1 code
        grid = ctx.generator.eval_grid()
        d = ctx.generator.dim(ctx.spec)
        nsep = len(grid) // d
        p = posterior(ctx.first.model, ctx.first.topology, ctx.first.kernel, grid).reshape(d, nsep, -1)
        v_pos, v_sep = p.mean(axis=1).var(axis=0), p.mean(axis=0).var(axis=0)
        rows = [[y + 1, float(a), float(b)] for y, (a, b) in enumerate(zip(v_pos, v_sep))]
        analysis.write_rows_csv(ctx.path("pair_tuning.csv"), ["code", "position_var", "separation_var"], rows)
    return out


def _waveform_match(ctx):
    refs = ctx.generator.references()
    matches = analysis.match_waveforms(ctx.first.codebook, refs)
    active = analysis.active_codes(*ctx.args(), ctx.eval_batch())
    rows = [[m.code + 1, m.reference + 1, m.correlation, m.shift, int(a)]
            + list(m.all_correlations) for m, a in zip(matches, active)]
    analysis.write_rows_csv(ctx.path("waveform_matches.csv"),
                            ["code", "reference", "correlation", "shift", "active"]
                            + [f"corr_ref_{j + 1}" for j in range(len(refs))], rows)
    live = [m for m, a in zip(matches, active) if a]
    return {"min_correlation": min((m.correlation for m in live), default=float("nan")),
            "covered": sorted({m.reference for m in live})}


def _ecg_periods(ctx):
    gen = ctx.generator
    length = min(ctx.spec.values["analysis.response_length"], len(gen.stream))
    x = gen.stream[:length]
    resp = x @ ctx.first.model.weights.T
    m = resp.shape[1]
    analysis.write_rows_csv(ctx.path("ecg_responses.csv"), ["t"] + [f"code_{y + 1}" for y in range(m)],
                            [[t] + [float(v) for v in row] for t, row in enumerate(resp)])
    tol = ctx.spec.values["analysis.tolerance"]
    pm, pf = gen.recording.maternal_period, gen.recording.foetal_period
    rows = []
    for y in range(m):
        p = analysis.dominant_period(resp[:, y])
        tag = "maternal" if abs(p - pm) <= tol * pm else "foetal" if abs(p - pf) <= tol * pf else "none"
        rows.append([y + 1, p, tag])
    analysis.write_rows_csv(ctx.path("ecg_periods.csv"), ["code", "period", "match"], rows)
    tags = [r[2] for r in rows]
    return {"maternal": tags.count("maternal"), "foetal": tags.count("foetal")}


def _tile_codebook(codebook, topology, window):
    rows, cols = topology.rows, topology.cols
    tiles = codebook.recon.reshape(rows, cols, window, window)
    pad = 1
    img = np.zeros((rows * (window + pad) - pad, cols * (window + pad) - pad))
    lo, hi = codebook.recon.min(), codebook.recon.max()
    scale = hi - lo if hi > lo else 1.0
    for r in range(rows):
        for c in range(cols):
            img[r * (window + pad):r * (window + pad) + window,
                c * (window + pad):c * (window + pad) + window] = (tiles[r, c] - lo) / scale
    return img


def _topographic_order(ctx):
    st = ctx.first
    score = analysis.topographic_order(st.codebook, st.topology, ctx.rng())
    analysis.write_rows_csv(ctx.path("topographic_order.csv"), ["score"], [[score]])
    write_pgm(ctx.path("codebook_map.pgm"),
              _tile_codebook(st.codebook, st.topology, ctx.spec.values["generator.window"]))
    return {"score": score}


def _sparse_coding(ctx):
    window = ctx.spec.values["generator.window"]
    stride = ctx.spec.values["analysis.stride"] or window
    img = ctx.generator.image
    coding = analysis.encode_image(*ctx.args(), img, window, stride)
    mse = float(np.mean((coding.reconstruction.pixels - img.pixels) ** 2))
    baseline = float(np.mean((img.pixels - img.pixels.mean()) ** 2))
    analysis.write_rows_csv(ctx.path("sparse_coding.csv"), ["mse", "baseline_mse", "sparsity"],
                            [[mse, baseline, coding.sparsity]])
    act = coding.activity
    write_pgm(ctx.path("activity.pgm"), act / act.max() if act.max() > 0 else act)
    rec = coding.reconstruction.pixels
    lo, hi = img.pixels.min(), img.pixels.max()
    span = hi - lo if hi > lo else 1.0
    write_pgm(ctx.path("reconstruction.pgm"), (rec - lo) / span)
    write_pgm(ctx.path("input.pgm"), (img.pixels - lo) / span)
    return {"mse": mse, "baseline": baseline, "sparsity": coding.sparsity}


def _dominance(ctx):
    dm = analysis.dominance_map(*ctx.args(), ctx.generator.image, ctx.spec.values["generator.window"],
                                ctx.rng(), ctx.spec.values["analysis.patches"])
    flat = dm.labels.reshape(-1)
    diff = dm.difference.reshape(-1)
    analysis.write_rows_csv(ctx.path("dominance.csv"), ["code", "label", "difference"],
                            [[y + 1, int(l), float(d)] for y, (l, d) in enumerate(zip(flat, diff))])
    analysis.write_rows_csv(ctx.path("dominance_summary.csv"), ["contiguity"], [[dm.contiguity]])
    write_pgm(ctx.path("dominance.pgm"), dm.labels)
    return {"contiguity": dm.contiguity}


ANALYSIS_FUNCS = {
    "arc_profiles": _arc_profiles,
    "stationarity": _stationarity,
    "classification": _classification,
    "localization": _localization,
    "waveform_match": _waveform_match,
    "ecg_periods": _ecg_periods,
    "topographic_order": _topographic_order,
    "sparse_coding": _sparse_coding,
    "dominance": _dominance,
}


def run_analyses(ctx: Context) -> dict:
    if ctx.init_stages is None:
        ctx.init_stages = ctx.stages
    return {name: ANALYSIS_FUNCS[name](ctx) for name in ctx.spec.values["analyses"]}


# --- runner ----------------------------------------------------------------

@dataclass
class RunOutcome:
    status: int
    out: str
    results: dict = field(default_factory=dict)     # seed -> analysis name -> summary
    message: str = ""


def _write_models(stages, out):
    for k, st in enumerate(stages):
        name = "model.svq" if k == 0 else f"model_stage{k + 1}.svq"
        save_model(os.path.join(out, name), st.codebook, st.model, st.topology, st.kernel)


def run_seed(spec: ExperimentSpec, seed: int, out: str) -> dict:
    """Generate, train and analyse one seed into ``out`` (which must exist)."""
    gen = make_generator(spec, seed)
    init_rng, data_rng = seeded_rngs(seed)
    chain = build_chain(spec, gen.dim(spec), init_rng)
    config = TrainConfig(**_train_kwargs(spec, seed))
    ckpt = spec.values["train.checkpoint_every"] or None
    try:
        result = train_chain(chain, config, gen.sample, data_rng=data_rng,
                             checkpoint_every=ckpt, checkpoint_dir=out if ckpt else None)
    except TrainingDiverged as exc:
        if exc.trace:
            write_trace_csv(exc.trace, os.path.join(out, "trace.csv"))
        raise
    write_trace_csv(result.trace, os.path.join(out, "trace.csv"))
    _write_models(result.stages, out)
    holdout = [[k + 1, a.total, b.total] for k, (a, b) in
               enumerate(zip(result.holdout_start, result.holdout_end))]
    analysis.write_rows_csv(os.path.join(out, "holdout.csv"), ["stage", "start_total", "end_total"], holdout)
    ctx = Context(spec, gen, result.stages, seed, out, init_stages=chain.stages)
    return run_analyses(ctx)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(root):
    entries = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for fn in sorted(filenames):
            full = os.path.join(dirpath, fn)
            rel = os.path.relpath(full, root).replace(os.sep, "/")
            if rel == "manifest.csv":
                continue
            entries.append([rel, os.path.getsize(full), _sha256(full)])
    entries.sort()
    analysis.write_rows_csv(os.path.join(root, "manifest.csv"), ["path", "bytes", "sha256"], entries)


def _majority(labels):
    counts = {lab: labels.count(lab) for lab in sorted(set(labels))}
    top = max(counts.values())
    winners = [lab for lab, c in counts.items() if c == top]
    return winners[0] if len(winners) == 1 and top > len(labels) / 2 else "none"


def _write_summary(spec, results, out):
    if "classification" in spec.values["analyses"]:
        rows = [[seed, r["classification"]["label"], r["classification"]["factorial_fraction"]]
                for seed, r in results.items()]
        labels = [r[1] for r in rows]
        fracs = [r[2] for r in rows]
        rows.append(["majority", _majority(labels), float(np.nanmean(fracs))])
        analysis.write_rows_csv(os.path.join(out, "classification.csv"),
                                ["seed", "label", "factorial_fraction"], rows)


def run_experiment(spec: ExperimentSpec, out: str) -> RunOutcome:
    """Run every seed of ``spec`` and write artifacts plus a manifest under ``out``.

    Work happens in a staging directory that is renamed into place at the end,
    so a failed run never leaves a half-written ``out``.
    """
    out = os.path.abspath(out)
    if os.path.exists(out) and (not os.path.isdir(out) or os.listdir(out)):
        return RunOutcome(EXIT_IO, out, message=f"output directory {out} exists and is not empty")
    parent = os.path.dirname(out)
    try:
        os.makedirs(parent, exist_ok=True)
        stage_dir = tempfile.mkdtemp(prefix=".svq-", dir=parent)
    except OSError as exc:
        return RunOutcome(EXIT_IO, out, message=f"cannot create output: {exc}")
    seeds = spec.values["seeds"]
    results, status, message = {}, EXIT_OK, ""
    try:
        for seed in seeds:
            seed_dir = stage_dir if len(seeds) == 1 else os.path.join(stage_dir, f"seed_{seed}")
            os.makedirs(seed_dir, exist_ok=True)
            try:
                results[seed] = run_seed(spec, seed, seed_dir)
            except TrainingDiverged as exc:
                status, message = EXIT_DIVERGED, f"seed {seed}: {exc}"
                with open(os.path.join(seed_dir, "diverged.txt"), "w") as fh:
                    fh.write(message + "\n")
                break
            except SVQError as exc:
                status, message = EXIT_DIVERGED, f"seed {seed}: {exc}"
                with open(os.path.join(seed_dir, "failed.txt"), "w") as fh:
                    fh.write(message + "\n")
                break
        if status == EXIT_OK:
            _write_summary(spec, results, stage_dir)
        write_manifest(stage_dir)
        if os.path.isdir(out):
            os.rmdir(out)
        os.replace(stage_dir, out)
    except OSError as exc:
        shutil.rmtree(stage_dir, ignore_errors=True)
        return RunOutcome(EXIT_IO, out, results, f"I/O error: {exc}")
    return RunOutcome(status, out, results, message)
