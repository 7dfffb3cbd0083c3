"""Command-line entry point: ``svq <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import __version__, analysis
from .core import ConfigurationError, SVQError, load_model
from .datagen import KINDS, write_pgm, write_vectors_csv
from .experiment import (
    EXIT_DIVERGED,
    EXIT_IO,
    EXIT_OK,
    EXIT_VALIDATION,
    Context,
    ExperimentSpec,
    SpecError,
    bundled_spec_names,
    load_bundled,
    load_spec,
    make_generator,
    parse_spec_text,
    run_analyses,
    run_experiment,
    write_manifest,
)
from .objective import check_gradients, write_gradcheck_csv
from .trainer import Stage

log = logging.getLogger("svq")


def thread_cap() -> int:
    """Worker limit from SVQ_THREADS (default 1)."""
    raw = os.environ.get("SVQ_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _int_list(text):
    try:
        return [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _resolve_spec(ref) -> ExperimentSpec:
    """A spec file path, or the name of a bundled spec."""
    if os.path.exists(ref):
        return load_spec(ref)
    if ref in bundled_spec_names():
        return load_bundled(ref)
    raise SpecError([f"{ref}:1: no such spec file or bundled spec"])


def _spec_for_datagen(args) -> ExperimentSpec:
    if args.spec:
        return _resolve_spec(args.spec)
    text = f"name = datagen\ngenerator.kind = {args.kind}\nmodel.codes = 1\n"
    if args.dim is not None:
        text += f"generator.dim = {args.dim}\n"
    return parse_spec_text(text, "<datagen>")


def cmd_datagen(args) -> int:
    spec = _spec_for_datagen(args)
    gen = make_generator(spec, args.seed)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 3003]))
    out = args.out
    if spec.kind in ("texture", "interdigitated"):
        write_pgm(out, gen.raw.pixels)
    elif spec.kind == "ecg_synth":
        stream = gen.stream if args.count is None else gen.stream[:args.count]
        write_vectors_csv(stream, out)
    else:
        write_vectors_csv(gen.sample(rng, args.count or 100), out)
    print(out)
    return EXIT_OK


def cmd_train(args) -> int:
    spec = _resolve_spec(args.spec)
    if args.seed is not None:
        spec = spec.with_seeds([args.seed])
    outcome = run_experiment(spec, args.out)
    if outcome.status == EXIT_OK:
        print(outcome.out)
    else:
        print(f"svq: {outcome.message}", file=sys.stderr)
    return outcome.status


def cmd_analyze(args) -> int:
    spec = _resolve_spec(args.spec)
    seed = spec.values["seeds"][0] if args.seed is None else args.seed
    stages = []
    for k, path in enumerate(args.model):
        codebook, model, topology, kernel = load_model(path)
        stages.append(Stage(codebook, model, topology, kernel, spec.stage_value("train.n", k)))
    if stages[0].dim != make_generator(spec, seed).dim(spec):
        raise SpecError([f"{args.model[0]}: model dimension does not match the spec generator"])
    os.makedirs(args.out, exist_ok=True)
    ctx = Context(spec, make_generator(spec, seed), stages, seed, args.out)
    run_analyses(ctx)
    write_manifest(args.out)
    print(args.out)
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = {"steps": args.steps}
    rows = analysis.stability_sweep(args.M, args.n, range(args.seed, args.seed + args.seeds), config,
                                    workers=min(thread_cap(), args.seeds * len(args.n) * len(args.M)))
    analysis.write_rows_csv(args.out, analysis.SWEEP_HEADER, rows)
    print(args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    rows = check_gradients(rng, instances=args.instances, tolerance=args.tolerance)
    write_gradcheck_csv(rows, args.out)
    worst = max(r.max_rel_err for r in rows)
    ok = all(r.passed for r in rows)
    print(f"{len(rows)} checks, worst relative error {worst:.3g}: {'pass' if ok else 'FAIL'}")
    return EXIT_OK if ok else 1


def cmd_list(args) -> int:
    for name in bundled_spec_names():
        print(name)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="svq", description="Train and analyse stochastic vector quantisers.",
                formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"svq {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("datagen", help="write synthetic data (CSV rows or a PGM image)", formatter_class=fmt)
    d.add_argument("--kind", choices=KINDS, default="circle", help="generator kind (ignored with --spec)")
    d.add_argument("--count", type=int, default=None,
                   help="rows to write; default 100 (ECG: the whole recording)")
    d.add_argument("--dim", type=int, default=None, help="input dimension for 1-D generators")
    d.add_argument("--seed", type=int, default=0, help="master seed")
    d.add_argument("--spec", default=None, help="take generator settings from a spec file or bundled name")
    d.add_argument("--out", required=True, help="output CSV or PGM path")
    d.set_defaults(func=cmd_datagen)

    for name, helptext in (("train", "run a spec: generate, train, analyse"),
                           ("run", "alias of train")):
        t = sub.add_parser(name, help=helptext, formatter_class=fmt)
        t.add_argument("--spec", required=True, help="spec file path or bundled spec name")
        t.add_argument("--seed", type=int, default=None, help="override the spec's seed list with one seed")
        t.add_argument("--out", required=True, help="artifact directory (must be absent or empty)")
        t.set_defaults(func=cmd_train)

    a = sub.add_parser("analyze", help="run a spec's analyses on saved models", formatter_class=fmt)
    a.add_argument("--spec", required=True, help="spec file path or bundled spec name")
    a.add_argument("--model", action="append", required=True,
                   help="model file; repeat once per chain stage")
    a.add_argument("--seed", type=int, default=None, help="seed for generator and analysis streams")
    a.add_argument("--out", required=True, help="output directory")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("sweep", help="torus stability sweep over (M, n)", formatter_class=fmt)
    s.add_argument("--M", type=_int_list, default=[8], help="comma-separated code counts")
    s.add_argument("--n", type=_int_list, default=[5, 10, 15, 20], help="comma-separated sample counts")
    s.add_argument("--seeds", type=int, default=5, help="seeds per cell")
    s.add_argument("--steps", type=int, default=10000, help="training steps per cell")
    s.add_argument("--seed", type=int, default=0, help="first seed; cells use seed..seed+seeds-1")
    s.add_argument("--out", required=True, help="output CSV path")
    s.set_defaults(func=cmd_sweep)

    g = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients",
                       formatter_class=fmt)
    g.add_argument("--instances", type=int, default=24, help="random instances")
    g.add_argument("--tolerance", type=float, default=1e-5, help="max relative error")
    g.add_argument("--seed", type=int, default=0, help="instance family seed")
    g.add_argument("--out", required=True, help="output CSV report path")
    g.set_defaults(func=cmd_gradcheck)

    ls = sub.add_parser("list", help="list bundled specs", formatter_class=fmt)
    ls.set_defaults(func=cmd_list)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SpecError as exc:
        for msg in exc.messages:
            print(msg, file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"svq: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConfigurationError as exc:
        print(f"svq: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SVQError as exc:
        print(f"svq: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
