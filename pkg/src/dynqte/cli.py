"""Command-line interface: ``dynqte {fit,test,simulate,generate,replay}``.

Structured results are JSON, tables are CSV.  Every run writes a manifest
holding the fully resolved configuration, input digests and timing; the
``replay`` subcommand re-executes a manifest and reproduces its outputs
byte for byte.

Exit codes: 0 success, 2 usage, 3 data validation, 4 numerical failure.
Errors are reported on stderr as a single JSON line.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bootstrap import (
    PVALUE_MODES,
    RESAMPLE_MODES,
    BootstrapConfig,
    default_threads,
    run_test,
    run_test_st,
)
from .errors import DataValidationError, NumericalError
from .kernels import KERNELS, KernelSpec
from .panel import load_panel_csv, load_regions_csv, write_panel_csv
from .simulation import (
    STUDY_COLUMNS,
    SimulationConfig,
    default_null_generator,
    generate,
    inject_effect,
    null_summaries,
    run_rejection_study,
)
from .spatial import estimate_st
from .vcdp import estimate

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class UsageError(Exception):
    """Invalid flag values or configuration files."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# helpers


def _tau(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--tau must be a number, got {text!r}") from None
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"--tau must lie in (0, 1), got {text}")
    return v


def _positive(name, kind=float):
    def parse(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be a {kind.__name__}, got {text!r}") from None
        if not v > 0:
            raise argparse.ArgumentTypeError(f"{name} must be positive, got {text}")
        return v

    return parse


def _alpha(text):
    v = float(text)
    if not 0.0 < v < 0.5:
        raise argparse.ArgumentTypeError(f"--alpha must lie in (0, 0.5), got {text}")
    return v


def _seed(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--seed must be an integer, got {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"--seed must lie in [0, 2**64), got {text}")
    return v


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _emit(text: str, out):
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def _load(args):
    if args.spatial:
        if not args.regions:
            raise UsageError("--spatial requires --regions")
        data = load_panel_csv(args.data, "spatiotemporal", load_regions_csv(args.regions))
    else:
        data = load_panel_csv(args.data, "temporal")
    if args.time_window:
        try:
            first, last = args.time_window.split(":")
            start = data.time_labels.index(first.strip())
            stop = data.time_labels.index(last.strip()) + 1
        except ValueError:
            raise UsageError(
                f"--time-window {args.time_window!r} must be FIRST:LAST with time labels present in the data"
            ) from None
        if stop - start < 2:
            raise UsageError("--time-window must keep at least two intervals")
        data = data.time_window(start, stop)
    return data


def _spec(args, data):
    spec = KernelSpec(args.kernel, args.h, args.h_st)
    return spec.resolve(data.n, data.coords if args.spatial else None)


def _inputs(args):
    paths = [p for p in (getattr(args, "data", None), getattr(args, "regions", None), getattr(args, "grid", None)) if p]
    return {str(p): _digest(p) for p in paths}


def _path_rows_temporal(report):
    q, s = report.qpath.coef, report.spath.coef
    m, p = q.shape
    d = p - 2
    qhead = ["t", "beta0"] + [f"beta_{k + 1}" for k in range(d)] + ["gamma"]
    shead = ["t"]
    for v in range(d):
        shead += [f"phi0_{v + 1}"] + [f"Phi_{v + 1}_{k + 1}" for k in range(d)] + [f"Gamma_{v + 1}"]
    qrows = [[t + 1] + [repr(float(x)) for x in q[t]] for t in range(m)]
    srows = [[t + 1] + [repr(float(x)) for x in s[t].ravel()] for t in range(m - 1)]
    return (qhead, qrows), (shead, srows)


def _path_rows_spatial(report, labels):
    q, s = report.qpath.coef, report.spath.coef
    m, r, p = q.shape
    d = p - 3
    qhead = ["t", "region", "beta0"] + [f"beta_{k + 1}" for k in range(d)] + ["gamma1", "gamma2"]
    shead = ["t", "region"]
    for v in range(d):
        shead += [f"phi0_{v + 1}"] + [f"Phi_{v + 1}_{k + 1}" for k in range(d)] + [f"Gamma1_{v + 1}", f"Gamma2_{v + 1}"]
    qrows = [[t + 1, labels[k]] + [repr(float(x)) for x in q[t, k]] for t in range(m) for k in range(r)]
    srows = [[t + 1, labels[k]] + [repr(float(x)) for x in s[t, k].ravel()] for t in range(m - 1) for k in range(r)]
    return (qhead, qrows), (shead, srows)


def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _sibling(out, suffix):
    out = Path(out)
    return out.with_name(out.stem + suffix)


# ---------------------------------------------------------------------------
# commands; each returns (resolved config, list of output paths)


def cmd_fit(args):
    data = _load(args)
    spec = _spec(args, data)
    if args.spatial:
        report = estimate_st(data, args.tau, spec)
        qrows, srows = _path_rows_spatial(report, data.region_labels)
    else:
        report = estimate(data, args.tau, spec)
        qrows, srows = _path_rows_temporal(report)
    _emit(_dumps(report.to_dict()), args.out)
    outputs = [args.out] if args.out else []
    if args.out:
        for suffix, (head, rows) in ((".quantile_path.csv", qrows), (".state_path.csv", srows)):
            path = _sibling(args.out, suffix)
            _write_csv(path, head, rows)
            outputs.append(str(path))
    return {"h": spec.h, "h_st": spec.h_st}, outputs


def cmd_test(args):
    data = _load(args)
    spec = _spec(args, data)
    config = BootstrapConfig(
        B=args.B,
        resample_mode=args.resample_mode,
        alpha=args.alpha,
        seed=args.seed,
        pvalue_mode=args.pvalue_mode,
        paired=args.paired_resample,
        threads=args.threads,
    )
    if args.pvalue_mode == "normal_approx" and args.estimand != "cqde":
        raise UsageError("--pvalue-mode normal_approx is only available with --estimand cqde")
    runner = run_test_st if args.spatial else run_test
    result = runner(data, args.tau, args.estimand, spec, config)
    _emit(_dumps(result.to_dict(include_draws=not args.no_draws)), args.out)
    return {"h": spec.h, "h_st": spec.h_st}, [args.out] if args.out else []


_GRID_KEYS = {f for f in SimulationConfig.__dataclass_fields__}


def _read_grid(path, seed):
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"--grid {path}: not valid JSON ({exc.msg} at line {exc.lineno})") from None
    if isinstance(raw, dict):
        raw = raw.get("cells", [raw])
    if not isinstance(raw, list) or not raw:
        raise UsageError(f"--grid {path}: expected a non-empty list of configurations")
    configs = []
    for j, cell in enumerate(raw):
        if not isinstance(cell, dict):
            raise UsageError(f"--grid {path}: entry {j} is not an object")
        unknown = sorted(set(cell) - _GRID_KEYS)
        if unknown:
            raise UsageError(f"--grid {path}: unknown key {unknown[0]!r} in entry {j}")
        cell = {"seed": seed, **cell}
        try:
            configs.append(SimulationConfig(**cell))
        except (TypeError, ValueError) as exc:
            raise UsageError(f"--grid {path}: entry {j}: {exc}") from None
    return configs


def cmd_simulate(args):
    configs = _read_grid(args.grid, args.seed)
    results = run_rejection_study(configs, threads=args.threads)
    rows = [[_cell(r.row()[c]) for c in STUDY_COLUMNS] for r in results]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STUDY_COLUMNS)
    w.writerows(rows)
    _emit(buf.getvalue(), args.out)
    resolved = {"cells": [vars_config(c) for c in configs]}
    return resolved, [args.out] if args.out else []


def _cell(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def vars_config(c: SimulationConfig) -> dict:
    return {k: getattr(c, k) for k in SimulationConfig.__dataclass_fields__}


def cmd_generate(args):
    null = default_null_generator(args.m, args.d, args.noise)
    gen = inject_effect(null, args.delta, null_summaries(null) if args.delta > 0 else None)
    data = generate(gen, args.n, args.TI, np.random.default_rng(np.random.SeedSequence([args.seed])))
    write_panel_csv(data, args.out if args.out else sys.stdout)
    truth = gen.true_estimands(args.tau)
    return {"true_estimands": truth}, [args.out] if args.out else []


# ---------------------------------------------------------------------------
# parser


def _common_fit_flags(p):
    p.add_argument("--data", required=True, help="panel CSV")
    p.add_argument("--tau", required=True, type=_tau, help="quantile level in (0, 1)")
    p.add_argument("--spatial", action="store_true", help="spatiotemporal panel")
    p.add_argument("--regions", help="region sidecar CSV (with --spatial)")
    p.add_argument("--kernel", default="epanechnikov", choices=sorted(KERNELS))
    p.add_argument("--h", type=_positive("--h"), default=None, help="temporal bandwidth (default 0.9 n^-0.26)")
    p.add_argument("--h-st", dest="h_st", type=_positive("--h-st"), default=None,
                   help="spatial bandwidth (default 0.9 range r^-0.26)")
    p.add_argument("--time-window", default=None, help="FIRST:LAST time labels to keep")


def _common_run_flags(p):
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--threads", type=_positive("--threads", int), default=None,
                   help="worker threads (default: $DYNQTE_THREADS or 1)")
    p.add_argument("--out", default=None, help="output file (default stdout)")
    p.add_argument("--manifest", default=None, help="manifest path (default <out>.manifest.json)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dynqte", description="Dynamic quantile treatment effects for switchback experiments")
    parser.add_argument("--version", action="version", version=f"dynqte {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="estimate CQTE, CQDE and CQIE")
    _common_fit_flags(p)
    _common_run_flags(p)

    p = sub.add_parser("test", help="bootstrap test of a quantile effect")
    _common_fit_flags(p)
    p.add_argument("--estimand", default="cqte", choices=["cqte", "cqde", "cqie"])
    p.add_argument("--B", type=_positive("--B", int), default=500)
    p.add_argument("--alpha", type=_alpha, default=0.05)
    p.add_argument("--resample-mode", dest="resample_mode", default=RESAMPLE_MODES[0], choices=RESAMPLE_MODES)
    p.add_argument("--pvalue-mode", dest="pvalue_mode", default=PVALUE_MODES[0], choices=PVALUE_MODES)
    p.add_argument("--paired-resample", dest="paired_resample", action="store_true")
    p.add_argument("--no-draws", dest="no_draws", action="store_true", help="omit bootstrap draws from the JSON")
    _common_run_flags(p)

    p = sub.add_parser("simulate", help="rejection-rate study over a grid of configurations")
    p.add_argument("--grid", required=True, help="JSON list of simulation configurations")
    _common_run_flags(p)

    p = sub.add_parser("generate", help="write a synthetic panel CSV")
    p.add_argument("--n", type=_positive("--n", int), required=True)
    p.add_argument("--m", type=_positive("--m", int), default=24)
    p.add_argument("--d", type=_positive("--d", int), default=2)
    p.add_argument("--delta", type=float, default=0.0)
    p.add_argument("--TI", type=_positive("--TI", int), default=1)
    p.add_argument("--tau", type=_tau, default=0.5, help="level at which true effects are reported")
    p.add_argument("--noise", default="normal", choices=["normal", "t3"])
    _common_run_flags(p)

    p = sub.add_parser("replay", help="re-run a manifest")
    p.add_argument("manifest_path", metavar="MANIFEST")
    p.add_argument("--out", default=None, help="redirect the primary output")
    p.add_argument("--threads", type=_positive("--threads", int), default=None)
    p.add_argument("--manifest", default=None)
    return parser


COMMANDS = {"fit": cmd_fit, "test": cmd_test, "simulate": cmd_simulate, "generate": cmd_generate}
_NON_CONFIG = {"manifest", "threads", "out", "command"}


def _validate(args):
    if args.command == "generate":
        if args.delta < 0:
            raise UsageError(f"--delta must be nonnegative, got {args.delta}")
        if args.TI > args.m:
            raise UsageError(f"--TI {args.TI} exceeds --m {args.m}")
        if args.n < 2 or args.m < 2:
            raise UsageError("--n and --m must be at least 2")


def _execute(args):
    _validate(args)
    for name in ("data", "regions", "grid"):
        if getattr(args, name, None):
            setattr(args, name, str(Path(getattr(args, name)).resolve()))
    if getattr(args, "threads", None) is None:
        args.threads = default_threads()
    start = time.perf_counter()
    resolved, outputs = COMMANDS[args.command](args)
    duration = time.perf_counter() - start
    config = {k: v for k, v in sorted(vars(args).items()) if k not in _NON_CONFIG}
    manifest = {
        "command": args.command,
        "config": config,
        "resolved": resolved,
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "inputs": _inputs(args),
        "outputs": outputs,
        "threads": args.threads,
        "duration_seconds": duration,
    }
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    target = args.manifest or (str(args.out) + ".manifest.json" if args.out else None)
    if target:
        Path(target).write_text(text, encoding="utf-8")
    else:
        sys.stderr.write(text)
    return manifest


def _replay(args):
    manifest = json.loads(Path(args.manifest_path).read_text(encoding="utf-8"))
    command = manifest["command"]
    if command not in COMMANDS:
        raise UsageError(f"manifest names unknown command {command!r}")
    for path, digest in manifest.get("inputs", {}).items():
        if _digest(path) != digest:
            raise DataValidationError(f"input {path} changed since the manifest was written")
    ns = argparse.Namespace(**manifest["config"])
    ns.command = command
    ns.out = args.out if args.out is not None else (manifest["outputs"][0] if manifest["outputs"] else None)
    ns.threads = args.threads or manifest.get("threads")
    ns.manifest = args.manifest
    return _execute(ns)


def _fail(code, kind, message):
    sys.stderr.write(json.dumps({"error": kind, "message": str(message), "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "replay":
            _replay(args)
        else:
            _execute(args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except (DataValidationError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    except NumericalError as exc:
        return _fail(EXIT_NUMERICAL, "numerical", exc)
    except ValueError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
