"""Command-line pipeline: generate | fit | design | verify.

Exit codes: 0 success, 1 internal error, 2 invalid input or configuration,
3 design reported infeasible (or, for ``verify --strict``, an unstable verdict).

Numerical modules are imported only after ``--threads`` / ``ANCKIT_THREADS``
has been applied, so the thread cap reaches the BLAS libraries.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_INTERNAL, EXIT_INVALID, EXIT_INFEASIBLE = 0, 1, 2, 3
FULL_SCALE = 8192
KINDS = ("norm_bounded", "multi_disk", "elliptic", "convex_hull")
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
TRACE_FIELDS = ("iteration", "mu", "loss", "max_constraint", "step", "rho")
# run-control flags that never change outputs and are left out of the echo
_NOT_ECHOED = {"config", "threads", "verbose", "quiet", "handler"}

log = logging.getLogger("anckit.cli")


class _Invalid(Exception):
    """Raised for CLI-level validation failures (exit 2)."""


# -- parser ------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path,
                   help="resolved-config echo of an earlier run; flags given here override it")
    p.add_argument("--threads", type=int,
                   help="cap on BLAS worker threads (fallback: ANCKIT_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    p.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anckit",
                                     description="Robust feedback ANC controller design.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    g = sub.add_parser("generate", help="write a synthetic observation set")
    _add_common(g)
    g.add_argument("--out", type=Path, help="observations file (.json or .csv)")
    g.add_argument("--fs", type=float, default=48000.0, help="sample rate in Hz")
    g.add_argument("--bins", type=int, default=1024, help="number of frequency bins K")
    g.add_argument("--full-scale", "--paper-scale", action="store_true", help=f"K = {FULL_SCALE}")
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--num-normal", type=int, default=24)
    g.add_argument("--num-loose", type=int, default=8)
    g.add_argument("--num-tight", type=int, default=8)
    g.add_argument("--ir-length", type=int, default=2048)
    g.set_defaults(handler=cmd_generate)

    f = sub.add_parser("fit", help="fit an uncertainty model to observations")
    _add_common(f)
    f.add_argument("--observations", type=Path, help="observations file or WAV directory")
    f.add_argument("--kind", choices=KINDS, help="uncertainty model kind")
    f.add_argument("--out", type=Path, help="model file (.json); areas.csv goes alongside")
    f.add_argument("--fs", type=float, default=48000.0,
                   help="sample rate for WAV input without a grid")
    f.add_argument("--bins", type=int, default=1024, help="grid size for WAV input")
    f.add_argument("--num-disks", type=int, default=6, help="disks per bin (multi_disk)")
    f.add_argument("--ellipse-tol", type=float, default=1e-7)
    f.add_argument("--guard-band", type=float, default=None,
                   help="margin around each observation, relative to the bin's spread")
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(handler=cmd_fit)

    d = sub.add_parser("design", help="optimize an FIR controller against a model")
    _add_common(d)
    d.add_argument("--observations", type=Path, help="observations (for the internal model)")
    d.add_argument("--model", type=Path, help="target uncertainty model (.json)")
    d.add_argument("--nominal-model", type=Path,
                   help="norm-bounded model for the warm start (fitted if omitted)")
    d.add_argument("--out", type=Path, help="controller file (.json or .csv)")
    d.add_argument("--trace", type=Path, help="solver trace CSV (default: next to --out)")
    d.add_argument("--num-taps", type=int, default=256, help="FIR length N")
    d.add_argument("--full-scale", "--paper-scale", action="store_true", help=f"N = {FULL_SCALE}")
    d.add_argument("--warm-start", choices=("ladder", "zero"), default="ladder")
    d.add_argument("--weight-order", type=int, default=8)
    d.add_argument("--weight-peak-db", type=float, default=31.0)
    d.add_argument("--weight-f-lo", type=float, default=40.0)
    d.add_argument("--weight-f-hi", type=float, default=1000.0)
    d.add_argument("--rho", type=float, default=50.0, help="smooth-min sharpness")
    d.add_argument("--eps-feas", type=float, default=1e-8)
    d.add_argument("--disk-mode", choices=("exact", "convex"), default="exact")
    d.add_argument("--max-outer", type=int, default=12)
    d.add_argument("--max-inner", type=int, default=80)
    d.add_argument("--gap-tol", type=float, default=1e-7,
                   help="duality-gap tolerance relative to the loss at Q = 0")
    d.add_argument("--kkt-tol", type=float, default=1e-3)
    d.add_argument("--tap-penalty", type=float, default=1e-6)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(handler=cmd_design)

    v = sub.add_parser("verify", help="verify a controller and emit a report")
    _add_common(v)
    v.add_argument("--controller", type=Path, help="controller file")
    v.add_argument("--observations", type=Path, help="observation set to verify against")
    v.add_argument("--cross-observations", type=Path,
                   help="second set the controller was not fitted to")
    v.add_argument("--model", type=Path, help="uncertainty model for margins and areas")
    v.add_argument("--out-dir", type=Path, help="report directory")
    v.add_argument("--horizon", type=int, help="simulation length in samples")
    v.add_argument("--no-simulate", action="store_true", help="frequency-domain checks only")
    v.add_argument("--transitions", action="store_true",
                   help="also run cross-fade tests between consecutive observations")
    v.add_argument("--strict", action="store_true", help="exit 3 on any unstable verdict")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(handler=cmd_verify)
    return parser


_REQUIRED = {"generate": ("out",), "fit": ("observations", "kind", "out"),
             "design": ("observations", "model", "out"),
             "verify": ("controller", "observations", "out_dir")}


def _subparser(parser, name):
    for action in parser._subparsers._group_actions:
        if name in action.choices:
            return action.choices[name]
    raise KeyError(name)


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    sub = _subparser(parser, args.subcommand)
    if args.config is not None:
        try:
            echo = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            sub.error(f"cannot read config {args.config}: {exc}")
        if echo.get("subcommand") != args.subcommand:
            sub.error(f"config {args.config} is for {echo.get('subcommand')!r}")
        known = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, value in echo.get("arguments", {}).items():
            if key in known and key not in _NOT_ECHOED:
                action = known[key]
                defaults[key] = (action.type(value) if value is not None and action.type
                                 else value)
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    missing = [name for name in _REQUIRED[args.subcommand] if getattr(args, name) is None]
    if missing:
        sub.error("the following arguments are required: "
                  + ", ".join("--" + m.replace("_", "-") for m in missing))
    if getattr(args, "full_scale", False):
        if args.subcommand == "generate":
            args.bins = FULL_SCALE
        else:
            args.num_taps = FULL_SCALE
    return args


# -- helpers -----------------------------------------------------------------

def _apply_threads(threads):
    if threads is None:
        env = os.environ.get("ANCKIT_THREADS")
        if env:
            try:
                threads = int(env)
            except ValueError:
                raise _Invalid(f"ANCKIT_THREADS must be an integer, got {env!r}") from None
    if threads is None:
        return None
    if threads < 1:
        raise _Invalid("--threads must be >= 1")
    if "numpy" in sys.modules:
        log.debug("numpy already loaded; thread cap applies to new processes only")
    for var in THREAD_VARS:
        os.environ[var] = str(threads)
    return threads


def _echo_path(out: Path) -> Path:
    return out.with_name(out.stem + ".config.json")


def write_echo(args, path: Path) -> None:
    """Resolved configuration of this run, enough to reproduce its outputs."""
    from anckit import __version__

    values = {}
    for key, value in sorted(vars(args).items()):
        if key in _NOT_ECHOED or key == "subcommand":
            continue
        values[key] = str(value) if isinstance(value, Path) else value
    doc = {"subcommand": args.subcommand, "anckit_version": __version__, "arguments": values}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _load_obs(path, fs=None, bins=None):
    from anckit.dataio import load_observations
    from anckit.sigproc import FrequencyGrid

    grid = FrequencyGrid.linear(fs, bins) if fs and bins else None
    return load_observations(path, grid=grid)


# -- subcommands -------------------------------------------------------------

def cmd_generate(args) -> int:
    from anckit.dataio import SyntheticFitConfig, generate_synthetic, save_observations
    from anckit.sigproc import FrequencyGrid

    cfg = SyntheticFitConfig(num_normal=args.num_normal, num_loose=args.num_loose,
                             num_tight=args.num_tight, ir_length=args.ir_length,
                             rng_seed=args.seed)
    obs = generate_synthetic(cfg, FrequencyGrid.linear(args.fs, args.bins))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_observations(obs, args.out)
    write_echo(args, _echo_path(args.out))
    log.info("wrote %d observations on %d bins to %s", obs.num_observations,
             obs.grid.num_bins, args.out)
    return EXIT_OK


def _write_areas(model, path: Path) -> None:
    import csv

    areas = model.areas()
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", "f", "kind", "area"])
        for k, (f, a) in enumerate(zip(model.grid.frequencies, areas)):
            w.writerow([k, repr(float(f)), model.kind, repr(float(a))])


def cmd_fit(args) -> int:
    from anckit.uncertainty import DEFAULT_GUARD_BAND, fit_models, save_model

    obs = _load_obs(args.observations, args.fs, args.bins)
    if args.guard_band is None:
        args.guard_band = DEFAULT_GUARD_BAND
    model = fit_models(obs, args.kind, num_disks=args.num_disks, ellipse_tol=args.ellipse_tol,
                       seed=args.seed, guard_band=args.guard_band)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, args.out)
    _write_areas(model, args.out.with_name(args.out.stem + ".areas.csv"))
    write_echo(args, _echo_path(args.out))
    log.info("fitted %s model on %d bins to %s", args.kind, model.grid.num_bins, args.out)
    return EXIT_OK


class _TraceWriter:
    def __init__(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = path.open("w")
        self.fh.write(",".join(TRACE_FIELDS) + "\n")
        self.fh.flush()

    def __call__(self, rec: dict) -> None:
        self.fh.write(",".join(repr(rec[k]) for k in TRACE_FIELDS) + "\n")
        self.fh.flush()
        log.debug("iter %d mu=%.3g loss=%.6g max g=%.3g", rec["iteration"], rec["mu"],
                  rec["loss"], rec["max_constraint"])

    def close(self):
        self.fh.close()


def cmd_design(args) -> int:
    from anckit.constraints import ConstraintConfig
    from anckit.dataio import export_controller, internal_model
    from anckit.optimizer import DesignSpec, SolverSettings, solve, warm_start_ladder
    from anckit.sigproc import butterworth_bandpass_weight, evaluate_coefficients
    from anckit.uncertainty import DEFAULT_GUARD_BAND, fit_models, load_model

    model = load_model(args.model)
    obs = _load_obs(args.observations)
    if obs.grid != model.grid:
        raise _Invalid("observations and model use different frequency grids")
    g_hat = internal_model(obs)
    grid = obs.grid
    weight = butterworth_bandpass_weight(grid, args.weight_order, args.weight_peak_db,
                                         args.weight_f_lo, args.weight_f_hi)
    constraint = ConstraintConfig(evaluate_coefficients(g_hat, grid.bins), rho=args.rho,
                                  eps_feas=args.eps_feas, disk_mode=args.disk_mode)
    solver = SolverSettings(max_outer=args.max_outer, max_inner=args.max_inner,
                            gap_tol_rel=args.gap_tol, kkt_tol=args.kkt_tol,
                            tap_penalty=args.tap_penalty, seed=args.seed)
    spec = DesignSpec(grid, g_hat, weight, model, args.num_taps, constraint, solver)
    trace_path = args.trace or args.out.with_name(args.out.stem + ".trace.csv")
    args.trace = trace_path
    tracer = _TraceWriter(trace_path)
    try:
        if model.kind == "norm_bounded" or args.warm_start == "zero":
            result = solve(spec, on_trace=tracer)
        else:
            if args.nominal_model is not None:
                nominal_model = load_model(args.nominal_model)
            else:
                band = model.provenance.get("guard_band", DEFAULT_GUARD_BAND)
                nominal_model = fit_models(obs, "norm_bounded", guard_band=band)
            result = warm_start_ladder(spec, nominal_model, on_trace=tracer)
    finally:
        tracer.close()
    write_echo(args, _echo_path(args.out))
    if result.status == "infeasible":
        bins = result.infeasible_bins or [
            int(k) for k in (result.design.constraint_values >= constraint.eps_feas).nonzero()[0]]
        print(f"anckit design: infeasible ({len(bins)} bins violate the constraint, "
              f"first {bins[:10]}); no controller written", file=sys.stderr)
        return EXIT_INFEASIBLE
    args.out.parent.mkdir(parents=True, exist_ok=True)
    export_controller(result.design, args.out)
    print(f"{model.kind}: status={result.status} loss={result.design.loss:.6g} "
          f"iterations={result.iterations} kkt={result.kkt_residual:.2e}")
    return EXIT_OK


def _summary(report, metrics, transitions) -> dict:
    out = {}
    for name in report.model_names:
        verdicts = report.verdicts[name]
        m = metrics["models"][name]
        entry = {
            "loss": report.losses[name],
            "waterbed": report.waterbed[name],
            "stable": int(verdicts.sum()),
            "observations": int(verdicts.size),
            "unstable_observations": [int(i) for i in (~verdicts).nonzero()[0]],
            "peak_attenuation_db": m["peak_attenuation_db"],
            "peak_frequency_hz": m["peak_frequency_hz"],
            "overshoot_db": m["overshoot_db"],
        }
        if name in transitions:
            tr = transitions[name]
            entry["transitions_stable"] = int(tr.stable.sum())
            entry["transitions"] = int(tr.stable.size)
        out[name] = entry
    return out


def cmd_verify(args) -> int:
    import numpy as np

    from anckit.analysis import attenuation_metrics, emit_report, fit_transition_test, verify
    from anckit.dataio import load_controller
    from anckit.uncertainty import load_model

    design = load_controller(args.controller)
    name = design.model_kind or "controller"
    models = {name: load_model(args.model)} if args.model else {}
    sets = {"fit": args.observations}
    if args.cross_observations:
        sets["cross"] = args.cross_observations
    summary, any_unstable = {}, False
    for tag, path in sets.items():
        obs = _load_obs(path, design.grid.sample_rate, design.grid.num_bins)
        if obs.grid != design.grid:
            raise _Invalid(f"{path}: grid differs from the controller's")
        report = verify({name: design}, obs, models, simulate=not args.no_simulate,
                        horizon=args.horizon, seed=args.seed)
        transitions = {}
        if args.transitions and not args.no_simulate and obs.num_observations > 1:
            irs = obs.impulse_responses
            nxt = np.roll(np.arange(obs.num_observations), -1)
            transitions[name] = fit_transition_test(design, irs, irs[nxt], seed=args.seed)
            report.verdicts[name] = report.verdicts[name] & transitions[name].stable
        out_dir = args.out_dir if tag == "fit" else args.out_dir / tag
        emit_report(report, out_dir)
        summary[tag] = _summary(report, attenuation_metrics(report), transitions)
        for entry in summary[tag].values():
            any_unstable |= entry["stable"] < entry["observations"]
            print(f"{tag}: {name} stable {entry['stable']}/{entry['observations']} "
                  f"loss={entry['loss']:.6g} peak={entry['peak_attenuation_db']:.1f} dB "
                  f"at {entry['peak_frequency_hz']:.0f} Hz")
    (args.out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    write_echo(args, args.out_dir / "config.json")
    return EXIT_INFEASIBLE if (args.strict and any_unstable) else EXIT_OK


# -- entry point -------------------------------------------------------------

def main(argv=None) -> int:
    args = parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_threads(args.threads)
        from anckit.errors import AnckitError, NestingError

        try:
            return args.handler(args)
        except NestingError as exc:
            print(f"anckit {args.subcommand}: internal error: {exc}", file=sys.stderr)
            return EXIT_INTERNAL
        except (AnckitError, FileNotFoundError) as exc:
            print(f"anckit {args.subcommand}: {exc}", file=sys.stderr)
            return EXIT_INVALID
    except _Invalid as exc:
        print(f"anckit {args.subcommand}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - reported as an internal failure
        log.debug("internal error", exc_info=True)
        print(f"anckit {args.subcommand}: internal error: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
