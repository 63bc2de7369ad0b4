"""Command line entry point: ``stochks <subcommand> CONFIG``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 failed validation.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, build_config, parse_config_text
from .diagnostics import ConstraintInapplicable, positivity_report, validate_constants
from .field_space import Field, write_field_csv
from .harness import (
    EnsembleConfig,
    _jsonable,
    run_moments,
    run_strong_order,
    run_truncation_events,
    run_wong_zakai,
    scalar_reduction_setup,
)
from .integrator import NumericalFailure, integrate, write_trajectory_csv
from .truncation import write_event_log
from .wiener import hs_admissibility, path_streams

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_INVALID = 0, 2, 3, 4


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n")


def _write_rows(path: Path, header, rows) -> None:
    def fmt(x):
        if isinstance(x, (bool, np.bool_)):
            return str(bool(x)).lower()
        if isinstance(x, (float, np.floating)):
            return f"{float(x):.17g}"
        return str(x)

    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(fmt(x) for x in r) + "\n")


def _ensemble(rc, experiment):
    e = rc.ensemble
    return EnsembleConfig(e.n_paths, e.base_seed, e.workers, experiment, e.batch_size)


def cmd_simulate(rc, out: Path) -> int:
    s = rc.setup
    index = int(rc.study_value("path", 0))
    result = {"config": rc.echo(), "path_index": index}
    try:
        traj = integrate(s.initial_state(), s.params, s.effective(), s.spec1, s.spec2, s.scheme,
                         path_streams(rc.ensemble.base_seed, index), lyapunov=s.lyapunov)
    except NumericalFailure as exc:
        result["error"] = str(exc)
        _write_json(out / "summary.json", result)
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    write_trajectory_csv(out / "trajectory.csv", traj)
    snap = out / "snapshots"
    snap.mkdir(exist_ok=True)
    for step, u, v in zip(traj.snapshot_steps, traj.u, traj.v):
        write_field_csv(snap / f"u_{step:08d}.csv", Field(s.grid, u))
        write_field_csv(snap / f"v_{step:08d}.csv", Field(s.grid, v))
    pos = positivity_report(traj)
    result["positivity"] = vars(pos)
    result["final"] = {k: float(a[-1]) for k, a in traj.scalars.items() if k not in ("regime", "truncation_level")}
    _write_json(out / "summary.json", result)
    return EXIT_OK


def cmd_ensemble(rc, out: Path) -> int:
    p = float(rc.study_value("p", 1.0))
    report = run_moments(_ensemble(rc, "moments"), rc.setup, p)
    _write_json(out / "moments.json", {"config": rc.echo(), "report": report.to_dict(), "meta": report.meta})
    _write_rows(out / "moments_paths.csv", ("path", "sup_l1_u", "sup_gradv_l2_sq", "int_gradv_h1_sq"),
                [(r.index, r.sup_l1_u, r.sup_gradv_l2_sq, r.int_gradv_h1_sq) for r in report.records])
    return EXIT_OK


def _scalar_setup(rc, dt):
    s = rc.setup
    return scalar_reduction_setup(dt=dt, t_end=s.scheme.t_end, amplitude=s.spec1.amplitude,
                                  u0=float(rc.study_value("u0", 1.0)), scheme=s.scheme.scheme,
                                  convention=s.convention.value)


def cmd_strong_order(rc, out: Path) -> int:
    dts = [float(d) for d in rc.study_list("dts", [2.0**-k for k in range(8, 13)])]
    convs = rc.study_list("conventions", ["half", "full"])
    setup = _scalar_setup(rc, max(dts))
    res = run_strong_order(_ensemble(rc, "strong_order"), setup, dts, convs)
    _write_json(out / "strong_order.json", {"config": rc.echo(), "result": res.to_dict()})
    rows = []
    for c in res.statistics:
        for dt, st in zip(res.levels, res.statistics[c]["error"]):
            rows.append((c, dt, st["mean"], st["std"], st["half_width"], st["n"]))
    _write_rows(out / "strong_order.csv", ("convention", "dt", "mean_error", "std", "half_width", "n"), rows)
    return EXIT_OK


def cmd_wong_zakai(rc, out: Path) -> int:
    kind = str(rc.study.get("setup", "scalar")).strip()
    meshes = [float(h) for h in rc.study_list("meshes", [2.0**-4, 2.0**-6, 2.0**-8])]
    if kind == "scalar":
        dt_ito = float(rc.study_value("dt_ito", 2.0**-10))
        setup = _scalar_setup(rc, dt_ito)
    elif kind == "full":
        setup = rc.setup
        dt_ito = float(rc.study_value("dt_ito", setup.scheme.dt))
    else:
        raise ConfigError("study.setup must be 'scalar' or 'full'")
    res = run_wong_zakai(_ensemble(rc, "wong_zakai"), setup, meshes, dt_ito, int(rc.study_value("substeps", 8)))
    _write_json(out / "wong_zakai.json", {"config": rc.echo(), "result": res.to_dict()})
    rows = [(h, a["mean"], a["half_width"], b["mean"], b["half_width"])
            for h, a, b in zip(res.levels, res.statistics["gap_half"], res.statistics["gap_full"])]
    _write_rows(out / "wong_zakai.csv", ("mesh", "gap_half", "gap_half_hw", "gap_full", "gap_full_hw"), rows)
    return EXIT_OK


def cmd_truncation_events(rc, out: Path) -> int:
    res = run_truncation_events(_ensemble(rc, "truncation_events"), rc.setup, rc.level_max, rc.threshold_multiplier)
    _write_json(out / "truncation_events.json", {"config": rc.echo(), "result": res.to_dict()})
    write_event_log(out / "events.csv", res.records["events"], with_path=True)
    return EXIT_OK


def cmd_validate(rc, out: Path) -> int:
    s = rc.setup
    result = {"config": rc.echo()}
    ok = True
    if s.lyapunov is None:
        raise ConfigError("validate needs lyapunov.rho, lyapunov.c1 and lyapunov.c2")
    try:
        rep = validate_constants(s.lyapunov, s.params)
        result["constants"] = rep.to_dict()
        ok &= rep.passed
    except ConstraintInapplicable as exc:
        result["constants"] = {"passed": False, "reason": str(exc)}
        ok = False
    for name, spec, target in (("noise1", s.spec1, "L2"), ("noise2", s.spec2, "H1")):
        adm = hs_admissibility(spec, target)
        result[name] = vars(adm)
        ok &= adm.admissible
    result["passed"] = bool(ok)
    _write_json(out / "validate.json", result)
    return EXIT_OK if ok else EXIT_INVALID


COMMANDS = {
    "simulate": cmd_simulate,
    "ensemble": cmd_ensemble,
    "strong-order": cmd_strong_order,
    "wong-zakai": cmd_wong_zakai,
    "truncation-events": cmd_truncation_events,
    "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stochks", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("config", help="configuration file")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config key (repeatable)")
    ap.add_argument("--out", help="output directory (overrides output.dir)")
    ap.add_argument("--workers", type=int, help="worker processes (overrides ensemble.workers)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with open(args.config) as fh:
            flat = parse_config_text(fh.read())
        for item in args.set:
            key, sep, val = item.partition("=")
            if not sep:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            flat[key.strip()] = val.strip()
        if args.workers is not None:
            flat["ensemble.workers"] = str(args.workers)
        if args.out is not None:
            flat["output.dir"] = args.out
        rc = build_config(flat)
        out = Path(rc.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](rc, out)
    except (ConfigError, OSError, ValueError) as exc:
        # ValueError: the settings are individually valid but unusable together
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
