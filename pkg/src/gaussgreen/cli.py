"""Command-line entry point: one subcommand per experiment, configured by a YAML or JSON file.

Exit status: 0 when every check in the JSON summary passes, 1 when one fails, 2 on an
invalid configuration, 3 when a computation raises.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import cauchyflux as cf
from . import geometry as geo
from . import regdist as rd
from . import traces as tr
from .config import ConfigError, ExperimentConfig, load_config, parse_config

log = logging.getLogger("gaussgreen")

COMMANDS = ("trace", "check-gauss-green", "regdist", "reconstruct-flux", "coarea-check", "diagnostics")
FLOAT_FMT = "%.16e"  # 17 significant digits


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return FLOAT_FMT % float(v)


def write_csv(path: Path, header: list, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def _check(value: float, limit: float) -> dict:
    return {"value": value, "limit": limit, "pass": bool(abs(value) <= limit)}


# ---------------------------------------------------------------- commands

def _trace_estimate(cfg: ExperimentConfig, side: str):
    fld = cfg.field.build()
    U = cfg.build_set()
    phi = cfg.phi.build(U.dim)
    fn = {"interior": tr.interior_trace, "exterior": tr.exterior_trace, "compact": tr.compact_trace}[side]
    return fn(fld, U, phi, cfg.build_schedule(), cfg.resolution, cfg.quadrature_tol())


def _trace_rows(est):
    return [(e, v, g) for (e, v), g in zip(est.per_eps, est.good_flags)]


def run_trace(cfg: ExperimentConfig, out: Path, seed: int) -> dict:
    est = _trace_estimate(cfg, cfg.side)
    write_csv(out / (cfg.output.csv or "trace.csv"), ["eps", "boundary_integral", "good_flag"], _trace_rows(est))
    return {
        "side": cfg.side,
        "volume_side": est.volume_side,
        "limit": est.limit,
        "limit_error": est.limit_error,
        "residual": est.residual,
        "trace": est.trace,
        "boundary_trace": est.boundary_trace,
        "good_count": est.good_count,
        "checks": {"residual": _check(est.residual, cfg.tolerances.residual)},
    }


def run_check_gauss_green(cfg: ExperimentConfig, out: Path, seed: int) -> dict:
    inner = _trace_estimate(cfg, "interior")
    outer = _trace_estimate(cfg, "exterior")
    stem = Path(cfg.output.csv or "gauss_green.csv").stem
    for name, est in (("interior", inner), ("exterior", outer)):
        write_csv(out / f"{stem}_{name}.csv", ["eps", "boundary_integral", "good_flag"], _trace_rows(est))
    fld = cfg.field.build()
    U = cfg.build_set()
    phi = cfg.phi.build(U.dim)
    atoms = 0.0
    for a, m in fld.div.atoms:
        a = np.asarray(a, float)
        if abs(U.signed_distance(a)) <= 1e-12:
            atoms += m * phi(a)
    gap = outer.volume_side - inner.volume_side
    tol = cfg.tolerances.residual
    return {
        "interior": {"volume_side": inner.volume_side, "limit": inner.limit, "residual": inner.residual},
        "exterior": {"volume_side": outer.volume_side, "limit": outer.limit, "residual": outer.residual},
        "boundary_atoms": atoms,
        "exterior_minus_interior": gap,
        "checks": {
            "interior_residual": _check(inner.residual, tol),
            "exterior_residual": _check(outer.residual, tol),
            "atom_additivity": _check(gap - atoms, tol),
        },
    }


def run_regdist(cfg: ExperimentConfig, out: Path, seed: int) -> dict:
    U = cfg.build_set()
    rc = cfg.regdist
    moll = rd.MollifierSpec(U.dim, order=rc.order)
    rng = np.random.default_rng(seed)
    X = rd.sample_points(U, rc.samples, rng, pad=2 * max(rc.eps))
    res = rd.regularized_distance(U, X, moll)
    grad = np.linalg.norm(rd.regdist_gradient(U, X, moll, res["rho"]), axis=1)
    rows = np.column_stack([X, res["d"], res["rho"], res["ratio"], grad])
    coords = ["x", "y", "z"][: U.dim]
    write_csv(out / (cfg.output.csv or "regdist.csv"), coords + ["d", "rho", "ratio", "grad_norm"], rows)
    nz = res["d"] != 0
    ratio = res["ratio"][nz]
    mins = {}
    eps0 = None
    for e in sorted(rc.eps, reverse=True):
        band = (np.abs(res["rho"]) > 0) & (np.abs(res["rho"]) < e)
        mins[e] = float(grad[band].min()) if band.any() else math.inf
        if eps0 is None and mins[e] > rd.NONDEGENERATE:
            eps0 = e
    summary = {
        "samples": int(rc.samples),
        "ratio_min": float(ratio.min()) if len(ratio) else None,
        "ratio_max": float(ratio.max()) if len(ratio) else None,
        "grad_max": float(grad.max()),
        "min_grad_by_band": mins,
        "eps0": eps0,
        "max_residual": float(res["residual"].max()),
        "checks": {
            "ratio_bounds": {"pass": bool(np.all((ratio >= 0.5) & (ratio <= 2.0)))},
            "grad_bound": _check(float(grad.max()), 2.0 + 1e-6),
            "nondegenerate": {"pass": eps0 is not None},
        },
    }
    if rc.deformation_eps is not None and U.kind == "GraphDomain":
        a, b = U.params["window"]
        xs = np.linspace(a, b, rc.deformation_samples + 2)[1:-1]
        ys = np.interp(xs, U.params["xs"], U.params["ys"])
        Y = rd.graph_deformation(U, rc.deformation_eps, np.stack([xs, ys], axis=1), moll=moll)
        err = float(np.max(np.abs(rd.rho(U, Y, moll) - rc.deformation_eps)))
        summary["deformation_residual"] = err
        summary["checks"]["deformation"] = _check(err, 1e-8)
    return summary


def run_reconstruct_flux(cfg: ExperimentConfig, out: Path, seed: int) -> dict:
    fc = cfg.flux
    g = fc.grid
    P = cf.grid_points(g.lo, g.hi, g.spacing, [(c, r) for c, r in g.exclude])
    oracle = None
    if fc.source == "field":
        fld = cfg.field.build()
        flux = cf.FieldFlux(fld)
        oracle = fld.eval
    else:
        flux = cf.TabulatedFlux.from_csv(fc.table)
    results, errors = [], []
    for w in fc.windows:
        R = cf.reconstruct_field(flux, P, w)
        results.append(R)
        if oracle is not None:
            errors.append(R.rms_error(oracle))
    last = results[-1]
    coords = ["x", "y", "z"][: P.shape[1]]
    comps = [f"f{i + 1}" for i in range(P.shape[1])]
    write_csv(out / (cfg.output.csv or "reconstruction.csv"), coords + comps, last.to_rows()[last.valid])
    summary = {"points": int(len(P)), "windows": fc.windows, "valid": [int(R.valid.sum()) for R in results],
               "skipped": [len(R.skipped) for R in results], "checks": {}}
    if oracle is not None:
        orders = cf.observed_orders(fc.windows, errors)
        summary["rms_errors"] = errors
        summary["orders"] = orders
        summary["checks"]["rms"] = _check(errors[-1], fc.rms_limit)
        measured = [o for o in orders if o is not None]
        summary["checks"]["order"] = {"value": measured, "limit": fc.min_order,
                                      "pass": all(o >= fc.min_order for o in measured),
                                      "exact": not measured}
    summary["checks"]["all_points_valid"] = {"pass": bool(last.valid.all())}
    return summary


def run_coarea_check(cfg: ExperimentConfig, out: Path, seed: int) -> dict:
    U = cfg.build_set()
    cc = cfg.coarea
    rows, worst = [], 0.0
    for e in cc.eps:
        rep = geo.coarea_check(U, e, cfg.resolution, cc.levels)
        rows.append((e, rep.shell_integral, rep.level_integral, rep.relative_error))
        worst = max(worst, rep.relative_error)
    write_csv(out / (cfg.output.csv or "coarea.csv"), ["eps", "shell_integral", "level_integral", "relative_error"],
              rows)
    return {"eps": cc.eps, "max_relative_error": worst, "checks": {"coarea": _check(worst, cc.limit)}}


def run_diagnostics(cfg: ExperimentConfig, out: Path, seed: int) -> dict:
    fld = cfg.field.build()
    U = cfg.build_set()
    dc = cfg.diagnostics
    sched = cfg.build_schedule()
    suff = tr.trace_measure_sufficient(fld, U, sched, p=dc.p, exclusion_radius=dc.exclusion_radius,
                                       tol=cfg.quadrature_tol())
    summary = {"sufficient": suff.to_dict(), "checks": {}}
    probes = dc.probes
    if not probes and U.dim == 2:
        # random boundary probes from the extracted zero level
        mesh = geo.extract_level_set(U, 0.0, cfg.resolution)
        rng = np.random.default_rng(seed)
        if len(mesh):
            probes = mesh.centroids[rng.choice(len(mesh), size=min(3, len(mesh)), replace=False)].tolist()
    if probes:
        nec = tr.trace_measure_necessary(fld, U, probes, dc.radii, tol=cfg.quadrature_tol())
        summary["necessary"] = nec.to_dict()
        rows = [(i, r, v) for i, vals in enumerate(nec.values) for r, v in zip(nec.radii, vals)]
        write_csv(out / (cfg.output.csv or "diagnostics.csv"), ["probe", "radius", "value"], rows)
    return summary


RUNNERS = {
    "trace": run_trace,
    "check-gauss-green": run_check_gauss_green,
    "regdist": run_regdist,
    "reconstruct-flux": run_reconstruct_flux,
    "coarea-check": run_coarea_check,
    "diagnostics": run_diagnostics,
}


def exit_status(summary: dict) -> int:
    """0 iff every check passes; a pure function of the summary."""
    checks = summary.get("checks", {})
    return 0 if all(c.get("pass", False) for c in checks.values()) else 1


def run_experiment(cfg: ExperimentConfig, out: Path, seed: int = 0, threads: int = 1) -> int:
    out.mkdir(parents=True, exist_ok=True)
    summary = RUNNERS[cfg.command](cfg, out, seed)
    summary = {"command": cfg.command, "schema_version": cfg.schema_version, "seed": seed, "threads": threads,
               **summary}
    status = exit_status(summary)
    summary["exit_status"] = status
    with open(out / cfg.output.json_name, "w") as fh:
        json.dump(_jsonable(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return status


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gaussgreen", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--out", type=Path, default=Path("."))
        p.add_argument("--threads", type=int, default=1,
                       help="recorded in the summary; computations run on one thread")
        p.add_argument("--seed", type=int, default=0, help="seed for random probe placement")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.seed < 0 or args.seed >= 2 ** 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2
    if args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if cfg.command != args.command:
        print(f"config error: command: config says {cfg.command!r} but subcommand is {args.command!r}",
              file=sys.stderr)
        return 2
    try:
        status = run_experiment(cfg, args.out, args.seed, args.threads)
    except Exception as exc:  # noqa: BLE001 - report with context, do not dump a traceback
        log.debug("failure", exc_info=True)
        print(f"{args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    return status


__all__ = ["main", "run_experiment", "parse_config", "exit_status", "build_parser"]

if __name__ == "__main__":
    sys.exit(main())
