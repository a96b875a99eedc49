"""Command-line front end: ``spreadgrad {simulate,fit,spread,jumps,regress}``.

Settings resolve as flags > ``--config`` JSON file > built-in defaults.
Exit codes: 0 success, 2 input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import gp_fit, gradient_field, jump_detection, spread_regression, strat_sim, svg
from .core import DataError, Location, load_dataset, project_albers
from .kernels import CholeskyError

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

DEFAULTS = {
    "common": {"input": None, "output_dir": ".", "seed": 0, "threads": 1,
               "id_col": "id", "x_col": "x", "y_col": "y", "year_col": "year", "lonlat": False},
    "simulate": {"scenario": "paper", "grid_spacing": 86.0, "colony_rate": None,
                 "uniform_speed": None, "no_seeded_jump": False, "horizon": 107.0,
                 "jump_distance": 10.0},
    "fit": {"n_iter": 25_000, "burn_in": 5_000, "thin": 10, "phi_low": None, "phi_high": None,
            "progress_every": 1_000},
    "spread": {"draws": None, "max_draws": 1_000, "level": 0.95},
    "jumps": {"draws": None, "spread": None, "max_draws": 200, "level": 0.95, "radius": 100.0,
              "alpha": 0.05, "min_neighbors": 3, "box_side": 100.0, "grid_spacing": 50.0,
              "nodes": 16},
    "regress": {"spread": None, "covariates": "lon,lat", "interactions": "", "response": "median",
                "n_iter": 10_000, "burn_in": 2_000, "thin": 5, "nu_low": 0.5, "nu_high": 2.5},
}

# validated numeric bounds: name -> (low, high) inclusive; None = open
BOUNDS = {
    "threads": (1, 256), "n_iter": (2, None), "burn_in": (1, None), "thin": (1, None),
    "max_draws": (100, None), "level": (0.5, 0.999), "radius": (1e-9, None), "alpha": (1e-9, 0.5),
    "min_neighbors": (2, None), "box_side": (1e-9, None), "grid_spacing": (1e-9, None),
    "nodes": (4, 256), "horizon": (0, None), "jump_distance": (0, None), "colony_rate": (0, None),
    "uniform_speed": (1e-9, None), "nu_low": (0.05, None), "nu_high": (0.05, 10.0),
}


class InputError(Exception):
    pass


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", help="input CSV")
    p.add_argument("--output-dir", help="directory for outputs (default: .)")
    p.add_argument("--seed", type=int, help="random seed (default: 0)")
    p.add_argument("--threads", type=int, help="worker threads for per-point work")
    p.add_argument("--config", help="JSON file of settings")
    p.add_argument("--print-config", action="store_true", help="print resolved settings and exit")
    p.add_argument("--id-col")
    p.add_argument("--x-col", help="x column, or longitude with --lonlat")
    p.add_argument("--y-col", help="y column, or latitude with --lonlat")
    p.add_argument("--year-col")
    p.add_argument("--lonlat", action="store_true", default=None,
                   help="coordinates are lon/lat degrees; project with Albers equal-area")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spreadgrad",
                                     description="Local invasion speed and direction from waiting-time data.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="stratified-diffusion simulation to a waiting-time CSV")
    _add_common(p)
    p.add_argument("--scenario", choices=["paper"])
    p.add_argument("--grid-spacing", type=float, help="query lattice spacing, km")
    p.add_argument("--colony-rate", type=float, help="offspring colonies per km of radius per year")
    p.add_argument("--uniform-speed", type=float, help="replace the two-speed map by one speed")
    p.add_argument("--no-seeded-jump", action="store_true", default=None)
    p.add_argument("--horizon", type=float)
    p.add_argument("--jump-distance", type=float)

    p = sub.add_parser("fit", help="MCMC fit of the waiting-time Gaussian process")
    _add_common(p)
    p.add_argument("--n-iter", type=int)
    p.add_argument("--burn-in", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--phi-low", type=float)
    p.add_argument("--phi-high", type=float)
    p.add_argument("--progress-every", type=int)

    p = sub.add_parser("spread", help="posterior speed/direction at the data locations")
    _add_common(p)
    p.add_argument("--draws", help="posterior draws CSV (default: OUTPUT_DIR/draws.csv)")
    p.add_argument("--max-draws", type=int)
    p.add_argument("--level", type=float)

    p = sub.add_parser("jumps", help="Rayleigh and box scans for long-range jumps")
    _add_common(p)
    p.add_argument("--draws")
    p.add_argument("--spread", help="spread CSV (default: OUTPUT_DIR/spread.csv)")
    p.add_argument("--max-draws", type=int)
    p.add_argument("--level", type=float)
    p.add_argument("--radius", type=float, help="Rayleigh neighbourhood radius, km")
    p.add_argument("--alpha", type=float)
    p.add_argument("--min-neighbors", type=int)
    p.add_argument("--box-side", type=float)
    p.add_argument("--grid-spacing", type=float)
    p.add_argument("--nodes", type=int, help="Gauss-Legendre nodes per side")

    p = sub.add_parser("regress", help="spatial regression of log speed on covariates")
    _add_common(p)
    p.add_argument("--spread")
    p.add_argument("--covariates", help="comma-separated covariate names")
    p.add_argument("--interactions", help="comma-separated a:b pairs")
    p.add_argument("--response", choices=["median", "mean"])
    p.add_argument("--n-iter", type=int)
    p.add_argument("--burn-in", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--nu-low", type=float)
    p.add_argument("--nu-high", type=float)
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS["common"])
    cfg.update(DEFAULTS[args.command])
    if args.config:
        try:
            from_file = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(from_file) - set(cfg)
        if unknown:
            raise InputError(f"unknown config key(s) for {args.command}: {sorted(unknown)}")
        cfg.update(from_file)
    for key in cfg:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    for key, (lo, hi) in BOUNDS.items():
        v = cfg.get(key)
        if v is None:
            continue
        if (lo is not None and v < lo) or (hi is not None and v > hi):
            raise InputError(f"setting {key}={v} outside [{lo}, {hi}]")
    if cfg.get("n_iter") is not None and cfg.get("burn_in") is not None and cfg["n_iter"] <= cfg["burn_in"]:
        raise InputError("n_iter must exceed burn_in")
    cfg["command"] = args.command
    return cfg


def _out(cfg, name: str) -> Path:
    d = Path(cfg["output_dir"])
    d.mkdir(parents=True, exist_ok=True)
    return d / name


def _load(cfg):
    if not cfg["input"]:
        raise InputError("--input is required")
    if cfg["lonlat"]:
        schema = {"id": cfg["id_col"], "lon": cfg["x_col"], "lat": cfg["y_col"], "year": cfg["year_col"]}
    else:
        schema = {"id": cfg["id_col"], "x": cfg["x_col"], "y": cfg["y_col"], "year": cfg["year_col"]}
    return load_dataset(cfg["input"], schema, project=bool(cfg["lonlat"]), seed=cfg["seed"])


def _draws(cfg):
    path = Path(cfg["draws"]) if cfg.get("draws") else Path(cfg["output_dir"]) / "draws.csv"
    if not path.is_file():
        raise InputError(f"draws file not found: {path}")
    try:
        return gp_fit.load_draws(path)
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def cmd_simulate(cfg) -> int:
    config = strat_sim.paper_config(seed=cfg["seed"])
    changes = {"horizon": float(cfg["horizon"]), "jump_distance": float(cfg["jump_distance"])}
    if cfg["colony_rate"] is not None:
        changes["colony_rate_coeff"] = float(cfg["colony_rate"])
    if cfg["uniform_speed"] is not None:
        changes["speed_map"] = strat_sim.UniformSpeed(float(cfg["uniform_speed"]))
    if cfg["no_seeded_jump"]:
        changes["seeded_jumps"] = ()
    from dataclasses import replace
    config = replace(config, **changes)
    grid = strat_sim.paper_query_grid(float(cfg["grid_spacing"]))
    res = strat_sim.simulate(config, grid)
    res.write_csv(_out(cfg, "waiting_times.csv"))
    res.write_events(_out(cfg, "events.jsonl"))
    n_hit = int(np.isfinite(res.arrival).sum())
    print(f"simulate: {n_hit}/{len(grid)} query points invaded, {len(res.events)} colonies", file=sys.stderr)
    return EXIT_OK


def cmd_fit(cfg) -> int:
    ds = _load(cfg)
    bounds = None
    if cfg["phi_low"] is not None or cfg["phi_high"] is not None:
        lo, hi = gp_fit.phi_support(ds.coords)
        bounds = (cfg["phi_low"] or lo, cfg["phi_high"] or hi)
    priors = gp_fit.default_priors(ds, phi_bounds=bounds)
    chain = gp_fit.ChainConfig(n_iter=cfg["n_iter"], burn_in=cfg["burn_in"], thin=cfg["thin"],
                               progress_every=cfg["progress_every"])
    draws = gp_fit.fit_mcmc(ds, chain, priors, seed=cfg["seed"])
    gp_fit.save_draws(draws, _out(cfg, "draws.csv"))
    _out(cfg, "diagnostics.txt").write_text(format_diagnostics(draws), encoding="utf-8")
    return EXIT_OK


def format_diagnostics(draws: gp_fit.PosteriorDraws) -> str:
    d = draws.diagnostics
    lines = [f"draws retained: {len(draws)}",
             f"iterations: {d['n_iter']}  burn-in: {d['burn_in']}  thin: {d['thin']}  seed: {d['seed']}",
             "priors: " + ", ".join(f"{k}={v:.6g}" for k, v in d["priors"].items()),
             "acceptance rates:"]
    lines += [f"  {k}: {v:.3f}" for k, v in d["acceptance"].items()]
    lines.append("effective sample sizes:")
    lines += [f"  {k}: {v:.1f}" for k, v in d["ess"].items()]
    lines.append("posterior summaries (2.5%, 50%, 97.5%):")
    for name in gp_fit.PosteriorDraws.COLUMNS:
        q = np.quantile(draws.column(name), [0.025, 0.5, 0.975])
        lines.append(f"  {name}: {q[0]:.6g} {q[1]:.6g} {q[2]:.6g}")
    for w in d["warnings"]:
        lines.append(f"WARNING: {w}")
    return "\n".join(lines) + "\n"


def cmd_spread(cfg) -> int:
    ds = _load(cfg)
    draws = _draws(cfg).subsample(cfg["max_draws"])
    field = gradient_field.spread_field(ds, draws, seed=cfg["seed"], level=cfg["level"],
                                        threads=cfg["threads"])
    gradient_field.save_spread_csv(field, _out(cfg, "spread.csv"), ds.ids)
    n = svg.spread_svg(field, _out(cfg, "spread.svg"))
    print(f"spread: {n} significant of {len(field)} locations", file=sys.stderr)
    return EXIT_OK


def _spread_for(cfg, ds):
    path = Path(cfg["spread"]) if cfg.get("spread") else Path(cfg["output_dir"]) / "spread.csv"
    if not path.is_file():
        raise InputError(f"spread file not found: {path}")
    try:
        ids, field = gradient_field.load_spread_csv(path)
    except (ValueError, KeyError) as exc:
        raise InputError(f"{path}: {exc}") from exc
    if ids != ds.ids:
        raise InputError(f"{path}: rows do not match the dataset ids")
    return field


def cmd_jumps(cfg) -> int:
    ds = _load(cfg)
    draws = _draws(cfg).subsample(cfg["max_draws"])
    field = _spread_for(cfg, ds)
    centers = jump_detection.grid_centers(ds, cfg["grid_spacing"])
    boxes = jump_detection.box_jump_scan(ds, draws, box_side=cfg["box_side"], seed=cfg["seed"],
                                         n_nodes=cfg["nodes"], level=cfg["level"], centers=centers,
                                         threads=cfg["threads"])
    ray = (jump_detection.rayleigh_scan(field, radius=cfg["radius"], alpha=cfg["alpha"],
                                        min_neighbors=cfg["min_neighbors"], centers=centers)
           if len(centers) else [])
    jump_detection.save_jumps_csv(boxes, ray, _out(cfg, "jumps.csv"))
    svg.jumps_svg(ds.coords, boxes, ray, _out(cfg, "jumps.svg"))
    print(f"jumps: {sum(b.flagged for b in boxes)} boxes, {sum(r.flagged for r in ray)} Rayleigh "
          f"flags over {len(centers)} grid centres", file=sys.stderr)
    return EXIT_OK


def cmd_regress(cfg) -> int:
    ds = _load(cfg)
    field = _spread_for(cfg, ds)
    names = [c.strip() for c in cfg["covariates"].split(",") if c.strip()]
    pairs = []
    for item in (cfg["interactions"] or "").split(","):
        if item.strip():
            a, _, b = item.strip().partition(":")
            if not b:
                raise InputError(f"interaction {item!r} must look like a:b")
            pairs.append((a, b))
    try:
        design = spread_regression.build_design(field, ds, names, pairs, response=cfg["response"])
    except KeyError as exc:
        raise InputError(str(exc)) from exc
    chain = gp_fit.ChainConfig(n_iter=cfg["n_iter"], burn_in=cfg["burn_in"], thin=cfg["thin"])
    config = spread_regression.RegressionConfig(chain=chain, nu_bounds=(cfg["nu_low"], cfg["nu_high"]))
    post = spread_regression.fit_spatial_regression(design, config, seed=cfg["seed"])
    spread_regression.save_coefficients_csv(post, _out(cfg, "coefficients.csv"))
    print(f"regress: {len(design.response)} rows ({design.n_excluded} excluded)", file=sys.stderr)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "spread": cmd_spread,
            "jumps": cmd_jumps, "regress": cmd_regress}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    stage = args.command
    try:
        cfg = resolve_config(args)
        if args.print_config:
            print(json.dumps(cfg, indent=2, sort_keys=True))
            return EXIT_OK
        return COMMANDS[stage](cfg)
    except (CholeskyError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"{stage}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, DataError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"{stage}: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
