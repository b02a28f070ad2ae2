"""Command-line front end: experiment orchestration and figure-data emission.

Subcommands:
  simulate  cost sweeps, sample-path output, and the permanent-impact
            closed-form schedules, driven by a TOML config
  pde       penalized-PDE solves with a lambda schedule and optional
            closed-form validation
  figures   merge the CSV outputs of previous runs into plot-ready tables

Exit codes: 0 success, 2 configuration error, 3 numerical failure. The
environment variable VOLEX_SEED overrides the config seed; the --seed flag
overrides both. No images are rendered; every output is CSV plus a JSON
manifest describing the run.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .core import ConfigError, MarketParams, TimeGrid, VolexError
from .hjb import PdeGrid, lambda_sweep, bs_closed_form_w
from .montecarlo import (
    ExperimentConfig,
    epsilon_sweep,
    sample_strategy_paths,
    write_manifest,
    write_paths_csv,
)
from .strategies import AppendixBParams, appendix_b_strategy, permanent_mi_cost
from .volume import ConstantVolume, PerturbedOU, TimeDepBS, initial_volume

_BUNDLED = Path(__file__).parent / "configs"


def _load_config(path_str: str) -> dict:
    path = Path(path_str)
    if not path.exists():
        bundled = _BUNDLED / path.name
        if bundled.exists():
            path = bundled
        else:
            raise ConfigError(f"config file not found: {path_str}")
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}") from exc


def _require(cfg: dict, section: str, key: str):
    try:
        return cfg[section][key]
    except KeyError:
        raise ConfigError(f"config is missing [{section}] {key}") from None


def _market(cfg: dict) -> MarketParams:
    try:
        return MarketParams(
            kappa=float(_require(cfg, "market", "kappa")),
            kappa_tilde=float(_require(cfg, "market", "kappa_tilde")),
            horizon=float(_require(cfg, "market", "horizon")),
            x0=float(_require(cfg, "market", "x0")),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _seed(cfg: dict, args) -> int:
    if args.seed is not None:
        return int(args.seed)
    env = os.environ.get("VOLEX_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"VOLEX_SEED must be an integer, got {env!r}") from None
    return int(cfg.get("run", {}).get("seed", 0))


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    kind = cfg.get("run", {}).get("kind", "sweep")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = _seed(cfg, args)
    t0 = time.time()
    params = _market(cfg)
    outputs = []
    if kind == "sweep":
        config = _experiment_config(cfg, params, seed)
        _say(args, f"sweep: {len(config.rhos)} rho x {len(config.epsilons)} eps x "
                   f"{len(config.strategies)} strategies, {config.n_paths} paths")
        result = epsilon_sweep(config)
        out = out_dir / "sweep.csv"
        result.to_csv(out)
        outputs.append(out)
    elif kind == "paths":
        config = _experiment_config(cfg, params, seed, need_sweep=False)
        rho = float(_require(cfg, "paths", "rho"))
        eps = float(_require(cfg, "paths", "epsilon"))
        cols = sample_strategy_paths(config, rho, eps)
        out = out_dir / "paths.csv"
        write_paths_csv(cols, out)
        outputs.append(out)
    elif kind == "appendix_b":
        outputs.append(_run_appendix_b(cfg, params, out_dir, args))
    else:
        raise ConfigError(f"unknown run kind {kind!r}")
    write_manifest(out_dir / "manifest.json", cfg, seed, outputs, time.time() - t0)
    _say(args, f"wrote {', '.join(str(o) for o in outputs)}")
    return 0


def _experiment_config(cfg: dict, params: MarketParams, seed: int, need_sweep: bool = True) -> ExperimentConfig:
    sweep = cfg.get("sweep", {})
    if need_sweep and not sweep:
        raise ConfigError("config is missing the [sweep] section")
    try:
        return ExperimentConfig(
            params=params,
            grid=TimeGrid(params.horizon, int(_require(cfg, "grid", "n_steps"))),
            u_bar=float(_require(cfg, "model", "u_bar")),
            sigma=float(_require(cfg, "model", "sigma")),
            rhos=[float(r) for r in sweep.get("rhos", [0.3])],
            epsilons=[float(e) for e in sweep.get("epsilons", [0.3])],
            strategies=list(sweep.get("strategies", ["expected_vwap", "adaptive", "exact_vwap"])),
            n_paths=int(sweep.get("n_paths", 50_000)),
            seed=seed,
            delta_liq=float(sweep.get("delta_liq", 0.02)),
            path_index=int(cfg.get("paths", {}).get("path_index", 0)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _run_appendix_b(cfg: dict, params: MarketParams, out_dir: Path, args) -> Path:
    section = cfg.get("appendix_b")
    if not section:
        raise ConfigError("config is missing the [appendix_b] section")
    mus = [float(m) for m in section.get("mu", [])]
    if not mus:
        raise ConfigError("[appendix_b] mu must list at least one drift")
    sigma = float(section.get("sigma", 0.3))
    grid = TimeGrid(params.horizon, int(section.get("n_steps", 2000)))
    out = out_dir / "appendix_b.csv"
    t = grid.nodes()
    with open(out, "w") as fh:
        fh.write("mu,case,D,cost,t,x,X\n")
        for mu in mus:
            ab = AppendixBParams.from_market(mu, sigma, params)
            sched = appendix_b_strategy(params, ab, grid)
            cost = permanent_mi_cost(sched, ab, params)
            _say(args, f"mu={mu}: case {ab.case()}, D={ab.d_disc:.6g}, cost={cost:.6g}")
            for tk, xk, Xk in zip(t, sched.rates, sched.holdings):
                fh.write(f"{mu:.17g},{ab.case()},{ab.d_disc:.17g},{cost:.17g},"
                         f"{tk:.17g},{xk:.17g},{Xk:.17g}\n")
    return out


def _pde_model(cfg: dict, horizon: float):
    section = cfg.get("pde", {})
    kind = section.get("model", "bs")
    if kind == "bs":
        return TimeDepBS(
            v0=float(section.get("v0", 100.0)),
            b=float(section.get("b", 0.0)),
            sigma=float(section.get("sigma", 0.0)),
            horizon=horizon,
        )
    if kind == "constant":
        return ConstantVolume(float(section.get("v0", 100.0)))
    if kind == "perturbed_ou":
        return PerturbedOU(
            u_bar=float(section.get("u_bar", 100.0)),
            epsilon=float(section.get("epsilon", 0.3)),
            rho=float(section.get("rho", 2.0)),
            sigma=float(section.get("sigma", 0.3)),
            horizon=horizon,
        )
    raise ConfigError(f"unknown pde model {kind!r}")


def cmd_pde(args) -> int:
    cfg = _load_config(args.config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = _seed(cfg, args)
    t0 = time.time()
    params = _market(cfg)
    section = cfg.get("pde")
    if not section:
        raise ConfigError("config is missing the [pde] section")
    lambdas = [float(l) for l in section.get("lambdas", [])]
    if not lambdas:
        raise ConfigError("[pde] lambdas must list at least one penalty level")
    model = _pde_model(cfg, params.horizon)
    grid = PdeGrid.for_model(model, n_t=int(section.get("n_t", 2000)), n_y=int(section.get("n_y", 400)))
    boundary = section.get("boundary", "ode")
    _say(args, f"solving {len(lambdas)} penalty levels on a {grid.n_t}x{grid.n_y} grid ({boundary})")
    result = lambda_sweep(model, lambdas, grid, params, threads=args.threads, boundary=boundary)
    outputs = []
    compare = bool(section.get("compare_closed_form", isinstance(model, TimeDepBS)))
    v0 = initial_volume(model)
    report = out_dir / "lambda_report.csv"
    with open(report, "w") as fh:
        fh.write("lambda,J_lambda,X_T,rel_err_closed_form\n")
        for lam, j, xt, surf in zip(result.lambdas, result.j_values, result.terminal_holdings, result.surfaces):
            if compare and isinstance(model, (TimeDepBS, ConstantVolume)):
                b = model.b if isinstance(model, TimeDepBS) else 0.0
                s = model.sigma if isinstance(model, TimeDepBS) else 0.0
                w_ref = bs_closed_form_w(b, s, lam, 0.0, v0, params.horizon)
                rel = abs(surf.value_at(0.0, np.log(v0)) - w_ref) / w_ref
                fh.write(f"{lam:.17g},{j:.17g},{xt:.17g},{rel:.17g}\n")
                _say(args, f"lambda={lam:g}: J={j:.6g}, closed-form rel err {rel:.2e}")
            else:
                fh.write(f"{lam:.17g},{j:.17g},{xt:.17g},\n")
                _say(args, f"lambda={lam:g}: J={j:.6g}")
        fh.write(f"inf,{result.j_extrapolated:.17g},,\n")
    outputs.append(report)
    if bool(section.get("export_surfaces", True)):
        for lam, surf in zip(result.lambdas, result.surfaces):
            out = out_dir / f"surface_lambda{lam:g}.csv"
            surf.to_csv(out)
            surf.diagnostics.to_json(out_dir / f"diagnostics_lambda{lam:g}.json")
            outputs.append(out)
    write_manifest(out_dir / "manifest.json", cfg, seed, outputs, time.time() - t0)
    _say(args, f"extrapolated J = {result.j_extrapolated:.6g}")
    return 0


def cmd_figures(args) -> int:
    src = Path(args.dir)
    if not src.is_dir():
        raise ConfigError(f"not a directory: {args.dir}")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sweeps = sorted(src.rglob("sweep.csv"))
    paths_files = sorted(src.rglob("paths.csv"))
    if not sweeps and not paths_files:
        raise ConfigError(f"no sweep.csv or paths.csv found under {args.dir}")
    outputs = []
    if sweeps:
        # wide table: one row per (rho, epsilon), one column family per strategy
        rows = {}
        strategies = []
        for f in sweeps:
            with open(f, newline="") as fh:
                for rec in csv.DictReader(fh):
                    key = (float(rec["rho"]), float(rec["epsilon"]))
                    rows.setdefault(key, {})[rec["strategy"]] = rec
                    if rec["strategy"] not in strategies:
                        strategies.append(rec["strategy"])
        out = out_dir / "merged_costs.csv"
        with open(out, "w") as fh:
            cols = ["rho", "epsilon"]
            for s in strategies:
                cols += [f"J_{s}", f"IS_{s}", f"se_{s}"]
            fh.write(",".join(cols) + "\n")
            for (rho, eps) in sorted(rows):
                cells = [f"{rho:g}", f"{eps:g}"]
                for s in strategies:
                    rec = rows[(rho, eps)].get(s)
                    cells += [rec["J"], rec["IS"], rec["stderr"]] if rec else ["", "", ""]
                fh.write(",".join(cells) + "\n")
        outputs.append(out)
    for i, f in enumerate(paths_files):
        out = out_dir / (f"merged_paths.csv" if len(paths_files) == 1 else f"merged_paths_{i}.csv")
        out.write_bytes(f.read_bytes())
        outputs.append(out)
    print(f"merged {len(sweeps)} sweep file(s), {len(paths_files)} path file(s)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="volex",
        description="volume-dependent optimal execution experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("simulate", cmd_simulate), ("pde", cmd_pde)):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="TOML config file (or bundled config name)")
        sp.add_argument("--seed", type=int, default=None, help="override config/VOLEX_SEED seed")
        sp.add_argument("--out-dir", default=".", help="directory for CSV/manifest outputs")
        sp.add_argument("--threads", type=int, default=1, help="worker threads for independent solves")
        sp.add_argument("--quiet", action="store_true")
        sp.set_defaults(fn=fn)
    fig = sub.add_parser("figures")
    fig.add_argument("--dir", required=True, help="directory tree holding previous run outputs")
    fig.add_argument("--out-dir", default=".", help="directory for merged CSVs")
    fig.add_argument("--quiet", action="store_true")
    fig.set_defaults(fn=cmd_figures)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except VolexError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
