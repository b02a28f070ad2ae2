"""Monte Carlo cost evaluation and the noise-amplitude sweep experiments.

All strategies inside one experiment row are evaluated on the same sampled
volume paths (common random numbers), chunked into fixed-size blocks with one
RNG stream per block so estimates are bit-reproducible regardless of how the
work is scheduled. The adaptive strategy applies the expansion feedback
causally along each path and liquidates the remainder at a constant rate over
the final window, which caps the vanishing-horizon singularity of the
feedback rule while keeping the sell-off exact.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import __version__
from .core import CostReport, DomainError, ExecutionSchedule, MarketParams, TimeGrid
from .expansion import ExpansionCoeffs
from .strategies import expected_vwap, twap
from .volume import CHUNK_SIZE, PerturbedOU, VolumeModel, VolumePath, sample_block, sample_path

KNOWN_STRATEGIES = ("twap", "expected_vwap", "adaptive", "exact_vwap")


@dataclass(frozen=True)
class ExperimentConfig:
    """A sweep or sample-path experiment specification."""

    params: MarketParams
    grid: TimeGrid
    u_bar: float
    sigma: float
    rhos: Sequence[float]
    epsilons: Sequence[float]
    strategies: Sequence[str]
    n_paths: int
    seed: int
    delta_liq: float = 0.02
    path_index: int = 0

    def __post_init__(self):
        if self.n_paths < 2:
            raise ValueError("n_paths must be at least 2 for a standard error")
        if not 0.0 < self.delta_liq <= 0.2:
            raise ValueError("delta_liq must lie in (0, 0.2]")
        for s in self.strategies:
            if s not in KNOWN_STRATEGIES:
                raise ValueError(f"unknown strategy {s!r}; choose from {KNOWN_STRATEGIES}")

    def model(self, rho: float, epsilon: float) -> PerturbedOU:
        return PerturbedOU(self.u_bar, epsilon, rho, self.sigma, self.params.horizon)


def _liquidation_start(grid: TimeGrid, delta_liq: float) -> int:
    """First node of the forced-liquidation window; always before the last step."""
    k = int(np.ceil((1.0 - delta_liq) * grid.n_steps))
    return min(k, grid.n_steps - 1)


def _adaptive_block(coeffs: ExpansionCoeffs, v, z, grid: TimeGrid, x0: float, delta_liq: float):
    """Causal adaptive rates over a block of paths.

    Returns (rates, holdings, floor_count). Only columns <= k are read when
    computing the rate at step k, so the schedule is adapted by construction.
    """
    n_paths, _ = v.shape
    n = grid.n_steps
    dt = grid.dt
    k_liq = _liquidation_start(grid, delta_liq)
    rates = np.zeros((n_paths, n + 1))
    hold = np.empty((n_paths, n + 1))
    hold[:, 0] = x0
    floors = 0
    for k in range(k_liq):
        f = v[:, k] * coeffs.w_at_node(k, z[:, k])
        floors += int(np.count_nonzero(f < 0.0))
        f = np.maximum(f, 0.0)
        rates[:, k] = hold[:, k] * f
        hold[:, k + 1] = hold[:, k] * (1.0 - f * dt)
    window = (n - k_liq) * dt
    liq_rate = hold[:, k_liq] / window
    for k in range(k_liq, n):
        rates[:, k] = liq_rate
        hold[:, k + 1] = hold[:, k] - liq_rate * dt
    rates[:, n] = liq_rate
    return rates, hold, floors


def simulate_adaptive(
    params: MarketParams,
    model: PerturbedOU,
    coeffs: ExpansionCoeffs,
    volume_path: VolumePath,
    delta_liq: float = 0.02,
) -> ExecutionSchedule:
    """Apply the second-order feedback rule along one volume path:

    x_t = X_t * v_t * (W0(t) + eps*I1(t, Z_t) + eps^2*I2(t, Z_t)),

    holdings integrated forward explicitly, rates floored at zero, and the
    remaining inventory liquidated at constant rate over the final window.
    """
    rates, hold, _ = _adaptive_block(
        coeffs, volume_path.v[None, :], volume_path.z[None, :], volume_path.grid, params.x0, delta_liq
    )
    return ExecutionSchedule(grid=volume_path.grid, rates=rates[0], holdings=hold[0], label="adaptive")


def _block_costs(strategy, params, grid, v, z, static_rates, coeffs, delta_liq):
    """Pathwise dimensionless costs of one strategy on a sampled block."""
    dt = grid.dt
    inv_v = 1.0 / v[:, :-1]
    if strategy in ("twap", "expected_vwap"):
        x = static_rates[strategy]
        return inv_v @ (x[:-1] ** 2 * dt), 0
    if strategy == "exact_vwap":
        v_total = np.sum(v[:, :-1], axis=1) * dt
        rates = params.x0 * v / v_total[:, None]
        return np.sum(rates[:, :-1] ** 2 * inv_v, axis=1) * dt, 0
    if strategy == "adaptive":
        rates, _, floors = _adaptive_block(coeffs, v, z, grid, params.x0, delta_liq)
        return np.sum(rates[:, :-1] ** 2 * inv_v, axis=1) * dt, floors
    raise ValueError(f"unknown strategy {strategy!r}")


@dataclass
class _Acc:
    n: int = 0
    s1: float = 0.0
    s2: float = 0.0

    def add(self, costs: np.ndarray) -> None:
        self.n += costs.size
        self.s1 += float(np.sum(costs))
        self.s2 += float(np.sum(costs**2))

    def mean(self) -> float:
        return self.s1 / self.n

    def se(self) -> float:
        var = max(self.s2 / self.n - self.mean() ** 2, 0.0) * self.n / (self.n - 1)
        return float(np.sqrt(var / self.n))


def evaluate_strategies(
    model: PerturbedOU,
    params: MarketParams,
    grid: TimeGrid,
    strategies: Sequence[str],
    n_paths: int,
    seed: int,
    delta_liq: float = 0.02,
):
    """Estimate J for several strategies on shared paths.

    Returns (reports, extras) where extras carries the floored-rate count,
    the noise-clamp count, and common-random-number statistics of the
    adaptive-minus-static cost difference when both strategies are present.
    """
    static_rates = {}
    if "twap" in strategies:
        static_rates["twap"] = twap(params, grid).rates
    if "expected_vwap" in strategies:
        static_rates["expected_vwap"] = expected_vwap(params, model, grid).rates
    coeffs = None
    if "adaptive" in strategies:
        if not isinstance(model, PerturbedOU):
            raise DomainError("the adaptive expansion strategy needs a perturbed-volume model")
        coeffs = ExpansionCoeffs.from_ou_model(model, grid)
        if model.epsilon > 0.0:
            coeffs.tabulate()
    accs = {s: _Acc() for s in strategies}
    diff = _Acc() if ("adaptive" in strategies and "expected_vwap" in strategies) else None
    floors = 0
    done = 0
    chunk_index = 0
    while done < n_paths:
        size = min(CHUNK_SIZE, n_paths - done)
        v, z = sample_block(model, grid, seed, size, stream=chunk_index)
        block = {}
        for s in strategies:
            costs, fl = _block_costs(s, params, grid, v, z, static_rates, coeffs, delta_liq)
            block[s] = costs
            floors += fl
            accs[s].add(costs)
        if diff is not None:
            diff.add(block["adaptive"] - block["expected_vwap"])
        done += size
        chunk_index += 1
    reports = {
        s: CostReport.from_j(accs[s].mean(), accs[s].se(), n_paths, params) for s in strategies
    }
    extras = {
        "floors": floors,
        "clamps": coeffs.clamp_count if coeffs is not None else 0,
        "diff_adaptive_static": None if diff is None else (diff.mean(), diff.se()),
    }
    return reports, extras


def estimate_cost(
    strategy: str,
    model: VolumeModel,
    params: MarketParams,
    n_paths: int,
    grid: TimeGrid,
    seed: int,
    delta_liq: float = 0.02,
) -> CostReport:
    """Monte Carlo estimate of the expected dimensionless cost of one strategy."""
    reports, _ = evaluate_strategies(model, params, grid, [strategy], n_paths, seed, delta_liq)
    return reports[strategy]


@dataclass(frozen=True)
class SweepRow:
    epsilon: float
    rho: float
    strategy: str
    report: CostReport
    floors: int = 0


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)
    #: (epsilon, rho) -> (mean, se) of adaptive-minus-static pathwise cost
    diff_stats: dict = field(default_factory=dict)

    def report(self, epsilon: float, rho: float, strategy: str) -> CostReport:
        for r in self.rows:
            if r.epsilon == epsilon and r.rho == rho and r.strategy == strategy:
                return r.report
        raise KeyError((epsilon, rho, strategy))

    def joint_se(self, epsilon: float, rho: float, s1: str, s2: str) -> float:
        a = self.report(epsilon, rho, s1).stderr
        b = self.report(epsilon, rho, s2).stderr
        return float(np.hypot(a, b))

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epsilon,rho,strategy,J,IS,stderr,n_paths\n")
            for r in self.rows:
                fh.write(
                    f"{r.epsilon:.17g},{r.rho:.17g},{r.strategy},"
                    f"{r.report.j_estimate:.17g},{r.report.is_cost:.17g},"
                    f"{r.report.stderr:.17g},{r.report.n_paths}\n"
                )


def epsilon_sweep(config: ExperimentConfig) -> SweepResult:
    """Estimate costs for every (rho, epsilon, strategy) combination."""
    result = SweepResult()
    for rho in config.rhos:
        for eps in config.epsilons:
            model = config.model(rho, eps)
            reports, extras = evaluate_strategies(
                model,
                config.params,
                config.grid,
                config.strategies,
                config.n_paths,
                config.seed,
                config.delta_liq,
            )
            for s in config.strategies:
                result.rows.append(
                    SweepRow(
                        epsilon=eps,
                        rho=rho,
                        strategy=s,
                        report=reports[s],
                        floors=extras["floors"] if s == "adaptive" else 0,
                    )
                )
            if extras["diff_adaptive_static"] is not None:
                result.diff_stats[(eps, rho)] = extras["diff_adaptive_static"]
    return result


def sample_strategy_paths(config: ExperimentConfig, rho: float, epsilon: float):
    """Rate paths of the three benchmark strategies along one sampled path.

    Returns a dict of columns for the ``t,v,x_stat,x_adap,x_ant`` CSV.
    """
    model = config.model(rho, epsilon)
    path = sample_path(model, config.grid, config.seed, stream=config.path_index)
    stat = expected_vwap(config.params, model, config.grid)
    coeffs = ExpansionCoeffs.from_ou_model(model, config.grid)
    if epsilon > 0.0:
        coeffs.tabulate()
    adap = simulate_adaptive(config.params, model, coeffs, path, config.delta_liq)
    v_total = path.total_volume
    ant_rates = config.params.x0 * path.v / v_total
    return {
        "t": config.grid.nodes(),
        "v": path.v,
        "x_stat": stat.rates,
        "x_adap": adap.rates,
        "x_ant": ant_rates,
    }


def write_paths_csv(columns: dict, path) -> None:
    names = list(columns)
    arrays = [np.asarray(columns[n]) for n in names]
    with open(path, "w") as fh:
        fh.write(",".join(names) + "\n")
        for row in zip(*arrays):
            fh.write(",".join(f"{x:.17g}" for x in row) + "\n")


def content_hash(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(str(p) for p in paths):
        with open(p, "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()


def write_manifest(path, config_echo: dict, seed: int, outputs, wall_clock: float) -> None:
    manifest = {
        "tool": "volex",
        "version": __version__,
        "seed": seed,
        "config": config_echo,
        "outputs": [str(p) for p in outputs],
        "content_sha256": content_hash(outputs),
        "wall_clock_seconds": wall_clock,
        "created_unix": time.time(),
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
