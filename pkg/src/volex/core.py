"""Market parameters, time grids, execution schedules, and the shared cost functional.

Conventions used throughout the package:

* All time integrals are left-endpoint (explicit-Euler / Ito-consistent)
  Riemann sums on a uniform grid.
* Costs are dimensionless: the quadratic-variation cost J = E[int x^2/v dt]
  converts to an expected implementation-shortfall cost via
  IS = kappa*X0^2/2 + kappa_tilde*J.
* Schedules store an execution rate at every grid node; holdings are
  integrated with X_{k+1} = X_k - x_k*dt, so the rate at the final node
  never enters the holdings path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class VolexError(Exception):
    """Base class for errors raised by this package."""


class GridMismatchError(VolexError):
    """Arrays defined on incompatible grids were combined."""


class DomainError(VolexError):
    """An input lies outside the mathematical domain of an operation."""


class UnsupportedRegimeError(VolexError):
    """Parameters fall in a regime the closed forms do not cover."""


class SolverError(VolexError):
    """A numerical solver failed to converge; carries diagnostics."""


class QuadratureError(VolexError):
    """A quadrature did not reach the requested accuracy."""


class ConfigError(VolexError):
    """A run configuration is missing, unreadable, or schema-invalid."""


@dataclass(frozen=True)
class MarketParams:
    """Linear impact coefficients and the liquidation task.

    kappa        permanent-impact coefficient (price per share per unit rate)
    kappa_tilde  temporary-impact coefficient, scaled by 1/volume
    horizon      terminal time T
    x0           initial share inventory X0
    """

    kappa: float
    kappa_tilde: float
    horizon: float
    x0: float

    def __post_init__(self):
        for name in ("kappa", "kappa_tilde", "horizon", "x0"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"MarketParams.{name} must be strictly positive")

    def is_cost(self, j: float) -> float:
        """Expected IS cost from the dimensionless cost J."""
        return self.kappa * self.x0**2 / 2.0 + self.kappa_tilde * j


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = k*dt on [0, T] with n_steps intervals."""

    horizon: float
    n_steps: int

    def __post_init__(self):
        if self.horizon <= 0.0:
            raise ValueError("horizon must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be a positive integer")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def n_nodes(self) -> int:
        return self.n_steps + 1

    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)


def holdings_from_rates(rates: np.ndarray, params: MarketParams, grid: TimeGrid) -> np.ndarray:
    """Integrate a rate path into a holdings path, X_{k+1} = X_k - x_k*dt.

    `rates` must hold one value per grid node; the terminal rate is carried
    for completeness but does not affect holdings.
    """
    rates = np.asarray(rates, dtype=float)
    if rates.shape != (grid.n_nodes,):
        raise GridMismatchError(
            f"rates has shape {rates.shape}, expected ({grid.n_nodes},) for this grid"
        )
    holdings = np.empty(grid.n_nodes)
    holdings[0] = params.x0
    holdings[1:] = params.x0 - np.cumsum(rates[:-1]) * grid.dt
    return holdings


@dataclass(frozen=True)
class ExecutionSchedule:
    """An execution-rate path together with its integrated holdings path."""

    grid: TimeGrid
    rates: np.ndarray
    holdings: np.ndarray
    label: str = field(default="", compare=False)

    @classmethod
    def from_rates(cls, rates, params: MarketParams, grid: TimeGrid, label: str = "") -> "ExecutionSchedule":
        rates = np.asarray(rates, dtype=float)
        holdings = holdings_from_rates(rates, params, grid)
        return cls(grid=grid, rates=rates, holdings=holdings, label=label)

    @property
    def terminal_holdings(self) -> float:
        return float(self.holdings[-1])

    def sell_off_error(self) -> float:
        """|X_T| of the integrated path; ~1e-9*X0 for normalized closed forms."""
        return abs(self.terminal_holdings)

    def executed(self) -> float:
        """Total shares sold, sum x_k*dt over the left endpoints."""
        return float(np.sum(self.rates[:-1]) * self.grid.dt)

    def to_csv(self, path) -> None:
        """Serialize as ``t,x,X`` rows."""
        t = self.grid.nodes()
        with open(path, "w") as fh:
            fh.write("t,x,X\n")
            for tk, xk, Xk in zip(t, self.rates, self.holdings):
                fh.write(f"{tk:.17g},{xk:.17g},{Xk:.17g}\n")


def pathwise_cost(schedule: ExecutionSchedule, volume_path, params: MarketParams, grid: TimeGrid) -> float:
    """Realized dimensionless cost int_0^T x_t^2 / v_t dt, left-endpoint rule.

    `volume_path` may be a VolumePath or a raw array of node volumes.
    """
    v = np.asarray(getattr(volume_path, "v", volume_path), dtype=float)
    if v.shape != (grid.n_nodes,):
        raise GridMismatchError(
            f"volume path has shape {v.shape}, expected ({grid.n_nodes},)"
        )
    if schedule.rates.shape != (grid.n_nodes,):
        raise GridMismatchError("schedule and grid disagree on node count")
    if np.any(v <= 0.0):
        raise DomainError("volume path must be strictly positive")
    x = schedule.rates
    return float(np.sum(x[:-1] ** 2 / v[:-1]) * grid.dt)


@dataclass(frozen=True)
class CostReport:
    """Monte Carlo estimate of the dimensionless cost and its IS conversion."""

    j_estimate: float
    is_cost: float
    stderr: float
    n_paths: int

    @classmethod
    def from_j(cls, j: float, stderr: float, n_paths: int, params: MarketParams) -> "CostReport":
        if j < 0.0:
            raise DomainError("cost estimate must be non-negative")
        return cls(j_estimate=j, is_cost=params.is_cost(j), stderr=stderr, n_paths=n_paths)
