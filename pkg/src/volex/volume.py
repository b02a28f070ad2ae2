"""Log-volume models, their closed-form log-moments, and exact path sampling.

Three model families are supported:

* ``TimeDepBS``     -- log-volume dY = b_t dt + sigma_t dB with deterministic,
                       piecewise-constant coefficients (constant-coefficient
                       geometric Brownian motion is the one-piece special case);
* ``PerturbedOU``   -- v_t = u_bar(t) * exp(eps * Z_t) with Z an
                       Ornstein-Uhlenbeck noise, dZ = -rho Z dt + sigma dB, Z_0 = 0;
* ``ConstantVolume``-- v_t = v_bar.

Sampling is performed on the log / noise scale with the exact Gaussian
transition density of each model, so every sampled volume is strictly
positive and there is no discretization bias in the marginals.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .core import DomainError, TimeGrid

#: Number of paths drawn from one RNG stream; fixed so results are
#: reproducible regardless of how work is split across workers.
CHUNK_SIZE = 10_000


class Coef:
    """Piecewise-constant deterministic coefficient on [0, T].

    Value on [breaks[i], breaks[i+1]) is values[i]; the last piece extends
    to T inclusive. Integrals are exact.
    """

    def __init__(self, breaks: Sequence[float], values: Sequence[float], horizon: float):
        breaks = np.asarray(breaks, dtype=float)
        values = np.asarray(values, dtype=float)
        if breaks.ndim != 1 or breaks.size != values.size:
            raise ValueError("breaks and values must be 1-d arrays of equal length")
        if breaks[0] != 0.0 or np.any(np.diff(breaks) <= 0.0):
            raise ValueError("breaks must start at 0 and be strictly increasing")
        if breaks[-1] >= horizon:
            raise ValueError("the last break must lie strictly before the horizon")
        self.breaks = breaks
        self.values = values
        self.horizon = float(horizon)
        # segment right edges, cumulative integral up to each left edge
        self._edges = np.append(breaks[1:], horizon)
        self._cum = np.concatenate(([0.0], np.cumsum(values * np.diff(np.append(breaks, horizon)))))[:-1]

    @classmethod
    def from_any(cls, spec: Union[float, Callable, "Coef", Sequence], horizon: float, n_pieces: int = 256) -> "Coef":
        """Coerce a scalar, callable, (breaks, values) pair, or Coef.

        Callables are tabulated piecewise-constant on ``n_pieces`` uniform
        left endpoints, the convention for bounded measurable coefficients.
        """
        if isinstance(spec, Coef):
            return spec
        if callable(spec):
            breaks = np.linspace(0.0, horizon, n_pieces + 1)[:-1]
            return cls(breaks, [float(spec(t)) for t in breaks], horizon)
        if np.isscalar(spec):
            return cls([0.0], [float(spec)], horizon)
        breaks, values = spec
        return cls(breaks, values, horizon)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.clip(np.searchsorted(self.breaks, t, side="right") - 1, 0, self.values.size - 1)
        out = self.values[idx]
        return float(out) if out.ndim == 0 else out

    def integral(self, t):
        """Exact int_0^t of the step function, valid for t in [0, T]."""
        t = np.asarray(t, dtype=float)
        idx = np.clip(np.searchsorted(self.breaks, t, side="right") - 1, 0, self.values.size - 1)
        out = self._cum[idx] + self.values[idx] * (t - self.breaks[idx])
        return float(out) if out.ndim == 0 else out

    def integral_between(self, a, b):
        return self.integral(b) - self.integral(a)

    def squared(self) -> "Coef":
        return Coef(self.breaks, self.values**2, self.horizon)

    def is_constant(self) -> bool:
        return bool(np.all(self.values == self.values[0]))


@dataclass(frozen=True)
class ConstantVolume:
    v_bar: float

    def __post_init__(self):
        if self.v_bar <= 0.0:
            raise ValueError("v_bar must be positive")


class TimeDepBS:
    """Time-dependent Black-Scholes log-volume: dY = b_t dt + sigma_t dB, v = e^Y."""

    def __init__(self, v0: float, b, sigma, horizon: float):
        if v0 <= 0.0:
            raise ValueError("v0 must be positive")
        self.v0 = float(v0)
        self.horizon = float(horizon)
        self.b = Coef.from_any(b, horizon)
        self.sigma = Coef.from_any(sigma, horizon)
        if np.any(self.sigma.values < 0.0):
            raise ValueError("sigma must be non-negative")


class PerturbedOU:
    """Geometric OU perturbation of a deterministic profile.

    v_t = u_bar(t) * exp(epsilon * Z_t), dZ = -rho Z dt + sigma dB, Z_0 = 0.
    """

    def __init__(self, u_bar, epsilon: float, rho: float, sigma: float, horizon: float):
        if epsilon < 0.0:
            raise ValueError("epsilon must be non-negative")
        if rho <= 0.0 or sigma <= 0.0:
            raise ValueError("rho and sigma must be positive")
        self.u_bar = Coef.from_any(u_bar, horizon)
        if np.any(self.u_bar.values <= 0.0):
            raise ValueError("u_bar must be strictly positive")
        self.epsilon = float(epsilon)
        self.rho = float(rho)
        self.sigma = float(sigma)
        self.horizon = float(horizon)

    def stationary_std(self) -> float:
        """Standard deviation of the stationary OU noise, sigma/sqrt(2 rho)."""
        return self.sigma / np.sqrt(2.0 * self.rho)


VolumeModel = Union[ConstantVolume, TimeDepBS, PerturbedOU]


@dataclass(frozen=True)
class VolumePath:
    """One sampled volume path with its noise state and cumulative volume.

    v_cum[k] = sum_{j<k} v_j * dt (left-endpoint cumulative volume), so
    v_cum[0] = 0 and v_cum[-1] is the realized total volume V_T.
    """

    grid: TimeGrid
    v: np.ndarray
    z: np.ndarray
    v_cum: np.ndarray

    @property
    def total_volume(self) -> float:
        return float(self.v_cum[-1])


def initial_volume(model: VolumeModel) -> float:
    """v_0 implied by the model."""
    if isinstance(model, ConstantVolume):
        return model.v_bar
    if isinstance(model, TimeDepBS):
        return model.v0
    return float(model.u_bar(0.0))


def log_moments(model: VolumeModel, t, horizon: float | None = None):
    """Mean and variance of log v_t; closed form for every model family.

    Returns (m_t, s2_t) with log v_t ~ Normal(m_t, s2_t); accepts scalar or
    array ``t`` within [0, T].
    """
    t_arr = np.asarray(t, dtype=float)
    T = horizon if horizon is not None else getattr(model, "horizon", None)
    if T is not None and (np.any(t_arr < 0.0) or np.any(t_arr > T * (1 + 1e-12))):
        raise DomainError(f"t must lie in [0, {T}]")
    if isinstance(model, ConstantVolume):
        m = np.log(model.v_bar) * np.ones_like(t_arr)
        s2 = np.zeros_like(t_arr)
    elif isinstance(model, TimeDepBS):
        m = np.log(model.v0) + model.b.integral(t_arr)
        s2 = model.sigma.squared().integral(t_arr)
    elif isinstance(model, PerturbedOU):
        m = np.log(model.u_bar(t_arr)) * np.ones_like(t_arr)
        s2 = model.epsilon**2 * model.sigma**2 * -np.expm1(-2.0 * model.rho * t_arr) / (2.0 * model.rho)
    else:
        raise TypeError(f"unknown volume model {type(model)!r}")
    if np.isscalar(t) or np.asarray(t).ndim == 0:
        return float(m), float(s2)
    return m, s2


def harmonic_mean_u(model: VolumeModel, t, horizon: float | None = None):
    """u_t = E[v_t^{-1}]^{-1} = exp(m_t - s2_t/2) under lognormal marginals."""
    m, s2 = log_moments(model, t, horizon)
    return np.exp(m - s2 / 2.0)


def _rng_for(seed: int, stream: int) -> np.random.Generator:
    """Deterministic per-stream generator; streams never overlap."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream)]))


def _cumulative_volume(v: np.ndarray, dt: float) -> np.ndarray:
    """Left-endpoint cumulative volume along the last axis."""
    out = np.zeros(v.shape)
    out[..., 1:] = np.cumsum(v[..., :-1], axis=-1) * dt
    return out


def sample_block(model: VolumeModel, grid: TimeGrid, seed: int, n_paths: int, stream: int = 0):
    """Sample ``n_paths`` volume paths as (v, z) arrays of shape (n_paths, n_nodes).

    Exact-in-distribution Gaussian updates on the noise scale; deterministic
    given (model, grid, seed, stream, n_paths).
    """
    n = grid.n_steps
    dt = grid.dt
    t = grid.nodes()
    if isinstance(model, ConstantVolume):
        v = np.full((n_paths, n + 1), model.v_bar)
        z = np.zeros((n_paths, n + 1))
        return v, z
    rng = _rng_for(seed, stream)
    shocks = rng.standard_normal((n_paths, n))
    if isinstance(model, TimeDepBS):
        drift = model.b.integral(t)                       # int_0^{t_k} b
        s2 = model.sigma.squared()
        inc_var = s2.integral(t[1:]) - s2.integral(t[:-1])
        z = np.zeros((n_paths, n + 1))
        np.cumsum(shocks * np.sqrt(inc_var), axis=1, out=z[:, 1:])
        v = model.v0 * np.exp(drift + z)
        return v, z
    if isinstance(model, PerturbedOU):
        decay = np.exp(-model.rho * dt)
        trans_sd = model.sigma * np.sqrt(-np.expm1(-2.0 * model.rho * dt) / (2.0 * model.rho))
        z = np.zeros((n_paths, n + 1))
        for k in range(n):
            z[:, k + 1] = z[:, k] * decay + trans_sd * shocks[:, k]
        v = model.u_bar(t) * np.exp(model.epsilon * z)
        return v, z
    raise TypeError(f"unknown volume model {type(model)!r}")


def sample_path(model: VolumeModel, grid: TimeGrid, seed: int, stream: int = 0) -> VolumePath:
    """Sample a single VolumePath; deterministic given (model, grid, seed, stream)."""
    v, z = sample_block(model, grid, seed, 1, stream)
    return VolumePath(grid=grid, v=v[0], z=z[0], v_cum=_cumulative_volume(v[0], grid.dt))


def path_from_arrays(v_row: np.ndarray, z_row: np.ndarray, grid: TimeGrid) -> VolumePath:
    return VolumePath(grid=grid, v=v_row, z=z_row, v_cum=_cumulative_volume(v_row, grid.dt))


def load_bs_table(path, horizon: float):
    """Read a ``t,b,sigma`` CSV into piecewise-constant coefficient tables."""
    ts, bs, sg = [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ts.append(float(row["t"]))
            bs.append(float(row["b"]))
            sg.append(float(row["sigma"]))
    return Coef(ts, bs, horizon), Coef(ts, sg, horizon)


def load_u_bar_table(path, horizon: float) -> Coef:
    """Read a ``t,u_bar`` CSV into a piecewise-constant profile."""
    ts, us = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ts.append(float(row["t"]))
            us.append(float(row["u_bar"]))
    return Coef(ts, us, horizon)
