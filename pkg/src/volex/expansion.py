"""Second-order expansion of the adaptive value function around small noise.

For volume v_t = u_bar(t) * exp(eps * Z_t) the value function per unit
inventory squared expands as

    W(t, z) = 1/(Ubar_T - Ubar_t) + eps * I1(t, z) + eps^2 * I2(t, z) + ...

with I1, I2 given by moment integrals of the noise process. Two evaluation
routes are provided and cross-checked against each other:

* the Ornstein-Uhlenbeck closed forms (exact exponential-decay integrals for
  the inner kernels, composite Simpson for the outer integral);
* the generic route driven by caller-supplied moment functions
  m(s, t, z) = E[Z_s | Z_t = z] and a1(s, t, z) = E[Z_s^2 | Z_t = z],
  integrated with composite Gauss-Legendre quadrature. The expectation inside
  the squared-forecast term is expanded analytically, which requires m to be
  linear in its z argument (checked at construction).

Both routes also exist in a penalty-capped variant where every occurrence of
the volume left to trade (Ubar_T - Ubar_.) is shifted by 1/lambda; this
matches a finite terminal penalty lambda * X_T^2 and lets the expansion be
compared against a PDE solve at the same lambda with no extrapolation error.
"""

from __future__ import annotations

import logging
from typing import Callable, Optional

import numpy as np

from .core import DomainError, QuadratureError, TimeGrid
from .volume import Coef, PerturbedOU

log = logging.getLogger(__name__)

_GAUSS_NODES = 24  # per panel in the generic route


def exp_decay_integral(u_bar: Coef, rate: float, a, b) -> np.ndarray:
    """Exact int_a^b e^{-rate*r} u_bar(r) dr for piecewise-constant u_bar.

    Vectorized over b (a scalar); exact per segment, no quadrature error.
    """
    b = np.atleast_1d(np.asarray(b, dtype=float))
    edges = np.append(u_bar.breaks, u_bar.horizon)
    out = np.zeros_like(b)
    for i, u_val in enumerate(u_bar.values):
        lo = np.maximum(edges[i], a)
        hi = np.minimum(edges[i + 1], b)
        width = hi - lo
        valid = width > 0
        if rate != 0.0:
            seg = u_val / rate * (np.exp(-rate * lo) - np.exp(-rate * hi))
        else:
            seg = u_val * width
        out += np.where(valid, seg, 0.0)
    return out


class ExpansionCoeffs:
    """Expansion context: volume profile, noise moments, and node tables.

    Exact cumulative volume is used in the analytical routes; the per-node
    tables used by the Monte Carlo driver use the left-endpoint discrete
    cumulative so the zeroth-order feedback reproduces the expected VWAP
    schedule on the grid exactly.
    """

    def __init__(
        self,
        u_bar,
        horizon: float,
        epsilon: float,
        rho: Optional[float] = None,
        sigma: Optional[float] = None,
        m: Optional[Callable] = None,
        a1: Optional[Callable] = None,
        grid: Optional[TimeGrid] = None,
        n_quad: int = 256,
    ):
        self.u_bar = Coef.from_any(u_bar, horizon)
        self.horizon = float(horizon)
        self.epsilon = float(epsilon)
        self.rho = rho
        self.sigma = sigma
        self.m = m
        self.a1 = a1
        self.n_quad = int(n_quad)
        self.u_total = float(self.u_bar.integral(horizon))
        if m is not None:
            self._check_moment_linearity()
        self.grid = grid
        self.clamp_count = 0
        self._z_grid = None
        self._i1_tab = None
        self._i2_tab = None
        if grid is not None:
            if abs(grid.horizon - horizon) > 1e-12 * horizon:
                raise ValueError("grid horizon disagrees with the expansion horizon")
            t = grid.nodes()
            self.u_nodes = np.asarray(self.u_bar(t), dtype=float) * np.ones_like(t)
            # discrete left-endpoint cumulative volume and its total
            self.u_cum = np.zeros(grid.n_nodes)
            self.u_cum[1:] = np.cumsum(self.u_nodes[:-1]) * grid.dt
            self.u_total_disc = float(self.u_cum[-1])
            # zeroth-order feedback per node, valid for k < n_steps
            self.w0_nodes = 1.0 / (self.u_total_disc - self.u_cum[:-1])

    @classmethod
    def from_ou_model(cls, model: PerturbedOU, grid: Optional[TimeGrid] = None, n_quad: int = 256) -> "ExpansionCoeffs":
        return cls(
            model.u_bar,
            model.horizon,
            model.epsilon,
            rho=model.rho,
            sigma=model.sigma,
            grid=grid,
            n_quad=n_quad,
        )

    # ------------------------------------------------------------------ #
    # analytical evaluation                                              #
    # ------------------------------------------------------------------ #

    def _check_time(self, t: float, lam: Optional[float]) -> None:
        if t < 0.0 or t > self.horizon:
            raise DomainError(f"t={t} outside [0, {self.horizon}]")
        if lam is None and t >= self.horizon:
            raise DomainError("the uncapped value diverges at the horizon")

    def _remaining(self, t, lam: Optional[float]):
        """Ubar_T - Ubar_t, shifted by 1/lambda in the capped variant."""
        rem = self.u_total - self.u_bar.integral(t)
        return rem if lam is None else rem + 1.0 / lam

    def base_w0(self, t: float, lam: Optional[float] = None) -> float:
        """Zeroth-order value 1/(Ubar_T - Ubar_t); finite at t=T only when capped."""
        self._check_time(t, lam)
        return float(1.0 / self._remaining(t, lam))

    def decay_weighted_tail(self, times) -> np.ndarray:
        """G(s) = int_s^T e^{-rho(r-s)} u_bar_r dr for the OU kernel.

        Exact per segment with all exponents shifted to (r - s), so there is
        no cancellation however large rho * s gets.
        """
        times = np.atleast_1d(np.asarray(times, dtype=float))
        edges = np.append(self.u_bar.breaks, self.horizon)
        out = np.zeros_like(times)
        for i, u_val in enumerate(self.u_bar.values):
            lo = np.maximum(edges[i], times)
            hi = np.maximum(edges[i + 1], times)
            out += u_val / self.rho * (np.exp(-self.rho * (lo - times)) - np.exp(-self.rho * (hi - times)))
        return out

    def u_hat(self, s, lam: Optional[float] = None) -> np.ndarray:
        """Relative forecastability weight U^_s = 1 - G(s)/(Ubar_T - Ubar_s).

        Tends to 0 at s=T in the uncapped case and to 1 in the capped case.
        """
        s = np.atleast_1d(np.asarray(s, dtype=float))
        g = self.decay_weighted_tail(s)
        rem = self._remaining(s, lam)
        ratio = np.where(rem > 0.0, g / np.where(rem > 0.0, rem, 1.0), 1.0)
        return 1.0 - ratio

    def _require_ou(self):
        if self.rho is None or self.sigma is None:
            raise ValueError("this route needs OU noise parameters (rho, sigma)")

    def i1_ou(self, t: float, z, lam: Optional[float] = None):
        """First-order coefficient, OU closed form; linear in z and exact in s."""
        self._require_ou()
        self._check_time(t, lam)
        z = np.asarray(z, dtype=float)
        pref = self._remaining(t, lam) ** -2
        kernel = float(self.decay_weighted_tail(t)[0])
        out = -z * pref * kernel
        return float(out) if out.ndim == 0 else out

    def i2_ou(self, t: float, z, lam: Optional[float] = None):
        """Second-order coefficient, OU closed form; quadratic polynomial in z."""
        self._require_ou()
        self._check_time(t, lam)
        z = np.asarray(z, dtype=float)
        c2, c0 = self._i2_ou_poly(t, lam)
        out = c2 * z**2 + c0
        return float(out) if out.ndim == 0 else out

    def _i2_ou_poly(self, t: float, lam: Optional[float]):
        """Coefficients (c2, c0) with I2(t, z) = c2 z^2 + c0 for OU noise.

        Composite Simpson with the panel count scaled so both the
        exp(-2 rho (s-t)) kernel and, in the capped variant, the forecast
        weight's turnover of width 1/(lambda * u) near the horizon stay
        resolved. When the turnover is too sharp to resolve, the last sliver
        is integrated in closed form with frozen slowly-varying factors.
        """
        T = self.horizon
        pref = self._remaining(t, lam) ** -2
        n = max(self.n_quad, 2 * int(8 * self.rho * (T - t) + 1))
        end = T
        c2 = c0 = 0.0
        if lam is not None:
            turnover = 1.0 / (lam * float(np.max(self.u_bar.values)))
            if turnover < 4.0 * (T - t) / n:
                n_ref = 2 * int(2.0 * (T - t) / turnover + 1)
                if n_ref <= 1 << 17:
                    n = n_ref
                else:
                    # analytic sliver: U^ ~ 1/(1 + lambda u (T-s)) there
                    width = min(400.0 * turnover, (T - t) / 2.0)
                    a_coef = lam * float(self.u_bar(T))
                    shape_int = width / (1.0 + a_coef * width) - width / 2.0
                    decay2_T = np.exp(-2.0 * self.rho * (T - t))
                    var_T = self.sigma**2 / (2.0 * self.rho) * (1.0 - decay2_T)
                    u_T = float(self.u_bar(T))
                    c2 -= pref * decay2_T * u_T * shape_int
                    c0 -= pref * var_T * u_T * shape_int
                    end = T - width
        s = np.linspace(t, end, n + 1)
        w = _simpson_weights(n, (end - t) / n)
        u_s = self.u_bar(s) * np.ones_like(s)
        shape = self.u_hat(s, lam) ** 2 - 0.5
        decay2 = np.exp(-2.0 * self.rho * (s - t))
        var_term = self.sigma**2 / (2.0 * self.rho) * (1.0 - decay2)
        c2 -= pref * float(np.sum(w * decay2 * shape * u_s))
        c0 -= pref * float(np.sum(w * var_term * shape * u_s))
        return c2, c0

    def _check_moment_linearity(self) -> None:
        T = self.horizon
        for s, t in ((0.7 * T, 0.2 * T), (T, 0.0)):
            lhs = self.m(s, t, 2.0)
            rhs = 2.0 * self.m(s, t, 1.0)
            if abs(lhs - rhs) > 1e-9 * max(1.0, abs(rhs)):
                raise ValueError(
                    "the generic route expands the squared-forecast expectation "
                    "analytically, which requires m(s, t, z) linear in z"
                )

    def _forecast_tail(self, s_nodes) -> np.ndarray:
        """G(s) = int_s^T m(r, s, 1) u_bar_r dr by Gauss-Legendre panels."""
        out = np.empty(s_nodes.size)
        for i, s in enumerate(s_nodes):
            r, w = _gauss_panel(s, self.horizon)
            out[i] = float(np.sum(w * self.m(r, s, 1.0) * self.u_bar(r)))
        return out

    def i1_generic(self, t: float, z, lam: Optional[float] = None):
        """First-order coefficient from the supplied moment function m."""
        if self.m is None:
            raise ValueError("no moment function m supplied")
        self._check_time(t, lam)
        z = np.asarray(z, dtype=float)
        r, w = _gauss_panel(t, self.horizon)
        pref = self._remaining(t, lam) ** -2
        base = float(np.sum(w * self.m(r, t, 1.0) * self.u_bar(r)))
        if not np.isfinite(base):
            raise QuadratureError(f"first-order integrand not integrable at t={t}")
        out = -z * pref * base
        return float(out) if out.ndim == 0 else out

    def i2_generic(self, t: float, z, lam: Optional[float] = None):
        """Second-order coefficient from the moment functions (m, a1):

        -(Ubar_T-Ubar_t)^-2 int_t^T (A1/2 + A2 - 2 A3) u_bar_s ds, with
        A2 = a1 * G(s)^2 / (Ubar_T-Ubar_s)^2 and A3 = a1 * G(s)/(Ubar_T-Ubar_s)
        after expanding the inner expectations for z-linear m.
        """
        if self.m is None or self.a1 is None:
            raise ValueError("the generic route needs both m and a1")
        self._check_time(t, lam)
        z = np.asarray(z, dtype=float)
        s, w = _gauss_panel(t, self.horizon)
        g = self._forecast_tail(s)
        rem_s = self._remaining(s, lam)
        ratio = np.where(rem_s > 0.0, g / np.where(rem_s > 0.0, rem_s, 1.0), 1.0)
        shape = 0.5 + ratio**2 - 2.0 * ratio
        u_s = self.u_bar(s) * np.ones_like(s)
        pref = self._remaining(t, lam) ** -2
        # a1(s, t, z) = var(s, t) + mean^2 = a1(s,t,0) + m(s,t,1)^2 z^2
        var_part = self.a1(s, t, 0.0) * np.ones_like(s)
        mean_sq = (self.m(s, t, 1.0) * np.ones_like(s)) ** 2
        int_var = float(np.sum(w * var_part * shape * u_s))
        int_mean = float(np.sum(w * mean_sq * shape * u_s))
        if not (np.isfinite(int_var) and np.isfinite(int_mean)):
            raise QuadratureError(f"second-order integrand not integrable at t={t}")
        out = -pref * (int_mean * z**2 + int_var)
        return float(out) if out.ndim == 0 else out

    def w_eps(self, t: float, z, lam: Optional[float] = None, route: str = "ou"):
        """W0(t) + eps*I1(t,z) + eps^2*I2(t,z); reduces to the base term at eps=0."""
        if route == "ou":
            i1, i2 = self.i1_ou, self.i2_ou
        elif route == "generic":
            i1, i2 = self.i1_generic, self.i2_generic
        else:
            raise ValueError(f"unknown route {route!r}")
        base = self.base_w0(t, lam)
        if self.epsilon == 0.0:
            return base * np.ones_like(np.asarray(z, dtype=float)) if np.ndim(z) else base
        return base + self.epsilon * i1(t, z, lam) + self.epsilon**2 * i2(t, z, lam)

    # ------------------------------------------------------------------ #
    # node tables for the Monte Carlo driver                             #
    # ------------------------------------------------------------------ #

    def tabulate(self, n_z: int = 65, n_sd: float = 5.0) -> None:
        """Build (t_k, z_j) tables of I1 and I2 on +-n_sd stationary SDs."""
        if self.grid is None:
            raise ValueError("a TimeGrid is needed to tabulate")
        self._require_ou()
        half = n_sd * self.sigma / np.sqrt(2.0 * self.rho)
        self._z_grid = np.linspace(-half, half, n_z)
        n = self.grid.n_steps
        t = self.grid.nodes()
        self._i1_tab = np.empty((n, n_z))
        self._i2_tab = np.empty((n, n_z))
        for k in range(n):
            self._i1_tab[k] = self.i1_ou(t[k], self._z_grid)
            self._i2_tab[k] = self.i2_ou(t[k], self._z_grid)

    def w_at_node(self, k: int, z) -> np.ndarray:
        """Expansion value at node k for (an array of) noise states z.

        z outside the tabulated band is clamped; occurrences are counted and
        logged since they signal the band was sized too tightly.
        """
        z = np.asarray(z, dtype=float)
        if self.epsilon == 0.0 or self._z_grid is None:
            if self.epsilon != 0.0:
                raise ValueError("call tabulate() before evaluating with eps > 0")
            return self.w0_nodes[k] * np.ones_like(z)
        lo, hi = self._z_grid[0], self._z_grid[-1]
        n_out = int(np.count_nonzero((z < lo) | (z > hi)))
        if n_out:
            # first occurrence at warning level, repeats at debug
            level = logging.DEBUG if self.clamp_count else logging.WARNING
            self.clamp_count += n_out
            log.log(level, "clamped %d noise values outside [%.4g, %.4g]", n_out, lo, hi)
            z = np.clip(z, lo, hi)
        i1 = np.interp(z, self._z_grid, self._i1_tab[k])
        i2 = np.interp(z, self._z_grid, self._i2_tab[k])
        return self.w0_nodes[k] + self.epsilon * i1 + self.epsilon**2 * i2

    def dump_csv(self, path) -> None:
        """Write the tabulated coefficients as ``t,z,I1,I2`` rows."""
        if self._z_grid is None:
            raise ValueError("nothing tabulated yet")
        t = self.grid.nodes()
        with open(path, "w") as fh:
            fh.write("t,z,I1,I2\n")
            for k in range(self._i1_tab.shape[0]):
                for j, zj in enumerate(self._z_grid):
                    fh.write(f"{t[k]:.17g},{zj:.17g},{self._i1_tab[k, j]:.17g},{self._i2_tab[k, j]:.17g}\n")


def ou_moment_functions(rho: float, sigma: float):
    """(m, a1) for OU noise: m = z e^{-rho(s-t)}, a1 = m^2 + stationary-variance fill-in."""

    def m(s, t, z):
        return z * np.exp(-rho * (np.asarray(s) - t))

    def a1(s, t, z):
        decay2 = np.exp(-2.0 * rho * (np.asarray(s) - t))
        return z**2 * decay2 + sigma**2 / (2.0 * rho) * (1.0 - decay2)

    return m, a1


def _simpson_weights(n: int, h: float) -> np.ndarray:
    if n % 2 or n < 2:
        raise ValueError("Simpson rule needs an even, positive panel count")
    w = np.ones(n + 1)
    w[1:-1:2] = 4.0
    w[2:-2:2] = 2.0
    return w * h / 3.0


def _gauss_panel(a: float, b: float, n: int = _GAUSS_NODES):
    """Composite Gauss-Legendre nodes/weights on [a, b], 8 panels."""
    x, w = np.polynomial.legendre.leggauss(n)
    panels = np.linspace(a, b, 9)
    nodes, weights = [], []
    for lo, hi in zip(panels[:-1], panels[1:]):
        mid, half = (lo + hi) / 2.0, (hi - lo) / 2.0
        nodes.append(mid + half * x)
        weights.append(half * w)
    return np.concatenate(nodes), np.concatenate(weights)
