"""Finite-difference solver for the penalized control PDE and its feedback rule.

In log-volume coordinates y = log v the penalized value equation

    dW/dt + b(t,y) dW/dy + (sigma(t,y)^2/2) d2W/dy2 = e^y W^2,
    W(T, y) = lambda * e^{-y}

is integrated backward with an IMEX scheme: advection and diffusion are
implicit (tridiagonal solve), the quadratic source is linearized about the
previous time slice (one Picard iteration; an optional Newton loop iterates
the same system to tolerance). With the Picard linearization the purely
time-dependent component of the solution obeys an exactly reciprocal-linear
update, so the stiff terminal layer introduced by large lambda costs no
accuracy.

A second entry point solves the same control problem in noise coordinates
(state Z of a perturbed-volume model, flat terminal penalty lambda); it is
used to compare PDE solutions against the small-noise expansion at matched
lambda.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .core import (
    DomainError,
    ExecutionSchedule,
    MarketParams,
    SolverError,
    TimeGrid,
    UnsupportedRegimeError,
)
from .strategies import effective_drift, exp_weighted_tail
from .volume import (
    ConstantVolume,
    PerturbedOU,
    TimeDepBS,
    VolumeModel,
    VolumePath,
    initial_volume,
    log_moments,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PdeGrid:
    """Uniform (time x state) grid for the backward solve."""

    horizon: float
    n_t: int
    n_y: int
    y_min: float
    y_max: float

    def __post_init__(self):
        if self.n_t < 1 or self.n_y < 3:
            raise ValueError("need at least one time step and three state nodes")
        if not self.y_max > self.y_min:
            raise ValueError("empty state interval")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_t

    @property
    def dy(self) -> float:
        return (self.y_max - self.y_min) / (self.n_y - 1)

    def t_nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_t + 1)

    def y_nodes(self) -> np.ndarray:
        return np.linspace(self.y_min, self.y_max, self.n_y)

    @classmethod
    def for_model(
        cls,
        model: VolumeModel,
        n_t: int = 2000,
        n_y: int = 400,
        n_sd: float = 5.0,
        pad: float = 0.25,
        anchor: float | None = None,
    ) -> "PdeGrid":
        """Log-volume domain wide enough to contain m_t +- n_sd sqrt(s2_t).

        With ``anchor`` set (e.g. log v0), the node set is shifted by less
        than one spacing so the anchor falls exactly on a node; evaluations
        there are then free of interpolation error.
        """
        T = model.horizon if not isinstance(model, ConstantVolume) else 1.0
        t = np.linspace(0.0, T, 65)
        m, s2 = log_moments(model, t, T)
        sd = np.sqrt(np.asarray(s2))
        y_min = float(np.min(np.asarray(m) - n_sd * sd) - pad)
        y_max = float(np.max(np.asarray(m) + n_sd * sd) + pad)
        if anchor is not None:
            dy = (y_max - y_min) / (n_y - 1)
            y_min = anchor - np.ceil((anchor - y_min) / dy) * dy
            y_max = y_min + (n_y - 1) * dy
        return cls(horizon=T, n_t=n_t, n_y=n_y, y_min=y_min, y_max=y_max)


@dataclass
class SolveDiagnostics:
    """Solver audit trail, exportable as JSON."""

    boundary: str
    theta: float
    newton: bool
    total_iterations: int = 0
    max_residual: float = 0.0
    max_cell_peclet: float = 0.0
    min_value: float = 0.0
    notes: list = field(default_factory=list)

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.__dict__, fh, indent=2)


@dataclass(frozen=True)
class ValueSurface:
    """Backward-solved value per unit inventory squared on a (t, state) grid."""

    t_nodes: np.ndarray
    y_nodes: np.ndarray
    w: np.ndarray  # shape (n_t + 1, n_y)
    lam: float
    coords: str  # "log_volume" or "noise"
    diagnostics: SolveDiagnostics | None = None

    def value_at(self, t: float, y: float) -> float:
        """Bilinear interpolation of W."""
        return float(_bilinear(self.t_nodes, self.y_nodes, self.w, t, np.asarray([y]))[0])

    def feedback_row(self, k: int, y) -> np.ndarray:
        """v * W at time node k: the execution-rate multiplier per unit inventory.

        Interpolates the product e^y W(t, y), which is better conditioned than
        W itself (for time-dependent BS volume it is a function of time only).
        """
        if self.coords != "log_volume":
            raise DomainError("feedback evaluation needs a log-volume surface")
        y = np.asarray(y, dtype=float)
        prod = np.exp(self.y_nodes) * self.w[k]
        return np.interp(y, self.y_nodes, prod)

    def product_rows(self, t_eval) -> np.ndarray:
        """e^y W interpolated in time onto ``t_eval`` (exact at matching nodes)."""
        if self.coords != "log_volume":
            raise DomainError("feedback evaluation needs a log-volume surface")
        prod = np.exp(self.y_nodes)[None, :] * self.w
        t_eval = np.asarray(t_eval, dtype=float)
        idx = np.clip(np.searchsorted(self.t_nodes, t_eval, side="right") - 1, 0, self.t_nodes.size - 2)
        frac = (t_eval - self.t_nodes[idx]) / (self.t_nodes[idx + 1] - self.t_nodes[idx])
        frac = np.clip(frac, 0.0, 1.0)[:, None]
        return (1.0 - frac) * prod[idx] + frac * prod[idx + 1]

    def j_lambda(self, params: MarketParams, v0: float) -> float:
        """Penalized optimal cost J^lambda = X0^2 * W(0, v0)."""
        y0 = np.log(v0) if self.coords == "log_volume" else 0.0
        return params.x0**2 * self.value_at(0.0, y0)

    def terminal_slice_exact(self) -> bool:
        if self.coords == "log_volume":
            target = self.lam * np.exp(-self.y_nodes)
        else:
            target = self.lam * np.ones_like(self.y_nodes)
        return bool(np.array_equal(self.w[-1], target))

    def to_csv(self, path) -> None:
        """Serialize as ``t,y,W`` rows."""
        with open(path, "w") as fh:
            fh.write("t,y,W\n")
            for i, t in enumerate(self.t_nodes):
                for j, y in enumerate(self.y_nodes):
                    fh.write(f"{t:.17g},{y:.17g},{self.w[i, j]:.17g}\n")


def _bilinear(t_nodes, y_nodes, w, t, y_arr):
    i = np.searchsorted(t_nodes, t) - 1
    i = int(np.clip(i, 0, t_nodes.size - 2))
    ft = (t - t_nodes[i]) / (t_nodes[i + 1] - t_nodes[i])
    row = (1.0 - ft) * w[i] + ft * w[i + 1]
    return np.interp(y_arr, y_nodes, row)


def bs_closed_form_w(b, sigma, lam: float, t, v, horizon: float):
    """Penalized value for time-dependent BS volume (proof-of-optimality form):

    W(t, v) = (1/v) * (int_t^T exp(int_t^s c) ds + exp(int_t^T c)/lambda)^{-1},
    c = b - sigma^2/2. Exact for piecewise-constant coefficients.
    """
    c = effective_drift(b, sigma, horizon)
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    tail_int = exp_weighted_tail(c, t_arr)
    tail_exp = np.exp(c.integral(horizon) - c.integral(t_arr))
    out = (1.0 / np.asarray(v)) / (tail_int + tail_exp / lam)
    return float(out[0]) if np.ndim(t) == 0 and np.ndim(v) == 0 else out


def _model_log_coefficients(model: VolumeModel):
    """(drift(t, y), diffusion(t, y)) of the log-volume process."""
    if isinstance(model, ConstantVolume):
        return (lambda t, y: np.zeros_like(y)), (lambda t, y: np.zeros_like(y))
    if isinstance(model, TimeDepBS):
        return (
            lambda t, y: model.b(t) * np.ones_like(y),
            lambda t, y: model.sigma(t) * np.ones_like(y),
        )
    if isinstance(model, PerturbedOU):
        if not model.u_bar.is_constant():
            raise UnsupportedRegimeError(
                "log-volume coordinates need a constant profile; "
                "use solve_w_lambda_noise for time-varying u_bar"
            )
        mean = np.log(model.u_bar(0.0))
        return (
            lambda t, y: -model.rho * (y - mean),
            lambda t, y: model.epsilon * model.sigma * np.ones_like(y),
        )
    raise TypeError(f"unknown volume model {type(model)!r}")


def _validate_domain(model: VolumeModel, grid: PdeGrid, n_sd: float = 5.0) -> None:
    t = np.linspace(0.0, grid.horizon, 65)
    m, s2 = log_moments(model, t, grid.horizon)
    sd = np.sqrt(np.asarray(s2))
    lo = float(np.min(np.asarray(m) - n_sd * sd))
    hi = float(np.max(np.asarray(m) + n_sd * sd))
    if lo < grid.y_min or hi > grid.y_max:
        raise ValueError(
            f"state domain [{grid.y_min:.4g}, {grid.y_max:.4g}] does not cover "
            f"the model's +-{n_sd} SD band [{lo:.4g}, {hi:.4g}]"
        )


def _step_system(lin, drift, diff2, dt, dy, theta):
    """Banded implicit-step matrix; ``lin`` is the linearized source coefficient."""
    n = lin.size
    lower = np.zeros(n)
    diag = np.ones(n)
    upper = np.zeros(n)
    adv = theta * dt * drift / (2.0 * dy)
    dif = theta * dt * diff2 / (2.0 * dy**2)
    # interior rows: central advection + diffusion
    diag[1:-1] += 2.0 * dif[1:-1] + theta * dt * lin[1:-1]
    lower[1:-1] = -dif[1:-1] + adv[1:-1]   # subdiagonal entries (row j, col j-1)
    upper[1:-1] = -dif[1:-1] - adv[1:-1]   # superdiagonal entries (row j, col j+1)
    return lower, diag, upper


def _apply_boundary_ode(lower, diag, upper, lin, drift, dt, dy, theta):
    """Boundary rows: zero curvature, one-sided (inward) advection."""
    adv0 = theta * dt * drift[0] / dy
    diag[0] = 1.0 + adv0 + theta * dt * lin[0]
    upper[0] = -adv0
    advN = theta * dt * drift[-1] / dy
    diag[-1] = 1.0 - advN + theta * dt * lin[-1]
    lower[-1] = advN


def _solve_tridiag(lower, diag, upper, rhs):
    n = diag.size
    ab = np.zeros((3, n))
    ab[0, 1:] = upper[:-1]
    ab[1] = diag
    ab[2, :-1] = lower[1:]
    return solve_banded((1, 1), ab, rhs)


def _solve_backward(
    t_nodes,
    y_nodes,
    drift_fn,
    diff_fn,
    source_fn,
    terminal,
    theta: float,
    newton_tol: float | None,
    boundary: str,
    dirichlet_fn=None,
    max_newton: int = 50,
    rannacher: int = 0,
):
    n_t = t_nodes.size - 1
    dy = y_nodes[1] - y_nodes[0]
    w = np.empty((n_t + 1, y_nodes.size))
    w[-1] = terminal
    diag_info = SolveDiagnostics(boundary=boundary, theta=theta, newton=newton_tol is not None)
    for i in range(n_t - 1, -1, -1):
        dt = t_nodes[i + 1] - t_nodes[i]
        t_new, t_old = t_nodes[i], t_nodes[i + 1]
        # fully implicit startup steps damp the stiff terminal layer before
        # any theta < 1 weighting kicks in (Rannacher smoothing)
        theta_i = 1.0 if i >= n_t - rannacher else theta
        b_new = drift_fn(t_new, y_nodes)
        s2_new = diff_fn(t_new, y_nodes) ** 2
        q_new = source_fn(t_new, y_nodes)
        w_old = w[i + 1]
        pe = np.max(np.abs(b_new)) * dy / max(np.max(s2_new) / 2.0, 1e-300)
        diag_info.max_cell_peclet = max(diag_info.max_cell_peclet, float(pe))
        if theta_i < 1.0:
            b_old = drift_fn(t_old, y_nodes)
            s2_old = diff_fn(t_old, y_nodes) ** 2
            q_old = source_fn(t_old, y_nodes)
            rhs = w_old + (1.0 - theta_i) * dt * (
                _apply_operator(w_old, b_old, s2_old, dy, boundary) - q_old * w_old**2
            )
        else:
            rhs = w_old.copy()

        def implicit_solve(lin, rhs_vec):
            lower, diag, upper = _step_system(lin, b_new, s2_new, dt, dy, theta_i)
            if boundary == "ode":
                _apply_boundary_ode(lower, diag, upper, lin, b_new, dt, dy, theta_i)
            elif boundary == "dirichlet":
                diag[0] = diag[-1] = 1.0
                upper[0] = lower[-1] = 0.0
                g_lo, g_hi = dirichlet_fn(t_new)
                rhs_vec = rhs_vec.copy()
                rhs_vec[0] = g_lo
                rhs_vec[-1] = g_hi
            else:
                raise ValueError(f"unknown boundary mode {boundary!r}")
            return _solve_tridiag(lower, diag, upper, rhs_vec)

        if newton_tol is None:
            # one Picard iteration: q W^2 ~ (q W_old) W, previous slice as
            # linearization point; exact for the y-independent solution mode
            w_new = implicit_solve(q_new * w_old, rhs)
            diag_info.total_iterations += 1
        else:
            # full Newton: J = I - theta dt L + 2 theta dt diag(q W_k), and
            # J W_{k+1} = rhs + theta dt q W_k^2
            w_new = w_old.copy()
            delta = np.inf
            for _ in range(max_newton):
                w_next = implicit_solve(2.0 * q_new * w_new, rhs + theta_i * dt * q_new * w_new**2)
                delta = float(np.max(np.abs(w_next - w_new)))
                w_new = w_next
                diag_info.total_iterations += 1
                if delta <= newton_tol * max(1.0, float(np.max(np.abs(w_new)))):
                    break
            else:
                raise SolverError(
                    f"Newton stalled at t={t_new:.6g}: last update {delta:.3e} "
                    f"after {max_newton} iterations"
                )
            diag_info.max_residual = max(diag_info.max_residual, delta)
        w[i] = w_new
    diag_info.min_value = float(np.min(w))
    if diag_info.max_cell_peclet > 2.0:
        diag_info.notes.append(f"cell Peclet {diag_info.max_cell_peclet:.2f} > 2; advection-dominated")
        log.warning("cell Peclet number %.2f exceeds 2", diag_info.max_cell_peclet)
    return w, diag_info


def _apply_operator(w, b, s2, dy, boundary):
    """L w = b w_y + (s2/2) w_yy with the matching boundary treatment."""
    out = np.empty_like(w)
    out[1:-1] = b[1:-1] * (w[2:] - w[:-2]) / (2.0 * dy) + s2[1:-1] / 2.0 * (w[2:] - 2.0 * w[1:-1] + w[:-2]) / dy**2
    out[0] = b[0] * (w[1] - w[0]) / dy
    out[-1] = b[-1] * (w[-1] - w[-2]) / dy
    return out


def solve_w_lambda(
    model: VolumeModel,
    lam: float,
    pde_grid: PdeGrid,
    boundary: str = "ode",
    theta: float = 1.0,
    newton_tol: float | None = None,
) -> ValueSurface:
    """Solve the penalized value PDE in log-volume coordinates.

    boundary "ode" imposes zero curvature with inward one-sided advection at
    the state edges; boundary "dirichlet_bs" pins the edges to the
    time-dependent BS closed form (validation mode, BS-family models only).
    """
    if lam <= 0.0:
        raise ValueError("lambda must be positive")
    _validate_domain(model, pde_grid)
    drift_fn, diff_fn = _model_log_coefficients(model)
    t_nodes = pde_grid.t_nodes()
    y_nodes = pde_grid.y_nodes()
    source_fn = lambda t, y: np.exp(y)
    terminal = lam * np.exp(-y_nodes)
    dirichlet_fn = None
    mode = boundary
    if boundary == "dirichlet_bs":
        if isinstance(model, PerturbedOU):
            raise UnsupportedRegimeError("dirichlet_bs boundaries need a BS-family model")
        if isinstance(model, ConstantVolume):
            b_c, s_c = 0.0, 0.0
        else:
            b_c, s_c = model.b, model.sigma
        edge_v = np.exp(np.array([pde_grid.y_min, pde_grid.y_max]))

        def dirichlet_fn(t):
            vals = bs_closed_form_w(b_c, s_c, lam, np.array([t, t]), edge_v, pde_grid.horizon)
            return float(vals[0]), float(vals[1])

        mode = "dirichlet"
    w, diag_info = _solve_backward(
        t_nodes, y_nodes, drift_fn, diff_fn, source_fn, terminal, theta, newton_tol, mode, dirichlet_fn
    )
    if float(np.min(w)) < -1e-9 * float(np.max(w)):
        raise SolverError(f"value surface went negative (min {np.min(w):.3e}); refine the grid")
    return ValueSurface(t_nodes=t_nodes, y_nodes=y_nodes, w=w, lam=lam, coords="log_volume", diagnostics=diag_info)


def solve_w_lambda_noise(
    model: PerturbedOU,
    lam: float,
    pde_grid: PdeGrid,
    theta: float = 1.0,
    newton_tol: float | None = None,
    rannacher: int = 0,
) -> ValueSurface:
    """Solve the penalized value PDE in noise coordinates (flat penalty lambda).

    dW/dt - rho z dW/dz + (sigma^2/2) d2W/dz2 = u_bar_t e^{eps z} W^2,
    W(T, z) = lambda. Used to cross-check the small-noise expansion at the
    same lambda; symmetric grids preserve the z -> -z parity of the problem.
    """
    if not isinstance(model, PerturbedOU):
        raise TypeError("noise-coordinate solve is defined for perturbed-volume models")
    t_nodes = pde_grid.t_nodes()
    z_nodes = pde_grid.y_nodes()
    drift_fn = lambda t, z: -model.rho * z
    diff_fn = lambda t, z: model.sigma * np.ones_like(z)
    source_fn = lambda t, z: model.u_bar(t) * np.exp(model.epsilon * z)
    terminal = lam * np.ones_like(z_nodes)
    w, diag_info = _solve_backward(
        t_nodes, z_nodes, drift_fn, diff_fn, source_fn, terminal, theta, newton_tol, "ode", None,
        rannacher=rannacher,
    )
    return ValueSurface(t_nodes=t_nodes, y_nodes=z_nodes, w=w, lam=lam, coords="noise", diagnostics=diag_info)


def penalized_rate_path(surface: ValueSurface, volume_path: VolumePath, x0: float) -> ExecutionSchedule:
    """Feedback execution under a solved surface: x_k = X_k * v_k * W(t_k, v_k).

    Holdings follow the explicit-Euler recursion; no forced sell-off, the
    terminal inventory X_T = X0 exp(-int v W dt) stays positive.
    """
    grid = volume_path.grid
    if abs(surface.t_nodes[-1] - grid.horizon) > 1e-12:
        raise DomainError("surface and path horizons disagree")
    rates, hold = penalized_rates_block(surface, volume_path.v[None, :], grid, x0)
    return ExecutionSchedule(
        grid=grid, rates=rates[0], holdings=hold[0], label=f"penalized_{surface.lam:g}"
    )


def penalized_rates_block(surface: ValueSurface, v_block: np.ndarray, grid: TimeGrid, x0: float):
    """Vectorized feedback rates/holdings across a block of volume paths."""
    n_paths, n_nodes = v_block.shape
    n = grid.n_steps
    y = np.log(v_block)
    prod = surface.product_rows(grid.nodes())
    y_nodes = surface.y_nodes
    rates = np.empty((n_paths, n_nodes))
    hold = np.empty((n_paths, n_nodes))
    hold[:, 0] = x0
    for k in range(n):
        f = np.interp(y[:, k], y_nodes, prod[k])
        rates[:, k] = hold[:, k] * f
        hold[:, k + 1] = hold[:, k] - rates[:, k] * grid.dt
    rates[:, n] = hold[:, n] * np.interp(y[:, n], y_nodes, prod[n])
    return rates, hold


def penalized_pathwise_cost(rates: np.ndarray, holdings: np.ndarray, v: np.ndarray, lam: float, dt: float):
    """Pathwise int x^2/v dt + lambda X_T^2 / v_T along sampled paths."""
    run = np.sum(rates[..., :-1] ** 2 / v[..., :-1], axis=-1) * dt
    return run + lam * holdings[..., -1] ** 2 / v[..., -1]


@dataclass(frozen=True)
class LambdaSweepResult:
    lambdas: np.ndarray
    surfaces: list
    j_values: np.ndarray
    j_extrapolated: float
    terminal_holdings: np.ndarray


def lambda_sweep(
    model: VolumeModel,
    lambdas,
    pde_grid: PdeGrid,
    params: MarketParams,
    threads: int = 1,
    **solver_kw,
) -> LambdaSweepResult:
    """Solve the PDE along an increasing penalty schedule.

    Reports J^lambda = X0^2 W^lambda(0, v0), the Richardson extrapolation of
    J in 1/lambda, and the (deterministic-representative) terminal holdings
    per lambda, whose decay is O(1/lambda). Solves are independent and may
    run on a thread pool; results are combined in schedule order, so the
    output does not depend on the worker count.
    """
    lambdas = np.asarray(sorted(lambdas), dtype=float)
    if lambdas.size == 0:
        raise ValueError("empty lambda schedule")
    v0 = initial_volume(model)
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            surfaces = list(pool.map(lambda lam: solve_w_lambda(model, lam, pde_grid, **solver_kw), lambdas))
    else:
        surfaces = [solve_w_lambda(model, lam, pde_grid, **solver_kw) for lam in lambdas]
    j_vals, x_terminal = [], []
    t = pde_grid.t_nodes()
    m_t, _ = log_moments(model, t, pde_grid.horizon)
    y_median = np.asarray(m_t) * np.ones_like(t)
    dt = pde_grid.dt
    for surf in surfaces:
        j_vals.append(surf.j_lambda(params, v0))
        x_cur = params.x0
        for k in range(t.size - 1):
            x_cur *= 1.0 - float(surf.feedback_row(k, y_median[k])) * dt
        x_terminal.append(x_cur)
    j_vals = np.asarray(j_vals)
    if lambdas.size >= 2:
        h1, h2 = 1.0 / lambdas[-2], 1.0 / lambdas[-1]
        j_ext = j_vals[-1] + (j_vals[-1] - j_vals[-2]) * h2 / (h1 - h2)
    else:
        j_ext = float(j_vals[-1])
    return LambdaSweepResult(
        lambdas=lambdas,
        surfaces=surfaces,
        j_values=j_vals,
        j_extrapolated=float(j_ext),
        terminal_holdings=np.asarray(x_terminal),
    )
