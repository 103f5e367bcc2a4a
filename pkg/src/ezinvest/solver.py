"""Finite-difference solution of the value equation and its companions.

The value process is ``Y_t = y(t, X_t)`` where ``y`` solves the backward
semilinear equation

    y_t + b y_x + 1/2 a^2 y_xx + H(x, y, a y_x) = 0,   y(T, .) = 0,

with ``H`` obtained by minimising the utility drift over the portfolio
and the consumption-wealth ratio. The linear drift/diffusion part (which
includes the linear z-term of H) is treated with a theta-scheme in time;
the remaining nonlinear terms are evaluated with the same time weights
and resolved by Picard sweeps at every step. At both edges the second
derivative is set to zero (linear extrapolation).
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_banded
from scipy.sparse.linalg import splu

from .market import EZPreferences, MarketModel, _derived, h_max, pbar_drift

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Numerical failure of a PDE solve (divergence, non-finite values, bound violation)."""


# --------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class Grid:
    x: np.ndarray
    n_t: int
    T: float

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 1 or x.size < 3:
            raise ValueError("need at least 3 x-nodes")
        if np.any(np.diff(x) <= 0):
            raise ValueError("x-nodes must increase strictly")
        if not self.T > 0 or self.n_t < 1:
            raise ValueError("need T > 0 and at least one time step")
        object.__setattr__(self, "x", x)

    @property
    def dt(self) -> float:
        return self.T / self.n_t

    @property
    def t(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_t + 1)

    @classmethod
    def uniform(cls, lo, hi, n_x, T, n_t):
        return cls(np.linspace(lo, hi, n_x), n_t, T)

    @classmethod
    def geometric(cls, lo, hi, n_x, T, n_t):
        return cls(np.geomspace(lo, hi, n_x), n_t, T)


@dataclass(frozen=True)
class SolverConfig:
    """Numerical settings. ``time_weight`` 1 is backward Euler, 0.5 Crank-Nicolson."""

    n_x: int = 400
    steps_per_unit: float = 200.0
    time_weight: float = 0.5
    iteration: str = "newton"  # or "picard": lagged explicit nonlinear terms
    iter_min: int = 2
    iter_max: int = 50
    iter_tol: float = 1e-11
    bound_tol: float = 1e-3
    x_lo: Optional[float] = None
    x_hi: Optional[float] = None
    spacing: Optional[str] = None  # "uniform" | "geometric"; model default if None

    def __post_init__(self):
        if self.iteration not in ("newton", "picard"):
            raise ValueError("iteration must be 'newton' or 'picard'")
        if not 0.0 <= self.time_weight <= 1.0:
            raise ValueError("time_weight must lie in [0, 1]")
        if self.n_x < 3 or not self.steps_per_unit > 0:
            raise ValueError("need n_x >= 3 and steps_per_unit > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown solver keys: {sorted(unknown)}")
        return cls(**d)


def default_domain(m: MarketModel) -> tuple[float, float, str]:
    """Truncated state interval and spacing used when none is configured."""
    p = m.params
    if m.kind == "heston":
        return p["ell"] / 50.0, 10.0 * p["ell"], "geometric"
    if m.kind == "kim_omberg":
        half = 6.0 * p["a"] / math.sqrt(2.0 * p["b"])
        return -half, half, "uniform"
    if m.kind == "constant":
        # coefficients do not depend on x; any bounded window will do
        return -1.0, 1.0, "uniform"
    raise ValueError("custom models need explicit x_lo/x_hi")


def make_grid(m: MarketModel, T: float, cfg: SolverConfig = SolverConfig()) -> Grid:
    if cfg.x_lo is None or cfg.x_hi is None:
        lo, hi, spacing = default_domain(m)
    else:
        lo, hi, spacing = cfg.x_lo, cfg.x_hi, "uniform"
    if cfg.x_lo is not None:
        lo = cfg.x_lo
    if cfg.x_hi is not None:
        hi = cfg.x_hi
    spacing = cfg.spacing or spacing
    n_t = max(1, int(math.ceil(cfg.steps_per_unit * T - 1e-9)))
    x = np.geomspace(lo, hi, cfg.n_x) if spacing == "geometric" else np.linspace(lo, hi, cfg.n_x)
    return Grid(x, n_t, T)


# --------------------------------------------------------------------------
# difference operators on a nonuniform grid


def _fd_weights(x):
    """Three-point central weights (lower, diag, upper) for d/dx and d2/dx2 at interior nodes."""
    hm = x[1:-1] - x[:-2]
    hp = x[2:] - x[1:-1]
    d1 = (-hp / (hm * (hm + hp)), (hp - hm) / (hm * hp), hm / (hp * (hm + hp)))
    d2 = (2.0 / (hm * (hm + hp)), -2.0 / (hm * hp), 2.0 / (hp * (hm + hp)))
    return d1, d2


def derivative(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """First derivative along the last axis: central inside, one-sided at the edges."""
    (l, c, u), _ = _fd_weights(x)
    out = np.empty_like(y)
    out[..., 1:-1] = l * y[..., :-2] + c * y[..., 1:-1] + u * y[..., 2:]
    out[..., 0] = (y[..., 1] - y[..., 0]) / (x[1] - x[0])
    out[..., -1] = (y[..., -1] - y[..., -2]) / (x[-1] - x[-2])
    return out


def second_derivative(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    _, (l, c, u) = _fd_weights(x)
    out = np.zeros_like(y)
    out[..., 1:-1] = l * y[..., :-2] + c * y[..., 1:-1] + u * y[..., 2:]
    return out


def linear_operator(x: np.ndarray, drift: np.ndarray, diffusion: np.ndarray) -> sp.csr_matrix:
    """Sparse ``drift * d/dx + 1/2 diffusion^2 * d2/dx2`` with zero rows at the edges."""
    n = x.size
    (l1, c1, u1), (l2, c2, u2) = _fd_weights(x)
    bi = drift[1:-1]
    ai = 0.5 * diffusion[1:-1] ** 2
    lower = bi * l1 + ai * l2
    diag = bi * c1 + ai * c2
    upper = bi * u1 + ai * u2
    rows = np.concatenate([np.arange(1, n - 1)] * 3)
    cols = np.concatenate([np.arange(0, n - 2), np.arange(1, n - 1), np.arange(2, n)])
    vals = np.concatenate([lower, diag, upper])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def _edge_rows(x):
    """Rows imposing y_xx = 0 at both edges (linear extrapolation)."""
    n = x.size
    r0 = (x[1] - x[0]) / (x[2] - x[1])
    r1 = (x[-1] - x[-2]) / (x[-2] - x[-3])
    rows = [0, 0, 0, n - 1, n - 1, n - 1]
    cols = [0, 1, 2, n - 1, n - 2, n - 3]
    vals = [1.0, -(1.0 + r0), r0, 1.0, -(1.0 + r1), r1]
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


class _Stepper:
    """Theta-scheme stepper for ``y_t + L y + N(t, y) = 0`` backward in time.

    ``L`` is tridiagonal on interior rows; edge rows carry the y_xx = 0
    condition. The matrix is stored in banded form (bandwidth 2 because the
    edge rows reach two nodes inward).
    """

    def __init__(self, x, drift, diffusion, dt, weight):
        n = x.size
        self.n, self.x, self.dt, self.w = n, x, dt, weight
        (l1, c1, u1), (l2, c2, u2) = _fd_weights(x)
        bi = drift[1:-1]
        ai = 0.5 * diffusion[1:-1] ** 2
        self.Ll, self.Ld, self.Lu = bi * l1 + ai * l2, bi * c1 + ai * c2, bi * u1 + ai * u2
        self.D = (l1, c1, u1)
        self.a_int = diffusion[1:-1]
        self.r0 = (x[1] - x[0]) / (x[2] - x[1])
        self.r1 = (x[-1] - x[-2]) / (x[-2] - x[-3])
        self._lu = None
        # size of round-off in one linear solve, relative to |y|
        self.roundoff = 1e3 * np.finfo(float).eps * (1.0 + weight * dt * float(np.max(np.abs(self.Ld))))

    def apply_L(self, y):
        out = np.zeros_like(y)
        out[1:-1] = self.Ll * y[:-2] + self.Ld * y[1:-1] + self.Lu * y[2:]
        return out

    def _banded(self, jl=0.0, jd=0.0, ju=0.0):
        n, c = self.n, self.w * self.dt
        ab = np.zeros((5, n))
        i = np.arange(1, n - 1)
        ab[3, i - 1] = -c * (self.Ll + jl)
        ab[2, i] = 1.0 - c * (self.Ld + jd)
        ab[1, i + 1] = -c * (self.Lu + ju)
        ab[2, 0], ab[1, 1], ab[0, 2] = 1.0, -(1.0 + self.r0), self.r0
        ab[2, n - 1], ab[3, n - 2], ab[4, n - 3] = 1.0, -(1.0 + self.r1), self.r1
        return ab

    def _dense_lu(self):
        if self._lu is None:
            ab = self._banded()
            n = self.n
            A = sp.diags(
                [ab[4, : n - 2], ab[3, : n - 1], ab[2], ab[1, 1:], ab[0, 2:]], [-2, -1, 0, 1, 2], format="csc"
            )
            self._lu = splu(A)
        return self._lu

    def explicit_part(self, y_next, n_next):
        return y_next + self.dt * (1.0 - self.w) * (self.apply_L(y_next) + n_next)

    def picard(self, base, n_now):
        rhs = base + self.dt * self.w * n_now
        rhs[0] = rhs[-1] = 0.0
        return self._dense_lu().solve(rhs)

    def newton(self, base, y, n_now, dn_dz, dn_dy):
        """One Newton update for y - w dt (L y + N(y)) = base."""
        l1, c1, u1 = self.D
        g = dn_dz[1:-1] * self.a_int if dn_dz is not None else 0.0
        d = dn_dy[1:-1] if dn_dy is not None else 0.0
        jl, jd, ju = g * l1, g * c1 + d, g * u1
        jy = np.zeros_like(y)
        jy[1:-1] = jl * y[:-2] + jd * y[1:-1] + ju * y[2:]
        rhs = base + self.dt * self.w * (n_now - jy)
        rhs[0] = rhs[-1] = 0.0
        return solve_banded((2, 2), self._banded(jl, jd, ju), rhs, overwrite_ab=True, check_finite=False)


def _theta_step(stepper, y_next, n_fn, t_next, t_now, cfg, step_index):
    """One backward step; ``n_fn(t, y)`` returns (N, dN/dz, dN/dy)."""
    base = stepper.explicit_part(y_next, n_fn(t_next, y_next)[0])
    y = y_next
    resid = math.inf
    for sweep in range(cfg.iter_max):
        n_now, dz, dy = n_fn(t_now, y)
        if cfg.iteration == "newton":
            y_new = stepper.newton(base, y, n_now, dz, dy)
        else:
            y_new = stepper.picard(base, n_now)
        if not np.all(np.isfinite(y_new)):
            raise SolverError(f"non-finite values at time step {step_index} (t={t_now:g})")
        resid = float(np.max(np.abs(y_new - y)))
        y = y_new
        scale = max(1.0, float(np.max(np.abs(y))))
        if sweep + 1 >= cfg.iter_min:
            if resid <= cfg.iter_tol * scale:
                return y
            # at the round-off level of the linear solve
            if sweep >= 3 and resid <= 10.0 * stepper.roundoff * scale:
                return y
    raise SolverError(
        f"fixed-point iteration did not converge at time step {step_index} (t={t_now:g}), residual {resid:.3e}"
    )


# --------------------------------------------------------------------------
# value surface


@dataclass
class ValueSurface:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray  # shape (len(t), len(x))
    z: np.ndarray
    T: float
    upper_violation: float = math.nan
    info: dict = field(default_factory=dict)

    def at(self, t: float) -> np.ndarray:
        """y on the x-grid at time ``t`` (linear in time between stored slices)."""
        return _interp_time(self.t, self.y, t)

    def interpolate(self, t, x, what: str = "y"):
        """Bilinear interpolation of ``y`` or ``z`` at points (t, x); x is clamped to the grid."""
        return bilinear(self.t, self.x, getattr(self, what), t, x)

    def weights(self, t, x) -> "BilinearWeights":
        return bilinear_weights(self.t, self.x, t, x)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "y", "z"])
            for i, ti in enumerate(self.t):
                for j, xj in enumerate(self.x):
                    w.writerow([_g17(ti), _g17(xj), _g17(self.y[i, j]), _g17(self.z[i, j])])


def _g17(v) -> str:
    return format(float(v), ".17g")


def _interp_time(ts, arr, t):
    i = int(np.clip(np.searchsorted(ts, t, side="right") - 1, 0, len(ts) - 2))
    w = (t - ts[i]) / (ts[i + 1] - ts[i])
    return (1.0 - w) * arr[i] + w * arr[i + 1]


@dataclass(frozen=True)
class BilinearWeights:
    """Cell indices and weights of points on a (t, x) tensor grid; reusable across fields.

    ``wt`` is None when every point sits on a stored time slice.
    """

    flat: np.ndarray  # flat index of the lower-left corner
    wt: Optional[np.ndarray]
    wx: np.ndarray
    nx: int

    def apply(self, values: np.ndarray) -> np.ndarray:
        v = values.ravel()
        f, n, wx = self.flat, self.nx, self.wx
        a = v.take(f)
        lo = a + wx * (v.take(f + 1) - a)
        if self.wt is None:
            return lo
        b = v.take(f + n)
        hi = b + wx * (v.take(f + n + 1) - b)
        return lo + self.wt * (hi - lo)


def _cell_index(xs, x):
    """Index j with xs[j] <= x < xs[j+1], clipped to [0, len(xs)-2]; x already clamped."""
    n = len(xs)
    if x.size < 4096:
        return np.clip(np.searchsorted(xs, x, side="right") - 1, 0, n - 2)
    d = np.diff(xs)
    if np.allclose(d, d[0], rtol=1e-9, atol=0.0):
        j = ((x - xs[0]) / d[0]).astype(np.intp)
    else:
        q = xs[1:] / xs[:-1]
        if xs[0] > 0 and np.allclose(q, q[0], rtol=1e-9, atol=0.0):
            j = (np.log(x / xs[0]) / math.log(q[0])).astype(np.intp)
        else:
            return np.clip(np.searchsorted(xs, x, side="right") - 1, 0, n - 2)
    np.clip(j, 0, n - 2, out=j)
    # fix rounding at cell edges
    j -= x < xs[j]
    np.clip(j, 0, n - 2, out=j)
    j += (x >= xs[j + 1]) & (j < n - 2)
    return j


def bilinear_weights(ts, xs, t, x) -> BilinearWeights:
    # the time index is computed before broadcasting: t is often one row of times
    t = np.asarray(t, dtype=float)
    x = np.clip(np.asarray(x, dtype=float), xs[0], xs[-1])
    i = np.clip(np.searchsorted(ts, t, side="right") - 1, 0, len(ts) - 2)
    wt = np.clip((t - ts[i]) / (ts[i + 1] - ts[i]), 0.0, 1.0)
    # snap times that coincide with stored slices
    up = wt > 1.0 - 1e-9
    wt = np.where(wt < 1e-9, 0.0, np.where(up, 1.0, wt))
    j = _cell_index(xs, x)
    wx = (x - xs[j]) / (xs[j + 1] - xs[j])
    nx = len(xs)
    if np.all((wt == 0.0) | up):
        # every point is on a slice: no time interpolation
        flat, wx = np.broadcast_arrays(np.where(up, i + 1, i) * nx + j, wx)
        return BilinearWeights(flat, None, wx, nx)
    flat, wt, wx = np.broadcast_arrays(i * nx + j, wt, wx)
    return BilinearWeights(flat, wt, wx, nx)


def bilinear(ts, xs, values, t, x):
    """Bilinear interpolation on a (t, x) tensor grid; x is clamped to [xs[0], xs[-1]]."""
    return bilinear_weights(ts, xs, t, x).apply(np.asarray(values, dtype=float))


# --------------------------------------------------------------------------
# generator


def generator_H(m: MarketModel, ez: EZPreferences, x, y, z):
    """Optimised drift generator H(x, y, z) for the scalar state."""
    x = m.check_inside(x)
    return _generator(m, ez, x, np.asarray(y, dtype=float), np.asarray(z, dtype=float))


def _generator(m, ez, x, y, z):
    g, psi, d, th = ez.gamma, ez.psi, ez.delta, ez.theta
    dc = _derived(m, ez, x)
    lin = (1.0 - g) / g * dc.lam * m.rho(x)
    return (
        0.5 * dc.M * z * z
        + lin * z
        + th * d**psi / psi * np.exp(-psi / th * y)
        + dc.h
        - d * th
    )


def upper_bound(m: MarketModel, ez: EZPreferences, grid: Grid, hmax: Optional[float] = None) -> np.ndarray:
    """(h_max - delta theta)(T - t) on the grid, shape (n_t+1, n_x)."""
    if hmax is None:
        hmax = h_max(m, ez, grid.x)
    tau = grid.T - grid.t
    return np.outer((hmax - ez.delta * ez.theta) * tau, np.ones(grid.x.size))


# --------------------------------------------------------------------------
# solvers


def _time_slices(n_t, stride):
    keep = list(range(0, n_t + 1, stride))
    if keep[-1] != n_t:
        keep.append(n_t)
    return keep


def _backward_solve(grid, drift, diffusion, n_fn, cfg, stride=1, y_terminal=None):
    x, dt = grid.x, grid.dt
    stepper = _Stepper(x, drift, diffusion, dt, cfg.time_weight)
    t = grid.t
    keep = _time_slices(grid.n_t, stride)
    keep_set = {k: i for i, k in enumerate(keep)}
    out = np.empty((len(keep), x.size))
    y = np.zeros(x.size) if y_terminal is None else np.array(y_terminal, dtype=float)
    out[keep_set[grid.n_t]] = y
    for k in range(grid.n_t - 1, -1, -1):
        y = _theta_step(stepper, y, n_fn, t[k + 1], t[k], cfg, k)
        if k in keep_set:
            out[keep_set[k]] = y
    return t[keep], out


def solve_value_pde(
    m: MarketModel,
    ez: EZPreferences,
    grid: Grid,
    config: SolverConfig = SolverConfig(),
    stride: int = 1,
    check_bounds: bool = True,
) -> ValueSurface:
    """Solve the value equation on ``grid``.

    ``stride`` keeps every ``stride``-th time slice (plus both ends). When
    ``check_bounds`` is set and ``theta < 0`` the constant upper bound is
    enforced with tolerance ``config.bound_tol``.
    """
    x = m.check_inside(grid.x)
    g, psi, d, th = ez.gamma, ez.psi, ez.delta, ez.theta
    dc = _derived(m, ez, x)
    a = m.a(x)
    const = dc.h - d * th
    expo = th * d**psi / psi
    M = dc.M

    def nonlinear(_t, y):
        z = a * derivative(x, y)
        e = expo * np.exp(-psi / th * y)
        return 0.5 * M * z * z + e + const, M * z, -psi / th * e

    ts, ys = _backward_solve(grid, pbar_drift(m, ez, x), a, nonlinear, config, stride)
    zs = a * derivative(x, ys)
    surf = ValueSurface(t=ts, x=x, y=ys, z=zs, T=grid.T)
    hmax = float(np.max(dc.h))
    surf.info["h_max"] = hmax
    if ez.theta < 0:
        bound = (hmax - d * th) * (grid.T - ts)
        viol = float(np.max(ys - bound[:, None]))
        surf.upper_violation = max(viol, 0.0)
        if check_bounds and viol > config.bound_tol:
            raise SolverError(f"upper a priori bound violated by {viol:.3e}")
    return surf


def apriori_lower_bound(
    m: MarketModel, ez: EZPreferences, grid: Grid, config: SolverConfig = SolverConfig(), stride: int = 1
) -> np.ndarray:
    """Lower a priori bound on the grid, shape (n_slices, n_x).

    Solves ``g_t + bbar g_x + 1/2 a^2 g_xx + h = 0``, ``g(T) = 0`` and adds the
    deterministic terms of the bound.
    """
    x = m.check_inside(grid.x)
    psi, d, th = ez.psi, ez.delta, ez.theta
    dc = _derived(m, ez, x)
    hmax = float(np.max(dc.h))
    h = dc.h
    ts, gs = _backward_solve(grid, pbar_drift(m, ez, x), m.a(x), lambda _t, _y: (h, None, None), config, stride)
    tau = (grid.T - ts)[:, None]
    k = th * d**psi / psi * math.exp((d * psi - psi / th * hmax) * grid.T)
    return gs - d * th * tau + k * tau


def feynman_kac_running(
    m: MarketModel, ez: EZPreferences, grid: Grid, config: SolverConfig = SolverConfig()
) -> np.ndarray:
    """E^Pbar[int_t^T h(X_s) ds] on the grid (the ``g`` part of the lower bound)."""
    x = m.check_inside(grid.x)
    h = _derived(m, ez, x).h
    return _backward_solve(grid, pbar_drift(m, ez, x), m.a(x), lambda _t, _y: (h, None, None), config)[1]


def riccati_value(m: MarketModel, ez: EZPreferences, T: float, t) -> np.ndarray:
    """Closed-form y(t) for a model whose coefficients do not depend on x.

    ``q = delta^psi e^{-(psi/theta) y}`` solves ``q' = q^2 + beta q`` with
    ``beta = (psi/theta)(h - delta theta)``; through ``v = 1/q`` this is linear.
    """
    psi, d, th = ez.psi, ez.delta, ez.theta
    hs = _derived(m, ez, np.array([0.0 if m.domain[0] < 0 < m.domain[1] else 1.0])).h
    beta = psi / th * (float(hs[0]) - d * th)
    tau = T - np.asarray(t, dtype=float)
    if abs(beta) < 1e-14:
        v = d**-psi + tau
    else:
        v = (d**-psi + 1.0 / beta) * np.exp(beta * tau) - 1.0 / beta
    return -th / psi * np.log(1.0 / (d**psi * v))


# --------------------------------------------------------------------------
# policy evaluation


@dataclass
class PolicySpec:
    """Markovian proportional policy: risky fraction and consumption-wealth ratio.

    Each field is either an array of shape (n_t+1, n_x) on the solver grid
    or a callable ``f(t, x)`` returning an array shaped like ``x``.
    """

    pi: object
    ctilde: object

    def values(self, k: int, t: float, x: np.ndarray):
        return _field(self.pi, k, t, x), _field(self.ctilde, k, t, x)


def _field(f, k, t, x):
    if callable(f):
        return np.broadcast_to(np.asarray(f(t, x), dtype=float), x.shape)
    f = np.asarray(f, dtype=float)
    if f.ndim == 0:
        return np.full(x.shape, float(f))
    return f[k]


def consumption_bracket(ez: EZPreferences, y, ctilde):
    """``-(1-g) c + delta theta e^{-y/theta} c^{1-1/psi}``; its value at c = 0 is the limit 0 when psi > 1."""
    g, psi, d, th = ez.gamma, ez.psi, ez.delta, ez.theta
    ctilde = np.asarray(ctilde, dtype=float)
    with np.errstate(divide="ignore"):
        power = np.where(ctilde > 0, np.power(np.where(ctilde > 0, ctilde, 1.0), 1.0 - 1.0 / psi), 0.0)
    return -(1.0 - g) * ctilde + d * th * np.exp(-y / th) * power


def portfolio_bracket(ez: EZPreferences, pi, Sigma, mu, sig, rho, z):
    g = ez.gamma
    return -0.5 * g * (1.0 - g) * pi * pi * Sigma + (1.0 - g) * pi * (mu + sig * rho * z)


def policy_generator(m, ez, x, y, z, pi, ctilde):
    """Drift generator for a fixed (pi, ctilde); coincides with H at the optimiser."""
    g, th = ez.gamma, ez.theta
    sig = m.sigma(x)
    return (
        (1.0 - g) * m.r(x)
        - ez.delta * th
        + 0.5 * z * z
        + consumption_bracket(ez, y, ctilde)
        + portfolio_bracket(ez, pi, sig * sig, m.mu(x), sig, m.rho(x), z)
    )


def policy_evaluation_pde(
    m: MarketModel,
    ez: EZPreferences,
    grid: Grid,
    policy: PolicySpec,
    config: SolverConfig = SolverConfig(),
) -> ValueSurface:
    """Value exponent ``y_pi`` of a fixed Markovian proportional policy.

    The utility of the policy is ``w^{1-g} e^{y_pi(0, x)} / (1 - g)``; since
    ``1 - g < 0`` a suboptimal policy has ``y_pi >= y``.
    """
    x = m.check_inside(grid.x)
    t = grid.t
    for k in (0, grid.n_t):
        pi_k, c_k = policy.values(k, t[k], x)
        if not (np.all(np.isfinite(pi_k)) and np.all(np.isfinite(c_k))):
            raise SolverError("policy has non-finite values on the grid")
        if np.any(c_k < 0):
            raise ValueError("consumption-wealth ratio must be nonnegative")
        if np.any(c_k == 0):
            if ez.psi < 1:
                raise ValueError("zero consumption is not allowed when psi < 1")
            warnings.warn("zero consumption in policy; consumption bracket uses its limit 0", stacklevel=2)
    a = m.a(x)
    k_of_t = {float(tk): k for k, tk in enumerate(t)}
    sig_rho = m.sigma(x) * m.rho(x)
    g, psi, th = ez.gamma, ez.psi, ez.theta

    def nonlinear(tk, y):
        k = k_of_t[float(tk)]
        pi_k, c_k = policy.values(k, tk, x)
        z = a * derivative(x, y)
        with np.errstate(divide="ignore"):
            cpow = np.where(c_k > 0, np.power(np.where(c_k > 0, c_k, 1.0), 1.0 - 1.0 / psi), 0.0)
        dn_dy = -ez.delta * np.exp(-y / th) * cpow
        return policy_generator(m, ez, x, y, z, pi_k, c_k), z + (1.0 - g) * pi_k * sig_rho, dn_dy

    ts, ys = _backward_solve(grid, m.b(x), a, nonlinear, config)
    return ValueSurface(t=ts, x=x, y=ys, z=a * derivative(x, ys), T=grid.T)


# --------------------------------------------------------------------------
# Lyapunov operator


@dataclass(frozen=True)
class LyapunovFunction:
    value: Callable
    d1: Callable
    d2: Callable
    params: tuple = ()


def log_linear_lyapunov(c_lo: float, c_hi: float) -> LyapunovFunction:
    """``-c_lo log x + c_hi x``, which blows up at 0 and at infinity."""
    return LyapunovFunction(
        value=lambda x: -c_lo * np.log(x) + c_hi * x,
        d1=lambda x: -c_lo / x + c_hi,
        d2=lambda x: c_lo / (x * x),
        params=(c_lo, c_hi),
    )


def quadratic_lyapunov(c: float) -> LyapunovFunction:
    return LyapunovFunction(
        value=lambda x: c * x * x,
        d1=lambda x: 2.0 * c * x,
        d2=lambda x: np.full_like(np.asarray(x, dtype=float), 2.0 * c),
        params=(c,),
    )


def constant_lyapunov(k: float = 0.0) -> LyapunovFunction:
    zero = lambda x: np.zeros_like(np.asarray(x, dtype=float))
    return LyapunovFunction(value=lambda x: zero(x) + k, d1=zero, d2=zero, params=(k,))


def lyapunov_F(m: MarketModel, ez: EZPreferences, phi: LyapunovFunction, x):
    x = m.check_inside(x)
    dc = _derived(m, ez, x)
    a = m.a(x)
    p1 = phi.d1(x)
    return 0.5 * a * a * phi.d2(x) + pbar_drift(m, ez, x) * p1 + 0.5 * dc.M * (a * p1) ** 2 + dc.h


@dataclass(frozen=True)
class LyapunovScan:
    params: tuple
    sup: float
    argsup: float
    edge_values: tuple[float, float]
    edge_trends: tuple[float, float]  # F(edge) - F(next node inward)

    @property
    def decreasing_outward(self) -> bool:
        return self.edge_trends[0] < 0 and self.edge_trends[1] < 0

    @property
    def interior_max(self) -> bool:
        return self.decreasing_outward


def lyapunov_scan(
    m: MarketModel, ez: EZPreferences, family: Sequence[LyapunovFunction], x_grid
) -> LyapunovScan:
    """Member of ``family`` with the smallest grid supremum of the Lyapunov operator."""
    if len(family) == 0:
        raise ValueError("empty Lyapunov family")
    x = m.check_inside(x_grid)
    best = None
    for phi in family:
        F = lyapunov_F(m, ez, phi, x)
        j = int(np.argmax(F))
        cand = LyapunovScan(
            params=phi.params,
            sup=float(F[j]),
            argsup=float(x[j]),
            edge_values=(float(F[0]), float(F[-1])),
            edge_trends=(float(F[0] - F[1]), float(F[-1] - F[-2])),
        )
        if best is None or cand.sup < best.sup:
            best = cand
    return best


# --------------------------------------------------------------------------
# horizon study


@dataclass
class HorizonSeries:
    horizons: np.ndarray
    ctilde0: np.ndarray
    psi: float
    delta: float
    x0: float

    def gap(self, reference: Optional[float] = None) -> np.ndarray:
        """|c(T) - c(T_ref)| / c(T_ref); reference defaults to the longest horizon."""
        ref = self.value_at(self.horizons[-1] if reference is None else reference)
        return np.abs(self.ctilde0 - ref) / ref

    def value_at(self, T: float) -> float:
        i = int(np.argmin(np.abs(self.horizons - T)))
        if not math.isclose(self.horizons[i], T, rel_tol=1e-9, abs_tol=1e-9):
            raise KeyError(f"horizon {T} not in series")
        return float(self.ctilde0[i])

    def plateau_horizon(self, tol: float = 0.02) -> float:
        """Smallest horizon from which the relative gap stays below ``tol``."""
        g = self.gap()
        bad = np.nonzero(g >= tol)[0]
        if bad.size == 0:
            return float(self.horizons[0])
        if bad[-1] == len(g) - 1:
            return math.inf
        return float(self.horizons[bad[-1] + 1])

    def monotone(self) -> bool:
        d = np.diff(self.ctilde0)
        return bool(np.all(d >= -1e-12) or np.all(d <= 1e-12))


def stationary_consumption_limit(
    m: MarketModel,
    ez: EZPreferences,
    x0: float,
    T_max: float,
    dT: float = 1.0,
    config: SolverConfig = SolverConfig(),
) -> HorizonSeries:
    """Time-0 optimal consumption-wealth ratio at ``x0`` for horizons dT, 2dT, ..., T_max.

    The coefficients do not depend on time, so the solution for horizon T at
    time 0 is the T_max solution at time T_max - T; one solve gives the
    whole series.
    """
    if not T_max > 0:
        raise ValueError("T_max must be positive")
    grid = make_grid(m, T_max, config)
    per = grid.n_t / T_max * dT
    stride = int(round(per))
    if not math.isclose(per, stride, rel_tol=1e-9):
        raise ValueError("dT must be a whole number of time steps")
    try:
        surf = solve_value_pde(m, ez, grid, config, stride=stride, check_bounds=False)
    except SolverError as exc:
        raise SolverError(f"horizon T={T_max}: {exc}") from exc
    y0 = np.array([np.interp(x0, surf.x, row) for row in surf.y])
    tau = grid.T - surf.t  # remaining horizon of each slice
    order = np.argsort(tau)
    tau, y0 = tau[order], y0[order]
    sel = tau > 0
    c = ez.delta**ez.psi * np.exp(-ez.psi / ez.theta * y0[sel])
    return HorizonSeries(horizons=tau[sel], ctilde0=c, psi=ez.psi, delta=ez.delta, x0=x0)
