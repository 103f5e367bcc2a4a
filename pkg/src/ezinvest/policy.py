"""Optimal controls from a value surface and the associated state-price deflator."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .market import EZPreferences, MarketModel, _derived
from .solver import ValueSurface, _g17, bilinear, consumption_bracket, portfolio_bracket


@dataclass
class PolicySurface:
    t: np.ndarray
    x: np.ndarray
    pi_star: np.ndarray
    ctilde_star: np.ndarray

    def pi(self, t, x):
        return bilinear(self.t, self.x, self.pi_star, t, x)

    def ctilde(self, t, x):
        return bilinear(self.t, self.x, self.ctilde_star, t, x)

    def as_spec(self):
        from .solver import PolicySpec

        return PolicySpec(pi=self.pi_star, ctilde=self.ctilde_star)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "pi_star", "ctilde_star"])
            for i, ti in enumerate(self.t):
                for j, xj in enumerate(self.x):
                    w.writerow([_g17(ti), _g17(xj), _g17(self.pi_star[i, j]), _g17(self.ctilde_star[i, j])])


def optimal_pi(m: MarketModel, ez: EZPreferences, x, z):
    """(1/gamma) [mu/Sigma + rho z / sigma]."""
    sig = m.sigma(x)
    if np.any(sig == 0):
        raise ValueError("sigma vanishes at a grid node")
    return (m.mu(x) / (sig * sig) + m.rho(x) * z / sig) / ez.gamma


def optimal_ctilde(ez: EZPreferences, y):
    return ez.delta**ez.psi * np.exp(-ez.psi / ez.theta * np.asarray(y, dtype=float))


def extract_policy(m: MarketModel, ez: EZPreferences, surf: ValueSurface) -> PolicySurface:
    x = surf.x
    return PolicySurface(
        t=surf.t,
        x=x,
        pi_star=optimal_pi(m, ez, x, surf.z),
        ctilde_star=optimal_ctilde(ez, surf.y),
    )


def ctilde_bounds(m: MarketModel, ez: EZPreferences, grid, config=None):
    """Envelope of c* on ``grid`` implied by the two a priori bounds on y.

    c* is monotone in y, so it maps the bounds on y to bounds on c*
    (increasing when theta < 0). Returns (lower, upper) arrays on the grid.
    """
    from .solver import SolverConfig, apriori_lower_bound, upper_bound

    lo = optimal_ctilde(ez, apriori_lower_bound(m, ez, grid, config or SolverConfig()))
    hi = optimal_ctilde(ez, upper_bound(m, ez, grid))
    return np.minimum(lo, hi), np.maximum(lo, hi)


def argmin_controls(m: MarketModel, ez: EZPreferences, x: float, y: float, z: float, tol: float = 1e-12):
    """Minimise the portfolio and consumption brackets of the drift numerically.

    Golden-section search on brackets built around the closed-form
    minimisers; returns (pi, ctilde).
    """
    sig = float(m.sigma(x))
    Sigma = sig * sig
    mu, rho = float(m.mu(x)), float(m.rho(x))
    pi0 = float(optimal_pi(m, ez, x, z))
    c0 = float(optimal_ctilde(ez, y))
    span = 1.0 + abs(pi0)
    f_pi = lambda p: float(portfolio_bracket(ez, p, Sigma, mu, sig, rho, z))
    r_pi = minimize_scalar(f_pi, bracket=(pi0 - span, pi0 + 0.1 * span, pi0 + span), method="golden", tol=tol)
    # search the consumption ratio in log scale to keep the bracket scale free
    f_c = lambda s: float(consumption_bracket(ez, y, math.exp(s)))
    s0 = math.log(c0)
    r_c = minimize_scalar(f_c, bracket=(s0 - 3.0, s0 + 0.3, s0 + 3.0), method="golden", tol=tol)
    return r_pi.x, math.exp(r_c.x)


# --------------------------------------------------------------------------
# deflator


@dataclass
class DeflatorPath:
    t: np.ndarray
    D: np.ndarray  # shape (n_paths, n_steps+1)
    log_increments: np.ndarray  # from the closed-form representation
    sde_log_increments: np.ndarray | None = None


def path_controls(m, ez, surf, t, x):
    """Y, Z and optimal controls at (t, x) by bilinear interpolation of the surface."""
    x = np.clip(x, surf.x[0], surf.x[-1])
    w = surf.weights(t, x)
    y, z = w.apply(surf.y), w.apply(surf.z)
    return y, z, optimal_pi(m, ez, x, z), optimal_ctilde(ez, y)


def deflator_from_value(
    m: MarketModel, ez: EZPreferences, surf: ValueSurface, t, X, W, Y=None, logW=None
) -> DeflatorPath:
    """D* from Y, the optimal consumption ratio and optimal wealth along paths.

    ``X`` and ``W`` have shape (n_paths, n_steps+1) on times ``t``; ``X``
    is the (possibly signed) simulated state, floored like in simulation.
    ``Y`` may pass precomputed interpolated values at the path nodes and
    ``logW`` the log of ``W`` (then ``W`` itself may be None).
    """
    if logW is None:
        W = np.atleast_2d(np.asarray(W, dtype=float))
        if np.any(~(W > 0)):
            raise ValueError("wealth must be positive")
        logW = np.log(W)
    elif not np.all(np.isfinite(logW)):
        raise ValueError("wealth must be positive and finite")
    X = _coef_state(m, np.atleast_2d(X))
    t = np.asarray(t, dtype=float)
    if Y is None:
        Y = surf.interpolate(t[None, :], X, "y")
    c = optimal_ctilde(ez, Y)
    th, g = ez.theta, ez.gamma
    dt = np.diff(t)
    integ = np.concatenate(
        [np.zeros((logW.shape[0], 1)), np.cumsum(0.5 * (c[:, 1:] + c[:, :-1]) * dt, axis=1)], axis=1
    )
    logD = (th - 1.0) * integ - ez.delta * th * t - g * (logW - logW[:, :1]) + (Y - Y[:, :1])
    return DeflatorPath(t=t, D=np.exp(logD), log_increments=np.diff(logD, axis=1))


def _coef_state(m, X):
    X = np.asarray(X, dtype=float)
    lo, hi = m.domain
    if m.floor is not None:
        X = np.maximum(X, m.floor)
    # keep coefficient evaluation strictly inside the domain
    if math.isfinite(lo):
        X = np.maximum(X, np.nextafter(lo, math.inf))
    if math.isfinite(hi):
        X = np.minimum(X, np.nextafter(hi, -math.inf))
    return X


def sde_log_increments(m, ez, surf, t, X, dW, dWperp):
    """Euler log-increments of dD/D = -r dt - gamma pi sigma dW^rho + Z dW."""
    X = _coef_state(m, np.atleast_2d(X))
    t = np.asarray(t, dtype=float)
    tk = t[None, :-1]
    xk = X[:, :-1]
    _, z, pi, _ = path_controls(m, ez, surf, tk, xk)
    sig = m.sigma(xk)
    rho = m.rho(xk)
    dt = np.diff(t)[None, :]
    dWrho = rho * dW + np.sqrt(1.0 - rho * rho) * dWperp
    gps = ez.gamma * pi * sig
    return -m.r(xk) * dt - 0.5 * (gps * gps + z * z - 2.0 * gps * rho * z) * dt - gps * dWrho + z * dW


def deflator_sde_consistency(
    m: MarketModel, ez: EZPreferences, surf: ValueSurface, bundle, W, interior_only: bool = True
) -> float:
    """Max absolute mismatch between the two log-increment representations of D*.

    With ``interior_only`` the maximum is over steps whose two end states lie
    on the solver grid; outside it Y is frozen at the edge value and the
    representations are not comparable.
    """
    if getattr(bundle, "dW", None) is None or getattr(bundle, "dWperp", None) is None:
        raise ValueError("path bundle carries no Brownian increments")
    dp = deflator_from_value(m, ez, surf, bundle.t, bundle.X, W)
    sde = sde_log_increments(m, ez, surf, bundle.t, bundle.X, bundle.dW, bundle.dWperp)
    d = np.abs(dp.log_increments - sde)
    if interior_only:
        X = np.atleast_2d(bundle.X)
        on = (X >= surf.x[0]) & (X <= surf.x[-1])
        d = d[on[:, :-1] & on[:, 1:]]
    return float(np.max(d)) if d.size else 0.0
