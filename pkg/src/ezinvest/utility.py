"""Epstein-Zin aggregator and utility of deterministic consumption streams.

With ``Y = e^{-delta theta t} (1 - gamma) V`` the utility recursion becomes
a backward equation with the monotone generator

    F(t, c, y) = delta theta e^{-delta t} c^{1 - 1/psi} y^{1 - 1/theta}.

For deterministic streams the martingale part vanishes and ``u = Y^{1/theta}``
obeys the linear equation ``u' = -delta e^{-delta t} c(t)^{1 - 1/psi}``.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .market import EZPreferences


def aggregator_f(ez: EZPreferences, c, v):
    """Epstein-Zin aggregator f(c, v) for ``c >= 0`` and ``v < 0``."""
    c = np.asarray(c, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(v >= 0):
        raise ValueError("aggregator needs v < 0")
    if np.any(c < 0):
        raise ValueError("consumption must be nonnegative")
    g, psi, d = ez.gamma, ez.psi, ez.delta
    w = (1.0 - g) * v
    ce = w ** (1.0 / (1.0 - g))  # certainty-equivalent consumption
    return d * w / (1.0 - 1.0 / psi) * ((c / ce) ** (1.0 - 1.0 / psi) - 1.0)


def aggregator_f_expanded(ez: EZPreferences, c, v):
    """Same aggregator written as ``delta c^{1-1/psi} ((1-g) v)^{1-1/theta} / (1-1/psi) - delta theta v``."""
    c = np.asarray(c, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(v >= 0):
        raise ValueError("aggregator needs v < 0")
    if np.any(c < 0):
        raise ValueError("consumption must be nonnegative")
    g, psi, d, th = ez.gamma, ez.psi, ez.delta, ez.theta
    q = 1.0 - 1.0 / psi
    return d * c**q * ((1.0 - g) * v) ** (1.0 - 1.0 / th) / q - d * th * v


def transformed_generator_F(ez: EZPreferences, t, c, y):
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ValueError("transformed generator needs y > 0")
    th = ez.theta
    return ez.delta * th * np.exp(-ez.delta * np.asarray(t, dtype=float)) * np.power(
        np.asarray(c, dtype=float), 1.0 - 1.0 / ez.psi
    ) * y ** (1.0 - 1.0 / th)


def truncated_generator_F(ez: EZPreferences, t, c, y, n: float):
    th = ez.theta
    cq = np.minimum(np.power(np.asarray(c, dtype=float), 1.0 - 1.0 / ez.psi), n)
    ya = np.minimum(np.abs(y), n)
    return ez.delta * th * np.exp(-ez.delta * np.asarray(t, dtype=float)) * cq * ya ** (1.0 - 1.0 / th)


def ordinal_transform(ez: EZPreferences, y, z):
    """Map (Y, Z) to the concave-generator pair (Ybar, Zbar)."""
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ValueError("ordinal transform needs y > 0")
    th = ez.theta
    k = 1.0 - 1.0 / ez.psi
    ybar = y ** (1.0 / th) / k
    zbar = y ** (1.0 / th - 1.0) * np.asarray(z, dtype=float) / (th * k)
    return ybar, zbar


def inverse_ordinal_transform(ez: EZPreferences, ybar, zbar):
    th = ez.theta
    k = 1.0 - 1.0 / ez.psi
    s = k * np.asarray(ybar, dtype=float)
    if np.any(s <= 0):
        raise ValueError("inverse ordinal transform needs (1 - 1/psi) * ybar > 0")
    y = s**th
    # zbar = y^{1/theta - 1} z / (theta k)  =>  z = theta k zbar y^{1 - 1/theta}
    z = th * k * np.asarray(zbar, dtype=float) * y ** (1.0 - 1.0 / th)
    return y, z


@dataclass(frozen=True)
class ConsumptionStream:
    """Deterministic consumption: a rate on [0, T) plus a lump sum at T.

    Either ``breakpoints`` (sorted ``(t_start, rate)`` pairs, first at 0)
    describe a piecewise-constant rate, or ``rate_fn`` gives an evaluable
    rate function.
    """

    horizon: float
    terminal: float
    breakpoints: Optional[tuple[tuple[float, float], ...]] = None
    rate_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.terminal < 0:
            raise ValueError("terminal consumption must be nonnegative")
        if (self.breakpoints is None) == (self.rate_fn is None):
            raise ValueError("give exactly one of breakpoints or rate_fn")
        if self.breakpoints is not None:
            bps = tuple((float(t), float(c)) for t, c in self.breakpoints)
            ts = [t for t, _ in bps]
            if not bps or ts[0] != 0.0 or any(b <= a for a, b in zip(ts, ts[1:])):
                raise ValueError("breakpoints must start at 0 and increase strictly")
            if ts[-1] >= self.horizon:
                raise ValueError("breakpoints must lie before the horizon")
            if any(c < 0 for _, c in bps):
                raise ValueError("consumption rates must be nonnegative")
            object.__setattr__(self, "breakpoints", bps)

    @classmethod
    def constant(cls, rate: float, horizon: float, terminal: Optional[float] = None):
        return cls(horizon, rate if terminal is None else terminal, ((0.0, rate),))

    @classmethod
    def from_dict(cls, d: dict) -> "ConsumptionStream":
        return cls(
            horizon=float(d["horizon"]),
            terminal=float(d["terminal"]),
            breakpoints=tuple((float(t), float(c)) for t, c in d["breakpoints"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "ConsumptionStream":
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        if self.breakpoints is None:
            raise ValueError("only piecewise-constant streams serialise")
        return {"horizon": self.horizon, "terminal": self.terminal, "breakpoints": [list(b) for b in self.breakpoints]}

    def rate(self, t):
        t = np.asarray(t, dtype=float)
        if self.rate_fn is not None:
            return np.asarray(self.rate_fn(t), dtype=float) * np.ones_like(t)
        starts = np.array([s for s, _ in self.breakpoints])
        vals = np.array([c for _, c in self.breakpoints])
        return vals[np.searchsorted(starts, t, side="right") - 1]

    def scaled(self, k: float) -> "ConsumptionStream":
        if self.breakpoints is None:
            fn = self.rate_fn
            return ConsumptionStream(self.horizon, k * self.terminal, rate_fn=lambda t: k * fn(t))
        return ConsumptionStream(self.horizon, k * self.terminal, tuple((t, k * c) for t, c in self.breakpoints))

    def mix(self, other: "ConsumptionStream", alpha: float) -> "ConsumptionStream":
        """Convex combination ``alpha * self + (1 - alpha) * other``."""
        if self.horizon != other.horizon:
            raise ValueError("streams must share the horizon")
        term = alpha * self.terminal + (1 - alpha) * other.terminal
        if self.breakpoints is None or other.breakpoints is None:
            f, g = self.rate, other.rate
            return ConsumptionStream(self.horizon, term, rate_fn=lambda t: alpha * f(t) + (1 - alpha) * g(t))
        starts = sorted({t for t, _ in self.breakpoints} | {t for t, _ in other.breakpoints})
        bps = tuple((t, float(alpha * self.rate(t) + (1 - alpha) * other.rate(t))) for t in starts)
        return ConsumptionStream(self.horizon, term, bps)


@dataclass(frozen=True)
class UtilityPath:
    t: np.ndarray
    Y: np.ndarray
    V: np.ndarray

    @property
    def V0(self) -> float:
        return float(self.V[0])

    @property
    def Y0(self) -> float:
        return float(self.Y[0])


def _check_stream(ez, stream):
    if not stream.terminal > 0:
        raise ValueError("terminal consumption must be strictly positive")
    if ez.psi < 1 and stream.breakpoints is not None and any(c == 0 for _, c in stream.breakpoints):
        raise ValueError("zero consumption has infinite marginal disutility when psi < 1")


def _to_path(ez, t, Y):
    V = np.exp(ez.delta * ez.theta * t) * Y / (1.0 - ez.gamma)
    return UtilityPath(t=t, Y=Y, V=V)


def evaluate_deterministic_utility(ez: EZPreferences, stream: ConsumptionStream, steps: int = 1000) -> UtilityPath:
    """Utility of a deterministic stream on a uniform grid of ``steps`` intervals.

    Works in ``u = Y^{1/theta}``. Piecewise-constant rates are integrated
    exactly piece by piece; rate functions use a classical RK4 step (which
    for this right-hand side coincides with Simpson's rule).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    _check_stream(ez, stream)
    d, q, th = ez.delta, 1.0 - 1.0 / ez.psi, ez.theta
    T = stream.horizon
    t = np.linspace(0.0, T, steps + 1)
    du = np.empty(steps)  # u(t_k) - u(t_{k+1})
    if stream.breakpoints is not None:
        starts = [s for s, _ in stream.breakpoints]
        rates = [c for _, c in stream.breakpoints]
        for k in range(steps):
            lo, hi = t[k], t[k + 1]
            i = bisect.bisect_right(starts, lo) - 1
            acc = 0.0
            while lo < hi:
                end = min(hi, starts[i + 1]) if i + 1 < len(starts) else hi
                acc += rates[i] ** q * (math.exp(-d * lo) - math.exp(-d * end))
                lo, i = end, i + 1
            du[k] = acc
    else:
        g = lambda s: d * np.exp(-d * s) * stream.rate(s) ** q
        h = T / steps
        # RK4 on u' = -g(t): the stage values only depend on t
        du = h / 6.0 * (g(t[:-1]) + 4.0 * g(t[:-1] + 0.5 * h) + g(t[1:]))
    uT = math.exp(-d * T) * stream.terminal**q
    u = uT + np.concatenate([np.cumsum(du[::-1])[::-1], [0.0]])
    return _to_path(ez, t, u**th)


def closed_form_constant_utility(ez: EZPreferences, c: float, terminal: float, T: float) -> float:
    """V_0 for a constant rate ``c`` and lump sum ``terminal``."""
    d, q = ez.delta, 1.0 - 1.0 / ez.psi
    u0 = c**q * (1.0 - math.exp(-d * T)) + math.exp(-d * T) * terminal**q
    return u0**ez.theta / (1.0 - ez.gamma)


def time_separable_utility(gamma: float, delta: float, stream: ConsumptionStream, steps: int = 4000) -> float:
    """Discounted CRRA utility ``int delta e^{-delta s} c^{1-g}/(1-g) ds + e^{-delta T} c_T^{1-g}/(1-g)``."""
    from scipy.integrate import quad

    T = stream.horizon
    f = lambda s: delta * math.exp(-delta * s) * float(stream.rate(s)) ** (1 - gamma) / (1 - gamma)
    pts = None if stream.breakpoints is None else [t for t, _ in stream.breakpoints[1:]]
    val, _ = quad(f, 0.0, T, points=pts, limit=max(50, steps // 10), epsabs=1e-13, epsrel=1e-13)
    return val + math.exp(-delta * T) * stream.terminal ** (1 - gamma) / (1 - gamma)


def evaluate_truncated(
    ez: EZPreferences, stream: ConsumptionStream, n: float, steps: Optional[int] = None
) -> UtilityPath:
    """Solve the backward equation with the truncated generator ``F^n`` by RK4 in ``y``.

    Default ``steps`` is ten per day over the horizon (``10 * 365 * T``).
    """
    if not n >= 1:
        raise ValueError("truncation level must be >= 1")
    _check_stream(ez, stream)
    T = stream.horizon
    if steps is None:
        steps = max(1, int(round(10 * 365 * T)))
    t = np.linspace(0.0, T, steps + 1)
    if stream.breakpoints is not None:
        # step exactly onto rate jumps so each RK4 step sees a smooth rate
        t = np.union1d(t, [s for s, _ in stream.breakpoints])
    h = np.diff(t)
    mid = t[:-1] + 0.5 * h
    q = 1.0 - 1.0 / ez.psi
    if stream.breakpoints is not None:
        # piecewise constant: the rate on (t_k, t_{k+1}) is its midpoint value
        c_lo = c_mid = c_hi = np.minimum(stream.rate(mid) ** q, n)
    else:
        c_lo = np.minimum(stream.rate(t[:-1]) ** q, n)
        c_mid = np.minimum(stream.rate(mid) ** q, n)
        c_hi = np.minimum(stream.rate(t[1:]) ** q, n)
    Y = np.empty(t.size)
    Y[-1] = math.exp(-ez.delta * ez.theta * T) * stream.terminal ** (1.0 - ez.gamma)
    d, th = ez.delta, ez.theta
    p = 1.0 - 1.0 / th
    # dY/dt = -F^n(t, Y); integrate from T down to 0
    rhs = lambda s, cq, y: -d * th * math.exp(-d * s) * cq * min(abs(y), n) ** p
    y = Y[-1]
    for k in range(t.size - 2, -1, -1):
        hk, s = h[k], t[k + 1]
        k1 = rhs(s, c_hi[k], y)
        k2 = rhs(s - 0.5 * hk, c_mid[k], y - 0.5 * hk * k1)
        k3 = rhs(s - 0.5 * hk, c_mid[k], y - 0.5 * hk * k2)
        k4 = rhs(s - hk, c_lo[k], y - hk * k3)
        y = y - hk / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        Y[k] = y
    return _to_path(ez, t, Y)
