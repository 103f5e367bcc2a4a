"""Seeded Monte Carlo for state, wealth and deflator paths.

Every path draws its Brownian increments from its own counter-based
stream keyed by ``(seed, path index)``, so results do not depend on how
paths are grouped into chunks. Estimates reduce per-path values in index
order.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional, Union

import numpy as np

from .market import EZPreferences, MarketModel
from .policy import PolicySurface, _coef_state, deflator_from_value, optimal_ctilde, optimal_pi
from .solver import PolicySpec, ValueSurface


# --------------------------------------------------------------------------
# paths


def path_normals(seed: int, index: int, n_steps: int) -> np.ndarray:
    """Standard normals of shape (2, n_steps) for one path: state factor, orthogonal factor."""
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    rng = np.random.Generator(np.random.Philox(key=(int(seed) << 64) | int(index)))
    return rng.standard_normal((2, n_steps))


@dataclass
class PathBundle:
    seed: int
    n_paths: int
    dt: float
    T: float
    x0: float
    X: np.ndarray  # (n_paths, n_steps+1), signed Euler state
    dW: np.ndarray  # (n_paths, n_steps)
    dWperp: np.ndarray
    first_index: int = 0

    @property
    def n_steps(self) -> int:
        return self.dW.shape[1]

    @property
    def t(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)

    def dWrho(self, m: MarketModel) -> np.ndarray:
        rho = m.rho(_coef_state(m, self.X[:, :-1]))
        return rho * self.dW + np.sqrt(1.0 - rho * rho) * self.dWperp


@dataclass(frozen=True)
class PathPlan:
    """Recipe for a large bundle that is generated chunk by chunk."""

    x0: float
    T: float
    dt: float
    n_paths: int
    seed: int = 0
    chunk: int = 500


def _n_steps(T, dt):
    if not dt > 0:
        raise ValueError("dt must be positive")
    n = int(round(T / dt))
    if n < 1 or not math.isclose(n * dt, T, rel_tol=1e-9):
        raise ValueError(f"T={T} is not a whole number of steps of {dt}")
    return n


def euler_state(m: MarketModel, x0: float, dt: float, dW: np.ndarray) -> np.ndarray:
    """Euler-Maruyama state paths; coefficients see the floored state (full truncation)."""
    n, N = dW.shape
    X = np.empty((n, N + 1))
    X[:, 0] = x0
    for k in range(N):
        xc = _coef_state(m, X[:, k])
        X[:, k + 1] = X[:, k] + m.b(xc) * dt + m.a(xc) * dW[:, k]
    return X


def simulate_state(
    m: MarketModel, x0: float, T: float, dt: float, n_paths: int, seed: int = 0, first_index: int = 0
) -> PathBundle:
    m.check_inside(x0)
    N = _n_steps(T, dt)
    sq = math.sqrt(dt)
    Z = np.stack([path_normals(seed, first_index + i, N) for i in range(n_paths)]) if n_paths else np.empty((0, 2, N))
    dW = Z[:, 0, :] * sq
    dWp = Z[:, 1, :] * sq
    return PathBundle(seed, n_paths, dt, T, float(x0), euler_state(m, x0, dt, dW), dW, dWp, first_index)


def coarsen(m: MarketModel, bundle: PathBundle) -> PathBundle:
    """Same Brownian paths sampled on a grid twice as coarse."""
    if bundle.n_steps % 2:
        raise ValueError("need an even number of steps to coarsen")
    dW = bundle.dW[:, 0::2] + bundle.dW[:, 1::2]
    dWp = bundle.dWperp[:, 0::2] + bundle.dWperp[:, 1::2]
    dt = 2.0 * bundle.dt
    X = euler_state(m, bundle.x0, dt, dW)
    return PathBundle(bundle.seed, bundle.n_paths, dt, bundle.T, bundle.x0, X, dW, dWp, bundle.first_index)


def iter_bundles(m: MarketModel, plan: PathPlan) -> Iterator[PathBundle]:
    for start in range(0, plan.n_paths, plan.chunk):
        n = min(plan.chunk, plan.n_paths - start)
        yield simulate_state(m, plan.x0, plan.T, plan.dt, n, plan.seed, first_index=start)


def _bundles(m, bundle):
    if isinstance(bundle, PathBundle):
        return [bundle]
    return iter_bundles(m, bundle)


# --------------------------------------------------------------------------
# policies along paths


class OptimalPolicy:
    """Optimal controls evaluated from interpolated Y and Z at (t, x).

    States beyond the solver grid use the controls at the nearest edge.
    """

    def __init__(self, m: MarketModel, ez: EZPreferences, surf: ValueSurface):
        self.m, self.ez, self.surf = m, ez, surf

    def pi(self, t, x):
        x = np.clip(x, self.surf.x[0], self.surf.x[-1])
        return optimal_pi(self.m, self.ez, x, self.surf.interpolate(t, x, "z"))

    def ctilde(self, t, x):
        return optimal_ctilde(self.ez, self.surf.interpolate(t, x, "y"))

    def on_paths(self, fields: "PathFields"):
        key = ("optimal", id(self.surf), self.ez)
        if key not in fields.cache:
            x = np.clip(fields.Xc, self.surf.x[0], self.surf.x[-1])
            fields.cache[key] = (optimal_pi(self.m, self.ez, x, fields.Z), optimal_ctilde(self.ez, fields.Y))
        return fields.cache[key]


@dataclass
class PerturbedPolicy:
    """``pi + shift`` and ``ctilde * scale`` on top of a base policy."""

    base: object
    pi_shift: float = 0.0
    ctilde_scale: float = 1.0

    def pi(self, t, x):
        return self.base.pi(t, x) + self.pi_shift

    def ctilde(self, t, x):
        return self.base.ctilde(t, x) * self.ctilde_scale

    def on_paths(self, fields: "PathFields"):
        pi, c = _controls(self.base, fields)
        return pi + self.pi_shift, c * self.ctilde_scale


class _CallableSpec:
    def __init__(self, spec: PolicySpec):
        self.spec = spec

    def _eval(self, f, t, x):
        if callable(f):
            return np.broadcast_to(np.asarray(f(t, x), dtype=float), np.shape(x))
        f = np.asarray(f, dtype=float)
        if f.ndim == 0:
            return np.full(np.shape(x), float(f))
        raise TypeError("grid-valued PolicySpec needs a PolicySurface for path evaluation")

    def pi(self, t, x):
        return self._eval(self.spec.pi, t, x)

    def ctilde(self, t, x):
        return self._eval(self.spec.ctilde, t, x)


def _as_policy(policy):
    if isinstance(policy, PolicySpec):
        return _CallableSpec(policy)
    if hasattr(policy, "pi") and hasattr(policy, "ctilde"):
        return policy
    raise TypeError("policy must be a PolicySurface, PolicySpec or expose pi(t, x) and ctilde(t, x)")


@dataclass
class PathFields:
    """Per-bundle arrays shared by every policy evaluated on the same paths.

    Floored state and interpolated Y, Z at all nodes; market coefficients
    and the correlated increment dW^rho on the steps.
    """

    t: np.ndarray
    Xc: np.ndarray
    r: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    dWrho: np.ndarray
    rho: np.ndarray
    Y: Optional[np.ndarray] = None
    Z: Optional[np.ndarray] = None
    cache: dict = field(default_factory=dict)


def path_fields(m: MarketModel, bundle: PathBundle, surf: Optional[ValueSurface] = None) -> PathFields:
    Xc = _coef_state(m, bundle.X)
    t = bundle.t
    x = Xc[:, :-1]
    rho = m.rho(x)
    dWrho = rho * bundle.dW + np.sqrt(1.0 - rho * rho) * bundle.dWperp
    f = PathFields(t, Xc, m.r(x), m.mu(x), m.sigma(x), dWrho, rho)
    if surf is not None:
        w = surf.weights(t[None, :], Xc)
        f.Y, f.Z = w.apply(surf.y), w.apply(surf.z)
    return f


def _find_surface(pol):
    while pol is not None:
        if isinstance(pol, OptimalPolicy):
            return pol.surf
        pol = getattr(pol, "base", None)
    return None


def _controls(pol, fields: PathFields):
    """Controls at every path node, shape (n_paths, n_steps+1) each."""
    if hasattr(pol, "on_paths") and fields.Y is not None:
        pi, c = pol.on_paths(fields)
    else:
        tk = np.broadcast_to(fields.t[None, :], fields.Xc.shape)
        pi, c = pol.pi(tk, fields.Xc), pol.ctilde(tk, fields.Xc)
    shape = fields.Xc.shape
    return np.broadcast_to(np.asarray(pi, dtype=float), shape), np.broadcast_to(np.asarray(c, dtype=float), shape)


@dataclass
class WealthPaths:
    t: np.ndarray
    logW: np.ndarray
    pi: np.ndarray  # controls used on each step, shape (n_paths, n_steps)
    ctilde: np.ndarray

    @property
    def W(self) -> np.ndarray:
        return np.exp(self.logW)


def simulate_wealth(
    m: MarketModel, ez: EZPreferences, policy, bundle: PathBundle, w0: float, fields: Optional[PathFields] = None
) -> WealthPaths:
    """Log-Euler wealth paths for a proportional policy; positivity is automatic.

    The state does not depend on wealth, so controls are evaluated on the
    whole (path, time) array at once and log-wealth is a cumulative sum.
    """
    if not w0 > 0:
        raise ValueError("initial wealth must be positive")
    pol = _as_policy(policy)
    if fields is None:
        fields = path_fields(m, bundle, _find_surface(pol))
    PI, C = _controls(pol, fields)
    PI, C = PI[:, :-1], C[:, :-1]
    bad = ~(np.isfinite(PI) & np.isfinite(C))
    if np.any(bad):
        k = int(np.nonzero(bad.any(axis=0))[0][0])
        raise ValueError(f"non-finite policy values at step {k}")
    sig = fields.sigma
    ps = PI * sig
    inc = (fields.r + PI * fields.mu - C - 0.5 * ps * ps) * bundle.dt + ps * fields.dWrho
    logW = np.empty((PI.shape[0], PI.shape[1] + 1))
    logW[:, 0] = math.log(w0)
    np.cumsum(inc, axis=1, out=logW[:, 1:])
    logW[:, 1:] += math.log(w0)
    return WealthPaths(bundle.t, logW, PI, C)


# --------------------------------------------------------------------------
# reports


@dataclass
class SimReport:
    name: str
    estimate: float
    se: float
    passed: bool
    n_paths: int
    dt: float
    tolerance: float
    target: float = math.nan
    extra: dict = field(default_factory=dict)

    def verdict(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return (
            f"{tag} {self.name}: estimate={self.estimate:.6g} se={self.se:.3g} "
            f"target={self.target:.6g} tol={self.tolerance:.3g} n={self.n_paths} dt={self.dt:.4g}"
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in d.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _mean_se(v):
    v = np.asarray(v, dtype=float)
    n = v.size
    mean = float(np.sum(v) / n)
    se = float(np.std(v, ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    return mean, se


def _trapz_cum(vals, dt):
    return np.sum(0.5 * (vals[:, 1:] + vals[:, :-1]), axis=1) * dt


def _budget_values(m, ez, surf, bundle, w0, perturbation):
    """Per-path W_T D_T + int D c ds for the optimal policy and optional perturbed ones."""
    fields = path_fields(m, bundle, surf)
    opt = OptimalPolicy(m, ez, surf)
    ws = simulate_wealth(m, ez, opt, bundle, w0, fields)
    W = ws.W
    D = deflator_from_value(m, ez, surf, bundle.t, bundle.X, None, Y=fields.Y, logW=ws.logW).D
    out = {}
    for name, pol in [("optimal", opt), *(perturbation or {}).items()]:
        pol = _as_policy(pol)
        Wp = W if pol is opt else simulate_wealth(m, ez, pol, bundle, w0, fields).W
        cp = _controls(pol, fields)[1]
        out[name] = Wp[:, -1] * D[:, -1] + _trapz_cum(D * cp * Wp, bundle.dt)
    return out


BIAS_SAFETY = 1.5  # the refinement difference estimates the O(dt) bias only up to O(dt) relative error


def martingale_budget_check(
    m: MarketModel,
    ez: EZPreferences,
    surf: ValueSurface,
    bundle: Union[PathBundle, PathPlan],
    w0: float = 1.0,
    perturbations: Optional[dict] = None,
    refine: bool = True,
) -> list[SimReport]:
    """Monte Carlo check of E[W*_T D*_T + int D* c* ds] = w0.

    ``perturbations`` maps names to policies; for each, the same expectation
    with D* kept from the optimal wealth must not exceed w0 + 3 SE.

    The discretisation bias allowance for the optimal policy is
    ``BIAS_SAFETY * |est(dt) - est(2 dt)|`` with both estimates on the same
    Brownian paths; ``refine=False`` sets it to 0.
    """
    if not w0 > 0:
        raise ValueError("initial wealth must be positive")
    perturbations = perturbations or {}
    fine = {k: [] for k in ["optimal", *perturbations]}
    coarse = []
    n_paths = 0
    dt = None
    for b in _bundles(m, bundle):
        if not math.isclose(b.T, surf.T, rel_tol=1e-12):
            raise ValueError("path horizon differs from the value surface horizon")
        dt = b.dt
        n_paths += b.n_paths
        for k, v in _budget_values(m, ez, surf, b, w0, perturbations).items():
            fine[k].append(v)
        if refine:
            coarse.append(_budget_values(m, ez, surf, coarsen(m, b), w0, None)["optimal"])
    reports = []
    for name in fine:
        v = np.concatenate(fine[name])
        est, se = _mean_se(v)
        if name == "optimal":
            diff = abs(est - float(np.sum(np.concatenate(coarse)) / v.size)) if refine else 0.0
            bias = BIAS_SAFETY * diff
            tol = 3.0 * se + bias
            ok = abs(est - w0) <= tol
            label = "budget_martingale"
            extra = {"bias_allowance": bias, "refinement_difference": diff}
        else:
            tol = 3.0 * se
            ok = est <= w0 + tol
            label = f"budget_supermartingale[{name}]"
            extra = {}
        reports.append(SimReport(label, est, se, bool(ok), n_paths, dt, tol, target=w0, extra=extra))
    return reports


def _value_drift_samples(m, ez, surf, policy, b, w0):
    """Per-step sampled drift of R divided by |V|, and its local noise scale."""
    pol = _as_policy(policy)
    fields = path_fields(m, b, surf)
    ws = simulate_wealth(m, ez, pol, b, w0, fields)
    Xc = fields.Xc
    g, psi, d, th = ez.gamma, ez.psi, ez.delta, ez.theta
    Y = fields.Y
    Z = fields.Z[:, :-1]
    logV = (1.0 - g) * ws.logW + Y  # V = -exp(logV)/(g-1)
    V = np.exp(logV) / (1.0 - g)
    C = _controls(pol, fields)[1]
    with np.errstate(divide="ignore"):
        cpow = np.where(C > 0, np.power(np.where(C > 0, C, 1.0), 1.0 - 1.0 / psi), 0.0)
    f = V * d * th * (cpow * np.exp(-Y / th) - 1.0)
    dR = np.diff(V, axis=1) + 0.5 * (f[:, 1:] + f[:, :-1]) * b.dt
    absV = np.abs(V[:, :-1])
    drift = dR / (absV * b.dt)
    sig = fields.sigma
    rho = fields.rho
    s = (1.0 - g) * ws.pi * sig
    local_sd = np.sqrt(np.maximum(s * s + Z * Z + 2.0 * s * rho * Z, 0.0)) / math.sqrt(b.dt)
    return drift, local_sd, V


def supermartingale_value_check(
    m: MarketModel,
    ez: EZPreferences,
    surf: ValueSurface,
    policy,
    bundle: Union[PathBundle, PathPlan],
    w0: float = 1.0,
    expect: str = "supermartingale",
    refine: bool = True,
) -> SimReport:
    """Sampled drift of R = W^{1-g} e^Y/(1-g) + int f ds, scaled by |V|.

    Per-path time averages of dR/(|V| dt) are i.i.d. across paths; the
    report gives their mean and standard error. ``expect='martingale'``
    passes when the mean is within 3 SE plus the refinement bias allowance of 0,
    ``'supermartingale'`` when it does not exceed that allowance.
    """
    if expect not in ("martingale", "supermartingale"):
        raise ValueError("expect must be 'martingale' or 'supermartingale'")
    means, cmeans = [], []
    beyond = 0
    total = 0
    tail = []
    n_paths, dt = 0, None
    for b in _bundles(m, bundle):
        dt = b.dt
        n_paths += b.n_paths
        drift, sd, V = _value_drift_samples(m, ez, surf, policy, b, w0)
        means.append(np.mean(drift, axis=1))
        beyond += int(np.sum(drift > 3.0 * sd))
        total += drift.size
        tail.append(np.abs(V[:, -1]))
        if refine:
            cmeans.append(np.mean(_value_drift_samples(m, ez, surf, policy, coarsen(m, b), w0)[0], axis=1))
    v = np.concatenate(means)
    est, se = _mean_se(v)
    bias = BIAS_SAFETY * abs(est - float(np.sum(np.concatenate(cmeans)) / v.size)) if refine else 0.0
    tol = 3.0 * se + bias
    ok = abs(est) <= tol if expect == "martingale" else est <= tol
    tv = np.concatenate(tail)
    return SimReport(
        f"value_{expect}",
        est,
        se,
        bool(ok),
        n_paths,
        dt,
        tol,
        target=0.0,
        extra={
            "bias_allowance": bias,
            "fraction_positive_beyond_noise": beyond / total,
            "strictly_negative": bool(est < -tol),
            # class-D surrogate: how concentrated |V_T| is across paths
            "terminal_tail_ratio": float(np.max(tv) / np.mean(tv)),
        },
    )
