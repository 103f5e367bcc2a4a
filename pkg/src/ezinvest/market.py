"""Preferences, market models and parameter-admissibility checks.

All models carry a scalar state ``x`` and a single risky asset, so the
matrix-valued quantities of the general setting collapse to scalars:
``Sigma = sigma**2``, ``lambda = mu / sigma`` and the Theta-weighted
inner products reduce to ``lam**2``, ``lam * rho`` and ``rho**2``.

Coefficient functions accept floats or numpy arrays.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

Coefficient = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class EZPreferences:
    """Epstein-Zin preference parameters.

    ``gamma`` is relative risk aversion, ``psi`` the elasticity of
    intertemporal substitution and ``delta`` the discount rate (per unit
    time of the model). The library targets ``gamma > 1, psi > 1``; values
    ``0 < psi < 1`` are accepted so that comparison runs (e.g. the horizon
    study) can be made, ``focal`` tells the two regimes apart.
    """

    gamma: float
    psi: float
    delta: float

    def __post_init__(self):
        if not self.gamma > 1:
            raise ValueError(f"gamma must exceed 1, got {self.gamma}")
        if not self.psi > 0 or self.psi == 1:
            raise ValueError(f"psi must be positive and different from 1, got {self.psi}")
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")

    @property
    def theta(self) -> float:
        return (1.0 - self.gamma) / (1.0 - 1.0 / self.psi)

    @property
    def focal(self) -> bool:
        """True when gamma > 1 and psi > 1, i.e. theta < 0."""
        return self.gamma > 1 and self.psi > 1


@dataclass(frozen=True)
class MarketModel:
    """Markovian market driven by a scalar state on an open interval.

    ``sigma`` must be positive inside the domain. ``floor`` is the value at
    which the state is floored inside coefficient evaluations along
    simulated paths (full truncation); ``None`` means no floor.
    """

    domain: tuple[float, float]
    r: Coefficient
    mu: Coefficient
    sigma: Coefficient
    b: Coefficient
    a: Coefficient
    rho: Coefficient
    kind: str = "custom"
    params: dict = field(default_factory=dict)
    floor: Optional[float] = None
    db: Optional[Coefficient] = None
    da: Optional[Coefficient] = None

    def inside(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        lo, hi = self.domain
        return (x > lo) & (x < hi)

    def check_inside(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if not np.all(self.inside(x)):
            raise ValueError(f"state outside the open domain {self.domain}")
        return x

    def lam(self, x):
        """Market price of risk mu / sigma."""
        return self.mu(x) / self.sigma(x)


@dataclass(frozen=True)
class DerivedCoefficients:
    Sigma: np.ndarray
    M: np.ndarray
    h: np.ndarray
    lam: np.ndarray


def derived_coefficients(m: MarketModel, ez: EZPreferences, x) -> DerivedCoefficients:
    """Sigma, M, h and lambda at ``x`` (strictly inside the domain)."""
    x = m.check_inside(x)
    return _derived(m, ez, x)


def _derived(m, ez, x):
    g = ez.gamma
    sig = m.sigma(x)
    Sigma = sig * sig
    rho = m.rho(x)
    mu = m.mu(x)
    M = 1.0 + (1.0 - g) / g * rho * rho
    h = (1.0 - g) * m.r(x) + (1.0 - g) / (2.0 * g) * mu * mu / Sigma
    return DerivedCoefficients(Sigma=Sigma, M=M, h=h, lam=mu / sig)


def h_function(m: MarketModel, ez: EZPreferences, x):
    return _derived(m, ez, np.asarray(x, dtype=float)).h


def h_max(m: MarketModel, ez: EZPreferences, x_grid) -> float:
    """Maximum of h over a grid of states."""
    return float(np.max(h_function(m, ez, m.check_inside(x_grid))))


def pbar_drift(m: MarketModel, ez: EZPreferences, x):
    """State drift under the measure that absorbs the linear z-term of H.

    ``b + (1-gamma)/gamma * a * rho * lambda``.
    """
    g = ez.gamma
    return m.b(x) + (1.0 - g) / g * m.a(x) * m.rho(x) * m.lam(x)


# --------------------------------------------------------------------------
# Heston, Kim-Omberg and constant-coefficient specialisations


@dataclass(frozen=True)
class HestonParams:
    r0: float = 0.05
    r1: float = 0.0
    lam: float = 0.47
    sigma: float = 1.0
    b: float = 5.0
    ell: float = 0.0225
    a: float = 0.25
    rho: float = -0.5


@dataclass(frozen=True)
class KimOmbergParams:
    r0: float = 0.0014
    r1: float = 0.0
    lambda0: float = 0.0
    lambda1: float = 1.0
    sigma: float = 0.0436
    b: float = 0.0226
    a: float = 0.0189
    rho: float = -0.935


@dataclass(frozen=True)
class ConstantParams:
    """Constant opportunity set; ``a = b = 0`` freezes the state."""

    r: float = 0.05
    lam: float = 0.4
    sigma: float = 0.2
    rho: float = 0.0
    b: float = 0.0
    a: float = 0.0


def make_heston(p: HestonParams) -> MarketModel:
    if not p.a > 0:
        raise ValueError("Heston: a must be positive")
    if not p.b * p.ell > 0.5 * p.a**2:
        raise ValueError(
            f"Heston: Feller condition fails, b*ell={p.b * p.ell:g} <= a^2/2={0.5 * p.a**2:g}"
        )
    if p.b < 0 or p.ell < 0:
        raise ValueError("Heston: b and ell must be nonnegative")
    if not abs(p.rho) <= 1:
        raise ValueError("correlation must lie in [-1, 1]")
    sq = lambda x: np.sqrt(np.asarray(x, dtype=float))
    return MarketModel(
        domain=(0.0, math.inf),
        r=lambda x: p.r0 + p.r1 * np.asarray(x, dtype=float),
        mu=lambda x: p.sigma * p.lam * np.asarray(x, dtype=float),
        sigma=lambda x: p.sigma * sq(x),
        b=lambda x: p.b * (p.ell - np.asarray(x, dtype=float)),
        a=lambda x: p.a * sq(x),
        rho=lambda x: np.full_like(np.asarray(x, dtype=float), p.rho),
        kind="heston",
        params=asdict(p),
        floor=0.0,
        db=lambda x: np.full_like(np.asarray(x, dtype=float), -p.b),
        da=lambda x: 0.5 * p.a / sq(x),
    )


def make_kim_omberg(p: KimOmbergParams) -> MarketModel:
    if not p.a > 0:
        raise ValueError("Kim-Omberg: a must be positive")
    if not p.b > 0:
        raise ValueError("Kim-Omberg: b must be positive")
    if not abs(p.rho) <= 1:
        raise ValueError("correlation must lie in [-1, 1]")
    arr = lambda x: np.asarray(x, dtype=float)
    return MarketModel(
        domain=(-math.inf, math.inf),
        r=lambda x: p.r0 + p.r1 * arr(x),
        mu=lambda x: p.sigma * (p.lambda0 + p.lambda1 * arr(x)),
        sigma=lambda x: np.full_like(arr(x), p.sigma),
        b=lambda x: -p.b * arr(x),
        a=lambda x: np.full_like(arr(x), p.a),
        rho=lambda x: np.full_like(arr(x), p.rho),
        kind="kim_omberg",
        params=asdict(p),
        db=lambda x: np.full_like(arr(x), -p.b),
        da=lambda x: np.zeros_like(arr(x)),
    )


def make_constant(p: ConstantParams) -> MarketModel:
    if not p.sigma > 0:
        raise ValueError("constant model: sigma must be positive")
    if p.a < 0:
        raise ValueError("constant model: a must be nonnegative")
    if not abs(p.rho) <= 1:
        raise ValueError("correlation must lie in [-1, 1]")
    const = lambda v: (lambda x: np.full_like(np.asarray(x, dtype=float), v))
    return MarketModel(
        domain=(-math.inf, math.inf),
        r=const(p.r),
        mu=const(p.sigma * p.lam),
        sigma=const(p.sigma),
        b=const(p.b),
        a=const(p.a),
        rho=const(p.rho),
        kind="constant",
        params=asdict(p),
        db=const(0.0),
        da=const(0.0),
    )


def analytic_h_sup(m: MarketModel, ez: EZPreferences) -> Optional[float]:
    """Closed-form supremum of h over the whole domain, when known."""
    g = ez.gamma
    p = m.params
    k = (1.0 - g) / (2.0 * g)
    if m.kind == "heston":
        slope = (1.0 - g) * p["r1"] + k * p["lam"] ** 2
        # h is affine in x on (0, inf)
        return (1.0 - g) * p["r0"] if slope <= 0 else math.inf
    if m.kind == "kim_omberg":
        # (1-g)(r0 + r1 x) + k (l0 + l1 x)^2, k < 0
        A = k * p["lambda1"] ** 2
        B = (1.0 - g) * p["r1"] + 2.0 * k * p["lambda0"] * p["lambda1"]
        C = (1.0 - g) * p["r0"] + k * p["lambda0"] ** 2
        if A < 0:
            return C - B * B / (4.0 * A)
        return C if B == 0 else math.inf
    if m.kind == "constant":
        return (1.0 - g) * p["r"] + k * p["lam"] ** 2
    return None


# --------------------------------------------------------------------------
# parameter checkers


@dataclass(frozen=True)
class Condition:
    id: str
    description: str
    left: float
    right: float
    passed: bool
    informational: bool = False


@dataclass(frozen=True)
class ParamCheckReport:
    model: str
    conditions: tuple[Condition, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.conditions if not c.informational)

    def __getitem__(self, cid: str) -> Condition:
        for c in self.conditions:
            if c.id == cid:
                return c
        raise KeyError(cid)

    def to_text(self) -> str:
        rows = [f"{'id':<5} {'condition':<48} {'left':>14} {'right':>14}  result"]
        for c in self.conditions:
            verdict = "pass" if c.passed else "FAIL"
            if c.informational:
                verdict += " (info)"
            rows.append(
                f"{c.id:<5} {c.description:<48} {c.left:>14.6g} {c.right:>14.6g}  {verdict}"
            )
        rows.append(f"overall: {'PASS' if self.passed else 'FAIL'} ({self.model})")
        return "\n".join(rows)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "passed": self.passed,
            "conditions": [asdict(c) for c in self.conditions],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=_json_float)


def _json_float(v):
    if isinstance(v, (np.floating, np.bool_)):
        return v.item()
    raise TypeError(type(v))


def _ge(cid, desc, left, right, informational=False):
    return Condition(cid, desc, float(left), float(right), bool(left >= right), informational)


def _gt(cid, desc, left, right, informational=False):
    return Condition(cid, desc, float(left), float(right), bool(left > right), informational)


def _lt(cid, desc, left, right, informational=False):
    return Condition(cid, desc, float(left), float(right), bool(left < right), informational)


def _le(cid, desc, left, right, informational=False):
    return Condition(cid, desc, float(left), float(right), bool(left <= right), informational)


def cir_laplace_finite(q: float, kappa: float, a: float) -> bool:
    """Whether E[exp(q * int_0^T X ds)] is finite for every T.

    ``X`` is a square-root process with mean-reversion speed ``kappa`` and
    volatility loading ``a``; the transform is finite iff
    ``q < kappa**2 / (2 a**2)``.
    """
    if not a > 0:
        raise ValueError("a must be positive")
    return bool(q < kappa * kappa / (2.0 * a * a))


def heston_laplace_exponent(p: HestonParams, ez: EZPreferences) -> tuple[float, float]:
    """(q, kappa) of the integrated-CIR transform behind item ii for Heston."""
    psi = ez.psi
    q = (psi - 1.0) * p.r1 + 0.5 * (psi * psi - psi) * p.lam**2
    kappa = p.b - (psi - 1.0) * p.a * p.lam * p.rho
    return q, kappa


def kim_omberg_laplace_exponent(p: KimOmbergParams, ez: EZPreferences) -> tuple[float, float]:
    """(q, kappa) for the squared OU state, rescaled to the CIR form of X."""
    psi = ez.psi
    q = 0.5 * (psi * psi - psi) * p.lambda1**2
    kappa = p.b - (psi - 1.0) * p.a * p.lambda1 * p.rho
    return q, kappa


def _require_focal(ez):
    if not ez.focal:
        raise ValueError("parameter checks require gamma > 1 and psi > 1")


def check_heston_conditions(p: HestonParams, ez: EZPreferences) -> ParamCheckReport:
    _require_focal(ez)
    g, psi = ez.gamma, ez.psi
    lam2, lamrho, rho2 = p.lam**2, p.lam * p.rho, p.rho**2
    conds = [
        _ge("C1a", "b >= 0", p.b, 0.0),
        _ge("C1b", "ell >= 0", p.ell, 0.0),
        _ge("C1c", "r1 + lam^2/(2 gamma) >= 0", p.r1 + lam2 / (2 * g), 0.0),
        _gt("C1d", "a > 0", p.a, 0.0),
        _gt("C1e", "b ell > a^2/2 (Feller)", p.b * p.ell, 0.5 * p.a**2),
        Condition(
            "C2",
            "r1 > 0 or lam^2 > 0",
            float(max(p.r1, lam2)),
            0.0,
            bool(p.r1 > 0 or lam2 > 0),
        ),
    ]
    if p.a > 0:
        left = (psi - 1) * (p.r1 + p.b * lamrho / p.a + 0.5 * lam2 * (psi - (psi - 1) * rho2))
        conds.append(_lt("C3", "(psi-1)[r1 + b lam rho/a + ...] < b^2/(2a^2)", left, p.b**2 / (2 * p.a**2)))
    else:
        conds.append(Condition("C3", "(psi-1)[r1 + b lam rho/a + ...] < b^2/(2a^2)", math.nan, math.nan, False))
    conds.append(
        _le("C4", "b lam rho <= -psi a lam^2/2 (sufficient)", p.b * lamrho, -0.5 * psi * p.a * lam2, True)
    )
    hsup = (1 - g) * p.r0 if (1 - g) * p.r1 + (1 - g) / (2 * g) * lam2 <= 0 else math.inf
    conds.append(Condition("H", "analytic sup of h (limit x -> 0)", hsup, math.inf, bool(hsup < math.inf), True))
    return ParamCheckReport("heston", tuple(conds))


def check_kim_omberg_conditions(p: KimOmbergParams, ez: EZPreferences) -> ParamCheckReport:
    _require_focal(ez)
    g, psi = ez.gamma, ez.psi
    lam2, lamrho, rho2 = p.lambda1**2, p.lambda1 * p.rho, p.rho**2
    pbar_speed = -p.b + (1 - g) / g * p.a * lamrho
    conds = [
        _gt("D1a", "a > 0", p.a, 0.0),
        _gt("D1b", "b > 0", p.b, 0.0),
        Condition("D1c", "r1 = 0 or lambda1^2 > 0", float(lam2), 0.0, bool(p.r1 == 0 or lam2 > 0)),
        Condition(
            "D2",
            "-b + (1-g)/g a lambda1 rho < 0 or lambda1^2 > 0",
            float(pbar_speed),
            0.0,
            bool(pbar_speed < 0 or lam2 > 0),
        ),
    ]
    if p.a > 0:
        left = (psi - 1) * (p.b * lamrho / p.a + 0.5 * lam2 * (psi - (psi - 1) * rho2))
        conds.append(_lt("D3", "(psi-1)[b lambda1 rho/a + ...] < b^2/(2a^2)", left, p.b**2 / (2 * p.a**2)))
    else:
        conds.append(Condition("D3", "(psi-1)[b lambda1 rho/a + ...] < b^2/(2a^2)", math.nan, math.nan, False))
    conds.append(
        _le("D4", "b lambda1 rho <= -psi a lambda1^2/2 (sufficient)", p.b * lamrho, -0.5 * psi * p.a * lam2, True)
    )
    return ParamCheckReport("kim_omberg", tuple(conds))


def check_conditions(params, ez: EZPreferences) -> ParamCheckReport:
    if isinstance(params, HestonParams):
        return check_heston_conditions(params, ez)
    if isinstance(params, KimOmbergParams):
        return check_kim_omberg_conditions(params, ez)
    if isinstance(params, ConstantParams):
        # bounded coefficients: only positivity requirements remain
        conds = (
            _gt("K1", "sigma > 0", params.sigma, 0.0),
            _ge("K2", "a >= 0", params.a, 0.0),
        )
        return ParamCheckReport("constant", conds)
    raise TypeError(f"no checker for {type(params).__name__}")


def make_model(params) -> MarketModel:
    if isinstance(params, HestonParams):
        return make_heston(params)
    if isinstance(params, KimOmbergParams):
        return make_kim_omberg(params)
    if isinstance(params, ConstantParams):
        return make_constant(params)
    raise TypeError(f"unknown parameter type {type(params).__name__}")
