"""JSON run configuration shared by the command line and the scripts."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from typing import Optional

from .market import ConstantParams, EZPreferences, HestonParams, KimOmbergParams
from .solver import SolverConfig


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


_MODEL_PARAMS = {
    "heston": HestonParams,
    "kim_omberg": KimOmbergParams,
    "constant": ConstantParams,
}


def _build(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class PerturbationConfig:
    name: str
    pi_shift: float = 0.0
    ctilde_scale: float = 1.0


@dataclass(frozen=True)
class SimulationConfig:
    paths: int = 100_000
    dt: float = 1.0 / 250.0
    seed: int = 0
    w0: float = 1.0
    x0: Optional[float] = None
    chunk: int = 500
    checks: tuple[str, ...] = ("budget", "value")
    perturbations: tuple[PerturbationConfig, ...] = ()
    dump_paths: bool = False

    def __post_init__(self):
        if self.paths < 2:
            raise ValueError("need at least 2 paths")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        bad = set(self.checks) - {"budget", "value"}
        if bad:
            raise ValueError(f"unknown checks {sorted(bad)}")


@dataclass(frozen=True)
class HorizonConfig:
    psi: tuple[float, ...] = (0.2, 1.5)
    delta: tuple[float, ...] = (0.08,)
    T_max: float = 100.0
    dT: float = 1.0
    x0: Optional[float] = None


@dataclass(frozen=True)
class RunConfig:
    preferences: EZPreferences
    model_kind: str
    model: object
    T: float
    x0: float
    solver: SolverConfig = SolverConfig()
    simulation: SimulationConfig = SimulationConfig()
    horizon: HorizonConfig = HorizonConfig()
    output_dir: str = "out"
    raw: dict = field(default_factory=dict, compare=False)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        allowed = {"preferences", "model", "T", "x0", "solver", "simulation", "horizon", "output"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        for key in ("preferences", "model"):
            if key not in d:
                raise ConfigError(f"missing section '{key}'")
        prefs = _build(EZPreferences, d["preferences"], "preferences")
        model = dict(d["model"]) if isinstance(d["model"], dict) else None
        if model is None or "kind" not in model:
            raise ConfigError("model must be an object with a 'kind'")
        kind = model.pop("kind")
        if kind not in _MODEL_PARAMS:
            raise ConfigError(f"unknown model kind '{kind}' (expected one of {sorted(_MODEL_PARAMS)})")
        params = _build(_MODEL_PARAMS[kind], model, "model")
        T = d.get("T", 10.0)
        if not isinstance(T, (int, float)) or not T > 0:
            raise ConfigError("T must be a positive number")
        x0 = d.get("x0")
        if x0 is None:
            x0 = {"heston": getattr(params, "ell", 0.0), "kim_omberg": 0.0, "constant": 0.0}[kind]
        sim = dict(d.get("simulation", {}))
        if "perturbations" in sim:
            sim["perturbations"] = tuple(
                _build(PerturbationConfig, p, "simulation.perturbations") for p in sim["perturbations"]
            )
        if "checks" in sim:
            sim["checks"] = tuple(sim["checks"])
        hor = dict(d.get("horizon", {}))
        for k in ("psi", "delta"):
            if k in hor:
                hor[k] = tuple(float(v) for v in hor[k])
        out = d.get("output", {})
        if not isinstance(out, dict):
            raise ConfigError("output must be an object")
        return cls(
            preferences=prefs,
            model_kind=kind,
            model=params,
            T=float(T),
            x0=float(x0),
            solver=_build(SolverConfig, d.get("solver", {}), "solver"),
            simulation=_build(SimulationConfig, sim, "simulation"),
            horizon=_build(HorizonConfig, hor, "horizon"),
            output_dir=str(out.get("dir", "out")),
            raw=d,
        )


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    return RunConfig.from_dict(d)
