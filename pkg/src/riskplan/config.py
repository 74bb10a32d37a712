"""Scenario configuration: a single JSON document, validated on load."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from importlib import resources
from pathlib import Path

from .fcu import Clocks
from .rau import ParticipantState, RewardParams, Thresholds, TruncExpParams
from .risk_q import EntropicParams
from .vehicle import EgoState, VehicleParams

CONFIG_VERSION = 1
REQUIRED = ("version", "grid", "ego", "participants")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GridConfig:
    m: int = 11
    n: int = 39
    cell_width: float = 2.0
    cell_length: float = 3.5
    lanes: tuple = (3, 3, 3)


@dataclass(frozen=True)
class EgoConfig:
    x: float = 0.0
    y: float = 0.0
    psi: float = 0.0
    alpha_T: float = 0.0
    psi_dot: float = 0.0
    length: float = 3.5
    width: float = 2.0
    vehicle: VehicleParams = VehicleParams()

    def state(self) -> EgoState:
        return EgoState(self.x, self.y, self.psi, self.alpha_T, self.psi_dot)


@dataclass(frozen=True)
class RiskConfig:
    p_un: float = 0.8
    p_hr: float = 0.4
    p_lr: float = 0.1
    sigma_growth: float = 0.25
    plan_lookahead: int = 5
    fcu_lookahead: int = 10
    tube_radius: float = 1.0
    inflate_by_ego: bool = True
    clearance: float = 0.0
    tube_mode: str = "reference"

    def thresholds(self) -> Thresholds:
        return Thresholds(self.p_un, self.p_hr, self.p_lr)


@dataclass(frozen=True)
class SamplingConfig:
    policies: int = 10
    per_policy: int = 1000
    inner: int = 1
    dedupe: bool = False
    mode: str = "min"
    tol: float = 1e-9


@dataclass(frozen=True)
class ScenarioConfig:
    version: int
    grid: GridConfig
    ego: EgoConfig
    participants: tuple[ParticipantState, ...]
    risk: RiskConfig = RiskConfig()
    rewards: RewardParams = RewardParams()
    entropic: EntropicParams = EntropicParams()
    clocks: Clocks = Clocks()
    p_success: float = 0.9
    sampling: SamplingConfig = SamplingConfig()
    duration: float = 12.0
    seed: int = 0
    name: str = ""
    rollout: str = "sampled"

    def with_alpha(self, alpha: float) -> ScenarioConfig:
        return replace(self, entropic=EntropicParams(alpha, self.entropic.gamma))

    def to_dict(self) -> dict:
        """The JSON document layout accepted by ``from_dict``."""
        clocks = asdict(self.clocks)
        clocks.pop("tau_pl")
        grid = asdict(self.grid)
        grid["lanes"] = [list(x) if isinstance(x, tuple) else x for x in self.grid.lanes]
        return {
            "version": self.version, "name": self.name, "grid": grid, "ego": asdict(self.ego),
            "participants": [asdict(p) for p in self.participants],
            "risk": asdict(self.risk), "rewards": asdict(self.rewards), "entropic": asdict(self.entropic),
            "clocks": clocks, "transitions": {"p_success": self.p_success},
            "sampling": asdict(self.sampling),
            "episode": {"duration": self.duration, "rollout": self.rollout}, "seed": self.seed,
        }


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def from_dict(d: dict) -> ScenarioConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    missing = [k for k in REQUIRED if k not in d]
    if missing:
        raise ConfigError(f"missing required fields: {', '.join(missing)}")
    top = {"version", "grid", "ego", "participants", "risk", "rewards", "entropic", "clocks",
           "transitions", "sampling", "episode", "seed", "name"}
    unknown = sorted(set(d) - top)
    if unknown:
        raise ConfigError(f"unknown keys {unknown}")
    if d["version"] != CONFIG_VERSION:
        raise ConfigError(f"version: unsupported config version {d['version']!r}")

    grid = dict(d["grid"])
    if "lanes" in grid:
        grid["lanes"] = tuple(tuple(x) if isinstance(x, list) else x for x in grid["lanes"])
    grid = _build(GridConfig, grid, "grid")

    ego = dict(d["ego"])
    vehicle = _build(VehicleParams, ego.pop("vehicle", {}), "ego.vehicle")
    ego = _build(EgoConfig, {**ego, "vehicle": vehicle}, "ego")

    if not isinstance(d["participants"], list):
        raise ConfigError("participants: expected a list")
    parts = tuple(_build(ParticipantState, p, f"participants[{i}]") for i, p in enumerate(d["participants"]))

    rewards = dict(d.get("rewards", {}))
    for key in ("hr", "lr"):
        if key in rewards:
            rewards[key] = _build(TruncExpParams, rewards[key], f"rewards.{key}")
    rewards = _build(RewardParams, rewards, "rewards")

    entropic = _build(EntropicParams, d.get("entropic", {}), "entropic")
    risk = _build(RiskConfig, d.get("risk", {}), "risk")
    try:
        risk.thresholds()
    except ValueError as exc:
        raise ConfigError(f"risk: {exc}") from exc
    if risk.tube_mode not in ("reference", "predicted"):
        raise ConfigError("risk.tube_mode: must be 'reference' or 'predicted'")
    sampling = _build(SamplingConfig, d.get("sampling", {}), "sampling")
    if sampling.mode not in ("min", "policy"):
        raise ConfigError("sampling.mode: must be 'min' or 'policy'")
    if min(sampling.policies, sampling.per_policy, sampling.inner) < 1:
        raise ConfigError("sampling: policies, per_policy and inner must be >= 1")

    clocks = dict(d.get("clocks", {}))
    if "tau_pl" in clocks:
        raise ConfigError("clocks.tau_pl: derived from grid.n * clocks.tau_env, do not set")
    clocks.setdefault("tau_env", Clocks.tau_env)
    clocks = _build(Clocks, {**clocks, "tau_pl": grid.n * clocks["tau_env"]}, "clocks")

    transitions = d.get("transitions", {})
    unknown = sorted(set(transitions) - {"p_success"})
    if unknown:
        raise ConfigError(f"transitions: unknown keys {unknown}")
    p_success = transitions.get("p_success", 0.9)
    if not (0 < p_success <= 1):
        raise ConfigError("transitions.p_success: must lie in (0, 1]")

    episode = d.get("episode", {})
    unknown = sorted(set(episode) - {"duration", "rollout"})
    if unknown:
        raise ConfigError(f"episode: unknown keys {unknown}")
    duration = float(episode.get("duration", 12.0))
    if duration <= clocks.dt:
        raise ConfigError("episode.duration: must exceed clocks.dt")
    rollout = episode.get("rollout", "sampled")
    if rollout not in ("sampled", "nominal"):
        raise ConfigError("episode.rollout: must be 'sampled' or 'nominal'")

    return ScenarioConfig(int(d["version"]), grid, ego, parts, risk, rewards, entropic, clocks,
                          float(p_success), sampling, duration, int(d.get("seed", 0)), str(d.get("name", "")),
                          rollout)


def bundled(name: str) -> Path:
    return Path(str(resources.files("riskplan") / "scenarios" / f"{name}.json"))


def load_config(path: str | Path) -> ScenarioConfig:
    """Parse and validate a scenario; bare names resolve to bundled scenarios."""
    p = Path(path)
    if not p.exists() and bundled(str(path)).exists():
        p = bundled(str(path))
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    if not text.strip():
        data = {}
    else:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return from_dict(data)
