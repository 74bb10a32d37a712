"""Risk assessment: occupancy forecasting, cell classification and rewards.

Occupancy is a constant-velocity footprint forecast whose footprint grows by
``sigma_growth`` metres per second of lookahead on every side.  The value of
a cell is the fraction of its area covered by the grown footprint, which
keeps step 0 an exact rasterisation and makes the forecast monotone in the
uncertainty growth.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .mdp_core import ACTIONS, CellId, GridGeometry, LocalMdp, SafetyState, next_cell


@dataclass(frozen=True)
class ParticipantState:
    x: float
    y: float
    vx: float = 0.0
    vy: float = 0.0
    length: float = 7.0
    width: float = 4.0

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValueError("participant footprint must have positive size")

    def at(self, t: float) -> ParticipantState:
        return ParticipantState(self.x + self.vx * t, self.y + self.vy * t,
                                self.vx, self.vy, self.length, self.width)

    def box(self, margin: float = 0.0) -> tuple[float, float, float, float]:
        hl, hw = 0.5 * self.length + margin, 0.5 * self.width + margin
        return self.x - hl, self.x + hl, self.y - hw, self.y + hw


@dataclass(frozen=True)
class OccupancyForecast:
    dt: float
    grids: np.ndarray  # (horizon + 1, m, n)

    @property
    def horizon_steps(self) -> int:
        return self.grids.shape[0] - 1


def _interval_overlap(lo: float, hi: float, edges: np.ndarray) -> np.ndarray:
    return np.clip(np.minimum(hi, edges[1:]) - np.maximum(lo, edges[:-1]), 0.0, None)


def coverage(box: tuple[float, float, float, float], g: GridGeometry) -> np.ndarray:
    """Fraction of each cell's area covered by an axis-aligned box."""
    x0, x1, y0, y1 = box
    xe = g.x_origin + g.cell_length * np.arange(g.n + 1)
    ye = g.y_min + g.cell_width * np.arange(g.m + 1)
    ox = _interval_overlap(x0, x1, xe) / g.cell_length
    oy = _interval_overlap(y0, y1, ye) / g.cell_width
    return np.outer(oy, ox)


def predict_occupancy(participants: Sequence[ParticipantState], g: GridGeometry,
                      horizon: int, dt: float, sigma_growth: float = 0.25) -> OccupancyForecast:
    if horizon < 1:
        raise ValueError("horizon must be at least one step")
    if dt <= 0:
        raise ValueError("dt must be positive")
    if sigma_growth < 0:
        raise ValueError("sigma_growth must be nonnegative")
    grids = np.zeros((horizon + 1, g.m, g.n))
    for k in range(horizon + 1):
        t = k * dt
        for p in participants:
            cov = coverage(p.at(t).box(margin=t * sigma_growth), g)
            np.maximum(grids[k], cov, out=grids[k])
    np.clip(grids, 0.0, 1.0, out=grids)
    return OccupancyForecast(float(dt), grids)


@dataclass(frozen=True)
class Thresholds:
    p_un: float = 0.8
    p_hr: float = 0.4
    p_lr: float = 0.1

    def __post_init__(self):
        if not (self.p_un > self.p_hr > self.p_lr > 0):
            raise ValueError("thresholds must satisfy p_un > p_hr > p_lr > 0")


@dataclass(frozen=True)
class RiskField:
    states: np.ndarray  # (m, n) array of SafetyState codes
    thresholds: Thresholds
    goals: frozenset[CellId]
    no_goal: bool = False

    def __getitem__(self, cell: tuple[int, int]) -> SafetyState:
        return SafetyState(int(self.states[cell]))

    def cells_with(self, *tags: SafetyState) -> set[CellId]:
        mask = np.isin(self.states, [int(t) for t in tags])
        return {CellId(int(r), int(c)) for r, c in zip(*np.nonzero(mask))}


def band(occ: np.ndarray, thresholds: Thresholds) -> np.ndarray:
    """Threshold banding followed by edge and lateral-neighbour escalation."""
    th = thresholds
    out = np.full(occ.shape, int(SafetyState.SA), dtype=np.int8)
    out[occ >= th.p_lr] = SafetyState.LR
    out[occ >= th.p_hr] = SafetyState.HR
    out[occ >= th.p_un] = SafetyState.UN
    out[0, :] = SafetyState.UN
    out[-1, :] = SafetyState.UN
    un = out == SafetyState.UN
    near = np.zeros_like(un)
    near[1:] |= un[:-1]
    near[:-1] |= un[1:]
    out[near & (out < SafetyState.HR)] = SafetyState.HR
    return out


def classify(forecast: OccupancyForecast, ego: tuple[int, int],
             goals: Iterable[tuple[int, int]], thresholds: Thresholds = Thresholds(),
             lookahead: int | None = None) -> RiskField:
    """Safety field from the worst occupancy over steps ``0..lookahead``."""
    last = forecast.horizon_steps if lookahead is None else min(lookahead, forecast.horizon_steps)
    occ = forecast.grids[: last + 1].max(axis=0)
    states = band(occ, thresholds)
    goals = [tuple(c) for c in goals]
    kept = frozenset(CellId(*c) for c in goals if states[tuple(c)] != SafetyState.UN)
    for c in kept:
        states[c] = SafetyState.TG
    states[tuple(ego)] = SafetyState.CP
    return RiskField(states, thresholds, kept, no_goal=bool(goals) and not kept)


def risk_steps(forecast: OccupancyForecast, thresholds: Thresholds = Thresholds(),
               lookahead: int | None = None) -> list[np.ndarray]:
    """Per-step masks of cells banded ``hr`` or ``un`` (the time-indexed risky set)."""
    last = forecast.horizon_steps if lookahead is None else min(lookahead, forecast.horizon_steps)
    return [band(forecast.grids[k], thresholds) >= SafetyState.HR for k in range(last + 1)]


# ---------------------------------------------------------------- rewards

@dataclass(frozen=True)
class TruncExpParams:
    tau_l: float
    tau_h: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.tau_h > 0:
            raise ValueError("tau_h must be <= 0")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if not self.tau_l > abs(self.tau_h):
            raise ValueError("tau_l must exceed |tau_h|")

    @property
    def span(self) -> float:
        return self.tau_l - abs(self.tau_h)

    @property
    def mean(self) -> float:
        T, s = self.span, self.sigma
        tail = math.exp(-T / s)
        return -(abs(self.tau_h) + s - T * tail / -math.expm1(-T / s))


def truncexp_pdf(x, p: TruncExpParams):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("truncexp_pdf needs finite input")
    z = -math.expm1(-p.span / p.sigma)
    dens = np.exp(-(np.abs(x) - abs(p.tau_h)) / p.sigma) / (p.sigma * z)
    inside = (x > -p.tau_l) & (x <= p.tau_h)
    out = np.where(inside, dens, 0.0)
    return float(out) if out.ndim == 0 else out


def truncexp_cdf(x, p: TruncExpParams):
    x = np.asarray(x, dtype=float)
    z = -math.expm1(-p.span / p.sigma)
    u = np.clip(np.abs(x) - abs(p.tau_h), 0.0, p.span)
    upper = (np.exp(-u / p.sigma) - math.exp(-p.span / p.sigma)) / z
    out = np.where(x <= -p.tau_l, 0.0, np.where(x >= p.tau_h, 1.0, upper))
    return float(out) if out.ndim == 0 else out


def sample_truncexp(p: TruncExpParams, rng: np.random.Generator, size=None):
    """Inverse-CDF draw; the result lies in ``(-tau_l, tau_h]``."""
    u = rng.random(size)
    z = -math.expm1(-p.span / p.sigma)
    depth = -p.sigma * np.log1p(-u * z)
    # u*z < z so depth < span; guard the last ulp anyway
    depth = np.minimum(depth, np.nextafter(p.span, 0.0))
    out = -(abs(p.tau_h) + depth)
    return float(out) if size is None else out


class Dist(enum.IntEnum):
    ZERO = 0
    UNSAFE = 1
    HR = 2
    LR = 3
    GOAL = 4


@dataclass(frozen=True)
class RewardParams:
    M: float = -10000.0
    Gamma: float = 10000.0
    hr: TruncExpParams = TruncExpParams(10000.0, 0.0, 1.0)
    lr: TruncExpParams = TruncExpParams(10.0, 0.0, 1.0)

    def __post_init__(self):
        if not self.M < 0:
            raise ValueError("M must be negative")
        if not self.Gamma > 0:
            raise ValueError("Gamma must be positive")


_DIST_OF_STATE = {
    SafetyState.SA: Dist.ZERO,
    SafetyState.CP: Dist.ZERO,
    SafetyState.UN: Dist.UNSAFE,
    SafetyState.HR: Dist.HR,
    SafetyState.LR: Dist.LR,
    SafetyState.TG: Dist.GOAL,
}


def sample_reward(tag: Dist, params: RewardParams, rng: np.random.Generator, size=None):
    tag = Dist(tag)
    if tag == Dist.HR:
        return sample_truncexp(params.hr, rng, size)
    if tag == Dist.LR:
        return sample_truncexp(params.lr, rng, size)
    const = {Dist.ZERO: 0.0, Dist.UNSAFE: params.M, Dist.GOAL: params.Gamma}[tag]
    return const if size is None else np.full(size, const)


@dataclass(frozen=True)
class RewardModel:
    """Reward distributions keyed by the successor cell.

    ``cell_dist[s']`` is the distribution paid when entering cell ``s'``;
    ``tags[s, a]`` is the distribution of the intended successor and
    ``mean[s, a]`` the expected reward under the slip model.
    """

    params: RewardParams
    cell_dist: np.ndarray  # (S,)
    tags: np.ndarray  # (S, A)
    mean: np.ndarray  # (S, A)

    @property
    def M(self) -> float:
        return self.params.M

    @property
    def Gamma(self) -> float:
        return self.params.Gamma

    @property
    def cost(self) -> np.ndarray:
        """Mean cost table (negated mean reward) used by the planner."""
        return -self.mean

    def dist_means(self) -> np.ndarray:
        p = self.params
        return np.array([0.0, p.M, p.hr.mean, p.lr.mean, p.Gamma])

    def sample_cells(self, cells: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One reward realisation per entry of ``cells`` (flat successor indices)."""
        cells = np.asarray(cells)
        kinds = self.cell_dist[cells]
        out = np.empty(cells.shape)
        for kind in Dist:
            mask = kinds == kind
            k = int(mask.sum())
            if k:
                out[mask] = sample_reward(kind, self.params, rng, size=k)
        return out


def build_reward_model(field: RiskField, mdp: LocalMdp, params: RewardParams = RewardParams()) -> RewardModel:
    g = mdp.geometry
    if field.states.shape != (g.m, g.n):
        raise ValueError("risk field and MDP geometries differ")
    flat = field.states.reshape(-1)
    cell_dist = np.array([_DIST_OF_STATE[SafetyState(int(v))] for v in flat], dtype=np.int8)
    tags = np.empty((g.n_cells, len(ACTIONS)), dtype=np.int8)
    for cell in g.cells():
        s = g.index(cell)
        for a in ACTIONS:
            tags[s, a] = cell_dist[g.index(next_cell(cell, a, g))]
    rm = RewardModel(params, cell_dist, tags, np.zeros(0))
    mean = mdp.P @ rm.dist_means()[cell_dist]
    return RewardModel(params, cell_dist, tags, mean)
