"""Feasibility checking and the env/pl/rpl transition scheduler."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .mdp_core import CellId, GridGeometry
from .vehicle import ReferenceTrajectory, hermite_reference

ENV, PL, RPL, CHECK, VIOLATION = "env", "pl", "rpl", "fcu-check", "safety-violation"


class NoSafeOverride(RuntimeError):
    """Current row and both neighbours are risky at the next step."""


# ---------------------------------------------------------- reach / risk

@dataclass(frozen=True)
class ReachTube:
    times: np.ndarray
    cells: tuple[frozenset[CellId], ...]

    def __len__(self) -> int:
        return len(self.cells)

    def __contains__(self, item) -> bool:
        cell, step = item
        return 0 <= step < len(self.cells) and CellId(*cell) in self.cells[step]


@dataclass(frozen=True)
class RiskSet:
    """Time-indexed risky cells: ``masks[k][row, col]`` for forecast step ``k``."""

    masks: tuple[np.ndarray, ...]

    @classmethod
    def from_cells(cls, pairs, shape: tuple[int, int], horizon: int) -> RiskSet:
        masks = [np.zeros(shape, bool) for _ in range(horizon + 1)]
        for (r, c), k in pairs:
            masks[k][r, c] = True
        return cls(tuple(masks))

    @classmethod
    def empty(cls, shape: tuple[int, int], horizon: int) -> RiskSet:
        return cls.from_cells((), shape, horizon)

    @property
    def cells(self) -> set[tuple[CellId, int]]:
        return {(CellId(int(r), int(c)), k) for k, m in enumerate(self.masks) for r, c in zip(*np.nonzero(m))}

    def __contains__(self, item) -> bool:
        (r, c), k = item
        return 0 <= k < len(self.masks) and bool(self.masks[k][r, c])


def _disc_cells(x: float, y: float, radius: float, g: GridGeometry) -> frozenset[CellId]:
    home = g.cell_of(x, y)
    out = {home} if home is not None else set()
    if radius > 0:
        xe = g.x_origin + g.cell_length * np.arange(g.n + 1)
        ye = g.y_min + g.cell_width * np.arange(g.m + 1)
        dx = np.maximum.reduce([xe[:-1] - x, np.zeros(g.n), x - xe[1:]])
        dy = np.maximum.reduce([ye[:-1] - y, np.zeros(g.m), y - ye[1:]])
        hit = dy[:, None] ** 2 + dx[None, :] ** 2 < radius ** 2
        out.update(CellId(int(r), int(c)) for r, c in zip(*np.nonzero(hit)))
    return frozenset(out)


def reach_tube(ref: ReferenceTrajectory, tube_radius: float, g: GridGeometry, horizon: int,
               t0: float, tau_env: float) -> ReachTube:
    """Cells within ``tube_radius`` of the reference at ``t0 + k * tau_env``."""
    times = t0 + tau_env * np.arange(horizon + 1)
    return tube_from_points(times, ref.X(times), ref.Y(times), tube_radius, g)


def tube_from_points(times, xs, ys, radius: float, g: GridGeometry) -> ReachTube:
    """Cells within ``radius`` of the point ``(xs[k], ys[k])`` at each step."""
    if radius < 0:
        raise ValueError("tube_radius must be nonnegative")
    cells = tuple(_disc_cells(float(x), float(y), radius, g) for x, y in zip(xs, ys))
    return ReachTube(np.asarray(times, dtype=float), cells)


def merge_tubes(a: ReachTube, b: ReachTube) -> ReachTube:
    """Step-wise union of two tubes over the same time grid."""
    if len(a) != len(b) or not np.allclose(a.times, b.times):
        raise ValueError("tubes must share their time grid")
    return ReachTube(a.times, tuple(x | y for x, y in zip(a.cells, b.cells)))


@dataclass(frozen=True)
class Verdict:
    feasible: bool
    witness: tuple[CellId, int] | None = None

    @property
    def flag(self) -> str:
        return "¬" if self.feasible else "+"


def check_feasible(tube: ReachTube, risk: RiskSet, first_step: int = 0) -> Verdict:
    """Feasible iff the tube misses the risky set at every shared step."""
    for k in range(first_step, min(len(tube.cells), len(risk.masks))):
        mask = risk.masks[k]
        hits = sorted(c for c in tube.cells[k] if mask[c])
        if hits:
            return Verdict(False, (hits[0], k))
    return Verdict(True)


# ------------------------------------------------------------ automaton

@dataclass(frozen=True)
class Clocks:
    tau_env: float = 0.2
    tau_pl: float = 7.8
    tau_fcu: float = 0.05
    tau_safe: float = 0.2
    dt: float = 1e-3

    def __post_init__(self):
        if not (0 < self.tau_fcu < self.tau_env <= self.tau_safe):
            raise ValueError("need 0 < tau_fcu < tau_env <= tau_safe")
        if self.tau_pl < self.tau_env:
            raise ValueError("tau_pl must be at least tau_env")
        if not (0 < self.dt <= self.tau_fcu):
            raise ValueError("need 0 < dt <= tau_fcu")
        for name in ("tau_env", "tau_pl", "tau_fcu", "tau_safe"):
            ratio = getattr(self, name) / self.dt
            if abs(ratio - round(ratio)) > 1e-6:
                raise ValueError(f"{name} must be an integer multiple of dt")

    @classmethod
    def for_horizon(cls, n: int, tau_env: float = 0.2, **kw) -> Clocks:
        return cls(tau_env=tau_env, tau_pl=n * tau_env, **kw)

    def ticks(self, name: str) -> int:
        return int(round(getattr(self, name) / self.dt))


@dataclass(frozen=True)
class HybridState:
    """Scheduler view of the hybrid state.

    ``ego`` and ``world`` are carried opaquely (the continuous vehicle state
    and the discrete environment snapshot); ``infeasible`` is the flag Delta.
    """

    ego: object = None
    world: object = None
    infeasible: bool = False
    tick: int = 0
    env_timer: int = 0
    pl_timer: int = 0
    fcu_timer: int = 0
    safe_left: int = 0

    @property
    def in_safety_mode(self) -> bool:
        return self.safe_left > 0

    def elapsed(self, clocks: Clocks) -> dict[str, float]:
        return {"env": self.env_timer * clocks.dt, "pl": self.pl_timer * clocks.dt,
                "fcu": self.fcu_timer * clocks.dt}


INITIAL_LABELS = (ENV, PL)


def step_automaton(q: HybridState, clocks: Clocks) -> tuple[HybridState, list[str]]:
    """Advance one ``dt`` tick and return the labels that fire at the new time.

    Clocks are integer tick counters, so firing times are exact multiples.
    """
    env, pl, fcu = q.env_timer + 1, q.pl_timer + 1, q.fcu_timer + 1
    safe, infeasible = q.safe_left, q.infeasible
    labels = []
    if env >= clocks.ticks("tau_env"):
        env = 0
        labels.append(ENV)
    if safe > 0:
        safe -= 1
        if safe == 0:
            labels.append(PL)
            pl = 0
    elif infeasible:
        labels.append(RPL)
        infeasible = False
        safe = clocks.ticks("tau_safe")
    elif pl >= clocks.ticks("tau_pl"):
        labels.append(PL)
        pl = 0
    if fcu >= clocks.ticks("tau_fcu"):
        fcu = 0
        if safe == 0 and PL not in labels:
            labels.append(CHECK)
    return replace(q, infeasible=infeasible, tick=q.tick + 1, env_timer=env, pl_timer=pl,
                   fcu_timer=fcu, safe_left=safe), labels


@dataclass
class ExecutionFragment:
    """Alternating trajectory segments and transition labels."""

    segments: list[tuple[float, float]] = field(default_factory=list)
    labels: list[str] = field(default_factory=list)

    @property
    def duration(self) -> float:
        return sum(b - a for a, b in self.segments)

    def append(self, t_start: float, t_end: float, label: str | None = None):
        self.segments.append((t_start, t_end))
        if label is not None:
            self.labels.append(label)


# ---------------------------------------------------------- safety mode

def safety_mode(Y: float, X: float, t0: float, g: GridGeometry, risk: RiskSet, duration: float,
                v_T: float, lookahead: int | None = None) -> tuple[ReferenceTrajectory, int]:
    """Lane-keep if the cells ahead are clear, else shift one row to the safer side.

    The row is clear when no cell ``(row, col + k)`` is risky at its step ``k``
    for ``k = 1..lookahead`` (all forecast steps by default).  A neighbour row
    qualifies as a shift target when it is clear at the next step; among
    qualifying rows the one with fewer risky cells ahead wins, ties going up.
    Returns the override reference and the target row.
    """
    lane_lo, lane_hi = 1, g.m - 2
    row = g.row_of(Y)
    row = lane_lo if row is None and Y < 0 else lane_hi if row is None else row
    row = min(max(row, lane_lo), lane_hi)
    col = g.col_of(X)
    col = 0 if col is None else col
    last = len(risk.masks) - 1 if lookahead is None else min(lookahead, len(risk.masks) - 1)
    steps = range(1, max(last, 1) + 1)
    ahead = lambda k: min(col + k, g.n - 1)
    hits = lambda r: [bool(risk.masks[min(k, len(risk.masks) - 1)][r, ahead(k)]) for k in steps]
    y_lo = g.y_min + lane_lo * g.cell_width
    y_hi = g.y_min + (lane_hi + 1) * g.cell_width
    if not any(hits(row)):
        y = min(max(Y, y_lo + 0.5 * g.cell_width), y_hi - 0.5 * g.cell_width)
        return hermite_reference([t0, t0 + duration], [y, y], X, v_T), row
    options = [r for r in (row + 1, row - 1) if lane_lo <= r <= lane_hi and not hits(r)[0]]
    if not options:
        raise NoSafeOverride(f"row {row} and its neighbours are risky at column {ahead(1)}")
    target = min(options, key=lambda r: (sum(hits(r)), -r))
    return hermite_reference([t0, t0 + duration], [Y, g.row_center(target)], X, v_T), target
