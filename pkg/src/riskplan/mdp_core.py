"""Grid-world highway window, sector actions and the slip transition model."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np


class SafetyState(enum.IntEnum):
    """Safety tag of a cell.

    The first four values are ordered by risk (``SA < LR < HR < UN``) so that
    ``np.maximum`` on tag arrays escalates toward the more dangerous class.
    """

    SA = 0
    LR = 1
    HR = 2
    UN = 3
    TG = 4
    CP = 5

    @property
    def tag(self) -> str:
        return self.name.lower()


class Action(enum.IntEnum):
    """Sector actions; each advances one column and shifts by ``offset`` rows."""

    SEC1 = 0
    SEC2 = 1
    SEC3 = 2

    @property
    def offset(self) -> int:
        return ROW_OFFSETS[self]


ROW_OFFSETS = (1, 0, -1)
ACTIONS = (Action.SEC1, Action.SEC2, Action.SEC3)
# argmin tie-break preference: straight first
TIE_ORDER = (Action.SEC2, Action.SEC1, Action.SEC3)


class CellId(NamedTuple):
    row: int
    col: int


@dataclass(frozen=True)
class GridGeometry:
    """Rectangular planning window.

    Row ``r`` spans lateral coordinates ``[y_min + r*w, y_min + (r+1)*w)`` with
    ``y_min = -m*w/2`` (so the centre row is centred on ``y = 0``); column ``c``
    spans ``[x_origin + c*l, x_origin + (c+1)*l)``.
    """

    m: int
    n: int
    cell_width: float
    cell_length: float
    lane_rows: tuple[tuple[int, int], ...]
    x_origin: float = 0.0
    edge_rows: frozenset[int] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "edge_rows", frozenset({0, self.m - 1}))

    @property
    def n_cells(self) -> int:
        return self.m * self.n

    @property
    def y_min(self) -> float:
        return -0.5 * self.m * self.cell_width

    @property
    def y_max(self) -> float:
        return 0.5 * self.m * self.cell_width

    @property
    def x_end(self) -> float:
        return self.x_origin + self.n * self.cell_length

    def index(self, cell: tuple[int, int]) -> int:
        """Flat state index, row-major."""
        return cell[0] * self.n + cell[1]

    def cell(self, index: int) -> CellId:
        return CellId(*divmod(int(index), self.n))

    def cells(self):
        for r in range(self.m):
            for c in range(self.n):
                yield CellId(r, c)

    def center(self, cell: tuple[int, int]) -> tuple[float, float]:
        """World ``(x, y)`` of a cell centre."""
        r, c = cell
        return (self.x_origin + (c + 0.5) * self.cell_length,
                self.y_min + (r + 0.5) * self.cell_width)

    def row_center(self, row: int) -> float:
        return self.y_min + (row + 0.5) * self.cell_width

    def row_of(self, y: float) -> int | None:
        r = int(np.floor((y - self.y_min) / self.cell_width))
        return r if 0 <= r < self.m else None

    def col_of(self, x: float) -> int | None:
        c = int(np.floor((x - self.x_origin) / self.cell_length))
        return c if 0 <= c < self.n else None

    def cell_of(self, x: float, y: float) -> CellId | None:
        """Cell containing a world point, or ``None`` outside the window."""
        r, c = self.row_of(y), self.col_of(x)
        if r is None or c is None:
            return None
        return CellId(r, c)

    def lane_of_row(self, row: int) -> int | None:
        for k, (lo, hi) in enumerate(self.lane_rows):
            if lo <= row < hi:
                return k
        return None

    def shifted(self, x_origin: float) -> GridGeometry:
        """Same lattice re-anchored at a new longitudinal origin."""
        return GridGeometry(self.m, self.n, self.cell_width, self.cell_length,
                            self.lane_rows, x_origin)


def build_grid(m: int, n: int, cell_width: float, cell_length: float,
               lanes: Sequence[tuple[int, int]] | Sequence[int],
               x_origin: float = 0.0) -> GridGeometry:
    """Build a window geometry.

    ``lanes`` is either a list of half-open ``(start, stop)`` row ranges or a
    list of lane widths in rows, laid out from row 1 upward.
    """
    if m < 3 or n < 2:
        raise ValueError(f"grid must be at least 3x2, got {m}x{n}")
    if not (cell_width > 0 and cell_length > 0):
        raise ValueError("cell dimensions must be positive")
    lanes = list(lanes)
    if lanes and all(isinstance(k, (int, np.integer)) for k in lanes):
        ranges, lo = [], 1
        for width in lanes:
            if width <= 0:
                raise ValueError("lane widths must be positive")
            ranges.append((lo, lo + int(width)))
            lo += int(width)
    else:
        ranges = [(int(lo), int(hi)) for lo, hi in lanes]
    covered = []
    for lo, hi in ranges:
        if lo >= hi:
            raise ValueError(f"empty lane range {(lo, hi)}")
        if lo < 1 or hi > m - 1:
            raise ValueError(f"lane {(lo, hi)} overlaps the edge rows")
        covered.extend(range(lo, hi))
    if sorted(covered) != list(range(1, m - 1)):
        raise ValueError("lanes must partition the non-edge rows exactly")
    return GridGeometry(m, n, float(cell_width), float(cell_length),
                        tuple(sorted(ranges)), float(x_origin))


def next_cell(s: tuple[int, int], a: int, g: GridGeometry) -> CellId:
    """Intended successor; rows clamp at the edges, the last column absorbs."""
    r, c = s
    if c >= g.n - 1:
        return CellId(r, c)
    r2 = min(max(r + ROW_OFFSETS[a], 0), g.m - 1)
    return CellId(r2, c + 1)


@dataclass(frozen=True)
class TransitionModel:
    """Dense slip model ``P[s, a, s']`` over flat cell indices."""

    p_success: float
    P: np.ndarray

    def successors(self, s: int, a: int) -> tuple[np.ndarray, np.ndarray]:
        row = self.P[s, a]
        idx = np.flatnonzero(row)
        return idx, row[idx]


def make_transitions(p_success: float, g: GridGeometry) -> TransitionModel:
    if not (0.0 < p_success <= 1.0):
        raise ValueError(f"p_success must lie in (0, 1], got {p_success}")
    S, A = g.n_cells, len(ACTIONS)
    P = np.zeros((S, A, S))
    slip = 0.5 * (1.0 - p_success)
    for cell in g.cells():
        s = g.index(cell)
        targets = [g.index(next_cell(cell, b, g)) for b in ACTIONS]
        for a in ACTIONS:
            for b in ACTIONS:
                P[s, a, targets[b]] += p_success if a == b else slip
    P.setflags(write=False)
    return TransitionModel(float(p_success), P)


@dataclass(frozen=True)
class LocalMdp:
    """One stationary planning window."""

    geometry: GridGeometry
    transitions: TransitionModel
    gamma: float
    ego_cell: CellId
    goal_cells: frozenset[CellId] = frozenset()
    rewards: object = None  # rau.RewardModel, attached once the field is known

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.ego_cell in self.goal_cells:
            raise ValueError("goal cells must not contain the ego cell")

    @property
    def actions(self) -> tuple[Action, ...]:
        return ACTIONS

    @property
    def P(self) -> np.ndarray:
        return self.transitions.P

    @property
    def n_states(self) -> int:
        return self.geometry.n_cells

    def with_rewards(self, rewards) -> LocalMdp:
        return LocalMdp(self.geometry, self.transitions, self.gamma,
                        self.ego_cell, self.goal_cells, rewards)
