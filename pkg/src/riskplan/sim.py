"""Closed-loop episodes over the moving planning window, batches and output files."""
from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import fcu
from .config import ScenarioConfig
from .fcu import CHECK, ENV, PL, RPL, VIOLATION, Clocks, HybridState, NoSafeOverride, RiskSet
from .mdp_core import CellId, GridGeometry, LocalMdp, SafetyState, build_grid, make_transitions
from .rau import (ParticipantState, RewardModel, RiskField, band, build_reward_model, classify,
                  predict_occupancy, risk_steps)
from .risk_q import (CoverageError, PlanPolicy, QTable, SampleSet, collect_samples, coverage_samples,
                     greedy_policy, random_policies, solve_sampled_program)
from .vehicle import ClosedLoop, ReferenceTrajectory, design_lateral_lqr, waypoints_to_reference

TRACE_HEADER = ("t", "X", "Y", "Psi", "alpha_T", "Psi_dot", "delta", "plan_id", "delta_flag", "labels")
EVENT_HEADER = ("t", "label", "witness_row", "witness_col", "witness_step", "detail")


# ------------------------------------------------------------- planning

@dataclass
class Plan:
    plan_id: int
    t0: float
    cells: list[CellId]
    times: np.ndarray
    reference: ReferenceTrajectory
    policy: PlanPolicy
    qtable: QTable
    coverage_added: int = 0
    iterations: int = 0


def reward_cost_sampler(rm: RewardModel):
    def sample(s, a, succ, rng):
        return -rm.sample_cells(succ, rng)
    return sample


def plan_window(mdp: LocalMdp, cfg: ScenarioConfig, rng: np.random.Generator):
    """Run the sampled program on one window; returns ``(program result, greedy policy)``.

    Pairs the exploration draws missed get one extra tuple each, counted in
    ``coverage_added``.
    """
    rm: RewardModel = mdp.rewards
    sc = cfg.sampling
    sampler = reward_cost_sampler(rm)
    S, A = mdp.n_states, len(mdp.actions)
    policies = random_policies(S, A, sc.policies, rng)
    D = collect_samples(mdp.P, sampler, sc.policies, sc.per_policy, sc.inner, rng,
                        policies=policies, dedupe=sc.dedupe)
    added = 0
    missing = D.missing_pairs()
    if len(missing):
        # top-up: one extra tuple per uncovered pair, successor actions from policy 0
        D = D.concat(coverage_samples(mdp.P, sampler, missing, sc.inner, rng, policies[0]))
        added = len(missing)
    res = solve_sampled_program(D, cfg.entropic, tol=sc.tol, mode=sc.mode)
    res.coverage_added = added
    policy = greedy_policy(res.Q, mdp.P, rm.cost, cfg.entropic)
    return res, PlanPolicy(policy.actions, horizon=mdp.geometry.n)


def rollout(policy: PlanPolicy, P: np.ndarray, start: int, steps: int, rng: np.random.Generator | None) -> list[int]:
    """Waypoint states under the policy; slips are drawn from ``P`` when ``rng`` is given."""
    path = [start]
    s = start
    for _ in range(steps):
        a = policy(s)
        if rng is None:
            s = int(np.argmax(P[s, a]))
        else:
            s = int(rng.choice(P.shape[2], p=P[s, a]))
        path.append(s)
    return path


# ------------------------------------------------------------- episodes

@dataclass
class Event:
    t: float
    label: str
    witness: tuple[CellId, int] | None = None
    detail: str = ""


@dataclass
class EpisodeResult:
    trace: np.ndarray  # (rows, 7): t, X, Y, Psi, alpha_T, Psi_dot, delta
    plan_ids: np.ndarray
    flags: list[str]
    labels: list[str]
    events: list[Event]
    plans: list[Plan]
    collisions: int
    replans: int
    saturations: int
    terminated: str | None = None

    @property
    def Y(self) -> np.ndarray:
        return self.trace[:, 2]

    def count(self, label: str) -> int:
        return sum(1 for e in self.events if e.label == label)


def boxes_overlap(a, b) -> bool:
    return a[0] < b[1] and b[0] < a[1] and a[2] < b[3] and b[2] < a[3]


class Episode:
    """One closed-loop run: the hybrid automaton drives env/pl/rpl/check effects."""

    def __init__(self, cfg: ScenarioConfig, seed: int | None = None):
        self.cfg = cfg
        seed = cfg.seed if seed is None else seed
        plan_ss, slip_ss = np.random.SeedSequence(seed).spawn(2)
        self.plan_rng = np.random.default_rng(plan_ss)
        self.slip_rng = np.random.default_rng(slip_ss)
        gc = cfg.grid
        self.base = build_grid(gc.m, gc.n, gc.cell_width, gc.cell_length, gc.lanes)
        self.transitions = make_transitions(cfg.p_success, self.base)
        self.params = cfg.ego.vehicle
        self.loop = ClosedLoop(self.params, design_lateral_lqr(self.params))
        self.clocks: Clocks = cfg.clocks
        self.thresholds = cfg.risk.thresholds()
        self.lattice_x0 = cfg.ego.x - 0.5 * gc.cell_length
        row0 = self.base.row_of(cfg.ego.y)
        self.preferred_lane = self.base.lane_of_row(self._lane_row(row0, cfg.ego.y))
        self.window: GridGeometry = self.base
        self.field: RiskField | None = None
        self.risk: RiskSet | None = None
        self.env_time = 0.0
        self.plan: Plan | None = None
        self.reference: ReferenceTrajectory | None = None
        self.plans: list[Plan] = []
        self.events: list[Event] = []

    # -- discrete updates

    def _lane_row(self, row, y) -> int:
        g = self.base
        if row is None:
            row = 0 if y < 0 else g.m - 1
        return min(max(row, 1), g.m - 2)

    def participants_at(self, t: float) -> list[ParticipantState]:
        return [p.at(t) for p in self.cfg.participants]

    def forecast_participants(self, t: float) -> list[ParticipantState]:
        """Participants as seen by the forecast; optionally grown by the ego footprint.

        Growing each footprint by the ego's length and width (a Minkowski sum of
        rectangles) turns cell occupancy into occupancy of the ego's centre point,
        so cell-level checks account for the ego's own extent.  ``clearance``
        adds a further margin on every side for tracking error.
        """
        parts = self.participants_at(t)
        rc, e = self.cfg.risk, self.cfg.ego
        grow_x = (e.length if rc.inflate_by_ego else 0.0) + 2 * rc.clearance
        grow_y = (e.width if rc.inflate_by_ego else 0.0) + 2 * rc.clearance
        if grow_x == grow_y == 0:
            return parts
        return [replace(p, length=p.length + grow_x, width=p.width + grow_y) for p in parts]

    def ego_cell(self, x: np.ndarray) -> CellId:
        col = self.window.col_of(x[0])
        return CellId(self._lane_row(self.window.row_of(x[1]), x[1]), 0 if col is None else col)

    def env_update(self, t: float, x: np.ndarray):
        g = self.base
        col = int(np.floor((x[0] - self.lattice_x0) / g.cell_length))
        self.window = g.shifted(self.lattice_x0 + col * g.cell_length)
        self.env_time = t
        rc = self.cfg.risk
        horizon = max(rc.plan_lookahead, rc.fcu_lookahead, 1)
        forecast = predict_occupancy(self.forecast_participants(t), self.window, horizon,
                                     self.clocks.tau_env, rc.sigma_growth)
        ego = self.ego_cell(x)
        self.field = classify(forecast, ego, self.pick_goals(forecast, ego), self.thresholds, rc.plan_lookahead)
        self.risk = RiskSet(tuple(risk_steps(forecast, self.thresholds, rc.fcu_lookahead)))

    def pick_goals(self, forecast, ego) -> list[CellId]:
        occ = forecast.grids[: self.cfg.risk.plan_lookahead + 1].max(axis=0)
        states = band(occ, self.thresholds)
        last = self.window.n - 1
        ok = [r for r in range(self.window.m) if states[r, last] != SafetyState.UN and (r, last) != tuple(ego)]
        lo, hi = self.window.lane_rows[self.preferred_lane]
        preferred = [r for r in ok if lo <= r < hi]
        return [CellId(r, last) for r in (preferred or ok)]

    def make_plan(self, t: float, x: np.ndarray) -> Plan:
        cfg = self.cfg
        ego = self.ego_cell(x)
        mdp = LocalMdp(self.window, self.transitions, cfg.entropic.gamma, ego,
                       frozenset(self.field.goals) - {ego})
        mdp = mdp.with_rewards(build_reward_model(self.field, mdp, cfg.rewards))
        res, policy = plan_window(mdp, cfg, self.plan_rng)
        steps = self.window.n
        states = rollout(policy, mdp.P, self.window.index(ego), steps,
                         self.slip_rng if self.cfg.rollout == "sampled" else None)
        cells = [self.window.cell(s) for s in states]
        times = t + self.clocks.tau_env * np.arange(len(cells))
        ref = waypoints_to_reference(cells, times, self.window, self.params.v_T, x[0], y0=x[1])
        qt = QTable(res.Q, cfg.entropic.alpha, cfg.entropic.gamma, (self.window.m, self.window.n))
        return Plan(len(self.plans), t, cells, times, ref, policy, qt, res.coverage_added, res.iterations)

    def check(self, t: float, x: np.ndarray) -> fcu.Verdict:
        if self.plan is None or self.risk is None:
            return fcu.Verdict(True)
        # the full forecast horizon: past its last waypoint the reference holds
        # its final ordinate, and that is what the tracker follows
        tau = self.clocks.tau_env
        horizon = len(self.risk.masks) - 1
        rc = self.cfg.risk
        tube = fcu.reach_tube(self.reference, rc.tube_radius, self.window, horizon, self.env_time, tau)
        if rc.tube_mode == "predicted":
            # add where the tracker will actually be: the loop lags the reference
            # and saturates on sharp row changes
            times = np.maximum(tube.times, t)
            pred = self.loop.predict(t, x, self.reference, times)
            X = self.cfg.ego.x + self.params.v_T * times
            tube = fcu.merge_tubes(tube, fcu.tube_from_points(tube.times, X, pred[:, 1], rc.tube_radius,
                                                              self.window))
        return fcu.check_feasible(tube, self.risk, first_step=1)

    def collides(self, t: float, x: np.ndarray) -> bool:
        e = self.cfg.ego
        ego_box = (x[0] - 0.5 * e.length, x[0] + 0.5 * e.length, x[1] - 0.5 * e.width, x[1] + 0.5 * e.width)
        return any(boxes_overlap(ego_box, p.box()) for p in self.participants_at(t))

    # -- main loop

    def run(self) -> EpisodeResult:
        cfg, clocks = self.cfg, self.clocks
        dt = clocks.dt
        steps = int(round(cfg.duration / dt))
        x = cfg.ego.state().to_array()
        q = HybridState(ego=None, world=None)
        trace = np.full((steps + 1, 7), np.nan)
        plan_ids = np.full(steps + 1, -1)
        flags, labels_col = [], []
        collisions = replans = 0
        terminated = None
        last_row = -1
        for k in range(steps + 1):
            t = k * dt
            if k == 0:
                labels = list(fcu.INITIAL_LABELS)
            else:
                q, labels = fcu.step_automaton(q, clocks)
            fired = []
            for label in labels:
                if label == ENV:
                    self.env_update(t, x)
                    self.events.append(Event(t, ENV))
                elif label == RPL:
                    replans += 1
                    self.events.append(Event(t, RPL))
                    try:
                        self.reference, row = fcu.safety_mode(x[1], x[0], t, self.window, self.risk,
                                                              clocks.tau_safe, self.params.v_T)
                    except NoSafeOverride as exc:
                        self.events.append(Event(t, VIOLATION, detail=str(exc)))
                        terminated = "no-safe-override"
                elif label == PL:
                    self.plan = self.make_plan(t, x)
                    self.plans.append(self.plan)
                    self.reference = self.plan.reference
                    self.events.append(Event(t, PL, detail=f"plan {self.plan.plan_id}"))
                elif label == CHECK:
                    verdict = self.check(t, x)
                    if not verdict.feasible:
                        q = replace(q, infeasible=True)
                        self.events.append(Event(t, CHECK, verdict.witness, detail="infeasible"))
                fired.append(label)
            delta, _ = self.loop.command(t, x, self.reference)
            trace[k, 0] = t
            trace[k, 1:6] = x
            trace[k, 6] = delta
            plan_ids[k] = self.plan.plan_id if self.plan else -1
            flags.append("+" if q.infeasible else "¬")
            labels_col.append("|".join(fired))
            last_row = k
            if self.collides(t, x):
                collisions += 1
                self.events.append(Event(t, VIOLATION, detail="collision"))
                terminated = "collision"
            if terminated:
                break
            if k < steps:
                x = self.loop.step(t, x, dt, self.reference)
                x[0] = cfg.ego.x + self.params.v_T * (k + 1) * dt
        n = last_row + 1
        return EpisodeResult(trace[:n], plan_ids[:n], flags, labels_col, self.events, self.plans,
                             collisions, replans, self.loop.saturations, terminated)


def run_episode(cfg: ScenarioConfig, seed: int | None = None) -> EpisodeResult:
    return Episode(cfg, seed).run()


# ----------------------------------------------------------- monte carlo

@dataclass
class RunSummary:
    alpha: float
    runs: int
    t: np.ndarray
    mean: np.ndarray
    q10: np.ndarray
    q90: np.ndarray
    y_variance: float
    collisions: int
    replans: int
    rpl_times: list[list[float]]
    wall_time: float

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("t", "mean", "q10", "q90"):
            d[k] = getattr(self, k).tolist()
        return d


SUMMARY_FIELDS = ("alpha", "runs", "t", "mean", "q10", "q90", "y_variance", "collisions", "replans",
                  "rpl_times", "wall_time")


def summarize(alpha: float, results: Sequence[EpisodeResult], wall_time: float) -> RunSummary:
    n = min(len(r.trace) for r in results)
    Y = np.stack([r.Y[:n] for r in results])
    t = results[0].trace[:n, 0]
    mean = Y.mean(axis=0)
    q10, q90 = np.quantile(Y, [0.1, 0.9], axis=0)
    # guard the order statistics against last-ulp rounding in the mean
    mean = np.clip(mean, q10, q90)
    return RunSummary(alpha, len(results), t, mean, q10, q90, float(Y.var(axis=0).mean()),
                      sum(r.collisions for r in results), sum(r.replans for r in results),
                      [[e.t for e in r.events if e.label == RPL] for r in results], wall_time)


def _episode_job(args):
    cfg, seed = args
    return run_episode(cfg, seed)


def monte_carlo(cfg: ScenarioConfig, runs: int, alphas: Sequence[float], base_seed: int | None = None,
                workers: int = 1, keep_results: bool = False):
    """Independent seeded episodes per ``alpha``; seeds are shared across alphas.

    With ``workers > 1`` episodes run in separate processes; each owns its
    seed, so results do not depend on the worker count.
    """
    if runs < 2:
        raise ValueError("runs must be at least 2")
    base = cfg.seed if base_seed is None else base_seed
    out, kept = {}, {}
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        for alpha in alphas:
            c = cfg.with_alpha(alpha)
            jobs = [(c, base + i) for i in range(runs)]
            start = time.perf_counter()
            results = list(pool.map(_episode_job, jobs)) if pool else [_episode_job(j) for j in jobs]
            out[alpha] = summarize(alpha, results, time.perf_counter() - start)
            kept[alpha] = results
    finally:
        if pool:
            pool.shutdown()
    return (out, kept) if keep_results else out


# ----------------------------------------------------------------- files

def _g(v) -> str:
    return format(float(v), ".17g")


def write_trace(result: EpisodeResult, path: Path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for row, pid, flag, lab in zip(result.trace, result.plan_ids, result.flags, result.labels):
            w.writerow([_g(v) for v in row] + [int(pid), flag, lab])


def write_events(events: Sequence[Event], path: Path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_HEADER)
        for e in events:
            if e.witness:
                (r, c), k = e.witness
                wit = [r, c, k]
            else:
                wit = ["", "", ""]
            w.writerow([_g(e.t), e.label, *wit, e.detail])


def emit(outputs, out_dir) -> list[Path]:
    """Write an episode (trace, events, per-plan Q tables) or a Monte-Carlo summary."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = []
        if isinstance(outputs, EpisodeResult):
            write_trace(outputs, out / "trace.csv")
            write_events(outputs.events, out / "events.csv")
            written += [out / "trace.csv", out / "events.csv"]
            for plan in outputs.plans:
                p = out / f"qtable_{plan.plan_id:03d}.json"
                p.write_text(plan.qtable.to_json())
                written.append(p)
        else:
            summaries = outputs if isinstance(outputs, dict) else {outputs.alpha: outputs}
            doc = {"summaries": [s.to_dict() for s in summaries.values()]}
            (out / "summary.json").write_text(json.dumps(doc))
            written.append(out / "summary.json")
        return written
    except OSError as exc:
        raise OSError(f"cannot write outputs to {out}: {exc}") from exc


def first_plan(cfg: ScenarioConfig, seed: int | None = None) -> tuple[Plan, RiskField]:
    """Solve the initial window only (what the episode does at ``t = 0``)."""
    ep = Episode(cfg, seed)
    x = cfg.ego.state().to_array()
    ep.env_update(0.0, x)
    return ep.make_plan(0.0, x), ep.field
