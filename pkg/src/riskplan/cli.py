"""Command line entry point: ``plan``, ``simulate``, ``montecarlo`` and ``bound``."""
from __future__ import annotations

import argparse
import sys

from .config import ConfigError, load_config
from .risk_q import ConvergenceError, CoverageError, sample_bound
from .vehicle import LqrError

EXIT_OK, EXIT_CONFIG, EXIT_SAFETY, EXIT_SOLVER = 0, 2, 3, 4
SOLVER_ERRORS = (CoverageError, ConvergenceError, LqrError)


def _alphas(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}")
    if not vals or any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("alphas must be a non-empty list of values >= 0")
    return vals


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="riskplan", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="solve the initial planning window and print the plan")
    p.add_argument("config", help="scenario JSON file or bundled scenario name")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None, help="override the risk-aversion factor")
    p.add_argument("--out", default=None, help="write the Q table as JSON to this file")

    p = sub.add_parser("simulate", help="run one closed-loop episode")
    p.add_argument("config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("montecarlo", help="seeded batches of episodes per alpha")
    p.add_argument("config")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--alphas", type=_alphas, default=[0.0, 0.2])
    p.add_argument("--seed", type=int, default=None, help="base seed (run i uses base + i)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("bound", help="print the sample count for a violation/confidence level")
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--nq", type=int, required=True)
    return ap


def _config(args):
    cfg = load_config(args.config)
    if getattr(args, "alpha", None) is not None:
        try:
            cfg = cfg.with_alpha(args.alpha)
        except ValueError as exc:
            raise ConfigError(f"--alpha: {exc}") from exc
    return cfg


def cmd_plan(args) -> int:
    from .sim import first_plan

    cfg = _config(args)
    plan, field = first_plan(cfg, args.seed)
    Q = plan.qtable.values
    print(f"window {cfg.grid.m}x{cfg.grid.n}  alpha={cfg.entropic.alpha:g}  gamma={cfg.entropic.gamma:g}")
    print(f"Q min={Q.min():.6g} max={Q.max():.6g} mean={Q.mean():.6g}  iterations={plan.iterations}"
          f"  coverage_added={plan.coverage_added}")
    print(f"goals: {sorted(tuple(c) for c in field.goals)}" + ("  (no goal)" if field.no_goal else ""))
    print("rows: " + " ".join(str(c.row) for c in plan.cells))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(plan.qtable.to_json())
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .sim import emit, run_episode

    cfg = _config(args)
    result = run_episode(cfg, args.seed)
    emit(result, args.out)
    print(f"steps={len(result.trace)} plans={len(result.plans)} replans={result.replans} "
          f"collisions={result.collisions} saturations={result.saturations}")
    if result.terminated:
        print(f"safety violation: {result.terminated}", file=sys.stderr)
        return EXIT_SAFETY
    return EXIT_OK


def cmd_montecarlo(args) -> int:
    from .sim import emit, monte_carlo

    cfg = _config(args)
    if args.runs < 2:
        raise ConfigError("--runs: need at least 2 runs")
    summaries = monte_carlo(cfg, args.runs, args.alphas, base_seed=args.seed, workers=args.workers)
    emit(summaries, args.out)
    for alpha, s in summaries.items():
        print(f"alpha={alpha:g} y_variance={s.y_variance:.6g} collisions={s.collisions} "
              f"replans={s.replans} wall={s.wall_time:.1f}s")
    return EXIT_SAFETY if any(s.collisions for s in summaries.values()) else EXIT_OK


def cmd_bound(args) -> int:
    try:
        print(sample_bound(args.epsilon, args.beta, args.nq))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return EXIT_OK


COMMANDS = {"plan": cmd_plan, "simulate": cmd_simulate, "montecarlo": cmd_montecarlo, "bound": cmd_bound}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SOLVER_ERRORS as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
