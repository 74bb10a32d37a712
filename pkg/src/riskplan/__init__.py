"""Risk-averse motion planning on a moving grid window.

Submodules: ``mdp_core`` (grid MDP), ``rau`` (occupancy forecast, cell
classification, reward distributions), ``risk_q`` (entropic Bellman operators
and the sampled program), ``vehicle`` (single-track model, LQR, references),
``fcu`` (reach tubes and the re-planning automaton) and ``sim`` (episodes,
Monte-Carlo batches, output files).
"""
from .config import ConfigError, ScenarioConfig, load_config
from .mdp_core import Action, CellId, GridGeometry, LocalMdp, SafetyState, build_grid, make_transitions
from .risk_q import EntropicParams, QTable, sample_bound, solve_sampled_program, value_iterate
from .sim import EpisodeResult, RunSummary, emit, monte_carlo, run_episode

__version__ = "0.1.0"

__all__ = [
    "Action", "CellId", "ConfigError", "EntropicParams", "EpisodeResult", "GridGeometry", "LocalMdp",
    "QTable", "RunSummary", "SafetyState", "ScenarioConfig", "build_grid", "emit", "load_config",
    "make_transitions", "monte_carlo", "run_episode", "sample_bound", "solve_sampled_program",
    "value_iterate",
]
