"""Solve the first planning window of the bundled scenario and print the rows.

    python3 demos/first_plan.py [seed]
"""
import sys

from riskplan.config import load_config
from riskplan.sim import first_plan

cfg = load_config("paper_scenario")
plan, field = first_plan(cfg, int(sys.argv[1]) if len(sys.argv) > 1 else cfg.seed)
print("rows:", " ".join(str(c.row) for c in plan.cells))
print("goal cells:", len(field.goals))
