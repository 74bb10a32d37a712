"""Entropic value of a two-point cost lottery as the risk factor grows.

    python3 demos/entropic_lottery.py
"""
import numpy as np

from riskplan.risk_q import entropic_value, mean_variance_value

costs = np.array([0.0, 10.0])
print(f"{'alpha':>8} {'entropic':>10} {'mean-var':>10}")
for alpha in (0.0, 1e-3, 0.05, 0.2, 0.5, 1.0, 5.0):
    print(f"{alpha:8.3g} {entropic_value(costs, alpha):10.4f} {mean_variance_value(costs, alpha):10.4f}")
