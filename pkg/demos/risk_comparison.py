"""Monte Carlo comparison of risk-neutral and risk-averse planning.

Writes summary.json and per-alpha mean/quantile bands of Y(t) as CSV.

    python3 demos/risk_comparison.py [runs] [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from riskplan.config import load_config
from riskplan.sim import emit, monte_carlo

runs = int(sys.argv[1]) if len(sys.argv) > 1 else 10
out = Path(sys.argv[2]) if len(sys.argv) > 2 else Path("demo_out")
cfg = load_config("paper_scenario")
res = monte_carlo(cfg, runs, [0.0, 0.2])
emit(res, out)
for alpha, s in res.items():
    band = np.column_stack([s.t, s.q10, s.mean, s.q90])
    np.savetxt(out / f"band_alpha_{alpha:g}.csv", band, delimiter=",", header="t,q10,mean,q90", comments="")
    print(f"alpha={alpha:g}: Y variance {s.y_variance:.3f}, collisions {s.collisions}, replans {s.replans}")
print(f"wrote {out}/")
