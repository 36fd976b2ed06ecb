"""Train every method briefly on the hazard grid and compare violations and returns.

The full experiment uses 200k frames per run (``configs/gridhazard.json``);
this demo uses a shorter budget so it finishes in a few minutes.  Pass a
frame count as the first argument to change it.

Run with ``python demos/03_method_comparison.py [frames]``.
"""

import json
import sys
from pathlib import Path

import numpy as np

from ambs.config import from_dict
from ambs.trainer import Trainer

frames = int(sys.argv[1]) if len(sys.argv) > 1 else 60_000
doc = json.loads((Path(__file__).resolve().parent.parent / "configs" / "gridhazard.json").read_text())
doc["total_frames"] = frames

print(f"{frames} frames per method, seed 0\n")
print("method      violations  interventions  eval return  eval violations/episode")
for method in ("VANILLA", "LAG", "AMBS", "AMBS+PENL", "AMBS+PLPG", "AMBS+COPT"):
    tr = Trainer(from_dict({**doc, "method": method}))
    log = tr.run()
    ev = tr.evaluate()
    print(f"{method:10s}  {tr.cum_violations:10d}  {tr.total_interventions:13d}  "
          f"{ev['mean_return']:11.2f}  {ev['violations_per_episode']:.2f}")

# Episode returns in the last fifth of training show how steady each policy is.
tail = log.column("episode_return")[-max(1, len(log.rows) // 5):]
print(f"\nAMBS+COPT final-fifth returns: mean {tail.mean():.2f}, std {np.std(tail):.2f}")
