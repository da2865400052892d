"""Recover surface parameters for a friction law by direct CMA-ES search.

Pass a CSV (columns P,F) and its asperity count, or run without arguments
to invert a synthetic target.
"""
import sys

import numpy as np

from tribogen import contact
from tribogen.dataset import recipes
from tribogen.inverse import InversionConfig, invert_direct
from tribogen.params import BoundsTable, GmmParams

bounds = BoundsTable()

if len(sys.argv) == 3:
    target = contact.FrictionLaw.from_csv(sys.argv[1], int(sys.argv[2]), grid=contact.p_grid())
    truth = None
else:
    truth = recipes(4321, 1)[0]
    target = contact.simulate_law(GmmParams.from_vector(truth), 1000, seed=99)

n = target.asperity_count
cold = invert_direct(target, n, bounds, InversionConfig(iterations=150, seed=0))
print(f"cold start: functional sMAPE {cold.functional_smape:.2f}% after {len(cold.trace)} generations "
      f"({cold.wall_time:.1f} s)")

if truth is not None:
    rng = np.random.default_rng(0)
    x0 = np.clip(2 * (truth - bounds.lower) / bounds.width - 1 + 0.05 * rng.standard_normal(23), -1, 1)
    warm = invert_direct(target, n, bounds, InversionConfig(iterations=75, x0=list(x0), seed=0))
    print(f"warm start: functional sMAPE {warm.functional_smape:.2f}%")
    print("parameter sMAPE of the warm result vs truth: "
          f"{100 * np.mean(2 * np.abs(warm.theta - truth) / (np.abs(warm.theta) + np.abs(truth) + 1e-12)):.1f}%")

for row in cold.trace[::25]:
    print(f"  gen {row['iteration']:>4}  best MSE {row['best_mse']:.3e}  sMAPE {row['functional_smape']:.2f}%")
