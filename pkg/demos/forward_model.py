"""Simulate friction laws for one surface at several asperity counts.

Run with ``python3 demos/forward_model.py``; writes ``law_n1000.csv`` to the
working directory.
"""
import numpy as np

from tribogen import contact
from tribogen.params import GmmParams, PhysicalConstants

constants = PhysicalConstants()

# two tall sparse components and two short dense ones
theta = GmmParams(w=[0.1, 0.2, 0.3], mu_h=[220, 180, 120, 80], mu_r=[400, 300, 200, 100],
                  sigma_h=[15, 25, 30, 20], sigma_r=[30, 40, 40, 20], rho=[0.2, 0.0, -0.3, 0.0])

for n in (100, 1000, 10_000):
    law = contact.simulate_law(theta, n, constants, seed=0)
    knots = law.f_values[[0, 31, 63, 127]]
    print(f"N={n:>6}: F at P=0.01/0.5/1.0/2.0 N -> {np.round(knots, 4)} N"
          f"{'  (extrapolated)' if law.extrapolated else ''}")

# resampling noise: same surface, different asperity draws
laws = np.array([contact.simulate_law(theta, 1000, constants, seed=s).f_values for s in range(20)])
print(f"relative spread over 20 draws at N=1000: {np.mean(laws.std(0) / laws.mean(0)):.3%}")

law = contact.simulate_law(theta, 1000, constants, seed=0)
law.to_csv("law_n1000.csv")
print("wrote law_n1000.csv")
