"""One-at-a-time sensitivity with and without shared asperity draws.

With common random numbers each cell isolates the parameter change. With
independent draws the cells also carry resampling noise, which shrinks as N
grows and dominates at small N.
"""
import numpy as np

from tribogen.analysis import sensitivity
from tribogen.dataset import recipes
from tribogen.params import PARAM_NAMES, GmmParams

theta0 = GmmParams.from_vector(recipes(0, 1)[0])
n_list = (100, 1500, 10_000)

for crn in (True, False):
    table = sensitivity(theta0, n_list, common_random_numbers=crn)
    print(f"\n{'shared' if crn else 'independent'} asperity draws")
    for n in n_list:
        col = table.column(n)
        top = np.argsort(col)[::-1][:3]
        print(f"  N={n:>6}: mean {np.nanmean(col):6.3f}%  top "
              + ", ".join(f"{PARAM_NAMES[i]} {col[i]:.2f}%" for i in top))
