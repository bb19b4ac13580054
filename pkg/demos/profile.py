"""Range of an estimand over KL balls, and the s-value read off it."""

# %%
import numpy as np

from svalues import datasets, estimands, mm

data = datasets.anscombe(2)
slope = estimands.ols_coefficient_estimand("y", ["x"], "x")

# %%
points = mm.profile(data, slope, kl_max=0.6, grid_size=7)
for p in points:
  print("kl <= %.2f   slope in [%.3f, %.3f]" % (p.kl, p.theta_min, p.theta_max))

# %% Widening the budget can only widen the range.
lo = np.array([p.theta_min for p in points])
hi = np.array([p.theta_max for p in points])
print("monotone:", bool(np.all(np.diff(lo) <= 0) and np.all(np.diff(hi) >= 0)))

# The profile gives a (grid-limited) lower bound on the s-value of slope 0.3.
print("profile s(0.3) >= %.4f" % mm.profile_svalue(points, 0.3))
print("direct  s(0.3)  = %.4f" % mm.svalue_general(data, slope, 0.3).s_value)
