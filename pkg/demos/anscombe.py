"""Same slope, very different stability: Anscombe's quartet."""

# %%
import time

from svalues import datasets, estimands, mm

slope = estimands.ols_coefficient_estimand("y", ["x"], "x")

# %% Every set has OLS slope 0.5.  How much reweighting sends it to 0?
start = time.perf_counter()
for which in (1, 2, 3, 4):
  data = datasets.anscombe(which)
  general = mm.svalue_general(data, slope, 0.0)
  direc = mm.svalue_general_directional(data, slope, ["x"], 0.0)
  print("set %d  slope %.4f  s = %.4f  s_X = %.4f  (%s / %s)" %
        (which, slope(data), general.s_value, direc.s_value,
         general.diagnostics["status"], direc.diagnostics["status"]))
print("%.1fs" % (time.perf_counter() - start))

# Sets 3 and 4 get s = 0: a single reweighted point cannot drag the fitted
# line through zero without leaving the data behind, and the solver reports
# no crossing rather than a spurious value.

# %% The discretisation of x matters for s_X on these tiny samples.
data = datasets.anscombe(1)
for bins in (3, 4, 6):
  r = mm.svalue_general_directional(data, slope, ["x"], 0.0, bins=bins)
  print("set 1, %d bins: s_X = %.4f" % (bins, r.s_value))
