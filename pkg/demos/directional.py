"""Shifts restricted to the distribution of a few covariates."""

# %%
import numpy as np

from svalues import estimands, mm, tilt
from svalues.core import Dataset

rng = np.random.default_rng(1)
n = 500
e = rng.integers(0, 4, n).astype(float)
z = 0.5 * e - 0.4 + rng.normal(0, 1, n)
data = Dataset.from_columns({"z": z, "e": e})

# %% The general s-value lets every row move; the directional one only lets
# the marginal of e move, so it is never larger.
general = tilt.svalue_mean(data, "z", 0.0)
direc = tilt.svalue_mean_directional(data, "z", ["e"], 0.0)
print("general s = %.4f   directional s_e = %.4f" %
      (general.s_value, direc.s_value))

# %% Any estimand works through the majorization-minimization route.
est = estimands.mean_estimand("z")
rep = mm.svalue_general_directional(data, est, ["e"], 0.0)
print("MM directional s_e = %.4f (%s)" % (rep.s_value, rep.diagnostics["status"]))

# %% Continuous covariates are conditioned on by quantile bins or kNN.
x = rng.normal(size=n)
data2 = Dataset.from_columns({"z": x + rng.normal(size=n) + 0.3, "x": x})
for method in ("group-mean", "quantile-bin", "knn"):
  r = tilt.svalue_mean_directional(data2, "z", ["x"], 0.0,
                                   cond=estimands.Conditioning(method))
  print("%-12s s_x = %.4f" % (method, r.s_value))
