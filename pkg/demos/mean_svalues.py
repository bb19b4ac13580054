"""How far must the sample move before its mean changes sign?"""

# %%
import numpy as np

from svalues import tilt
from svalues.core import Dataset

rng = np.random.default_rng(0)
data = Dataset.from_columns({"z": rng.normal(1.0, 1.0, 200)})
print("sample mean %.3f" % data.column("z").mean())

# %% The s-value of "mean = 0": exp(-KL) of the closest reweighting.
rep = tilt.svalue_mean(data, "z", target=0.0)
print("s = %.4f  kl = %.4f  lambda = %s" % (rep.s_value, rep.kl, rep.lam))
print("unstable at threshold %.2f: %s" % (rep.threshold, rep.unstable_flag))

# The certifying weights are an exponential tilt and hit the target exactly.
print("weighted mean under certificate %.2e" % (rep.weights @ data.column("z")))

# %% A target outside the range of the data cannot be reached at all.
far = tilt.svalue_mean(data, "z", target=100.0)
print("s = %g, attained = %s" % (far.s_value, far.attained))
