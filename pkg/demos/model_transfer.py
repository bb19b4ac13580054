"""Reweighting training data until a refit model does well on a few test rows."""

# %%
import numpy as np

from svalues import datasets, estimands, transfer

train, shifted = datasets.covariate_shift(n_train=400, n_shift=40, seed=2)
ols = estimands.LinearModel("y", ["x"])

# %% Risk of the plain fit on the labelled shifted rows.
base = transfer.TestRisk(ols, shifted).evaluate(train, np.full(train.n, 1 / train.n))
print("test risk of the unweighted fit %.3f" % base)

# %% Ask for 20% lower risk.  The answer is the KL-closest such reweighting.
res = transfer.model_transfer(train, shifted, ols, 0.8 * base)
print("risk %.3f at kl %.3f, coefficients %s" % (res.test_risk, res.kl, res.theta))

# %% Or let cross-validation over the test rows pick the threshold.
best, scores = transfer.choose_risk_threshold(train, shifted, ols)
print("cross-validated threshold %.3f" % best)
print("held-out risk per grid value", np.round(scores, 3))

# %% Impossible thresholds fail loudly.
try:
  transfer.model_transfer(train, shifted, ols, 0.0)
except transfer.core.ThresholdUnreachable as err:
  print("unreachable, best risk %.3f" % err.best_risk)
