"""Carrying a regression slope over to a population with shifted x."""

# %%
from svalues import datasets, estimands, transfer

train, shifted = datasets.covariate_shift(n_train=3000, n_shift=3000, seed=0)
slope = estimands.ols_coefficient_estimand("y", ["x"], "x")
print("train slope %.3f (population %.1f)" %
      (slope(train), datasets.SHIFT_TRAIN_SLOPE))

# %% Only the first two moments of x are known in the new population.
x = train.column("x")
train2 = train.with_column("x2", x ** 2)
gamma = [shifted.column("x").mean(), (shifted.column("x") ** 2).mean()]
spec = transfer.TransferSpec(("x", "x2"), gamma)
res = transfer.transfer_estimate(train2, spec, slope)
print("projected slope %.3f (shifted population %.1f), kl %.3f" %
      (res.theta_proj, datasets.SHIFT_TARGET_SLOPE, res.kl))

# %% Matching the first moment alone already does most of the work here.
res1 = transfer.transfer_estimate(
    train, transfer.TransferSpec("x", gamma[0]), slope)
print("first moment only: %.3f" % res1.theta_proj)

# %% Unreachable targets are reported with a separating direction.
try:
  transfer.project_moments(train, transfer.TransferSpec("x", 50.0))
except transfer.core.InfeasibleTarget as err:
  print("infeasible:", err, err.direction)
