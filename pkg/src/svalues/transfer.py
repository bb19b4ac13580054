"""Parameter transfer to a shifted population.

Given target first moments ``gamma`` of some columns ``X_S`` in the new
population, the training sample is reweighted by its KL projection onto
``{P : E_P[X_S] = gamma}``, an exponential tilt in ``X_S``, and the
parameter is re-evaluated under those weights.

With a small labelled sample from the new population, ``model_transfer``
instead finds the KL-closest reweighting whose refitted model reaches a
given test risk.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from typing import List, Optional, Sequence

import numpy as np

from svalues import core, estimands, mm, tilt
from svalues.core import Dataset, Estimand

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class TransferSpec:
  """Target means ``gamma`` for ``columns`` in the shifted population."""

  columns: tuple
  gamma: np.ndarray

  def __post_init__(self):
    cols = (self.columns,) if isinstance(self.columns, str) else tuple(
        self.columns)
    gamma = np.atleast_1d(np.asarray(self.gamma, float))
    if not cols:
      raise ValueError("need at least one moment column")
    if gamma.shape != (len(cols),):
      raise ValueError("gamma has %d entries for %d columns" %
                       (gamma.size, len(cols)))
    if not np.all(np.isfinite(gamma)):
      raise core.NonFiniteValue("moment targets must be finite")
    object.__setattr__(self, "columns", cols)
    object.__setattr__(self, "gamma", gamma)


@dataclasses.dataclass
class ProjectionResult:
  lambda_star: np.ndarray
  weights: np.ndarray
  kl: float
  moment_residual: float
  attained: bool = True
  theta_proj: Optional[float] = None
  iterations: int = 0
  converged: bool = True


def project_moments(data: Dataset, spec: TransferSpec,
                    opts: Optional[tilt.TiltOptions] = None
                    ) -> ProjectionResult:
  """KL projection of the uniform weights onto the moment constraints.

  Raises:
    InfeasibleTarget: ``gamma`` lies outside the convex hull of the rows;
      ``err.direction`` separates it from the data.
  """
  X = data.columns(list(spec.columns))
  sol = tilt.solve_tilt(tilt.TiltProblem(X, spec.gamma), opts)
  if sol.weights is None:
    raise core.InfeasibleTarget(
        "moment target %s is outside the convex hull of %s" %
        (spec.gamma.tolist(), list(spec.columns)), sol.diverged_direction)
  if np.all(sol.lambda_star == 0) and sol.attained:
    w = core.uniform_weights(data.n)
  else:
    w = sol.weights
  residual = float(np.max(np.abs(w @ X - spec.gamma)))
  return ProjectionResult(
      lambda_star=sol.lambda_star, weights=w, kl=core.kl_to_uniform(w),
      moment_residual=residual, attained=sol.attained,
      iterations=sol.iterations, converged=sol.converged)


def transfer_estimate(data: Dataset, spec: TransferSpec, estimand: Estimand,
                      opts: Optional[tilt.TiltOptions] = None
                      ) -> ProjectionResult:
  """Evaluates ``estimand`` under the projected weights (nuisances refit)."""
  result = project_moments(data, spec, opts)
  result.theta_proj = float(estimand.evaluate(data, result.weights))
  return result


class TestRisk(Estimand):
  """Average ``model`` loss on ``test`` of the fit under training weights."""

  __test__ = False  # not a pytest class

  def __init__(self, model, test: Dataset):
    self.model = model
    self.test = test
    self.name = "test_risk"

  def evaluate(self, data, w):
    theta = self.model.fit(data, w)
    return float(np.mean(self.model.loss(theta, self.test)))

  def gradient(self, data, w):
    w = np.asarray(w, float) / np.sum(w)
    theta = self.model.fit(data, w)
    H = self.model.hessian(theta, data, w)
    estimands.check_conditioning(H)
    risk_grad = self.model.score(theta, self.test).mean(axis=0)
    u = np.linalg.solve(H, risk_grad)
    return -self.model.score(theta, data) @ u


@dataclasses.dataclass
class ModelTransferResult:
  weights: np.ndarray
  theta: np.ndarray
  test_risk: float
  kl: float
  report: Optional[core.StabilityReport] = None


def model_transfer(train: Dataset, test: Dataset, model, risk_threshold: float,
                   cfg: Optional[mm.MMConfig] = None) -> ModelTransferResult:
  """KL-closest reweighting of ``train`` whose refit has test risk ``<= gamma_r``.

  Raises:
    ThresholdUnreachable: the penalty search cannot push the risk down to
      ``risk_threshold``; carries the best risk seen.
  """
  estimand = TestRisk(model, test)
  u = core.uniform_weights(train.n)
  risk_u = estimand.evaluate(train, u)
  if risk_u <= risk_threshold:
    return ModelTransferResult(u, model.fit(train, u), risk_u, 0.0)
  report = mm.svalue_general(train, estimand, risk_threshold, cfg)
  if report.weights is None:
    path = report.diagnostics.get("delta_path", [])
    best = min([risk_u] + [p[1] for p in path])
    raise core.ThresholdUnreachable(
        "test risk %.6g cannot be lowered to %.6g (best %.6g)" %
        (risk_u, risk_threshold, best), best_risk=best)
  w = report.weights
  theta = model.fit(train, w)
  return ModelTransferResult(w, theta, estimand.evaluate(train, w),
                             core.kl_to_uniform(w), report)


def choose_risk_threshold(train: Dataset, test: Dataset, model,
                          grid: Optional[Sequence[float]] = None,
                          folds: int = 5, seed: int = 0,
                          cfg: Optional[mm.MMConfig] = None):
  """Cross-validates ``gamma_r`` over ``grid`` by held-out test risk.

  The test rows are split into ``folds`` parts; for each grid value the
  transfer is fitted on all but one part and scored on the held-out part.
  Returns ``(best_gamma, mean_held_out_risk_per_grid_value)``.
  """
  m = test.n
  folds = min(folds, m)
  if folds < 2:
    raise ValueError("need at least 2 test rows for cross-validation")
  order = np.random.default_rng(seed).permutation(m)
  parts = np.array_split(order, folds)
  if grid is None:
    base = TestRisk(model, test).evaluate(train, core.uniform_weights(train.n))
    grid = base * np.linspace(0.5, 1.0, 6)
  grid = [float(g) for g in grid]
  scores = []
  for gamma in grid:
    held = []
    for j in range(folds):
      fit_rows = np.concatenate([parts[i] for i in range(folds) if i != j])
      if len(fit_rows) < 2 or len(parts[j]) < 2:
        continue
      try:
        res = model_transfer(train, test.take(fit_rows), model, gamma, cfg)
      except (core.ThresholdUnreachable, core.SingularFit) as err:
        logger.info("gamma_r=%g fold %d skipped: %s", gamma, j, err)
        held.append(math.inf)
        continue
      held.append(float(np.mean(model.loss(res.theta, test.take(parts[j])))))
    scores.append(float(np.mean(held)) if held else math.inf)
  best = grid[int(np.argmin(scores))]
  return best, scores


def suggest_sensitive_columns(data: Dataset, estimand: Estimand,
                              candidates: Sequence[str], kl_budget: float,
                              target: float = 0.0, grid_size: int = 10,
                              cfg: Optional[mm.MMConfig] = None,
                              bins: Optional[int] = None) -> List[dict]:
  """Ranks candidate columns by the directional profile width at a KL budget.

  Each entry is ``{"column", "width", "s_value"}``; columns whose analysis
  fails are logged and left out.  Ties keep the candidate order.
  """
  out = []
  for col in candidates:
    try:
      prof = mm.profile(data, estimand, kl_budget, grid_size, [col], cfg, bins)
      rep = mm.svalue_general_directional(data, estimand, [col], target, cfg,
                                          bins)
    except (core.SValueError, KeyError) as err:
      logger.warning("column %s skipped: %s", col, err)
      continue
    last = prof[-1]
    out.append({"column": col, "width": last.theta_max - last.theta_min,
                "s_value": rep.s_value})
  out.sort(key=lambda r: -r["width"])
  return out
