"""Exponential tilting: s-values of means and of M-estimator score vectors.

For a moment function ``V`` the s-value of ``E_P[V] = c`` is
``inf_lam (1/n) sum_i exp(lam . (V_i - c))`` and the optimal shift is the
tilted reweighting ``w_i ∝ exp(lam* . (V_i - c))``.

The infimum is attained iff ``c`` lies in the relative interior of the
convex hull of the rows.  Before running Newton we therefore find the
smallest face of the hull that contains ``c``: rows off that face get zero
weight in every feasible reweighting, the remaining sub-problem is attained,
and the face mass ``m / n`` multiplies its optimum.  Targets outside the
hull give an empty face and s-value 0.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from typing import Optional, Sequence

import numpy as np
from scipy import optimize
from scipy.special import logsumexp

from svalues import core
from svalues.core import Dataset, StabilityReport

logger = logging.getLogger(__name__)

# Tolerance (on standardized scores) for "exactly on the face".
_FACE_TOL = 1e-10


@dataclasses.dataclass(frozen=True)
class TiltProblem:
  """Moment constraint ``E_P[V] = target`` over the rows of ``V``."""

  V: np.ndarray
  target: np.ndarray

  def __post_init__(self):
    V = np.array(self.V, dtype=float)
    if V.ndim == 1:
      V = V[:, None]
    target = np.broadcast_to(np.asarray(self.target, dtype=float),
                             (V.shape[1],)).copy()
    if V.shape[0] < 2:
      raise ValueError("need at least 2 rows, got %d" % V.shape[0])
    if not np.all(np.isfinite(V)):
      raise core.NonFiniteScore("score matrix contains NaN or inf")
    if not np.all(np.isfinite(target)):
      raise core.NonFiniteScore("target must be finite")
    object.__setattr__(self, "V", V)
    object.__setattr__(self, "target", target)

  @property
  def n(self):
    return self.V.shape[0]

  @property
  def p(self):
    return self.V.shape[1]


@dataclasses.dataclass
class TiltOptions:
  gtol: float = 1e-9
  max_iter: int = 200
  backtrack: float = 0.5
  armijo: float = 1e-4
  lambda_max: float = 1e4


@dataclasses.dataclass
class TiltSolution:
  """Output of :func:`solve_tilt`.

  When the infimum is not attained, ``lambda_star`` solves the restricted
  problem on the face containing the target and ``objective`` is the limit
  of ``f(lambda_star + t * diverged_direction)`` as ``t -> inf``.
  """

  lambda_star: np.ndarray
  objective: float
  weights: Optional[np.ndarray]
  attained: bool
  converged: bool
  iterations: int
  diverged_direction: Optional[np.ndarray] = None
  support: Optional[np.ndarray] = None

  @property
  def kl(self):
    return -math.log(self.objective) if self.objective > 0 else math.inf


def _face_lp(D, rows):
  """One LP round: a direction d with D_i.d <= 0 on ``rows``, maximizing
  the strict part.  Returns the boolean mask of strictly negative rows."""
  A = D[rows]
  p = A.shape[1]
  res = optimize.linprog(
      c=A.sum(axis=0),
      A_ub=np.vstack([A, -A]),
      b_ub=np.concatenate([np.zeros(len(A)), np.ones(len(A))]),
      bounds=[(-1e6, 1e6)] * p,
      method="highs")
  if res.status != 0:
    raise RuntimeError("face LP failed: %s" % res.message)
  strict = np.zeros(D.shape[0], dtype=bool)
  strict[rows] = A @ res.x < -1e-9
  return strict


def minimal_face(D) -> np.ndarray:
  """Rows that can carry positive mass in a reweighting with mean zero.

  ``D`` holds the centred (and standardized) moment rows.  The returned mask
  is the support of the smallest face of ``conv(D)`` containing the origin;
  it is empty when the origin is outside the hull.
  """
  D = np.asarray(D, dtype=float)
  n, p = D.shape
  if p == 1:
    d = D[:, 0]
    lo, hi = d.min(), d.max()
    if lo < -_FACE_TOL and hi > _FACE_TOL:
      return np.ones(n, dtype=bool)
    return np.abs(d) <= _FACE_TOL
  keep = np.ones(n, dtype=bool)
  while keep.any():
    rows = np.flatnonzero(keep)
    if np.all(np.abs(D[rows]) <= _FACE_TOL):
      break
    strict = _face_lp(D, rows)
    if not strict.any():
      break
    keep &= ~strict
  return keep


def _divergence_direction(D, keep):
  """Unit direction d with D_i.d = 0 on the face and < 0 off it."""
  n, p = D.shape
  off = ~keep
  if p == 1:
    return np.array([-np.sign(D[off, 0][0])])
  res = optimize.linprog(
      c=np.zeros(p),
      A_ub=D[off], b_ub=-np.ones(off.sum()),
      A_eq=D[keep] if keep.any() else None,
      b_eq=np.zeros(keep.sum()) if keep.any() else None,
      bounds=[(None, None)] * p, method="highs")
  if res.status != 0:
    return None
  return res.x


def _newton(D, opts: TiltOptions):
  """Minimizes log mean exp(D @ lam); the optimum is assumed attained."""
  m, p = D.shape
  lam = np.zeros(p)
  z = D @ lam
  value = logsumexp(z)
  converged = False
  it = 0
  for it in range(1, opts.max_iter + 1):
    prob = np.exp(z - value)
    grad = prob @ D
    if np.max(np.abs(grad)) <= opts.gtol:
      converged = True
      it -= 1
      break
    hess = (D * prob[:, None]).T @ D - np.outer(grad, grad)
    step = -np.linalg.lstsq(hess, grad, rcond=None)[0]
    slope = grad @ step
    if slope >= 0:
      step = -grad
      slope = -grad @ grad
    t = 1.0
    for _ in range(60):
      cand = lam + t * step
      z_cand = D @ cand
      v_cand = logsumexp(z_cand)
      if v_cand <= value + opts.armijo * t * slope:
        break
      t *= opts.backtrack
    else:
      # no decrease possible at machine precision
      converged = np.max(np.abs(grad)) <= 1e3 * opts.gtol
      break
    lam, z, value = cand, z_cand, v_cand
    if np.linalg.norm(lam) > opts.lambda_max:
      logger.warning("tilt multiplier exceeded %g", opts.lambda_max)
      break
  else:
    prob = np.exp(z - value)
    converged = np.max(np.abs(prob @ D)) <= opts.gtol
  return lam, value - math.log(m), converged, it


def solve_tilt(problem: TiltProblem,
               opts: Optional[TiltOptions] = None) -> TiltSolution:
  """Minimizes ``f(lam) = (1/n) sum_i exp(lam . (V_i - c))``.

  Columns of ``V - c`` are scaled by their max absolute value before Newton
  and ``lam`` is rescaled afterwards, so the result is scale-equivariant.
  """
  opts = opts or TiltOptions()
  n, p = problem.n, problem.p
  D = problem.V - problem.target
  # differences at rounding level of the inputs are exact zeros
  magnitude = np.maximum(np.max(np.abs(problem.V), axis=0),
                         np.abs(problem.target))
  D[np.abs(D) <= 1e-13 * magnitude] = 0.0
  scale = np.max(np.abs(D), axis=0)
  scale[scale == 0] = 1.0
  Ds = D / scale
  keep = minimal_face(Ds)
  m = int(keep.sum())
  if m == 0:
    return TiltSolution(
        lambda_star=np.zeros(p), objective=0.0, weights=None, attained=False,
        converged=True, iterations=0,
        diverged_direction=_unit(_divergence_direction(Ds, keep), scale),
        support=keep)
  sub = Ds[keep]
  lam_s, log_f, converged, iterations = _newton(sub, opts)
  log_obj = log_f + math.log(m / n)
  weights = np.zeros(n)
  z = sub @ lam_s
  weights[keep] = np.exp(z - logsumexp(z))
  weights[weights < core.WEIGHT_FLOOR] = 0.0
  weights /= weights.sum()
  attained = m == n
  return TiltSolution(
      lambda_star=lam_s / scale,
      objective=min(math.exp(log_obj), 1.0),
      weights=weights,
      attained=attained,
      converged=converged,
      iterations=iterations,
      diverged_direction=None if attained else _unit(
          _divergence_direction(Ds, keep), scale),
      support=keep)


def _unit(d, scale):
  if d is None:
    return None
  d = np.asarray(d, dtype=float) / scale
  norm = np.linalg.norm(d)
  return d / norm if norm > 0 else None


def tilt_objective(V, target, lam) -> float:
  """``(1/n) sum_i exp(lam . (V_i - target))`` in log-sum-exp form."""
  V = np.asarray(V, dtype=float)
  if V.ndim == 1:
    V = V[:, None]
  z = (V - target) @ np.atleast_1d(lam)
  return float(math.exp(logsumexp(z) - math.log(len(z))))


def report_from_tilt(sol: TiltSolution, **kwargs) -> StabilityReport:
  report = StabilityReport.from_s(
      sol.objective, lam=sol.lambda_star, weights=sol.weights,
      converged=sol.converged, iterations=sol.iterations,
      attained=sol.attained, **kwargs)
  report.diagnostics.setdefault("support_size", int(sol.support.sum()))
  if sol.diverged_direction is not None:
    report.diagnostics["diverged_direction"] = sol.diverged_direction.tolist()
  if sol.weights is not None:
    report.diagnostics["primal_kl"] = core.kl_to_uniform(sol.weights)
  return report


def svalue_moments(V, target=0.0, opts=None, **kwargs) -> StabilityReport:
  return report_from_tilt(solve_tilt(TiltProblem(V, target), opts), **kwargs)


def svalue_mean(data: Dataset, column: str, target: float = 0.0,
                opts: Optional[TiltOptions] = None) -> StabilityReport:
  """s-value of the mean of ``column`` reaching ``target``."""
  return svalue_moments(data.column(column), target, opts)


def svalue_mean_directional(data: Dataset, z: str, e: Sequence[str],
                            target: float = 0.0, cond=None,
                            opts: Optional[TiltOptions] = None
                            ) -> StabilityReport:
  """Directional s-value of the mean of ``z`` for shifts in ``e``.

  Only the marginal of ``e`` may move; the attainable means are those of the
  fitted conditional mean ``f(E_i)``, which is tilted in place of ``z``.
  """
  from svalues.estimands import Conditioning
  cond = Conditioning.coerce(cond)
  fitted = cond.fit(data.column(z), data.columns(e)).fitted
  report = svalue_moments(fitted[:, 0], target, opts)
  report.diagnostics["conditioning"] = cond.method
  return report


def svalue_score_vector(data: Dataset, model, eta,
                        opts: Optional[TiltOptions] = None
                        ) -> StabilityReport:
  """Extended s-value of an M-estimator: ``theta(P) = eta`` for all p entries."""
  V = model.score(np.asarray(eta, dtype=float), data)
  return svalue_moments(V, 0.0, opts)


def svalue_score_vector_directional(data: Dataset, model, eta,
                                    e: Sequence[str], cond=None,
                                    opts: Optional[TiltOptions] = None
                                    ) -> StabilityReport:
  from svalues.estimands import Conditioning
  cond = Conditioning.coerce(cond)
  V = model.score(np.asarray(eta, dtype=float), data)
  Q = cond.fit(V, data.columns(e)).fitted
  report = svalue_moments(Q, 0.0, opts)
  report.diagnostics["conditioning"] = cond.method
  return report


def _frozen_eta(data, model, k, eta_k):
  fit = model.fit(data, core.uniform_weights(data.n))
  eta = np.array(fit, dtype=float)
  eta[k] = eta_k
  return fit, eta


def plugin_single_component(data: Dataset, model, k: int, eta_k: float,
                            directional=None,
                            opts: Optional[TiltOptions] = None
                            ) -> StabilityReport:
  """Plug-in lower bound for the s-value of one component ``theta_k = eta_k``.

  The other components are frozen at their full-sample estimates instead of
  being maximized over, which makes the problem convex but only yields a
  lower bound.

  Args:
    directional: optional ``(e_columns, cond)`` pair for the directional
      variant.
  """
  k = model.index(k)
  fit, eta = _frozen_eta(data, model, k, eta_k)
  if directional is None:
    report = svalue_score_vector(data, model, eta, opts)
  else:
    e, cond = directional
    report = svalue_score_vector_directional(data, model, eta, e, cond, opts)
  report.lower_bound = True
  report.diagnostics["eta"] = eta.tolist()
  report.diagnostics["full_sample_fit"] = np.asarray(fit).tolist()
  return report


def sandwich_standard_errors(data: Dataset, model, theta) -> np.ndarray:
  w = core.uniform_weights(data.n)
  H = model.hessian(theta, data, w)
  S = model.score(theta, data)
  meat = S.T @ S / data.n
  Hinv = np.linalg.pinv(H)
  cov = Hinv @ meat @ Hinv / data.n
  return np.sqrt(np.maximum(np.diag(cov), 0.0))


def supinf_single_component(data: Dataset, model, k: int, eta_k: float,
                            directional=None, points: int = 7,
                            width: float = 3.0, refine: bool = True,
                            opts: Optional[TiltOptions] = None
                            ) -> StabilityReport:
  """Grid approximation of ``sup_{eta_-k} inf_lam`` for one component.

  Searches a ``points``-per-axis grid over the nuisance components, centred at
  the full-sample fit and spanning ``width`` sandwich standard errors, then
  refines once around the best cell.  Every grid value is attained by some
  nuisance choice, so the result is a lower bound on the exact value.
  """
  k = model.index(k)
  fit, eta0 = _frozen_eta(data, model, k, eta_k)
  others = [j for j in range(len(eta0)) if j != k]
  se = sandwich_standard_errors(data, model, np.asarray(fit))
  se = np.where(se > 0, se, 1.0)

  def inner(eta):
    if directional is None:
      return svalue_score_vector(data, model, eta, opts)
    e, cond = directional
    return svalue_score_vector_directional(data, model, eta, e, cond, opts)

  best_report, best_eta = inner(eta0), eta0
  center = eta0.copy()
  half = width * se
  for _ in range(2 if refine else 1):
    axes = [np.linspace(center[j] - half[j], center[j] + half[j], points)
            for j in others]
    mesh = np.meshgrid(*axes, indexing="ij") if axes else []
    flat = [m.reshape(-1) for m in mesh]
    count = flat[0].size if flat else 1
    for idx in range(count):
      eta = center.copy()
      for j, values in zip(others, flat):
        eta[j] = values[idx]
      rep = inner(eta)
      if rep.s_value > best_report.s_value:
        best_report, best_eta = rep, eta
    center = best_eta.copy()
    half = half * 2.0 / (points - 1)
  best_report.lower_bound = True
  best_report.diagnostics["eta"] = best_eta.tolist()
  best_report.diagnostics["route"] = "nuisance-grid"
  return best_report
