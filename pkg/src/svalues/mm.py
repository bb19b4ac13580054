"""Majorization-minimization for s-values of general estimands.

For a fixed penalty ``delta`` we minimize
``g(w) = delta * (theta(w) - c) + sum_i w_i log w_i`` over the simplex by
repeatedly minimizing the majorizer that linearizes ``theta`` at the current
iterate and adds ``L * delta * KL(w' || w)``.  Its minimizer is explicit:

    log w'_i = (-delta grad_i + L delta log w_i) / (1 + L delta) + const.

The penalty is then searched (doubling, then bisection) until
``theta(w_delta)`` reaches ``c``.

The directional variant constrains weights to be equal within groups of a
discrete column, so the same update runs on the ``K`` group masses ``v_k``
with the group-averaged gradient and a ``log n_k`` offset.  The general solver
is the special case where every row is its own group.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from typing import List, Optional, Sequence

import numpy as np
from scipy import optimize
from scipy.special import logsumexp

from svalues import core
from svalues.core import Dataset, Estimand, StabilityReport
from svalues.estimands import discretize

logger = logging.getLogger(__name__)

UNBOUNDED = 1e12


@dataclasses.dataclass
class MMConfig:
  """Solver settings.

  ``tol_obj`` is relative to ``max(1, delta)`` because ``g`` scales with the
  penalty.  ``tol_theta=None`` picks ``1e-3`` times the spread of the
  leave-one-out estimates.  ``delta_gamma`` sets the first penalty
  ``2 * delta_gamma``.
  """

  L: float = 1.0
  delta: float = 1.0
  tol_obj: float = 1e-12
  tol_theta: Optional[float] = None
  max_iter: int = 5000
  delta_gamma: float = 0.5
  delta_max: float = 1e6
  target: float = 0.0
  max_doublings: int = 40
  success_halving: int = 10
  L_floor: float = 1e-3
  max_bisections: int = 60

  def __post_init__(self):
    if not self.L > 0:
      raise ValueError("L must be positive")
    if not (self.tol_obj > 0 and self.delta_gamma > 0):
      raise ValueError("tolerances and delta_gamma must be positive")
    if self.tol_theta is not None and not self.tol_theta > 0:
      raise ValueError("tol_theta must be positive")


@dataclasses.dataclass
class ProfilePoint:
  """Envelope of attainable estimand values within a KL budget.

  ``delta_neg`` is the penalty of the downward run that produced
  ``theta_min`` and ``delta_pos`` that of the upward run producing
  ``theta_max`` (both non-negative; 0 means the uniform weights).
  """

  kl: float
  theta_min: float
  theta_max: float
  delta_neg: float
  delta_pos: float


class _Groups:
  """Estimand evaluation over group masses ``v`` (row weight ``v_k / n_k``)."""

  def __init__(self, data, estimand, labels, sign=1.0, c=0.0):
    self.data = data
    self.estimand = estimand
    self.labels = np.asarray(labels)
    self.counts = np.bincount(self.labels).astype(float)
    if np.any(self.counts == 0):
      raise core.DegenerateGroup("a group has no rows")
    self.log_counts = np.log(self.counts)
    self.K = len(self.counts)
    self.n = data.n
    self.sign = sign
    self.c = c

  def rows(self, v):
    return v[self.labels] / self.counts[self.labels]

  def theta(self, v):
    value = self.estimand.evaluate(self.data, self.rows(v))
    if not np.isfinite(value) or abs(value) > UNBOUNDED:
      raise core.EstimandUnbounded("estimand reached %r" % value)
    return value

  def row_gradient(self, v):
    grad = np.asarray(self.estimand.gradient(self.data, self.rows(v)), float)
    if not np.all(np.isfinite(grad)):
      raise core.GradientFailure("non-finite gradient")
    return grad

  def group_gradient(self, v):
    grad = self.row_gradient(v)
    return np.bincount(self.labels, grad, self.K) / self.counts

  def kl(self, v):
    mask = v > core.WEIGHT_FLOOR
    vp = v[mask]
    return max(float(np.sum(vp * (np.log(self.n * vp) -
                                  self.log_counts[mask]))), 0.0)

  def objective(self, v, delta, theta=None):
    theta = self.theta(v) if theta is None else theta
    mask = v > core.WEIGHT_FLOOR
    vp = v[mask]
    ent = float(np.sum(vp * (np.log(vp) - self.log_counts[mask])))
    return delta * self.sign * (theta - self.c) + ent

  def step(self, v, delta, L, ggrad=None):
    ggrad = self.group_gradient(v) if ggrad is None else ggrad
    with np.errstate(divide="ignore"):
      logv = np.log(v)
    Ld = L * delta
    z = (-delta * self.sign * ggrad + Ld * logv + self.log_counts) / (1 + Ld)
    out = np.exp(z - logsumexp(z))
    out[out < core.WEIGHT_FLOOR] = 0.0
    return out / out.sum()


def _uniform_mass(groups):
  return groups.counts / groups.n


def mm_step(data: Dataset, estimand: Estimand, w, cfg: MMConfig) -> np.ndarray:
  """One exact majorizer minimization from ``w``.

  A negative ``cfg.delta`` reverses the direction (the update then pushes
  ``theta`` up) with penalty ``|delta|``.
  """
  w = np.asarray(w, float)
  sign = -1.0 if cfg.delta < 0 else 1.0
  groups = _Groups(data, estimand, np.arange(data.n), sign, cfg.target)
  return groups.step(w, abs(cfg.delta), cfg.L)


def _fixed_delta(groups: _Groups, v0, delta, cfg: MMConfig, L=None):
  """Algorithm core: MM iterations with backtracking on ``L``."""
  L = cfg.L if L is None else L
  v = np.asarray(v0, float)
  theta = groups.theta(v)
  g = groups.objective(v, delta, theta)
  trace = [g]
  moves = []
  successes = 0
  converged = False
  tol = cfg.tol_obj * max(1.0, delta)
  it = 0
  ggrad = groups.group_gradient(v)
  for it in range(1, cfg.max_iter + 1):
    accepted = False
    for _ in range(cfg.max_doublings + 1):
      try:
        cand = groups.step(v, delta, L, ggrad)
        theta_c = groups.theta(cand)
        g_c = groups.objective(cand, delta, theta_c)
        if g_c <= g:
          ggrad_c = groups.group_gradient(cand)
      except core.SingularFit:
        # the estimand is not defined at the candidate: shorten the step
        L *= 2.0
        continue
      if g_c <= g:
        accepted = True
        break
      L *= 2.0
    if not accepted:
      # no step of any size decreases g further at machine precision
      converged = True
      break
    moves.append(float(np.abs(cand - v).sum()))
    decrease = g - g_c
    v, theta, g, ggrad = cand, theta_c, g_c, ggrad_c
    trace.append(g)
    successes += 1
    if successes >= cfg.success_halving:
      L = max(L / 2.0, cfg.L_floor)
      successes = 0
    if decrease <= tol:
      converged = True
      break
  return v, theta, L, {
      "g_trace": trace, "iterations": it, "converged": converged,
      "step_l1": moves, "L": L}


def solve_fixed_delta(data: Dataset, estimand: Estimand, cfg: MMConfig,
                      w0=None):
  """Runs MM at penalty ``cfg.delta`` from ``w0`` (uniform by default).

  Returns ``(weights, diagnostics)``; ``diagnostics["g_trace"]`` holds the
  objective at every accepted iterate and never increases.
  """
  sign = -1.0 if cfg.delta < 0 else 1.0
  groups = _Groups(data, estimand, np.arange(data.n), sign, cfg.target)
  w = core.uniform_weights(data.n) if w0 is None else np.asarray(w0, float)
  w, theta, _, diag = _fixed_delta(groups, w, abs(cfg.delta), cfg)
  diag["theta"] = theta
  return w, diag


def check_first_order(data: Dataset, estimand: Estimand, w,
                      labels=None) -> float:
  """Residual of the stationarity form ``log w_i = a + lam * grad_i``.

  Fits the affine relation by least squares over rows with positive weight
  (over groups when ``labels`` is given, using the group-mean gradient) and
  returns the largest absolute residual.
  """
  w = np.asarray(w, float)
  grad = np.asarray(estimand.gradient(data, w), float)
  if labels is not None:
    labels = np.asarray(labels)
    counts = np.bincount(labels).astype(float)
    grad = np.bincount(labels, grad) / counts
    w = np.bincount(labels, w) / counts
  mask = w > core.WEIGHT_FLOOR
  y = np.log(w[mask])
  A = np.column_stack([np.ones(mask.sum()), grad[mask]])
  coef = np.linalg.lstsq(A, y, rcond=None)[0]
  return float(np.max(np.abs(y - A @ coef)))


def _loo_spread(groups: _Groups) -> float:
  data, estimand = groups.data, groups.estimand
  n = data.n
  u = core.uniform_weights(n)
  if n <= 500:
    values = []
    for i in range(n):
      w = np.full(n, 1.0 / (n - 1))
      w[i] = 0.0
      try:
        values.append(estimand.evaluate(data, w))
      except core.SingularFit:
        continue
    values = np.asarray(values)
  else:
    grad = core.tangent(estimand.gradient(data, u), u)
    values = -grad / (n - 1)
  return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def _symmetric_start(groups: _Groups, v):
  """Nudges the start off a stationary point of ``theta`` (zero tangent)."""
  ggrad = groups.group_gradient(v)
  spread = np.max(np.abs(ggrad - v @ ggrad))
  if groups.K > 1 and spread <= 1e-10 * max(1.0, np.max(np.abs(ggrad))):
    rng = np.random.default_rng(0)
    logv = np.log(v) + 1e-2 * rng.standard_normal(groups.K)
    out = np.exp(logv - logsumexp(logv))
    return out, True
  return v, False


def _search(groups: _Groups, cfg: MMConfig, theta_u: float):
  """Penalty search: doubling from ``2 * gamma``, then bisection.

  Returns a dict with the accepted masses and bookkeeping.  ``status`` is
  ``"hit"`` (|theta - c| <= tol), ``"segment"`` (bisection collapsed on a jump
  in theta and the crossing was located on the segment between the two
  bracket iterates) or ``"no-crossing"``.
  """
  c = groups.c
  tol = cfg.tol_theta
  if tol is None:
    spread = _loo_spread(groups)
    tol = 1e-3 * spread if spread > 0 else 1e-6 * max(1.0, abs(theta_u - c))
  v0, perturbed = _symmetric_start(groups, _uniform_mass(groups))
  sign = groups.sign
  side = lambda th: sign * (th - c)
  L = cfg.L
  total_iter = 0
  all_converged = True
  path = []
  lo = None  # (delta, v, theta) still on the starting side
  hi = None  # first iterate past c
  delta = 2.0 * cfg.delta_gamma
  v = v0
  prev_kl = -1.0
  stall = 0
  while delta <= cfg.delta_max:
    v, theta, L, diag = _fixed_delta(groups, v, delta, cfg, L)
    total_iter += diag["iterations"]
    all_converged &= diag["converged"]
    kl = groups.kl(v)
    path.append((delta, theta, kl))
    if abs(theta - c) <= tol:
      return dict(status="hit", v=v, theta=theta, delta=delta, tol=tol,
                  iterations=total_iter, converged=all_converged, path=path,
                  perturbed=perturbed)
    if side(theta) < 0:
      hi = (delta, v, theta)
      break
    lo = (delta, v, theta)
    stall = stall + 1 if kl - prev_kl <= 1e-10 else 0
    prev_kl = kl
    if stall >= 3:
      break
    delta *= 2.0
  if hi is None:
    return dict(status="no-crossing", v=v, theta=theta, delta=delta, tol=tol,
                iterations=total_iter, converged=all_converged, path=path,
                perturbed=perturbed, reason="plateau" if stall >= 3 else
                "delta_max")
  if lo is None:
    lo = (0.0, v0, groups.theta(v0))
  for _ in range(cfg.max_bisections):
    d_lo, v_lo, _ = lo
    d_hi = hi[0]
    if d_hi - d_lo <= 1e-12 * d_hi:
      break
    mid = 0.5 * (d_lo + d_hi)
    v, theta, L, diag = _fixed_delta(groups, v_lo, mid, cfg, L)
    total_iter += diag["iterations"]
    all_converged &= diag["converged"]
    path.append((mid, theta, groups.kl(v)))
    if abs(theta - c) <= tol:
      return dict(status="hit", v=v, theta=theta, delta=mid, tol=tol,
                  iterations=total_iter, converged=all_converged, path=path,
                  perturbed=perturbed)
    if side(theta) < 0:
      hi = (mid, v, theta)
    else:
      lo = (mid, v, theta)
  # theta jumps across c between two nearly equal penalties
  v_a, v_b = lo[1], hi[1]
  f = lambda t: side(groups.theta((1 - t) * v_a + t * v_b))
  try:
    t = optimize.brentq(f, 0.0, 1.0, xtol=1e-14)
  except ValueError:
    t = 1.0
  v = (1 - t) * v_a + t * v_b
  return dict(status="segment", v=v, theta=groups.theta(v), delta=hi[0],
              tol=tol, iterations=total_iter, converged=all_converged,
              path=path, perturbed=perturbed,
              bracket_delta=(lo[0], hi[0]),
              bracket_theta=(lo[2], hi[2]))


def _svalue_groups(data, estimand, labels, c, cfg) -> StabilityReport:
  cfg = cfg or MMConfig()
  probe = _Groups(data, estimand, labels)
  theta_u = probe.theta(_uniform_mass(probe))
  local = not estimand.linear
  if theta_u == c or abs(theta_u - c) <= 1e-14 * max(1.0, abs(c)):
    return StabilityReport.from_s(1.0, weights=core.uniform_weights(data.n),
                                  local=local, first_order_residual=0.0,
                                  diagnostics={"theta_uniform": theta_u})
  sign = 1.0 if theta_u > c else -1.0
  groups = _Groups(data, estimand, labels, sign, c)
  base = {"theta_uniform": theta_u, "groups": groups.K,
          "direction": "decrease" if sign > 0 else "increase"}
  if groups.K == 1:
    return StabilityReport.from_s(0.0, attained=False, local=local,
                                  diagnostics=dict(base, status="one-group"))
  res = _search(groups, cfg, theta_u)
  base.update(status=res["status"], delta=res["delta"], tol_theta=res["tol"],
              theta=res["theta"], perturbed_start=res["perturbed"],
              delta_path=[list(p) for p in res["path"]])
  if res["status"] == "no-crossing":
    # c is not reached along the penalty path: the iterates concentrate on
    # rows where theta stays on the starting side.
    base["reason"] = res["reason"]
    base["s_last_iterate"] = math.exp(-groups.kl(res["v"]))
    return StabilityReport.from_s(
        0.0, attained=False, converged=res["converged"],
        iterations=res["iterations"], local=local, diagnostics=base)
  if res["status"] == "segment":
    base["non_monotone_bracket"] = True
    base["bracket_delta"] = list(res["bracket_delta"])
    base["bracket_theta"] = list(res["bracket_theta"])
  w = groups.rows(res["v"])
  try:
    residual = check_first_order(data, estimand, w,
                                 None if groups.K == data.n else labels)
  except core.SValueError:
    residual = None
  kl = groups.kl(res["v"])
  return StabilityReport(
      s_value=math.exp(-kl), kl=kl, weights=w, converged=res["converged"],
      iterations=res["iterations"], attained=True, local=local,
      first_order_residual=residual, lam=np.array([-sign * res["delta"]]),
      diagnostics=base)


def svalue_general(data: Dataset, estimand: Estimand, c: float = 0.0,
                   cfg: Optional[MMConfig] = None) -> StabilityReport:
  """s-value of ``theta(P) = c`` for an arbitrary differentiable estimand.

  Nonlinear estimands give a local solution (``report.local``); the report
  carries the first-order residual of the accepted weights.
  """
  return _svalue_groups(data, estimand, np.arange(data.n), c, cfg)


def svalue_general_directional(data: Dataset, estimand: Estimand,
                               e: Sequence[str], c: float = 0.0,
                               cfg: Optional[MMConfig] = None,
                               bins: Optional[int] = None) -> StabilityReport:
  """Directional s-value: shifts keep weights equal within groups of ``e``.

  Continuous ``e`` is quantile-binned (``bins`` or the default count).
  """
  labels = discretize(data.columns(e), bins)
  report = _svalue_groups(data, estimand, labels, c, cfg)
  report.diagnostics["labels"] = labels.tolist()
  return report


def profile(data: Dataset, estimand: Estimand, kl_max: float,
            grid_size: int = 50, directional: Optional[Sequence[str]] = None,
            cfg: Optional[MMConfig] = None, bins: Optional[int] = None,
            delta_min: float = 1e-3, delta_factor: float = 2 ** 0.25
            ) -> List[ProfilePoint]:
  """Smallest and largest estimand values reachable within each KL budget.

  Warm-started penalty paths in both directions yield points
  ``(kl(w_delta), theta(w_delta))``.  The envelope at budget ``kappa`` is the
  extreme theta over points with ``kl <= kappa``, so it is monotone by
  construction; it is a step function through the computed points.
  """
  if not kl_max > 0:
    raise ValueError("kl_max must be positive")
  if grid_size < 2:
    raise ValueError("grid_size must be at least 2")
  cfg = cfg or MMConfig()
  if directional is None:
    labels = np.arange(data.n)
  else:
    labels = discretize(data.columns(directional), bins)
  points = {}
  theta_u = None
  for sign in (1.0, -1.0):
    groups = _Groups(data, estimand, labels, sign, 0.0)
    v = _uniform_mass(groups)
    theta_u = groups.theta(v)
    v, _ = _symmetric_start(groups, v)
    found = [(0.0, theta_u, 0.0)]
    L = cfg.L
    delta = delta_min
    last_kl = -1.0
    stall = 0
    while delta <= cfg.delta_max and groups.K > 1:
      try:
        v, theta, L, _ = _fixed_delta(groups, v, delta, cfg, L)
      except core.SValueError as err:
        logger.info("profile point at delta=%g dropped: %s", delta, err)
        delta *= delta_factor
        continue
      kl = groups.kl(v)
      found.append((kl, theta, delta))
      stall = stall + 1 if kl - last_kl <= 1e-12 else 0
      last_kl = kl
      if kl > kl_max or stall >= 8:
        break
      delta *= delta_factor
    points[sign] = found
  grid = np.linspace(0.0, kl_max, grid_size)
  out = []
  for kappa in grid:
    down = [p for p in points[1.0] if p[0] <= kappa]
    up = [p for p in points[-1.0] if p[0] <= kappa]
    lo = min(down, key=lambda p: p[1])
    hi = max(up, key=lambda p: p[1])
    out.append(ProfilePoint(float(kappa), float(min(lo[1], theta_u)),
                            float(max(hi[1], theta_u)), float(lo[2]),
                            float(hi[2])))
  return out


def profile_svalue(points: Sequence[ProfilePoint], c: float) -> float:
  """Largest ``exp(-kl)`` over envelope rows whose range contains ``c``."""
  best = 0.0
  for p in points:
    if p.theta_min <= c <= p.theta_max:
      best = max(best, math.exp(-p.kl))
  return best
