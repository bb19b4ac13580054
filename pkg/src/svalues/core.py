"""Weighted empirical distributions, estimand protocol and stability reports.

A shifted distribution is always represented as a reweighting ``w`` of the
observed rows: ``P_w = sum_i w_i delta_{Z_i}``.  Every solver in the package
consumes a :class:`Dataset` plus such weight vectors (plain 1-d numpy arrays).
"""

from __future__ import annotations

import dataclasses
import math
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

# Weights below this are treated as exact zeros in entropy terms.
WEIGHT_FLOOR = 1e-300
UNSTABLE_THRESHOLD = 0.6


class SValueError(Exception):
  """Base class for all package errors."""


class NonFiniteScore(SValueError, ValueError):
  pass


class NonFiniteValue(SValueError, ValueError):
  pass


class SingularFit(SValueError):
  """A weighted fit is numerically singular (e.g. rank-deficient design)."""


class SeparationFailure(SingularFit):
  """The weighted logistic MLE diverges."""


class GradientFailure(SValueError):
  pass


class EstimandUnbounded(SValueError):
  pass


class ConditioningFailure(SValueError):
  pass


class DegenerateGroup(ConditioningFailure):
  pass


class DimensionTooHigh(UserWarning):
  """Product quantile bins outnumber the rows; k-NN is used instead."""


class InfeasibleTarget(SValueError):
  """A moment target lies outside the convex hull of the data."""

  def __init__(self, message, direction=None):
    super().__init__(message)
    self.direction = direction


class ThresholdUnreachable(SValueError):

  def __init__(self, message, best_risk=None, weights=None):
    super().__init__(message)
    self.best_risk = best_risk
    self.weights = weights


class ArmEmpty(SValueError):
  pass


class OutcomeFitFailure(SValueError):
  pass


@dataclasses.dataclass(frozen=True)
class Dataset:
  """Immutable numeric table with named columns.

  Attributes:
    names: column names, unique and non-empty.
    values: float array of shape (n, len(names)); read-only.
  """

  names: tuple
  values: np.ndarray

  def __post_init__(self):
    names = tuple(str(name) for name in self.names)
    values = np.array(self.values, dtype=float)
    if values.ndim == 1:
      values = values[:, None]
    if values.ndim != 2 or values.shape[1] != len(names):
      raise ValueError(
          "values has shape %s but %d column names were given" %
          (values.shape, len(names)))
    if any(not name for name in names):
      raise ValueError("column names must be non-empty")
    if len(set(names)) != len(names):
      raise ValueError("column names must be unique: %s" % (names,))
    if values.shape[0] < 2:
      raise ValueError("a dataset needs at least 2 rows, got %d" %
                       values.shape[0])
    if not np.all(np.isfinite(values)):
      raise NonFiniteValue("dataset contains NaN or infinite values")
    values.setflags(write=False)
    object.__setattr__(self, "names", names)
    object.__setattr__(self, "values", values)

  @classmethod
  def from_columns(cls, columns: Mapping[str, Sequence[float]]) -> "Dataset":
    names = list(columns)
    lengths = {len(columns[name]) for name in names}
    if len(lengths) != 1:
      raise ValueError("columns have different lengths: %s" % sorted(lengths))
    return cls(tuple(names),
               np.column_stack([np.asarray(columns[k], float) for k in names]))

  @property
  def n(self) -> int:
    return self.values.shape[0]

  def has(self, name: str) -> bool:
    return name in self.names

  def _index(self, name: str) -> int:
    try:
      return self.names.index(name)
    except ValueError:
      raise KeyError("unknown column %r; available: %s" %
                     (name, ", ".join(self.names))) from None

  def column(self, name: str) -> np.ndarray:
    return self.values[:, self._index(name)]

  def columns(self, names: Sequence[str]) -> np.ndarray:
    if isinstance(names, str):
      names = [names]
    return self.values[:, [self._index(name) for name in names]]

  def take(self, rows) -> "Dataset":
    return Dataset(self.names, self.values[np.asarray(rows)])

  def with_column(self, name: str, values) -> "Dataset":
    values = np.asarray(values, float).reshape(-1)
    if self.has(name):
      data = self.values.copy()
      data[:, self._index(name)] = values
      return Dataset(self.names, data)
    return Dataset(self.names + (name,), np.column_stack([self.values, values]))


def uniform_weights(n: int) -> np.ndarray:
  return np.full(n, 1.0 / n)


def as_simplex(w, tol: float = 1e-9) -> np.ndarray:
  """Validates ``w`` as simplex weights and renormalizes it exactly."""
  w = np.array(w, dtype=float).reshape(-1)
  if not np.all(np.isfinite(w)):
    raise ValueError("weights must be finite")
  if np.any(w < 0):
    raise ValueError("weights must be non-negative")
  total = w.sum()
  if total <= 0 or abs(total - 1.0) > tol:
    raise ValueError("weights must sum to 1, got %r" % total)
  w[w < WEIGHT_FLOOR] = 0.0
  return w / w.sum()


def kl_to_uniform(w) -> float:
  """KL divergence of ``P_w`` from the uniform empirical distribution.

  Computes ``sum_{w_i > 0} w_i log(n w_i)`` with ``0 log 0 = 0``.
  """
  w = np.asarray(w, dtype=float)
  mask = w > WEIGHT_FLOOR
  wp = w[mask]
  return max(float(np.sum(wp * np.log(w.size * wp))), 0.0)


def tilt_weights(scores, lam) -> np.ndarray:
  """Exponentially tilted weights ``w_i ∝ exp(lam . scores_i)``."""
  scores = np.asarray(scores, dtype=float)
  if scores.ndim == 1:
    scores = scores[:, None]
  z = scores @ np.atleast_1d(np.asarray(lam, dtype=float))
  w = np.exp(z - logsumexp(z))
  w[w < WEIGHT_FLOOR] = 0.0
  return w / w.sum()


def tangent(grad, w) -> np.ndarray:
  """Removes the component of ``grad`` along the all-ones direction.

  For an estimand extended off the simplex by ``theta(w / sum(w))`` the
  gradient is orthogonal to ``w`` (Euler's identity for degree-0 homogeneous
  functions), so this maps any gradient differing by a constant shift onto
  the gradient of the extension.
  """
  grad = np.asarray(grad, dtype=float)
  return grad - np.dot(w, grad)


class Estimand:
  """A scalar functional ``theta(w)`` of the reweighted data.

  Subclasses implement :meth:`evaluate` and :meth:`gradient`.  Both take the
  full dataset plus a weight vector; ``evaluate`` must be invariant to
  ``w -> c * w`` (the unit-cube extension ``theta(w / sum(w))``).
  """

  name = "estimand"
  linear = False
  smoothness_hint: Optional[float] = None
  p = 1

  def evaluate(self, data: Dataset, w) -> float:
    raise NotImplementedError

  def gradient(self, data: Dataset, w) -> np.ndarray:
    raise NotImplementedError

  def __call__(self, data, w=None):
    if w is None:
      w = uniform_weights(data.n)
    return self.evaluate(data, w)


def finite_difference_gradient(estimand: Estimand, data: Dataset, w,
                               step: float = 1e-6) -> np.ndarray:
  """Central finite differences of ``theta(w / sum(w))``."""
  w = np.asarray(w, dtype=float)
  out = np.empty(w.size)
  for i in range(w.size):
    up = w.copy()
    down = w.copy()
    up[i] += step
    down[i] -= step
    out[i] = (estimand.evaluate(data, up / up.sum()) -
              estimand.evaluate(data, down / down.sum())) / (2 * step)
  return out


def gradient_error(estimand: Estimand, data: Dataset, w,
                   step: float = 1e-6) -> float:
  """Relative sup-norm error between analytic and finite-difference gradient."""
  analytic = tangent(estimand.gradient(data, w), w)
  numeric = finite_difference_gradient(estimand, data, w, step)
  denom = max(np.max(np.abs(numeric)), 1e-12)
  return float(np.max(np.abs(analytic - numeric)) / denom)


@dataclasses.dataclass
class StabilityReport:
  """Result of an s-value computation.

  ``kl`` is ``-log(s_value)`` (``inf`` when ``s_value == 0``).  ``weights``,
  when present, certify the reported value: they describe a reweighting of
  the rows that reaches the target and whose divergence is ``kl``.
  """

  s_value: float
  kl: float
  lam: Optional[np.ndarray] = None
  weights: Optional[np.ndarray] = None
  converged: bool = True
  iterations: int = 0
  attained: bool = True
  lower_bound: bool = False
  local: bool = False
  first_order_residual: Optional[float] = None
  threshold: float = UNSTABLE_THRESHOLD
  diagnostics: dict = dataclasses.field(default_factory=dict)

  @property
  def unstable_flag(self) -> bool:
    return self.s_value > self.threshold

  @classmethod
  def from_s(cls, s_value: float, **kwargs) -> "StabilityReport":
    s_value = float(min(max(s_value, 0.0), 1.0))
    kl = -math.log(s_value) if s_value > 0 else math.inf
    return cls(s_value=s_value, kl=kl, **kwargs)

  @classmethod
  def from_weights(cls, w, **kwargs) -> "StabilityReport":
    kl = kl_to_uniform(w)
    return cls(s_value=math.exp(-kl), kl=kl, weights=np.asarray(w), **kwargs)
