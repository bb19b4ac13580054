"""Catalog of estimands, M-estimator score models and conditional-mean fits.

Coefficient estimands are differentiated through the weighted estimating
equation ``sum_j w_j score(theta, Z_j) = 0``: by the implicit function
theorem ``d theta / d w_i = -H(w)^{-1} score(theta, Z_i)`` with
``H(w) = sum_j w_j d score(theta, Z_j) / d theta``.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from typing import Optional, Sequence, Union

import numpy as np
from scipy import optimize
from scipy.special import expit

from svalues import core
from svalues.core import Dataset, Estimand

COND_LIMIT = 1e12


def _as_list(names) -> list:
  if isinstance(names, str):
    return [names]
  return list(names)


def check_conditioning(A):
  eig = np.linalg.eigvalsh(A)
  if eig[0] <= 0 or eig[-1] / eig[0] > COND_LIMIT:
    raise core.SingularFit(
        "weighted normal matrix is singular (condition number %.3g)" %
        (eig[-1] / eig[0] if eig[0] > 0 else math.inf))


# -- score models -------------------------------------------------------------


class ScoreModel:
  """M-estimator defined by a strictly convex per-row loss.

  ``score`` is the gradient of ``loss`` in the parameter; ``fit`` solves the
  weighted estimating equation ``sum_i w_i score(theta, Z_i) = 0``.
  """

  param_names: tuple = ()

  @property
  def p(self) -> int:
    return len(self.param_names)

  def index(self, k: Union[int, str]) -> int:
    if isinstance(k, str):
      try:
        return self.param_names.index(k)
      except ValueError:
        raise KeyError("unknown parameter %r; have %s" %
                       (k, self.param_names)) from None
    k = int(k)
    if not 0 <= k < self.p:
      raise IndexError("parameter index %d out of range" % k)
    return k

  def loss(self, theta, data: Dataset) -> np.ndarray:
    raise NotImplementedError

  def score(self, theta, data: Dataset) -> np.ndarray:
    raise NotImplementedError

  def hessian(self, theta, data: Dataset, w) -> np.ndarray:
    raise NotImplementedError

  def fit(self, data: Dataset, w) -> np.ndarray:
    raise NotImplementedError


class _Regression(ScoreModel):

  def __init__(self, y: str, x: Sequence[str], intercept: bool = True):
    self.y = y
    self.x = _as_list(x)
    self.intercept = intercept
    self.param_names = (("intercept",) if intercept else ()) + tuple(self.x)

  def design(self, data: Dataset):
    X = data.columns(self.x)
    if self.intercept:
      X = np.column_stack([np.ones(data.n), X])
    return X, data.column(self.y)

  def __repr__(self):
    return "%s(y=%r, x=%r, intercept=%r)" % (
        type(self).__name__, self.y, self.x, self.intercept)


class LinearModel(_Regression):
  """Least squares, loss ``(y - x.theta)^2 / 2``."""

  def loss(self, theta, data):
    X, y = self.design(data)
    return 0.5 * (y - X @ theta) ** 2

  def score(self, theta, data):
    X, y = self.design(data)
    return -X * (y - X @ theta)[:, None]

  def hessian(self, theta, data, w):
    X, _ = self.design(data)
    w = np.asarray(w, float) / np.sum(w)
    return (X * w[:, None]).T @ X

  def fit(self, data, w):
    X, y = self.design(data)
    w = np.asarray(w, float) / np.sum(w)
    A = (X * w[:, None]).T @ X
    check_conditioning(A)
    return np.linalg.solve(A, X.T @ (w * y))

  def predict(self, theta, data):
    X, _ = self.design(data)
    return X @ theta


class LogisticModel(_Regression):
  """Logistic regression, loss ``log(1 + e^eta) - y eta`` with y in {0, 1}."""

  max_iter = 100
  max_coef = 1e3

  def loss(self, theta, data):
    X, y = self.design(data)
    eta = X @ theta
    return np.logaddexp(0.0, eta) - y * eta

  def score(self, theta, data):
    X, y = self.design(data)
    return -X * (y - expit(X @ theta))[:, None]

  def hessian(self, theta, data, w):
    X, _ = self.design(data)
    w = np.asarray(w, float) / np.sum(w)
    mu = expit(X @ theta)
    return (X * (w * mu * (1 - mu))[:, None]).T @ X

  def fit(self, data, w):
    X, y = self.design(data)
    w = np.asarray(w, float) / np.sum(w)
    col_scale = X.std(axis=0)
    col_scale[col_scale == 0] = 1.0
    theta = np.zeros(X.shape[1])
    value = np.sum(w * (np.logaddexp(0.0, X @ theta) - y * (X @ theta)))
    for _ in range(self.max_iter):
      mu = expit(X @ theta)
      grad = -X.T @ (w * (y - mu))
      H = (X * (w * mu * (1 - mu))[:, None]).T @ X
      try:
        check_conditioning(H)
      except core.SingularFit:
        break
      step = -np.linalg.solve(H, grad)
      decrement = -grad @ step
      if decrement <= 1e-24:
        break
      t = 1.0
      while decrement > 1e-10:  # pure Newton steps once quadratic
        cand = theta + t * step
        eta = X @ cand
        new = np.sum(w * (np.logaddexp(0.0, eta) - y * eta))
        if new <= value - 1e-4 * t * decrement or t < 1e-10:
          break
        t *= 0.5
      else:
        cand = theta + step
        eta = X @ cand
        new = np.sum(w * (np.logaddexp(0.0, eta) - y * eta))
      theta, value = cand, new
      if np.linalg.norm(theta * col_scale) > self.max_coef:
        break
    eta = X @ theta
    if (np.linalg.norm(theta * col_scale) > self.max_coef or
        np.max(np.abs(eta)) > 25) and _separable(X, y, w):
      raise core.SeparationFailure(
          "logistic MLE does not exist: the weighted classes are separable")
    mu = expit(eta)
    if np.max(np.abs(X.T @ (w * (y - mu)))) > 1e-8:
      raise core.SeparationFailure("logistic fit did not converge")
    return theta

  def predict(self, theta, data):
    X, _ = self.design(data)
    return expit(X @ theta)


def _separable(X, y, w) -> bool:
  """Whether some direction b has (2y - 1) x.b >= 0 on all weighted rows
  with at least one strict inequality (complete or quasi-separation)."""
  rows = w > core.WEIGHT_FLOOR
  A = (2 * y[rows] - 1)[:, None] * X[rows]
  res = optimize.linprog(-A.sum(axis=0), A_ub=-A, b_ub=np.zeros(len(A)),
                         bounds=[(-1, 1)] * X.shape[1], method="highs")
  return res.status == 0 and -res.fun > 1e-9


# -- estimands ----------------------------------------------------------------


class MeanEstimand(Estimand):
  """``theta(w) = sum_i w_i z_i``."""

  linear = True

  def __init__(self, column: str):
    self.column = column
    self.name = "mean(%s)" % column

  def evaluate(self, data, w):
    w = np.asarray(w, float)
    return float(w @ data.column(self.column) / w.sum())

  def gradient(self, data, w):
    return data.column(self.column).copy()


def mean_estimand(column: str) -> MeanEstimand:
  return MeanEstimand(column)


class MEstimatorComponent(Estimand):
  """Component ``k`` of an M-estimator refit under the weights."""

  def __init__(self, model: ScoreModel, k: Union[int, str]):
    self.model = model
    self.k = model.index(k)
    self.name = "%s[%s]" % (type(model).__name__, model.param_names[self.k])

  def fit(self, data, w):
    return self.model.fit(data, w)

  def evaluate(self, data, w):
    return float(self.model.fit(data, w)[self.k])

  def gradient(self, data, w):
    w = np.asarray(w, float) / np.sum(w)
    theta = self.model.fit(data, w)
    H = self.model.hessian(theta, data, w)
    check_conditioning(H)
    u = np.linalg.solve(H, np.eye(len(theta))[self.k])
    return -self.model.score(theta, data) @ u


def ols_coefficient_estimand(y: str, x: Sequence[str], k: Union[int, str],
                             intercept: bool = True) -> MEstimatorComponent:
  """Weighted least-squares coefficient ``k`` (index or parameter name)."""
  return MEstimatorComponent(LinearModel(y, x, intercept), k)


def glm_coefficient_estimand(y: str, x: Sequence[str], k: Union[int, str],
                             link: str = "logistic",
                             intercept: bool = True) -> MEstimatorComponent:
  """Weighted logistic-regression coefficient; ``.model`` is the ScoreModel."""
  if link != "logistic":
    raise ValueError("only the logistic link is supported, got %r" % link)
  return MEstimatorComponent(LogisticModel(y, x, intercept), k)


class ATEPlugin(Estimand):
  """Plug-in average treatment effect ``sum_i w_i (mu1(X_i) - mu0(X_i))``.

  Both outcome models are fitted once on the full sample and stay frozen,
  so the estimand is linear in ``w``.
  """

  linear = True
  name = "ate"

  def __init__(self, effects: np.ndarray, mu1: np.ndarray, mu0: np.ndarray):
    self.effects = effects
    self.mu1 = mu1
    self.mu0 = mu0

  def evaluate(self, data, w):
    w = np.asarray(w, float)
    return float(w @ self.effects / w.sum())

  def gradient(self, data, w):
    return self.effects.copy()

  def effect_dataset(self, name: str = "effect") -> Dataset:
    return Dataset((name,), self.effects[:, None])


def ate_plugin_estimand(data: Dataset, y: str, a: str, x: Sequence[str],
                        outcome_model: str = "ols",
                        k: Optional[int] = None) -> ATEPlugin:
  """Builds the frozen plug-in ATE from per-arm outcome models.

  Args:
    outcome_model: ``"ols"`` (per-arm linear regression on ``x``) or
      ``"knn"`` (per-arm k-nearest-neighbour average, ``k`` defaulting to
      ``ceil(sqrt(arm size))``).
  """
  treat = data.column(a)
  if not np.all(np.isin(treat, (0.0, 1.0))):
    raise ValueError("treatment column %r must be binary 0/1" % a)
  X = data.columns(_as_list(x))
  yv = data.column(y)
  preds = {}
  for arm in (0.0, 1.0):
    rows = treat == arm
    if not rows.any():
      raise core.ArmEmpty("treatment arm %d has no rows" % arm)
    if outcome_model == "ols":
      D = np.column_stack([np.ones(rows.sum()), X[rows]])
      A = D.T @ D
      try:
        check_conditioning(A)
      except core.SingularFit as err:
        raise core.OutcomeFitFailure("arm %d: %s" % (arm, err)) from None
      beta = np.linalg.solve(A, D.T @ yv[rows])
      preds[arm] = np.column_stack([np.ones(data.n), X]) @ beta
    elif outcome_model == "knn":
      kk = k or int(math.ceil(math.sqrt(rows.sum())))
      if kk > rows.sum():
        raise core.OutcomeFitFailure(
            "arm %d has %d rows, fewer than k=%d" % (arm, rows.sum(), kk))
      scale = robust_scale(X)
      idx = knn_indices(X[rows] / scale, X / scale, kk)
      preds[arm] = yv[rows][idx].mean(axis=1)
    else:
      raise ValueError("unknown outcome model %r" % outcome_model)
  return ATEPlugin(preds[1.0] - preds[0.0], preds[1.0], preds[0.0])


# -- conditional expectation estimators ----------------------------------------


def default_bins(n: int) -> int:
  return min(10, int(math.ceil(math.sqrt(n))))


def robust_scale(E) -> np.ndarray:
  """Per-column MAD, falling back to the standard deviation, then 1."""
  E = np.asarray(E, float)
  med = np.median(E, axis=0)
  scale = np.median(np.abs(E - med), axis=0)
  sd = E.std(axis=0)
  scale = np.where(scale > 0, scale, sd)
  return np.where(scale > 0, scale, 1.0)


def knn_indices(train, query, k: int, chunk: int = 512) -> np.ndarray:
  """Indices of the ``k`` nearest training rows; ties go to lower index."""
  train = np.asarray(train, float)
  query = np.asarray(query, float)
  out = np.empty((len(query), k), dtype=int)
  for start in range(0, len(query), chunk):
    q = query[start:start + chunk]
    d2 = ((q[:, None, :] - train[None, :, :]) ** 2).sum(axis=2)
    out[start:start + chunk] = np.argsort(d2, axis=1, kind="stable")[:, :k]
  return out


def quantile_bin(values, bins: int) -> np.ndarray:
  """Bin index of each value among ``bins`` quantile bins (merged on ties)."""
  values = np.asarray(values, float)
  edges = np.unique(np.quantile(values, np.linspace(0, 1, bins + 1)[1:-1]))
  return np.searchsorted(edges, values, side="right")


def group_ids(E, bins: Optional[int] = None) -> np.ndarray:
  """Integer group labels 0..K-1 for the rows of ``E``.

  With ``bins=None`` every distinct row of ``E`` is its own group; otherwise
  each column is cut into ``bins`` quantile bins and the groups are the
  occupied cells of the product grid.
  """
  E = np.asarray(E, float)
  if E.ndim == 1:
    E = E[:, None]
  if bins is not None:
    if bins < 1:
      raise core.DegenerateGroup("need at least one bin, got %d" % bins)
    E = np.column_stack([quantile_bin(E[:, j], bins) for j in range(E.shape[1])])
  _, labels = np.unique(E, axis=0, return_inverse=True)
  return labels.reshape(-1)


def discretize(E, bins: Optional[int] = None) -> np.ndarray:
  """Group labels for directional analyses.

  Columns with at most ``default_bins(n)`` distinct values are used as is;
  anything else is quantile-binned (``bins`` or the default count).
  """
  E = np.asarray(E, float)
  if E.ndim == 1:
    E = E[:, None]
  n = E.shape[0]
  if bins is None:
    distinct = len(np.unique(E, axis=0))
    if distinct <= default_bins(n):
      return group_ids(E)
    bins = default_bins(n)
  return group_ids(E, bins)


@dataclasses.dataclass
class ConditionalEstimator:
  """A fitted estimate of ``E[z | e]``; ``fitted`` holds the training rows."""

  method: str
  fitted: np.ndarray
  predict_fn: object = None

  def __call__(self, e) -> np.ndarray:
    return self.predict_fn(np.asarray(e, float))


def _group_means(Z, labels):
  K = labels.max() + 1
  counts = np.bincount(labels, minlength=K)
  if np.any(counts == 0):
    raise core.DegenerateGroup("empty group after discretization")
  sums = np.zeros((K, Z.shape[1]))
  np.add.at(sums, labels, Z)
  return sums / counts[:, None]


def fit_conditional(z, e, method: str = "group-mean", bins: Optional[int] = None,
                    k: Optional[int] = None) -> ConditionalEstimator:
  """Estimates ``E[z | e]`` by group means, quantile-bin means or k-NN."""
  Z = np.asarray(z, float)
  if Z.ndim == 1:
    Z = Z[:, None]
  E = np.asarray(e, float)
  if E.ndim == 1:
    E = E[:, None]
  n = Z.shape[0]
  if E.shape[0] != n:
    raise ValueError("z and e have different row counts")

  if method == "quantile-bin":
    bins = bins or default_bins(n)
    if bins ** E.shape[1] > n:
      warnings.warn(
          "%d^%d quantile bins exceed %d rows; using k-NN" %
          (bins, E.shape[1], n), core.DimensionTooHigh)
      method = "knn"
  if method == "group-mean":
    keys, labels = np.unique(E, axis=0, return_inverse=True)
    labels = labels.reshape(-1)
    means = _group_means(Z, labels)

    def predict(e_new):
      e_new = np.atleast_2d(e_new)
      out = np.empty((len(e_new), Z.shape[1]))
      for i, row in enumerate(e_new):
        hit = np.flatnonzero(np.all(keys == row, axis=1))
        if not hit.size:
          raise core.ConditioningFailure("unseen group %s" % (row,))
        out[i] = means[hit[0]]
      return out

    return ConditionalEstimator("group-mean", means[labels], predict)
  if method == "quantile-bin":
    cols = []
    edge_list = []
    for j in range(E.shape[1]):
      edges = np.unique(np.quantile(E[:, j],
                                    np.linspace(0, 1, bins + 1)[1:-1]))
      edge_list.append(edges)
      cols.append(np.searchsorted(edges, E[:, j], side="right"))
    cells = np.column_stack(cols)
    keys, labels = np.unique(cells, axis=0, return_inverse=True)
    labels = labels.reshape(-1)
    means = _group_means(Z, labels)

    def predict(e_new):
      e_new = np.atleast_2d(e_new)
      cell = np.column_stack([np.searchsorted(edge_list[j], e_new[:, j],
                                              side="right")
                              for j in range(e_new.shape[1])])
      out = np.empty((len(e_new), Z.shape[1]))
      for i, row in enumerate(cell):
        hit = np.flatnonzero(np.all(keys == row, axis=1))
        if not hit.size:
          raise core.DegenerateGroup("empty bin %s" % (row,))
        out[i] = means[hit[0]]
      return out

    return ConditionalEstimator("quantile-bin", means[labels], predict)
  if method == "knn":
    k = k or int(math.ceil(math.sqrt(n)))
    if not 1 <= k <= n:
      raise core.ConditioningFailure(
          "k-NN needs 1 <= k <= %d neighbours, got %d" % (n, k))
    scale = robust_scale(E)
    train = E / scale

    def predict(e_new):
      idx = knn_indices(train, np.atleast_2d(e_new) / scale, k)
      return Z[idx].mean(axis=1)

    return ConditionalEstimator("knn", predict(E), predict)
  raise ValueError("unknown conditioning method %r" % method)


@dataclasses.dataclass(frozen=True)
class Conditioning:
  """How to estimate conditional means in directional analyses."""

  method: str = "group-mean"
  bins: Optional[int] = None
  k: Optional[int] = None

  def fit(self, z, e) -> ConditionalEstimator:
    return fit_conditional(z, e, self.method, self.bins, self.k)

  @classmethod
  def coerce(cls, cond) -> "Conditioning":
    if cond is None:
      return cls()
    if isinstance(cond, str):
      return cls(cond)
    return cond
