"""Test-only estimands."""

import numpy as np

from svalues.core import Estimand


class SquaredMean(Estimand):
  """``theta(w) = (sum_i w_i z_i)^2 - offset``: a smooth nonlinear estimand."""

  name = "squared_mean"

  def __init__(self, column, offset=1.0):
    self.column = column
    self.offset = offset

  def evaluate(self, data, w):
    w = np.asarray(w, float)
    return float((w @ data.column(self.column) / w.sum()) ** 2 - self.offset)

  def gradient(self, data, w):
    w = np.asarray(w, float)
    z = data.column(self.column)
    return 2 * (w @ z / w.sum()) * z
