"""Small bundled datasets."""

from __future__ import annotations

import numpy as np

from svalues.core import Dataset

_X123 = [10, 8, 13, 9, 11, 14, 6, 4, 12, 7, 5]
_ANSCOMBE = {
    1: (_X123, [8.04, 6.95, 7.58, 8.81, 8.33, 9.96, 7.24, 4.26, 10.84, 4.82,
                5.68]),
    2: (_X123, [9.14, 8.14, 8.74, 8.77, 9.26, 8.10, 6.13, 3.10, 9.13, 7.26,
                4.74]),
    3: (_X123, [7.46, 6.77, 12.74, 7.11, 7.81, 8.84, 6.08, 5.39, 8.15, 6.42,
                5.73]),
    4: ([8, 8, 8, 8, 8, 8, 8, 19, 8, 8, 8],
        [6.58, 5.76, 7.71, 8.84, 8.47, 7.04, 5.25, 12.50, 5.56, 7.91, 6.89]),
}


def anscombe(which: int) -> Dataset:
  """Set ``which`` (1-4) of Anscombe's quartet with columns ``x`` and ``y``."""
  x, y = _ANSCOMBE[which]
  return Dataset.from_columns({"x": x, "y": y})


# Regression of y = x + x^2 / 2 + noise on x has slope 1 + mean(x) when
# x ~ N(mean, 1), so the train and shifted slopes differ by construction.
SHIFT_TRAIN_SLOPE = 1.0
SHIFT_TARGET_SLOPE = 2.0


def covariate_shift(n_train: int = 2000, n_shift: int = 2000,
                    seed: int = 0, noise: float = 0.5):
  """Training sample with x ~ N(0, 1) and a shifted sample with x ~ N(1, 1).

  Returns ``(train, shifted)``; both have columns ``x`` and ``y``.
  """
  rng = np.random.default_rng(seed)

  def draw(mean, n):
    x = rng.normal(mean, 1.0, n)
    y = x + 0.5 * x ** 2 + noise * rng.standard_normal(n)
    return Dataset.from_columns({"x": x, "y": y})

  return draw(0.0, n_train), draw(1.0, n_shift)
