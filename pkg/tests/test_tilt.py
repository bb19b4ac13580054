import math

import numpy as np
import pytest

import oracles
from svalues import core, estimands, mm, tilt
from svalues.core import Dataset
from svalues.datasets import anscombe


def test_already_satisfied():
  sol = tilt.solve_tilt(tilt.TiltProblem([-1.0, 1.0], 0.0))
  assert sol.objective == pytest.approx(1.0)
  np.testing.assert_allclose(sol.lambda_star, 0.0, atol=1e-12)
  assert sol.attained


def test_two_point_closed_form():
  lam_ref, s_ref = oracles.two_point_svalue(-1.0, 2.0, 0.25)
  lam_grid, s_grid = oracles.lambda_grid_svalue([-1, 2, 2, 2])
  sol = tilt.solve_tilt(tilt.TiltProblem([-1.0, 2, 2, 2], 0.0))
  assert lam_ref == pytest.approx(-math.log(6) / 3)
  assert sol.lambda_star[0] == pytest.approx(lam_ref, abs=1e-9)
  assert sol.objective == pytest.approx(s_ref, abs=1e-12)
  assert sol.objective == pytest.approx(s_grid, abs=1e-8)


def test_positive_support_diverges():
  sol = tilt.solve_tilt(tilt.TiltProblem([1.0, 2.0, 3.0], 0.0))
  assert sol.objective == 0.0
  assert not sol.attained
  np.testing.assert_allclose(sol.diverged_direction, [-1.0])


def test_hull_boundary_not_attained():
  # two rows sit exactly at the target, the rest on one side
  sol = tilt.solve_tilt(tilt.TiltProblem([0.0, 0.0, 1.0, 2.0], 0.0))
  assert sol.objective == pytest.approx(0.5)
  assert not sol.attained
  np.testing.assert_allclose(sol.weights, [0.5, 0.5, 0, 0])


def test_boundary_face_in_two_dimensions():
  # target (0, 0) lies on the edge between (-1, 0) and (1, 0)
  V = np.array([[-1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [2.0, 3.0]])
  sol = tilt.solve_tilt(tilt.TiltProblem(V, [0.0, 0.0]))
  assert not sol.attained
  assert sol.objective == pytest.approx(0.5, abs=1e-10)
  d = sol.diverged_direction
  assert d is not None and np.all(V[2:] @ d < 0)


def test_outside_hull_two_dimensions():
  V = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
  sol = tilt.solve_tilt(tilt.TiltProblem(V, [0.0, 0.0]))
  assert sol.objective == 0.0
  assert np.all(V @ sol.diverged_direction < 0)


def test_nonfinite_scores():
  with pytest.raises(core.NonFiniteScore):
    tilt.TiltProblem([1.0, np.inf], 0.0)


def test_global_minimum_spot_check_and_scale_equivariance():
  rng = np.random.default_rng(3)
  for _ in range(10):
    n, p = rng.integers(5, 40), rng.integers(1, 4)
    V = rng.normal(size=(n, p))
    c = 0.3 * V.mean(axis=0)
    sol = tilt.solve_tilt(tilt.TiltProblem(V, c))
    f0 = tilt.tilt_objective(V, c, sol.lambda_star)
    for _ in range(64):
      step = rng.normal(size=p)
      step *= rng.uniform() / np.linalg.norm(step)
      assert f0 <= tilt.tilt_objective(V, c, sol.lambda_star + step) + 1e-12
    a = rng.uniform(0.1, 10)
    scaled = tilt.solve_tilt(tilt.TiltProblem(a * V, a * c))
    assert scaled.objective == pytest.approx(sol.objective, abs=1e-8)
    np.testing.assert_allclose(scaled.lambda_star * a, sol.lambda_star,
                               atol=1e-8)
    assert np.max(np.abs(sol.weights @ V - c)) <= 1e-7
    assert abs(math.exp(-core.kl_to_uniform(sol.weights)) -
               sol.objective) <= 1e-8


def test_agrees_with_generic_constrained_optimizer():
  rng = np.random.default_rng(4)
  V = rng.normal(size=(8, 2))
  c = np.array([0.2, -0.1]) + V.mean(axis=0)
  ref = oracles.slsqp_min_kl(V, c)
  sol = tilt.solve_tilt(tilt.TiltProblem(V, c))
  assert -math.log(sol.objective) == pytest.approx(ref.fun, abs=1e-6)


def test_svalue_mean_trivial_and_positive():
  d = Dataset.from_columns({"z": [1.0, 2.0, 4.0, 5.0]})
  r = tilt.svalue_mean(d, "z", 3.0)
  assert r.s_value == pytest.approx(1.0)
  assert np.allclose(r.lam, 0)
  r = tilt.svalue_mean(d, "z", 0.0)
  assert r.s_value == 0.0 and not r.attained and r.kl == math.inf


def _dir_data():
  return Dataset.from_columns({"z": [-1.0, 1, 2, 4], "e": [0, 0, 1, 1]})


def test_directional_boundary():
  r = tilt.svalue_mean_directional(_dir_data(), "z", ["e"], 0.0)
  assert r.s_value == pytest.approx(0.5, abs=1e-10)
  np.testing.assert_allclose(r.weights, [0.5, 0.5, 0, 0], atol=1e-12)


def test_directional_positive_groups_and_constant_e():
  d = Dataset.from_columns({"z": [-1.0, 3, 2, 4], "e": [0, 0, 1, 1]})
  assert tilt.svalue_mean_directional(d, "z", ["e"], 0.0).s_value == 0.0
  d = Dataset.from_columns({"z": [-1.0, 3, 2, 4], "e": [5, 5, 5, 5]})
  assert tilt.svalue_mean_directional(d, "z", ["e"], 0.0).s_value == 0.0
  assert tilt.svalue_mean_directional(d, "z", ["e"], 2.0).s_value == \
      pytest.approx(1.0)


def test_directional_within_group_permutation_invariance():
  rng = np.random.default_rng(5)
  z = rng.normal(size=40) + 0.3
  e = rng.integers(0, 5, size=40).astype(float)
  base = tilt.svalue_mean_directional(
      Dataset.from_columns({"z": z, "e": e}), "z", ["e"], 0.0).s_value
  z2 = z.copy()
  for g in range(5):
    idx = np.flatnonzero(e == g)
    z2[idx] = rng.permutation(z[idx])
  again = tilt.svalue_mean_directional(
      Dataset.from_columns({"z": z2, "e": e}), "z", ["e"], 0.0).s_value
  assert again == pytest.approx(base, abs=1e-10)


def _ols_small():
  return Dataset.from_columns({"x": [0.0, 1.0, 2.0, 3.0],
                               "y": [0.1, 0.9, 2.2, 2.8]})


def test_score_vector_at_fit_is_one():
  d = _ols_small()
  model = estimands.LinearModel("y", ["x"])
  fit = model.fit(d, core.uniform_weights(d.n))
  assert tilt.svalue_score_vector(d, model, fit).s_value == \
      pytest.approx(1.0, abs=1e-12)


def test_score_vector_one_signed_scores_is_zero():
  rng = np.random.default_rng(6)
  x = rng.uniform(1, 2, 30)
  d = Dataset.from_columns({"x": x, "y": 2 * x + 0.1 * rng.normal(size=30)})
  model = estimands.LinearModel("y", ["x"])
  assert tilt.svalue_score_vector(d, model, [0.0, 0.0]).s_value == 0.0


def _perturbed_scores():
  d = _ols_small()
  model = estimands.LinearModel("y", ["x"])
  fit = model.fit(d, core.uniform_weights(d.n))
  eta = fit + np.array([0.1, -0.05])
  return d, model, eta, model.score(eta, d)


@pytest.mark.xfail(strict=True, reason="a 1e-2 feasibility band on a 0.01 "
                   "lattice biases the grid oracle by more than 1e-3")
def test_score_vector_matches_simplex_grid_literal():
  d, model, eta, S = _perturbed_scores()
  ref = oracles.simplex_grid_min_kl(
      lambda W: np.max(np.abs(W @ S), axis=1), 4, 0.0, feas_tol=1e-2)
  s = tilt.svalue_score_vector(d, model, eta).s_value
  assert s == pytest.approx(math.exp(-ref), abs=1e-3)


def test_score_vector_grid_oracle_brackets_from_above():
  d, model, eta, S = _perturbed_scores()
  s = tilt.svalue_score_vector(d, model, eta).s_value
  prev = 1.0
  for tol in (1e-2, 3e-3, 1e-3):
    ref = math.exp(-oracles.simplex_grid_min_kl(
        lambda W: np.max(np.abs(W @ S), axis=1), 4, 0.0, feas_tol=tol))
    assert s <= ref + 1e-12 and ref <= prev
    prev = ref
  assert prev - s < 0.01


def test_score_vector_matches_constrained_optimizer():
  d, model, eta, S = _perturbed_scores()
  ref = oracles.slsqp_min_kl(S, np.zeros(2))
  s = tilt.svalue_score_vector(d, model, eta).s_value
  assert s == pytest.approx(math.exp(-ref.fun), abs=1e-6)


def test_score_vector_directional():
  # conditional score means are zero in every group at eta
  d = Dataset.from_columns({"v": [-1.0, 1, -2, 2], "e": [0, 0, 1, 1]})

  class Identity(estimands.ScoreModel):
    param_names = ("m",)

    def score(self, theta, data):
      return (data.column("v") - theta[0])[:, None]

  r = tilt.svalue_score_vector_directional(d, Identity(), [0.0], ["e"])
  assert r.s_value == pytest.approx(1.0)
  d = Dataset.from_columns({"v": [-1.0, 1, 1, 2, 3, 3], "e": [0, 0, 1, 1, 2, 2]})
  r = tilt.svalue_score_vector_directional(d, Identity(), [0.0], ["e"])
  assert r.s_value >= 2 / 6 - 1e-12
  assert r.s_value == pytest.approx(2 / 6)
  d = Dataset.from_columns({"v": [1.0, 1, 1, 2], "e": [0, 0, 1, 1]})
  assert tilt.svalue_score_vector_directional(
      d, Identity(), [0.0], ["e"]).s_value == 0.0


def test_plugin_single_component():
  d = _ols_small()
  model = estimands.LinearModel("y", ["x"])
  fit = model.fit(d, core.uniform_weights(d.n))
  r = tilt.plugin_single_component(d, model, 1, fit[1])
  assert r.s_value == pytest.approx(1.0) and r.lower_bound
  r3 = tilt.plugin_single_component(anscombe(3), model, "x", 0.0)
  assert r3.s_value == 0.0


def test_plugin_is_below_general():
  rng = np.random.default_rng(7)
  x = rng.normal(size=12)
  d = Dataset.from_columns({"x": x, "y": 0.4 * x + rng.normal(size=12)})
  model = estimands.LinearModel("y", ["x"])
  est = estimands.MEstimatorComponent(model, "x")
  target = est(d) - 0.3
  plug = tilt.plugin_single_component(d, model, "x", target).s_value
  grid = tilt.supinf_single_component(d, model, "x", target).s_value
  general = mm.svalue_general(d, est, target).s_value
  assert plug <= grid + 1e-12
  assert plug <= general + 1e-3
  assert grid <= general + 1e-3


def test_small_shift_expansion():
  z = np.random.default_rng(8).standard_normal(20000)
  z = (z - z.mean()) / z.std()
  d = Dataset.from_columns({"z": z})
  for mu in (0.01, 0.05):
    s = tilt.svalue_mean(d, "z", mu).s_value
    assert abs(s - math.exp(-mu ** 2 / 2)) <= 10 * mu ** 2
