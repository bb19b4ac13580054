"""Command-line front end.

Every subcommand reads a CSV table, runs one analysis and writes a JSON
report (to ``--output`` or standard output).  Exit status: 0 when the solver
converged, 2 when it did not (the report is still written), 1 on input
errors.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
import time
from typing import List, Optional, Sequence

import numpy as np

from svalues import core, estimands, mm, tilt, transfer
from svalues.core import Dataset

REPORT_FIELDS = ("command", "config_echo", "s_value", "kl", "lambda",
                 "attained", "converged", "lower_bound", "unstable_flag",
                 "first_order_residual", "iterations", "runtime_ms")

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "s-value report",
    "type": "object",
    "required": list(REPORT_FIELDS),
    "additionalProperties": False,
    "properties": {
        "command": {"type": "string"},
        "config_echo": {"type": "object"},
        "s_value": {"type": "number", "minimum": 0, "maximum": 1},
        "kl": {"type": ["number", "null"], "minimum": 0},
        "lambda": {"type": "array", "items": {"type": "number"}},
        "attained": {"type": "boolean"},
        "converged": {"type": "boolean"},
        "lower_bound": {"type": "boolean"},
        "unstable_flag": {"type": "boolean"},
        "first_order_residual": {"type": ["number", "null"]},
        "iterations": {"type": "integer", "minimum": 0},
        "runtime_ms": {"type": "number", "minimum": 0},
        "weights_path": {"type": "string"},
        "result": {"type": "object"},
    },
}

PROFILE_COLUMNS = ("kl", "theta_min", "theta_max", "delta_neg", "delta_pos")


class ParseError(core.SValueError, ValueError):
  """Malformed input table; ``line`` and ``column`` are 1-based."""

  def __init__(self, message, line=None, column=None):
    where = ""
    if line is not None:
      where = " (line %d" % line + (", column %d)" % column
                                    if column is not None else ")")
    super().__init__(message + where)
    self.line = line
    self.column = column


def _is_number(text):
  try:
    float(text)
    return True
  except ValueError:
    return False


def ingest(path) -> Dataset:
  """Reads a comma-separated numeric table with a header row."""
  with open(path, newline="", encoding="utf-8-sig") as fh:
    rows = list(csv.reader(fh))
  if not rows:
    raise ParseError("empty file", 1)
  header = [h.strip() for h in rows[0]]
  if any(_is_number(h) for h in header):
    raise ParseError("missing header row", 1)
  if any(not h for h in header):
    raise ParseError("empty column name", 1)
  body = []
  for lineno, row in enumerate(rows[1:], start=2):
    if not row or all(not cell.strip() for cell in row):
      continue
    if len(row) != len(header):
      raise ParseError("expected %d fields, got %d" % (len(header), len(row)),
                       lineno)
    values = []
    for col, cell in enumerate(row, start=1):
      try:
        value = float(cell.strip())
      except ValueError:
        raise ParseError("non-numeric cell %r" % cell, lineno, col) from None
      if not math.isfinite(value):
        raise core.NonFiniteValue(
            "non-finite value %r (line %d, column %d)" % (cell, lineno, col))
      values.append(value)
    body.append(values)
  if len(body) < 2:
    raise ParseError("need at least 2 data rows, got %d" % len(body))
  return Dataset(tuple(header), np.array(body))


def read_moments(path):
  """Two-column ``name,value`` table of moment targets (header optional)."""
  names, values = [], []
  with open(path, newline="", encoding="utf-8-sig") as fh:
    for lineno, row in enumerate(csv.reader(fh), start=1):
      if not row or all(not c.strip() for c in row):
        continue
      if len(row) != 2:
        raise ParseError("expected name,value", lineno)
      name, value = row[0].strip(), row[1].strip()
      if not _is_number(value):
        if lineno == 1:
          continue
        raise ParseError("non-numeric target %r" % value, lineno, 2)
      names.append(name)
      values.append(float(value))
  if not names:
    raise ParseError("no moment targets found")
  return transfer.TransferSpec(tuple(names), np.array(values))


def _columns(text: Optional[str]) -> List[str]:
  if not text:
    return []
  return [c.strip() for c in text.split(",") if c.strip()]


@dataclasses.dataclass
class RunConfig:
  command: str
  input: str
  estimand: str = "mean"
  column: Optional[str] = None
  y: Optional[str] = None
  x: tuple = ()
  component: Optional[str] = None
  treatment: Optional[str] = None
  outcome_model: str = "ols"
  by: tuple = ()
  conditioning: str = "group-mean"
  bins: Optional[int] = None
  k: Optional[int] = None
  target: float = 0.0
  threshold: float = core.UNSTABLE_THRESHOLD
  L: float = 1.0
  tol_obj: float = 1e-12
  tol_theta: Optional[float] = None
  max_iter: int = 5000
  seed: int = 0
  output: Optional[str] = None
  weights_out: Optional[str] = None
  no_timing: bool = False

  def echo(self) -> dict:
    out = {}
    for f in dataclasses.fields(self):
      value = getattr(self, f.name)
      out[f.name] = list(value) if isinstance(value, tuple) else value
    return out

  def mm_config(self) -> mm.MMConfig:
    return mm.MMConfig(L=self.L, tol_obj=self.tol_obj,
                       tol_theta=self.tol_theta, max_iter=self.max_iter)


class _Parser(argparse.ArgumentParser):

  def error(self, message):
    self.print_usage(sys.stderr)
    sys.stderr.write("%s: error: %s\n\nreport schema:\n%s\n" %
                     (self.prog, message, json.dumps(REPORT_SCHEMA, indent=2)))
    raise SystemExit(1)


def _add_common(p):
  p.add_argument("--input", required=True, help="CSV file with a header row")
  p.add_argument("--estimand", default=None,
                 choices=("mean", "ols", "glm", "ate", "custom-score"))
  p.add_argument("--column", help="column for mean; score columns for "
                 "custom-score (comma separated)")
  p.add_argument("--y", help="response column")
  p.add_argument("--x", help="covariate columns, comma separated")
  p.add_argument("--component", help="coefficient name or index")
  p.add_argument("--treatment", help="binary treatment column (ate)")
  p.add_argument("--outcome-model", default="ols", choices=("ols", "knn"))
  p.add_argument("--by", help="directional columns, comma separated")
  p.add_argument("--conditioning", default="group-mean",
                 choices=("group-mean", "quantile-bin", "knn"))
  p.add_argument("--bins", type=int, help="quantile bins per column")
  p.add_argument("--k", type=int, help="neighbours for knn")
  p.add_argument("--target", type=float, default=0.0)
  p.add_argument("--threshold", type=float, default=core.UNSTABLE_THRESHOLD)
  p.add_argument("--L", type=float, default=1.0)
  p.add_argument("--tol-obj", type=float, default=1e-12)
  p.add_argument("--tol-theta", type=float)
  p.add_argument("--max-iter", type=int, default=5000)
  p.add_argument("--seed", type=int, default=0)
  p.add_argument("--output", help="JSON report path (default: stdout)")
  p.add_argument("--weights-out", help="write row_index,weight CSV here")
  p.add_argument("--no-timing", action="store_true",
                 help="report runtime_ms as 0 for byte-identical output")


def build_parser() -> argparse.ArgumentParser:
  parser = _Parser(prog="svalues",
                   description="Distributional stability analyses.")
  sub = parser.add_subparsers(dest="command", required=True,
                              parser_class=_Parser)
  p = sub.add_parser("svalue", help="s-value of an estimand")
  _add_common(p)
  p = sub.add_parser("direction", help="directional s-value")
  _add_common(p)
  p = sub.add_parser("coef", help="s-value of one regression coefficient")
  _add_common(p)
  route = p.add_mutually_exclusive_group()
  route.add_argument("--plugin", action="store_true",
                     help="freeze the other coefficients (lower bound)")
  route.add_argument("--nuisance-grid", action="store_true",
                     help="grid search over the other coefficients")
  p = sub.add_parser("profile", help="min/max estimand within KL budgets")
  _add_common(p)
  p.add_argument("--kl-max", type=float, required=True)
  p.add_argument("--grid", type=int, default=50)
  p.add_argument("--table", help="profile CSV path")
  p = sub.add_parser("transfer", help="estimate under projected moments")
  _add_common(p)
  p.add_argument("--moments", required=True, help="name,value CSV")
  p = sub.add_parser("model-transfer", help="risk-constrained reweighting")
  _add_common(p)
  p.add_argument("--test", required=True, help="CSV of the shifted sample")
  p.add_argument("--risk-threshold", type=float,
                 help="target test risk (default: 5-fold CV)")
  p = sub.add_parser("suggest", help="rank columns by directional sensitivity")
  _add_common(p)
  p.add_argument("--candidates", required=True)
  p.add_argument("--kl-budget", type=float, default=0.5)
  p.add_argument("--grid", type=int, default=10)
  return parser


def _config(args) -> RunConfig:
  kind = args.estimand
  if kind is None:
    kind = "ols" if args.command == "coef" or args.command == "model-transfer" \
        else "mean"
  return RunConfig(
      command=args.command, input=args.input, estimand=kind,
      column=args.column, y=args.y, x=tuple(_columns(args.x)),
      component=args.component, treatment=args.treatment,
      outcome_model=args.outcome_model, by=tuple(_columns(args.by)),
      conditioning=args.conditioning, bins=args.bins, k=args.k,
      target=args.target, threshold=args.threshold, L=args.L,
      tol_obj=args.tol_obj, tol_theta=args.tol_theta, max_iter=args.max_iter,
      seed=args.seed, output=args.output, weights_out=args.weights_out,
      no_timing=args.no_timing)


def _need(value, flag):
  if not value:
    raise ParseError("missing required option %s" % flag)
  return value


def _component(cfg):
  comp = _need(cfg.component, "--component")
  return int(comp) if comp.lstrip("-").isdigit() else comp


def _check_columns(data, names):
  for name in names:
    data.column(name)


def build_estimand(cfg: RunConfig, data: Dataset):
  """Returns ``(estimand, data)``; ate replaces the data by its effect column."""
  kind = cfg.estimand
  if kind == "mean":
    col = _need(cfg.column, "--column")
    data.column(col)
    return estimands.mean_estimand(col), data
  if kind in ("ols", "glm"):
    y = _need(cfg.y, "--y")
    x = list(_need(cfg.x, "--x"))
    _check_columns(data, [y] + x)
    if kind == "ols":
      return estimands.ols_coefficient_estimand(y, x, _component(cfg)), data
    return estimands.glm_coefficient_estimand(y, x, _component(cfg)), data
  if kind == "ate":
    y = _need(cfg.y, "--y")
    a = _need(cfg.treatment, "--treatment")
    x = list(_need(cfg.x, "--x"))
    est = estimands.ate_plugin_estimand(data, y, a, x, cfg.outcome_model, cfg.k)
    effect = data.with_column("__effect__", est.effects)
    return estimands.mean_estimand("__effect__"), effect
  raise ParseError("estimand %r is not supported by %s" % (kind, cfg.command))


def _cond(cfg):
  return estimands.Conditioning(cfg.conditioning, cfg.bins, cfg.k)


def _run_svalue(cfg, data):
  if cfg.estimand == "custom-score":
    cols = _columns(_need(cfg.column, "--column"))
    return tilt.svalue_moments(data.columns(cols), 0.0), None
  est, data = build_estimand(cfg, data)
  if isinstance(est, estimands.MeanEstimand):
    return tilt.svalue_mean(data, est.column, cfg.target), None
  return mm.svalue_general(data, est, cfg.target, cfg.mm_config()), None


def _run_direction(cfg, data):
  by = list(_need(cfg.by, "--by"))
  _check_columns(data, by)
  if cfg.estimand == "custom-score":
    cols = _columns(_need(cfg.column, "--column"))
    fitted = _cond(cfg).fit(data.columns(cols), data.columns(by)).fitted
    return tilt.svalue_moments(fitted, 0.0), None
  est, data = build_estimand(cfg, data)
  if isinstance(est, estimands.MeanEstimand):
    return tilt.svalue_mean_directional(data, est.column, by, cfg.target,
                                        _cond(cfg)), None
  report = mm.svalue_general_directional(data, est, by, cfg.target,
                                         cfg.mm_config(), cfg.bins)
  report.diagnostics.pop("labels", None)
  return report, None


def _run_coef(cfg, data, args):
  if cfg.estimand not in ("ols", "glm"):
    raise ParseError("coef needs --estimand ols or glm")
  est, data = build_estimand(cfg, data)
  directional = None
  if cfg.by:
    _check_columns(data, cfg.by)
    directional = (list(cfg.by), _cond(cfg))
  if args.plugin:
    return tilt.plugin_single_component(data, est.model, est.k, cfg.target,
                                        directional), None
  if args.nuisance_grid:
    return tilt.supinf_single_component(data, est.model, est.k, cfg.target,
                                        directional), None
  if directional:
    report = mm.svalue_general_directional(data, est, list(cfg.by),
                                           cfg.target, cfg.mm_config(),
                                           cfg.bins)
    report.diagnostics.pop("labels", None)
    return report, None
  return mm.svalue_general(data, est, cfg.target, cfg.mm_config()), None


def _run_profile(cfg, data, args):
  est, data = build_estimand(cfg, data)
  by = list(cfg.by) or None
  if by:
    _check_columns(data, by)
  points = mm.profile(data, est, args.kl_max, args.grid, by, cfg.mm_config(),
                      cfg.bins)
  s = mm.profile_svalue(points, cfg.target)
  report = core.StabilityReport.from_s(s, attained=s > 0)
  if args.table:
    with open(args.table, "w", newline="") as fh:
      fh.write(",".join(PROFILE_COLUMNS) + "\n")
      for p in points:
        fh.write(",".join("%.12g" % getattr(p, c) for c in PROFILE_COLUMNS) +
                 "\n")
  return report, {"points": len(points), "table": args.table,
                  "theta_uniform": points[0].theta_min}


def _run_transfer(cfg, data, args):
  spec = read_moments(args.moments)
  _check_columns(data, spec.columns)
  est, data = build_estimand(cfg, data)
  res = transfer.transfer_estimate(data, spec, est)
  report = core.StabilityReport.from_weights(
      res.weights, lam=res.lambda_star, converged=res.converged,
      iterations=res.iterations, attained=res.attained)
  naive = est.evaluate(data, core.uniform_weights(data.n))
  return report, {"theta_proj": res.theta_proj, "theta_naive": naive,
                  "moment_residual": res.moment_residual}


def _run_model_transfer(cfg, data, args):
  test = ingest(args.test)
  y = _need(cfg.y, "--y")
  x = list(_need(cfg.x, "--x"))
  _check_columns(data, [y] + x)
  _check_columns(test, [y] + x)
  if cfg.estimand == "glm":
    model = estimands.LogisticModel(y, x)
  elif cfg.estimand == "ols":
    model = estimands.LinearModel(y, x)
  else:
    raise ParseError("model-transfer needs --estimand ols or glm")
  gamma = args.risk_threshold
  cv = None
  if gamma is None:
    gamma, cv = transfer.choose_risk_threshold(data, test, model,
                                               seed=cfg.seed,
                                               cfg=cfg.mm_config())
  res = transfer.model_transfer(data, test, model, gamma, cfg.mm_config())
  if res.report is not None:
    report = res.report
  else:
    report = core.StabilityReport.from_weights(res.weights)
  return report, {"risk_threshold": gamma, "test_risk": res.test_risk,
                  "theta": np.asarray(res.theta).tolist(),
                  "param_names": list(model.param_names), "cv_risk": cv}


def _run_suggest(cfg, data, args):
  est, data = build_estimand(cfg, data)
  cands = _columns(args.candidates)
  _check_columns(data, cands)
  ranking = transfer.suggest_sensitive_columns(
      data, est, cands, args.kl_budget, cfg.target, args.grid,
      cfg.mm_config(), cfg.bins)
  top = ranking[0]["s_value"] if ranking else 0.0
  report = core.StabilityReport.from_s(top, attained=top > 0)
  return report, {"ranking": ranking}


def _json_number(value):
  if value is None:
    return None
  value = float(value)
  return value if math.isfinite(value) else None


def _clean(value):
  if isinstance(value, dict):
    return {k: _clean(v) for k, v in value.items()}
  if isinstance(value, (list, tuple)):
    return [_clean(v) for v in value]
  if isinstance(value, (float, np.floating)):
    return _json_number(value)
  if isinstance(value, np.integer):
    return int(value)
  return value


def make_report(cfg: RunConfig, report: core.StabilityReport, runtime_ms,
                weights_path=None, result=None) -> dict:
  report.threshold = cfg.threshold
  lam = [] if report.lam is None else [
      float(v) for v in np.atleast_1d(report.lam)]
  out = {
      "command": cfg.command,
      "config_echo": cfg.echo(),
      "s_value": float(report.s_value),
      "kl": _json_number(report.kl),
      "lambda": lam,
      "attained": bool(report.attained),
      "converged": bool(report.converged),
      "lower_bound": bool(report.lower_bound),
      "unstable_flag": bool(report.unstable_flag),
      "first_order_residual": _json_number(report.first_order_residual),
      "iterations": int(report.iterations),
      "runtime_ms": 0.0 if cfg.no_timing else float(runtime_ms),
  }
  if weights_path:
    out["weights_path"] = weights_path
  if result is not None:
    out["result"] = _clean(result)
  return out


def write_weights(path, w):
  with open(path, "w", newline="") as fh:
    fh.write("row_index,weight\n")
    for i, value in enumerate(w):
      fh.write("%d,%r\n" % (i, float(value)))


def run(argv: Optional[Sequence[str]] = None) -> int:
  parser = build_parser()
  try:
    args = parser.parse_args(argv)
  except SystemExit as exc:
    return int(exc.code or 0)
  cfg = _config(args)
  start = time.perf_counter()
  try:
    data = ingest(cfg.input)
    handler = {
        "svalue": lambda: _run_svalue(cfg, data),
        "direction": lambda: _run_direction(cfg, data),
        "coef": lambda: _run_coef(cfg, data, args),
        "profile": lambda: _run_profile(cfg, data, args),
        "transfer": lambda: _run_transfer(cfg, data, args),
        "model-transfer": lambda: _run_model_transfer(cfg, data, args),
        "suggest": lambda: _run_suggest(cfg, data, args),
    }[cfg.command]
    report, result = handler()
  except (core.SValueError, KeyError, ValueError, OSError,
          IndexError) as err:
    message = err.args[0] if isinstance(err, KeyError) and err.args else err
    sys.stderr.write("error: %s\n" % message)
    return 1
  runtime = 1000.0 * (time.perf_counter() - start)
  weights_path = None
  if cfg.weights_out and report.weights is not None:
    write_weights(cfg.weights_out, report.weights)
    weights_path = cfg.weights_out
  out = make_report(cfg, report, runtime, weights_path, result)
  text = json.dumps(out, indent=2, allow_nan=False) + "\n"
  if cfg.output:
    with open(cfg.output, "w") as fh:
      fh.write(text)
  else:
    sys.stdout.write(text)
  return 0 if report.converged else 2


def main():
  sys.exit(run())


if __name__ == "__main__":
  main()
