"""Scenario orchestration and deterministic summary emission.

``run_scenario`` simulates the observed and adherence-forced datasets,
computes the naive summaries (intent-to-treat, per-protocol), fits the
three estimators on the observed data only, Monte Carlos the
counterfactual week-8 troughs, and assembles one row per (arm, method)
with means, SDs and ratios to the adherence-forced reference.  Estimator
failures become row statuses; the run continues.

Summary rows serialize to CSV/JSON with six decimal places and LF
endings; repeat runs with the same configuration are byte-identical.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import ipw, nlme, standardize, streams
from .errors import EstimationError, PositivityError
from .trial import (TRIAL_ARMS, Scenario, TrialDataset, per_protocol_filter,
                    simulate_ground_truth, simulate_trial)

METHODS = ("ground_truth", "intent_to_treat", "per_protocol",
           "standardization", "nlme", "ipw")

FAILURE_STATUSES = ("positivity_failed", "fit_failed", "not_converged",
                    "infinite_weights", "empty")


@dataclass(frozen=True)
class SummaryRow:
    scenario: str
    arm: int
    method: str
    n: int
    mean: float
    sd: float
    rel_mean: float
    rel_sd: float
    status: str = "ok"


@dataclass(frozen=True)
class RunOptions:
    """Estimation-stage knobs (the scenario fixes the data generation)."""

    draws: int = 5000
    ipw_cap: float | None = None
    ie_source: str = "true_model"
    fit_init: object | None = None         # PopulationParams or None
    laplace_cfg: object | None = None      # LaplaceConfig or None

    def __post_init__(self):
        if self.draws < 1:
            raise ValueError("draws must be positive")
        if self.ie_source not in ipw.IE_SOURCES:
            raise ValueError(f"unknown ie_source: {self.ie_source!r}")


@dataclass
class ScenarioResult:
    """Everything a run produced (rows plus reusable artifacts)."""

    rows: list[SummaryRow]
    observed: TrialDataset
    ground_truth: TrialDataset
    fit: nlme.NLMEFit | None
    e1_models: dict
    cond_models: dict          # arm_id -> {t: CondModel}
    ie_model: ipw.IEModel | None
    weights: dict              # arm_id -> WeightVector
    samples: dict = field(default_factory=dict)  # (arm_id, method) -> np.ndarray


def _mean_sd(values: np.ndarray) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std())


def _week8(ds: TrialDataset, arm_id: int) -> np.ndarray:
    return np.array([s.troughs[3] for s in ds.arm_subjects(arm_id)])


def run_scenario_detailed(scenario: Scenario,
                          options: RunOptions | None = None) -> ScenarioResult:
    opts = options or RunOptions()
    observed = simulate_trial(scenario)
    reference = simulate_ground_truth(scenario)
    # estimators must never see the adherence-forced dataset
    assert observed.regime == "observed"
    name = scenario.variant

    gt_stats = {arm.id: _mean_sd(_week8(reference, arm.id)) for arm in TRIAL_ARMS}

    # --- fits on observed data only -------------------------------------
    e1_models: dict = {}
    cond_models: dict = {}
    seq_errors: dict = {}
    for arm in TRIAL_ARMS:
        sub = TrialDataset(scenario=scenario, regime="observed",
                           subjects=observed.arm_subjects(arm.id))
        try:
            e1_models[arm.id] = standardize.fit_e1_model(sub)[arm.id]
            cond_models[arm.id] = {
                t: standardize.fit_cond_model(sub, t)[arm.id] for t in (2, 3, 4)}
        except EstimationError as exc:
            seq_errors[arm.id] = exc

    fit = None
    fit_error = None
    try:
        fit = nlme.fit_nlme(observed, init=opts.fit_init, cfg=opts.laplace_cfg)
    except Exception as exc:  # fit blowups degrade to row status
        fit_error = exc

    ie_model = None
    ie_error = None
    try:
        if opts.ie_source == "true_model":
            ie_model = ipw.true_ie_model(scenario)
        else:
            ie_model = ipw.fit_ie_model(observed)
    except EstimationError as exc:
        ie_error = exc

    rows: list[SummaryRow] = []
    weights: dict = {}
    samples: dict = {}
    for arm in TRIAL_ARMS:
        gt_mean, gt_sd = gt_stats[arm.id]
        gt_n = len(reference.arm_subjects(arm.id))
        rows.append(SummaryRow(name, arm.id, "ground_truth", gt_n,
                               gt_mean, gt_sd, 1.0, 1.0))

        itt = _week8(observed, arm.id)
        m, s = _mean_sd(itt)
        rows.append(SummaryRow(name, arm.id, "intent_to_treat", len(itt),
                               m, s, m / gt_mean, s / gt_sd))

        pp = _week8(per_protocol_filter(observed), arm.id)
        if len(pp) == 0:
            rows.append(SummaryRow(name, arm.id, "per_protocol", 0,
                                   math.nan, math.nan, math.nan, math.nan,
                                   status="empty"))
        else:
            m, s = _mean_sd(pp)
            rows.append(SummaryRow(name, arm.id, "per_protocol", len(pp),
                                   m, s, m / gt_mean, s / gt_sd))

        # sequential standardization
        if arm.id in seq_errors:
            status = ("positivity_failed"
                      if isinstance(seq_errors[arm.id], PositivityError)
                      else "fit_failed")
            rows.append(SummaryRow(name, arm.id, "standardization", 0,
                                   math.nan, math.nan, math.nan, math.nan,
                                   status=status))
        else:
            rng = streams.generator(scenario.seed, arm.id, streams.GF)
            try:
                sample = standardize.gformula_sample(
                    e1_models[arm.id], cond_models[arm.id], arm,
                    opts.draws, rng)
                samples[(arm.id, "standardization")] = sample
                m, s = _mean_sd(sample)
                rows.append(SummaryRow(name, arm.id, "standardization",
                                       opts.draws, m, s,
                                       m / gt_mean, s / gt_sd))
            except PositivityError:
                rows.append(SummaryRow(name, arm.id, "standardization", 0,
                                       math.nan, math.nan, math.nan, math.nan,
                                       status="positivity_failed"))

        # mixed-effects standardization
        if fit is None:
            rows.append(SummaryRow(name, arm.id, "nlme", 0,
                                   math.nan, math.nan, math.nan, math.nan,
                                   status="fit_failed"))
        else:
            rng = streams.generator(scenario.seed, arm.id, streams.CF)
            import warnings as _warnings
            with _warnings.catch_warnings():
                _warnings.simplefilter("ignore")
                sample = nlme.simulate_counterfactual_nlme(
                    fit, arm, opts.draws, rng)
            samples[(arm.id, "nlme")] = sample
            m, s = _mean_sd(sample)
            rows.append(SummaryRow(name, arm.id, "nlme", opts.draws, m, s,
                                   m / gt_mean, s / gt_sd,
                                   status="ok" if fit.converged else "not_converged"))

        # inverse probability weighting
        if ie_model is None:
            rows.append(SummaryRow(name, arm.id, "ipw", 0,
                                   math.nan, math.nan, math.nan, math.nan,
                                   status="fit_failed"))
        else:
            sub = TrialDataset(scenario=scenario, regime="observed",
                               subjects=observed.arm_subjects(arm.id))
            try:
                wv = ipw.compute_weights(sub, ie_model, cap=opts.ipw_cap)
                weights[arm.id] = wv
                if len(wv.weights) == 0:
                    raise EstimationError("no adherent subjects")
                adherent_e4 = _week8(per_protocol_filter(sub), arm.id)
                m, s = ipw.weighted_summary(adherent_e4, wv.weights)
                rows.append(SummaryRow(name, arm.id, "ipw", len(wv.weights),
                                       m, s, m / gt_mean, s / gt_sd,
                                       status="truncated" if wv.truncated else "ok"))
            except EstimationError as exc:
                status = ("infinite_weights" if "zero adherence" in str(exc)
                          else "fit_failed")
                rows.append(SummaryRow(name, arm.id, "ipw", 0,
                                       math.nan, math.nan, math.nan, math.nan,
                                       status=status))
    if fit_error is not None and fit is None:
        pass  # rows already carry fit_failed
    if ie_error is not None and ie_model is None:
        pass
    return ScenarioResult(rows=rows, observed=observed, ground_truth=reference,
                          fit=fit, e1_models=e1_models, cond_models=cond_models,
                          ie_model=ie_model, weights=weights, samples=samples)


def run_scenario(scenario: Scenario, options: RunOptions | None = None) -> list[SummaryRow]:
    """Simulate, estimate and summarize one scenario (rows only)."""
    return run_scenario_detailed(scenario, options).rows


# ---------------------------------------------------------------------------
# Emission

SUMMARY_COLUMNS = ("scenario", "arm", "method", "n", "mean", "sd",
                   "rel_mean", "rel_sd", "status")


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def emit(rows: list[SummaryRow], fmt: str, path) -> None:
    """Write rows as CSV or JSON (six decimals, LF endings, stable order)."""
    if not rows:
        raise ValueError("no rows to emit")
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(SUMMARY_COLUMNS)
            for r in rows:
                writer.writerow([r.scenario, r.arm, r.method, r.n,
                                 _fmt(r.mean), _fmt(r.sd),
                                 _fmt(r.rel_mean), _fmt(r.rel_sd), r.status])
    elif fmt == "json":
        payload = [{
            "scenario": r.scenario, "arm": r.arm, "method": r.method,
            "n": r.n, "mean": _fmt(r.mean), "sd": _fmt(r.sd),
            "rel_mean": _fmt(r.rel_mean), "rel_sd": _fmt(r.rel_sd),
            "status": r.status,
        } for r in rows]
        with open(path, "w", newline="") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
    else:
        raise ValueError(f"unknown format: {fmt!r}")


def read_summary_csv(path) -> list[SummaryRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != SUMMARY_COLUMNS:
            raise ValueError(f"unexpected summary header: {header}")
        for rec in reader:
            rows.append(SummaryRow(
                scenario=rec[0], arm=int(rec[1]), method=rec[2], n=int(rec[3]),
                mean=float(rec[4]), sd=float(rec[5]), rel_mean=float(rec[6]),
                rel_sd=float(rec[7]), status=rec[8]))
    return rows
