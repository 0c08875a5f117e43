"""Sequential parametric standardization conditioning on earlier exposures.

Two fitted pieces per arm:

* a lognormal model for the dose-normalized first trough:
  ``log(E1 / d1) = beta0 + gamma0 * eps``;
* for each later week t (2..4), a linear conditional model whose location
  depends on the planned doses times the dose-normalized first trough,
  ``E_t = beta_{t,0} + sum_tau beta_{t,tau} * d_tau * E_norm + gamma * eps``,
  with a separate residual scale ``gamma`` for each (previous dose,
  current dose) pair.

Fitting conditions on the treatment arm and on adherence through week
t-1, under which the realized doses equal the planned ladder.  The
counterfactual sampler chains the fitted models forward with the planned
doses and all events set to zero; a planned dose pair without a fitted
scale stratum is a positivity violation and raises instead of
extrapolating.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import EstimationError, PositivityError
from .trial import Arm, TrialDataset


@dataclass(frozen=True)
class E1Model:
    """Location/scale of the log dose-normalized first trough."""

    beta0: float
    gamma0: float

    def __post_init__(self):
        if self.gamma0 <= 0:
            raise ValueError("gamma0 must be positive")


@dataclass(frozen=True)
class CondModel:
    """Linear conditional model for the trough at week index t (2..4)."""

    t: int
    beta: tuple[float, ...]                       # intercept + t dose terms
    scales: Mapping[tuple[float, float], float]   # (d_{t-1}, d_t) -> residual SD

    def __post_init__(self):
        if not 2 <= self.t <= 4:
            raise ValueError("t must be in 2..4")
        if len(self.beta) != self.t + 1:
            raise ValueError(f"expected {self.t + 1} coefficients, got {len(self.beta)}")


def _require_observed(ds: TrialDataset, what: str) -> None:
    if ds.regime != "observed":
        raise ValueError(f"{what} requires an observed-regime dataset")


def fit_e1_model(ds: TrialDataset) -> dict[int, E1Model]:
    """Per-arm location/scale of log(E1 / d1)."""
    _require_observed(ds, "fit_e1_model")
    out: dict[int, E1Model] = {}
    for arm_id in ds.arm_ids():
        subs = ds.arm_subjects(arm_id)
        if len(subs) < 2:
            raise EstimationError(f"arm {arm_id}: fewer than 2 subjects")
        loge = np.log([s.troughs[0] / s.dose_amounts[0] for s in subs])
        gamma0 = float(loge.std(ddof=1))
        if gamma0 <= 0.0:
            raise EstimationError(f"arm {arm_id}: degenerate zero-variance first trough")
        out[arm_id] = E1Model(beta0=float(loge.mean()), gamma0=gamma0)
    return out


def fit_cond_model(ds: TrialDataset, t: int) -> dict[int, CondModel]:
    """Per-arm conditional model for the trough at week index t (2..4).

    Uses subjects adherent through week t-1; their realized doses equal
    the planned ladder, so the dose regressors are collinear within an
    arm and the least-squares solution is the minimum-norm one.  The
    fitted location is only ever evaluated at the same planned doses.
    """
    _require_observed(ds, "fit_cond_model")
    if not 2 <= t <= 4:
        raise ValueError("t must be in 2..4")
    out: dict[int, CondModel] = {}
    for arm_id in ds.arm_ids():
        subs = [s for s in ds.arm_subjects(arm_id)
                if not any(s.ie_flags[: t - 1])]
        if len(subs) < 2:
            raise EstimationError(
                f"arm {arm_id}, t={t}: fewer than 2 adherent subjects to fit")
        doses = np.array([s.dose_amounts for s in subs])
        e_norm = np.array([s.troughs[0] / s.dose_amounts[0] for s in subs])
        y = np.array([s.troughs[t - 1] for s in subs])
        X = np.column_stack([np.ones(len(subs))] +
                            [doses[:, tau - 1] * e_norm for tau in range(1, t + 1)])
        beta, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
        resid = y - X @ beta
        scales: dict[tuple[float, float], float] = {}
        pairs = np.column_stack([doses[:, t - 2], doses[:, t - 1]])
        for pair in np.unique(pairs, axis=0):
            sel = (pairs == pair).all(axis=1)
            m = int(sel.sum())
            if m < 2:
                warnings.warn(
                    f"arm {arm_id}, t={t}: dropping dose stratum {tuple(pair)} "
                    f"with {m} residual(s)")
                continue
            rss = float((resid[sel] ** 2).sum())
            scales[(float(pair[0]), float(pair[1]))] = \
                float(np.sqrt(rss / max(m - rank, 1)))
        if not scales:
            raise EstimationError(f"arm {arm_id}, t={t}: no usable dose stratum")
        out[arm_id] = CondModel(t=t, beta=tuple(float(b) for b in beta),
                                scales=scales)
    return out


def gformula_sample(e1: E1Model, conds: Mapping[int, CondModel], arm: Arm,
                    n_draws: int, rng: np.random.Generator,
                    horizon: int = 4) -> np.ndarray:
    """Monte Carlo counterfactual troughs under full adherence.

    Chains the fitted models forward with the planned ladder: samples the
    first trough from the lognormal model, derives the dose-normalized
    exposure, then samples each later trough from its conditional model.
    Returns the week-``horizon`` sample (horizon 1 reproduces the fitted
    first-trough marginal).
    """
    if not 1 <= horizon <= 4:
        raise ValueError("horizon must be in 1..4")
    if n_draws < 1:
        raise ValueError("n_draws must be positive")
    d1 = arm.ladder[0]
    log_e1 = e1.beta0 + np.log(d1) + e1.gamma0 * rng.standard_normal(n_draws)
    current = np.exp(log_e1)
    if horizon == 1:
        return current
    e_norm = current / d1
    for t in range(2, horizon + 1):
        cm = conds.get(t)
        if cm is None:
            raise EstimationError(f"missing conditional model for t={t}")
        pair = (arm.ladder[t - 2], arm.ladder[t - 1])
        scale = cm.scales.get(pair)
        if scale is None:
            raise PositivityError(
                f"arm {arm.id}, t={t}: planned dose pair {pair} has no fitted "
                f"stratum (positivity violation)")
        mean = cm.beta[0] + sum(cm.beta[tau] * arm.ladder[tau - 1] * e_norm
                                for tau in range(1, t + 1))
        current = mean + scale * rng.standard_normal(n_draws)
    return current
