"""Inverse probability weighting for the full-adherence estimand.

Adherent subjects are reweighted by the inverse of their probability of
adhering at all three decision weeks, evaluated from an event model at
their observed troughs.  The default event model is the one that
generated the feedback; a fitted logistic variant supports sensitivity
runs.  Weights are unstabilized (the target regime is deterministic, so
a stabilizing numerator would be a constant and cancel in the weighted
summaries).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import EstimationError
from .trial import Scenario, TrialDataset

IE_SOURCES = ("true_model", "fitted")


@dataclass(frozen=True)
class IEModel:
    """Event-probability model: invlogit(beta * log(E / alpha_t))."""

    beta: float
    alphas: tuple[float, float, float]
    source: str = "true_model"
    beta_se: float | None = None

    def __post_init__(self):
        if not np.isfinite(self.beta):
            raise ValueError("beta must be finite")
        if len(self.alphas) != 3 or any(a <= 0 for a in self.alphas):
            raise ValueError("alphas must be three positive values")
        if not (self.alphas[0] < self.alphas[1] < self.alphas[2]):
            raise ValueError("alphas must be strictly increasing")
        if self.source not in IE_SOURCES:
            raise ValueError(f"unknown source: {self.source!r}")

    def adherence_probs(self, troughs: np.ndarray) -> np.ndarray:
        """P(no event) at each week for observed troughs (n, 3).

        Computed as invlogit(-beta * log(E/alpha)): the exact complement
        of the event probability, stable for extreme exposures.
        """
        return expit(-self.beta * np.log(troughs / np.asarray(self.alphas)))


def true_ie_model(scenario: Scenario) -> IEModel:
    """The event model used to generate the feedback."""
    return IEModel(beta=scenario.beta, alphas=scenario.alphas, source="true_model")


@dataclass(frozen=True)
class WeightVector:
    """Inverse adherence-probability weights over the adherent subjects."""

    subject_ids: np.ndarray
    weights: np.ndarray
    adherence_probs: np.ndarray  # (n, 3)
    truncated: bool

    def __post_init__(self):
        if len(self.subject_ids) != len(self.weights):
            raise ValueError("subject_ids and weights must have equal length")


def compute_weights(ds: TrialDataset, model: IEModel,
                    cap: float | None = None) -> WeightVector:
    """Weights 1 / prod_t P(adhere at week t) for each adherent subject.

    ``cap`` optionally truncates at that quantile of the raw weights.  A
    numerically zero adherence probability yields an infinite weight,
    which is an estimation failure unless a cap is set.
    """
    if ds.regime != "observed":
        raise ValueError("compute_weights requires an observed-regime dataset")
    if cap is not None and not 0.0 < cap <= 1.0:
        raise ValueError("cap must be a quantile in (0, 1]")
    adherent = [s for s in ds.subjects if s.adherent]
    ids = np.array([s.subject_id for s in adherent], dtype=np.int64)
    troughs = np.array([s.troughs[:3] for s in adherent], dtype=float)
    if len(adherent) == 0:
        return WeightVector(ids, np.empty(0), np.empty((0, 3)), truncated=False)
    probs = model.adherence_probs(troughs)
    with np.errstate(divide="ignore"):
        weights = 1.0 / probs.prod(axis=1)
    infinite = ~np.isfinite(weights)
    truncated = False
    if infinite.any() or cap is not None:
        if cap is None:
            raise EstimationError(
                f"{int(infinite.sum())} adherent subject(s) with numerically "
                f"zero adherence probability; set a weight cap to truncate")
        finite = weights[np.isfinite(weights)]
        if finite.size == 0:
            raise EstimationError("all weights infinite; cannot truncate")
        threshold = float(np.quantile(finite, cap))
        truncated = bool((weights > threshold).any())
        weights = np.minimum(weights, threshold)
    return WeightVector(ids, weights, probs, truncated=truncated)


def fit_ie_model(ds: TrialDataset,
                 init_alphas: tuple[float, float, float] | None = None) -> IEModel:
    """Maximum-likelihood logistic event model from the observed events.

    Regresses the week-t event indicator on log(E_t / alpha_t_init) with
    week-specific intercepts, then maps the intercepts back to fitted
    thresholds.  Requires both event outcomes at every week.
    """
    if ds.regime != "observed":
        raise ValueError("fit_ie_model requires an observed-regime dataset")
    import statsmodels.api as sm

    alphas0 = np.asarray(init_alphas if init_alphas is not None
                         else ds.scenario.alphas, dtype=float)
    troughs = np.array([s.troughs[:3] for s in ds.subjects], dtype=float)
    flags = np.array([s.ie_flags for s in ds.subjects], dtype=float)
    for week in range(3):
        if flags[:, week].min() == flags[:, week].max():
            raise EstimationError(
                f"week {week + 1}: all event indicators identical (separation)")
    n = troughs.shape[0]
    x = np.log(troughs / alphas0).reshape(-1)          # subject-major, week-minor
    week_dummies = np.tile(np.eye(3), (n, 1))
    X = np.column_stack([week_dummies, x])
    y = flags.reshape(-1)
    result = sm.Logit(y, X).fit(disp=0)
    c1, c2, c3, beta_hat = result.params
    beta_se = float(result.bse[3])
    if abs(beta_hat) > 1e-8:
        alphas = tuple(float(a * np.exp(-c / beta_hat))
                       for a, c in zip(alphas0, (c1, c2, c3)))
        if not (0 < alphas[0] < alphas[1] < alphas[2]):
            alphas = tuple(float(a) for a in alphas0)
    else:
        # slope indistinguishable from zero: thresholds not identified
        alphas = tuple(float(a) for a in alphas0)
    return IEModel(beta=float(beta_hat), alphas=alphas, source="fitted",
                   beta_se=beta_se)


def weighted_summary(exposures: np.ndarray, weights: np.ndarray) -> tuple[float, float]:
    """Weighted mean and SD with the frequency-weight convention
    ``sd = sqrt(sum w (x - mean)^2 / sum w)`` (uniform weights give the
    ordinary population mean/SD)."""
    x = np.asarray(exposures, dtype=float)
    w = np.asarray(weights, dtype=float)
    if x.shape != w.shape:
        raise ValueError("exposures and weights must have equal length")
    if (w < 0).any():
        raise ValueError("weights must be nonnegative")
    total = w.sum()
    if not total > 0:
        raise ValueError("weights must not be all zero")
    if not np.isfinite(total):
        raise EstimationError("infinite weights in summary")
    mean = float((w * x).sum() / total)
    sd = float(np.sqrt((w * (x - mean) ** 2).sum() / total))
    return mean, sd
