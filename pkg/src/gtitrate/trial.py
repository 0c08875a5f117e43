"""Simulation of the five-arm up-titration trial with exposure-driven
nonadherence.

Trial design
------------
Doses are given at weeks 0, 2, 4 and 6 (0, 336, 672, 1008 hours; one week
is 168 hours).  Trough exposures are observed immediately before each dose
and at week 8 (1344 hours), two weeks after the last dose.  Each arm has a
planned four-step dose ladder:

====  ======================  ====  ====  ====  ====
arm   description             d1    w2    w4    w6
====  ======================  ====  ====  ====  ====
1     target 60               30    60    60    60
2     target 120, slow        30    60    120   120
3     target 120, fast        60    120   120   120
4     target 240, slow        60    120   240   240
5     target 240, fast        60    240   240   240
====  ======================  ====  ====  ====  ====

Nonadherence feedback
---------------------
At each of the weeks 2, 4 and 6 an intercurrent event S_t is drawn with
probability ``invlogit(beta * log(driver / alpha_t))``.  The driver is the
observed trough at that week in the main, nonlinear and high-residual
variants, or the noise-free peak concentration just after the most recent
dose in the ``cmax`` variant.  On an event the subject repeats the current
dose and the remainder of the ladder is delayed (the ladder pointer does
not advance); otherwise the next ladder dose is given.  A subject is
adherent when no event occurred.

The ground-truth regime reuses the same random-effect and residual draws
but forces all events to zero and administers the planned ladder; it is
the target of estimation for the full-adherence estimand.

Scenario variants
-----------------
``main``      linear kinetics, residual SD 0.02.
``nonlinear`` saturable (Michaelis-Menten) kinetics for data generation.
``cmax``      events driven by noise-free post-dose peaks; thresholds are
              the pooled median peaks of an adherence-forced pilot run.
``highres``   main with residual SD 0.3.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import streams
from .pk import (EXPOSURE_FLOOR, DoseEvent, MMParams, PopulationParams,
                 apply_residual, conc_linear, conc_mm, individual_params)

WEEK_HOURS = 168.0
DOSE_TIMES = (0.0, 336.0, 672.0, 1008.0)
OBS_TIMES = (336.0, 672.0, 1008.0, 1344.0)

VARIANTS = ("main", "nonlinear", "cmax", "highres")
REGIMES = ("observed", "ground_truth")

DEFAULT_POP = PopulationParams(mu_cl=0.0025, mu_v=2.0, omega_cl=0.3,
                               omega_v=0.3, xi=0.02)
HIGHRES_XI = 0.3
# Saturable-elimination defaults: low-concentration clearance vmax/km
# matches the linear model's typical clearance.
DEFAULT_MM = MMParams(vmax=0.075, km=30.0, v=2.0)
DEFAULT_ALPHAS = (15.0, 40.0, 100.0)
DEFAULT_BETA = 5.0


@dataclass(frozen=True)
class Arm:
    """A treatment arm: identifier plus planned dose ladder (mg)."""

    id: int
    ladder: tuple[float, float, float, float]

    def __post_init__(self):
        if any(b < a for a, b in zip(self.ladder, self.ladder[1:])):
            raise ValueError(f"ladder must be non-decreasing, got {self.ladder}")


TRIAL_ARMS: tuple[Arm, ...] = (
    Arm(1, (30.0, 60.0, 60.0, 60.0)),
    Arm(2, (30.0, 60.0, 120.0, 120.0)),
    Arm(3, (60.0, 120.0, 120.0, 120.0)),
    Arm(4, (60.0, 120.0, 240.0, 240.0)),
    Arm(5, (60.0, 240.0, 240.0, 240.0)),
)


def arm_by_id(arm_id: int) -> Arm:
    for arm in TRIAL_ARMS:
        if arm.id == arm_id:
            return arm
    raise ValueError(f"unknown arm id: {arm_id}")


def planned_dose(arm: Arm, step: int) -> float:
    """Planned dose (mg) for ladder step 1..4."""
    if not 1 <= step <= 4:
        raise ValueError(f"step must be in 1..4, got {step}")
    return arm.ladder[step - 1]


@dataclass(frozen=True)
class Scenario:
    """Full specification of one simulated trial."""

    variant: str = "main"
    n_per_arm: int = 5000
    seed: int = 1
    beta: float = DEFAULT_BETA
    alphas: tuple[float, float, float] = DEFAULT_ALPHAS
    pop: PopulationParams = DEFAULT_POP
    mm: MMParams = DEFAULT_MM          # used iff variant == "nonlinear"
    cmax_pure_ratio: bool = False      # cmax driver = dose/volume only
    mm_step: float = 4.0               # RK4 step, hours

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant: {self.variant!r}")
        if self.n_per_arm < 1:
            raise ValueError("n_per_arm must be at least 1")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if len(self.alphas) != 3 or any(a <= 0 for a in self.alphas):
            raise ValueError("alphas must be three positive values")
        if not (self.alphas[0] < self.alphas[1] < self.alphas[2]):
            raise ValueError("alphas must be strictly increasing")
        if self.mm_step <= 0:
            raise ValueError("mm_step must be positive")


def make_scenario(variant: str = "main", **overrides) -> Scenario:
    """Scenario factory applying variant presets before explicit overrides."""
    if variant == "highres" and "pop" not in overrides:
        overrides["pop"] = replace(DEFAULT_POP, xi=HIGHRES_XI)
    return Scenario(variant=variant, **overrides)


@dataclass(frozen=True)
class SubjectRecord:
    """One simulated subject."""

    subject_id: int
    arm_id: int
    eta_cl: float
    eta_v: float
    realized_doses: tuple[DoseEvent, DoseEvent, DoseEvent, DoseEvent]
    troughs: tuple[float, float, float, float]   # observed mg/L at weeks 2,4,6,8
    ie_flags: tuple[bool, bool, bool]            # events at weeks 2,4,6
    adherent: bool

    @property
    def dose_amounts(self) -> tuple[float, float, float, float]:
        return tuple(d.amount for d in self.realized_doses)


@dataclass(frozen=True)
class TrialDataset:
    """A simulated dataset: scenario descriptor, regime tag and subjects."""

    scenario: Scenario
    regime: str
    subjects: tuple[SubjectRecord, ...]

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime: {self.regime!r}")

    def arm_subjects(self, arm_id: int) -> tuple[SubjectRecord, ...]:
        return tuple(s for s in self.subjects if s.arm_id == arm_id)

    def arm_ids(self) -> tuple[int, ...]:
        seen: list[int] = []
        for s in self.subjects:
            if s.arm_id not in seen:
                seen.append(s.arm_id)
        return tuple(seen)


def ie_probability(exposure: float, alpha: float, beta: float) -> float:
    """Event probability invlogit(beta * log(exposure / alpha))."""
    if exposure <= 0:
        raise ValueError(f"exposure must be positive, got {exposure}")
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return float(expit(beta * math.log(exposure / alpha)))


# ids are stable under n_per_arm changes: arm-major with a fixed stride
_ARM_ID_STRIDE = 10_000_000


def _subject_id(arm_id: int, index: int) -> int:
    return arm_id * _ARM_ID_STRIDE + index + 1


def simulate_subject(arm: Arm, scenario: Scenario, stream: streams.SubjectStreams,
                     ie_thresholds: Sequence[float] | None = None) -> SubjectRecord:
    """Reference scalar simulation of a single subject.

    ``ie_thresholds`` must be supplied for the ``cmax`` variant (the pooled
    pilot medians computed by :func:`cmax_thresholds`); other variants
    default to the scenario thresholds.
    """
    sc = scenario
    if ie_thresholds is None:
        if sc.variant == "cmax":
            raise ValueError("cmax variant requires explicit ie_thresholds")
        ie_thresholds = sc.alphas
    eta_cl, eta_v = stream.etas()
    eta_cl *= sc.pop.omega_cl
    eta_v *= sc.pop.omega_v
    params = individual_params(sc.pop, eta_cl, eta_v)
    use_mm = sc.variant == "nonlinear"
    if use_mm:
        # Individual saturable-elimination parameters: the clearance effect
        # scales vmax, the volume effect scales v, km is structural.
        mm = MMParams(vmax=sc.mm.vmax * math.exp(eta_cl),
                      km=sc.mm.km, v=sc.mm.v * math.exp(eta_v))

    def true_conc(doses: list[DoseEvent], t: float) -> float:
        if use_mm:
            return conc_mm(mm, doses, t, sc.mm_step)
        return conc_linear(params, doses, t)

    volume = mm.v if use_mm else params.v
    doses = [DoseEvent(DOSE_TIMES[0], arm.ladder[0])]
    pointer = 1
    troughs: list[float] = []
    flags: list[bool] = []
    for k in (1, 2, 3):
        t_obs = OBS_TIMES[k - 1]
        c_true = true_conc(doses, t_obs)
        troughs.append(apply_residual(c_true, sc.pop.xi, stream.eps(k)))
        if sc.variant == "cmax":
            # Peak just after dose k: accumulation before that dose plus the
            # bolus jump, or the pure bolus ratio behind the config switch.
            d_k = doses[k - 1]
            if sc.cmax_pure_ratio:
                driver = d_k.amount / volume
            else:
                driver = true_conc(doses[:k - 1], d_k.time) + d_k.amount / volume
        else:
            driver = troughs[-1]
        p = ie_probability(driver, ie_thresholds[k - 1], sc.beta)
        s_k = stream.ie_uniform(k) < p
        flags.append(bool(s_k))
        next_amount = doses[-1].amount if s_k else arm.ladder[pointer]
        if not s_k:
            pointer += 1
        doses.append(DoseEvent(DOSE_TIMES[k], next_amount))
    troughs.append(apply_residual(true_conc(doses, OBS_TIMES[3]), sc.pop.xi,
                                  stream.eps(4)))
    return SubjectRecord(
        subject_id=_subject_id(arm.id, stream.subject_index),
        arm_id=arm.id,
        eta_cl=eta_cl,
        eta_v=eta_v,
        realized_doses=tuple(doses),
        troughs=tuple(troughs),
        ie_flags=tuple(flags),
        adherent=not any(flags),
    )


class _ArmArrays:
    """Vectorised per-arm simulation state (internal)."""

    __slots__ = ("eta_cl", "eta_v", "eps", "ie_u", "doses", "troughs",
                 "true_troughs", "true_peaks", "flags", "cl", "v")

    def __init__(self, arm: Arm, sc: Scenario):
        n = sc.n_per_arm
        eta_words = streams.raw_blocks(sc.seed, arm.id, streams.ETA, 0, n)
        z = streams.to_normal(eta_words[:, :2])
        self.eta_cl = z[:, 0] * sc.pop.omega_cl
        self.eta_v = z[:, 1] * sc.pop.omega_v
        self.eps = np.column_stack([
            streams.to_normal(streams.raw_blocks(sc.seed, arm.id, streams.EPS, w, n)[:, 0])
            for w in (1, 2, 3, 4)])
        self.ie_u = np.column_stack([
            streams.to_uniform(streams.raw_blocks(sc.seed, arm.id, streams.IE, w, n)[:, 0])
            for w in (1, 2, 3)])
        self.cl = sc.pop.mu_cl * np.exp(self.eta_cl)
        self.v = sc.pop.mu_v * np.exp(self.eta_v)
        self.doses = np.zeros((n, 4))
        self.troughs = np.zeros((n, 4))
        self.true_troughs = np.zeros((n, 4))
        self.true_peaks = np.zeros((n, 3))
        self.flags = np.zeros((n, 3), dtype=bool)


def _linear_trough(cl, v, dose_matrix, obs_index):
    """True concentration at OBS_TIMES[obs_index] under linear kinetics."""
    k = cl / v
    t = OBS_TIMES[obs_index]
    total = np.zeros_like(cl)
    for m in range(obs_index + 1):
        total = total + dose_matrix[:, m] * np.exp(-k * (t - DOSE_TIMES[m]))
    return total / v


def _mm_integrate_vec(c, t0, t1, step, vmax, km, v):
    span = t1 - t0
    n = max(1, math.ceil(span / step))
    h = span / n
    for _ in range(n):
        k1 = -(vmax / v) * c / (km + c)
        c1 = c + 0.5 * h * k1
        k2 = -(vmax / v) * c1 / (km + c1)
        c2 = c + 0.5 * h * k2
        k3 = -(vmax / v) * c2 / (km + c2)
        c3 = c + h * k3
        k4 = -(vmax / v) * c3 / (km + c3)
        c = c + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return c


def _simulate_arm(arm: Arm, sc: Scenario, force_adherence: bool,
                  ie_thresholds: Sequence[float]) -> _ArmArrays:
    st = _ArmArrays(arm, sc)
    use_mm = sc.variant == "nonlinear"
    if use_mm:
        vmax = sc.mm.vmax * np.exp(st.eta_cl)
        volume = sc.mm.v * np.exp(st.eta_v)
        km = sc.mm.km
        c_state = np.zeros(sc.n_per_arm)
    else:
        volume = st.v
    st.doses[:, 0] = arm.ladder[0]
    pointer = np.ones(sc.n_per_arm, dtype=np.intp)
    ladder = np.asarray(arm.ladder)
    for k in (1, 2, 3, 4):
        if use_mm:
            c_state = c_state + st.doses[:, k - 1] / volume
            c_true = _mm_integrate_vec(c_state, DOSE_TIMES[k - 1], OBS_TIMES[k - 1],
                                       sc.mm_step, vmax, km, volume)
            c_state = c_true
        else:
            c_true = _linear_trough(st.cl, st.v, st.doses, k - 1)
        st.true_troughs[:, k - 1] = c_true
        st.troughs[:, k - 1] = np.maximum(
            c_true * (1.0 + sc.pop.xi * st.eps[:, k - 1]), EXPOSURE_FLOOR)
        if k == 4:
            break
        if sc.variant == "cmax":
            if sc.cmax_pure_ratio:
                peak = st.doses[:, k - 1] / volume
            else:
                if k == 1:
                    prior = np.zeros(sc.n_per_arm)
                else:
                    prior = _linear_trough(st.cl, st.v, st.doses[:, :k - 1],
                                           k - 2)
                peak = prior + st.doses[:, k - 1] / volume
            st.true_peaks[:, k - 1] = peak
            driver = peak
        else:
            driver = st.troughs[:, k - 1]
        if force_adherence:
            s_k = np.zeros(sc.n_per_arm, dtype=bool)
        else:
            p = expit(sc.beta * np.log(driver / ie_thresholds[k - 1]))
            s_k = st.ie_u[:, k - 1] < p
        st.flags[:, k - 1] = s_k
        st.doses[:, k] = np.where(s_k, st.doses[:, k - 1], ladder[pointer])
        pointer = pointer + (~s_k)
    return st


def cmax_thresholds(scenario: Scenario) -> tuple[float, float, float]:
    """Event thresholds for the cmax variant.

    Pooled medians, over an adherence-forced pilot simulation of the same
    scenario, of the noise-free peak concentration just after each of the
    first three doses (planned ladder throughout).
    """
    pilots = [_simulate_arm(arm, scenario, force_adherence=True,
                            ie_thresholds=scenario.alphas)
              for arm in TRIAL_ARMS]
    pooled = np.concatenate([st.true_peaks for st in pilots], axis=0)
    return tuple(float(np.median(pooled[:, j])) for j in range(3))


def _records_from_arrays(arm: Arm, sc: Scenario, st: _ArmArrays) -> list[SubjectRecord]:
    n = sc.n_per_arm
    adherent = ~st.flags.any(axis=1)
    records = []
    for i in range(n):
        records.append(SubjectRecord(
            subject_id=_subject_id(arm.id, i),
            arm_id=arm.id,
            eta_cl=float(st.eta_cl[i]),
            eta_v=float(st.eta_v[i]),
            realized_doses=tuple(DoseEvent(DOSE_TIMES[m], float(st.doses[i, m]))
                                 for m in range(4)),
            troughs=tuple(float(x) for x in st.troughs[i]),
            ie_flags=tuple(bool(x) for x in st.flags[i]),
            adherent=bool(adherent[i]),
        ))
    return records


def _resolve_thresholds(scenario: Scenario) -> tuple[float, float, float]:
    if scenario.variant == "cmax":
        return cmax_thresholds(scenario)
    return scenario.alphas


def simulate_trial(scenario: Scenario) -> TrialDataset:
    """Simulate the observed trial (with nonadherence feedback)."""
    thresholds = _resolve_thresholds(scenario)
    records: list[SubjectRecord] = []
    for arm in TRIAL_ARMS:
        st = _simulate_arm(arm, scenario, force_adherence=False,
                           ie_thresholds=thresholds)
        records.extend(_records_from_arrays(arm, scenario, st))
    return TrialDataset(scenario=scenario, regime="observed",
                        subjects=tuple(records))


def simulate_ground_truth(scenario: Scenario) -> TrialDataset:
    """Simulate the adherence-forced regime with shared eta and eps draws."""
    records: list[SubjectRecord] = []
    for arm in TRIAL_ARMS:
        st = _simulate_arm(arm, scenario, force_adherence=True,
                           ie_thresholds=scenario.alphas)
        records.extend(_records_from_arrays(arm, scenario, st))
    return TrialDataset(scenario=scenario, regime="ground_truth",
                        subjects=tuple(records))


def per_protocol_filter(ds: TrialDataset) -> TrialDataset:
    """Subset to adherent subjects (identity on adherence-forced data)."""
    kept = tuple(s for s in ds.subjects if s.adherent)
    return TrialDataset(scenario=ds.scenario, regime=ds.regime, subjects=kept)


# ---------------------------------------------------------------------------
# Dataset CSV interface: one row per subject, '.' decimal, LF endings.

DATASET_COLUMNS = ("subject_id", "arm", "eta_cl", "eta_v",
                   "d1", "d2", "d3", "d4", "e1", "e2", "e3", "e4",
                   "s1", "s2", "s3", "adherent")


def write_dataset_csv(ds: TrialDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(DATASET_COLUMNS)
        for s in ds.subjects:
            writer.writerow([
                s.subject_id, s.arm_id, repr(s.eta_cl), repr(s.eta_v),
                *(repr(a) for a in s.dose_amounts),
                *(repr(e) for e in s.troughs),
                *(int(f) for f in s.ie_flags),
                int(s.adherent),
            ])


def read_dataset_csv(path, scenario: Scenario, regime: str = "observed") -> TrialDataset:
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != DATASET_COLUMNS:
            raise ValueError(f"unexpected dataset header: {header}")
        for row in reader:
            (sid, arm_id, eta_cl, eta_v, d1, d2, d3, d4,
             e1, e2, e3, e4, s1, s2, s3, adherent) = row
            records.append(SubjectRecord(
                subject_id=int(sid),
                arm_id=int(arm_id),
                eta_cl=float(eta_cl),
                eta_v=float(eta_v),
                realized_doses=tuple(DoseEvent(DOSE_TIMES[m], float(d))
                                     for m, d in enumerate((d1, d2, d3, d4))),
                troughs=(float(e1), float(e2), float(e3), float(e4)),
                ie_flags=(bool(int(s1)), bool(int(s2)), bool(int(s3))),
                adherent=bool(int(adherent)),
            ))
    return TrialDataset(scenario=scenario, regime=regime, subjects=tuple(records))


def dataset_arrays(ds: TrialDataset, arm_id: int | None = None) -> dict[str, np.ndarray]:
    """Column arrays for the (optionally arm-restricted) dataset."""
    subs = ds.subjects if arm_id is None else ds.arm_subjects(arm_id)
    return {
        "subject_id": np.array([s.subject_id for s in subs], dtype=np.int64),
        "arm": np.array([s.arm_id for s in subs], dtype=np.int64),
        "doses": np.array([s.dose_amounts for s in subs], dtype=float),
        "troughs": np.array([s.troughs for s in subs], dtype=float),
        "flags": np.array([s.ie_flags for s in subs], dtype=bool),
        "adherent": np.array([s.adherent for s in subs], dtype=bool),
        "eta": np.array([(s.eta_cl, s.eta_v) for s in subs], dtype=float),
    }
