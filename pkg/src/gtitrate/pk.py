"""Structural pharmacokinetic models and residual error.

Provides the closed-form linear one-compartment bolus model (superposition
of exponentials), a saturable-elimination variant integrated with a
fixed-step fourth-order Runge-Kutta scheme, the lognormal mapping from
population parameters and random effects to individual parameters, and the
proportional residual-error transform.

Conventions:

* all concentrations are in mg/L (dose mg divided by volume L), times in
  hours;
* an observation and a dose at the same clock time are ordered
  observation-first, so a dose at exactly time ``t`` does not contribute
  to the concentration at ``t`` (trough samples are taken immediately
  before dosing);
* observed exposures are floored at ``EXPOSURE_FLOOR`` after residual
  noise so that downstream log transforms stay defined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

# mg/L floor for observed exposures after residual noise; only reachable
# when the proportional residual SD is large (stress scenarios).
EXPOSURE_FLOOR = 1e-6


@dataclass(frozen=True)
class DoseEvent:
    """A timed bolus administration."""

    time: float    # hours since first dose
    amount: float  # mg

    def __post_init__(self):
        if self.time < 0:
            raise ValueError(f"dose time must be nonnegative, got {self.time}")
        if self.amount < 0:
            raise ValueError(f"dose amount must be nonnegative, got {self.amount}")


@dataclass(frozen=True)
class PKParams:
    """Individual parameters of the linear one-compartment model."""

    cl: float  # apparent clearance, L/h
    v: float   # apparent volume, L

    def __post_init__(self):
        if self.cl <= 0 or self.v <= 0:
            raise ValueError(f"cl and v must be positive, got cl={self.cl}, v={self.v}")


@dataclass(frozen=True)
class PopulationParams:
    """Population parameters: typical values, between-subject SDs, residual SD.

    ``mu_cl`` and ``mu_v`` are natural-scale typical values; individual
    parameters are the typical value times a lognormal deviation (see
    :func:`individual_params`).
    """

    mu_cl: float     # L/h
    mu_v: float      # L
    omega_cl: float  # SD of the log-scale clearance random effect
    omega_v: float   # SD of the log-scale volume random effect
    xi: float        # proportional residual SD

    def __post_init__(self):
        for name in ("mu_cl", "mu_v", "omega_cl", "omega_v", "xi"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.mu_cl, self.mu_v, self.omega_cl, self.omega_v, self.xi)


@dataclass(frozen=True)
class MMParams:
    """Parameters of the saturable (Michaelis-Menten) elimination model."""

    vmax: float  # mg/h
    km: float    # mg/L
    v: float     # L

    def __post_init__(self):
        for name in ("vmax", "km", "v"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")


def _check_schedule(doses: Sequence[DoseEvent]) -> None:
    for prev, cur in zip(doses, doses[1:]):
        if cur.time <= prev.time:
            raise ValueError("dose times must be strictly increasing")


def conc_linear(params: PKParams, doses: Sequence[DoseEvent], t: float) -> float:
    """Concentration (mg/L) at time ``t`` under linear elimination.

    Exact superposition: each bolus given strictly before ``t`` decays
    exponentially with rate cl/v.  A dose at exactly ``t`` is excluded
    (observation-first ordering).
    """
    if t < 0:
        raise ValueError(f"time must be nonnegative, got {t}")
    _check_schedule(doses)
    k = params.cl / params.v
    total = 0.0
    for d in doses:
        if d.time < t:
            total += d.amount * math.exp(-k * (t - d.time))
    return total / params.v


def _mm_rate(c: float, vmax: float, km: float, v: float) -> float:
    return -(vmax / v) * c / (km + c)


def _mm_integrate(c: float, t0: float, t1: float, step: float,
                  vmax: float, km: float, v: float) -> float:
    """RK4 integration of the saturable elimination ODE over [t0, t1]."""
    span = t1 - t0
    if span <= 0:
        return c
    n = max(1, math.ceil(span / step))
    h = span / n
    for _ in range(n):
        k1 = _mm_rate(c, vmax, km, v)
        k2 = _mm_rate(c + 0.5 * h * k1, vmax, km, v)
        k3 = _mm_rate(c + 0.5 * h * k2, vmax, km, v)
        k4 = _mm_rate(c + h * k3, vmax, km, v)
        c += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return c


def conc_mm(params: MMParams, doses: Sequence[DoseEvent], t: float, step: float) -> float:
    """Concentration (mg/L) at time ``t`` under saturable elimination.

    dC/dt = -(vmax/v) * C / (km + C) with instantaneous jumps amount/v at
    each dose time; fixed-step RK4 between dose events.  ``step`` must not
    exceed the smallest inter-dose gap.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    if t < 0:
        raise ValueError(f"time must be nonnegative, got {t}")
    _check_schedule(doses)
    active = [d for d in doses if d.time < t]
    if len(active) >= 2:
        min_gap = min(b.time - a.time for a, b in zip(active, active[1:]))
        if step > min_gap:
            raise ValueError(
                f"step {step} exceeds smallest inter-dose gap {min_gap}")
    c = 0.0
    t_cur = None
    for d in active:
        if t_cur is not None:
            c = _mm_integrate(c, t_cur, d.time, step, params.vmax, params.km, params.v)
        c += d.amount / params.v
        t_cur = d.time
    if t_cur is not None:
        c = _mm_integrate(c, t_cur, t, step, params.vmax, params.km, params.v)
    return c


def individual_params(pop: PopulationParams, eta_cl: float, eta_v: float) -> PKParams:
    """Individual parameters: typical value times lognormal deviation."""
    return PKParams(cl=pop.mu_cl * math.exp(eta_cl), v=pop.mu_v * math.exp(eta_v))


def apply_residual(conc: float, xi: float, eps: float) -> float:
    """Observed exposure conc * (1 + xi * eps), floored at EXPOSURE_FLOOR."""
    if conc < 0:
        raise ValueError(f"concentration must be nonnegative, got {conc}")
    return max(conc * (1.0 + xi * eps), EXPOSURE_FLOOR)
