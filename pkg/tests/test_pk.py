"""Structural model, parameter mapping and residual error."""

import math

import numpy as np
import pytest

from gtitrate.pk import (EXPOSURE_FLOOR, DoseEvent, MMParams, PKParams,
                         PopulationParams, apply_residual, conc_linear,
                         conc_mm, individual_params)

TYPICAL = PKParams(cl=0.0025, v=2.0)
ARM5_DOSES = [DoseEvent(0.0, 60.0), DoseEvent(336.0, 240.0),
              DoseEvent(672.0, 240.0), DoseEvent(1008.0, 240.0)]


def superposition_oracle(cl, v, doses, t):
    """High-precision term-by-term evaluation, independent of conc_linear."""
    from mpmath import mp, exp as mexp, mpf
    mp.dps = 50
    total = mpf(0)
    for d in doses:
        if d.time < t:
            total += mpf(d.amount) * mexp(-mpf(cl) / mpf(v) * (mpf(t) - mpf(d.time)))
    return float(total / mpf(v))


class TestConcLinear:
    def test_no_dose_zero_concentration(self):
        assert conc_linear(TYPICAL, [], 100.0) == 0.0

    def test_bolus_peak_is_dose_over_volume(self):
        c = conc_linear(TYPICAL, [DoseEvent(0.0, 30.0)], 1e-9)
        assert c == pytest.approx(15.0, rel=1e-9)

    def test_week8_trough_against_high_precision_oracle(self):
        expected = superposition_oracle(0.0025, 2.0, ARM5_DOSES, 1344.0)
        got = conc_linear(TYPICAL, ARM5_DOSES, 1344.0)
        assert got == pytest.approx(expected, abs=1e-10)
        assert got == pytest.approx(170.28, abs=0.01)

    def test_dose_at_observation_time_excluded(self):
        # trough sampled immediately before dosing
        doses = [DoseEvent(0.0, 60.0), DoseEvent(336.0, 240.0)]
        at_336 = conc_linear(TYPICAL, doses, 336.0)
        only_first = conc_linear(TYPICAL, doses[:1], 336.0)
        assert at_336 == only_first

    def test_superposition_over_concatenated_schedules(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            n1, n2 = rng.integers(0, 4, size=2)
            times = np.sort(rng.uniform(0, 1000, size=int(n1 + n2)))
            amounts = rng.uniform(1, 300, size=int(n1 + n2))
            doses = [DoseEvent(float(t), float(a)) for t, a in zip(times, amounts)]
            t = float(rng.uniform(0, 1500))
            whole = conc_linear(TYPICAL, doses, t)
            parts = (conc_linear(TYPICAL, doses[:int(n1)], t)
                     + conc_linear(TYPICAL, doses[int(n1):], t))
            assert whole == pytest.approx(parts, rel=1e-12, abs=1e-15)

    def test_monotone_decay_is_exact_exponential(self):
        rng = np.random.default_rng(7)
        doses = [DoseEvent(0.0, 100.0), DoseEvent(200.0, 50.0)]
        for _ in range(20):
            t1 = float(rng.uniform(201, 800))
            t2 = t1 + float(rng.uniform(0.1, 500))
            c1 = conc_linear(TYPICAL, doses, t1)
            c2 = conc_linear(TYPICAL, doses, t2)
            k = TYPICAL.cl / TYPICAL.v
            assert c2 == pytest.approx(c1 * math.exp(-k * (t2 - t1)), rel=1e-12)

    def test_scale_equivariance(self):
        doubled = [DoseEvent(d.time, 2 * d.amount) for d in ARM5_DOSES]
        for t in (100.0, 500.0, 1344.0):
            assert conc_linear(TYPICAL, doubled, t) == pytest.approx(
                2 * conc_linear(TYPICAL, ARM5_DOSES, t), rel=1e-12)

    def test_unsorted_schedule_rejected(self):
        bad = [DoseEvent(336.0, 240.0), DoseEvent(0.0, 60.0)]
        with pytest.raises(ValueError):
            conc_linear(TYPICAL, bad, 500.0)

    def test_negative_time_rejected(self):
        with pytest.raises(ValueError):
            conc_linear(TYPICAL, ARM5_DOSES, -1.0)


class TestConcMM:
    MM = MMParams(vmax=0.075, km=30.0, v=2.0)

    def test_no_dose_zero(self):
        assert conc_mm(self.MM, [], 500.0, 1.0) == 0.0

    def test_reduces_to_linear_at_large_km(self):
        # vmax/km equals the linear clearance; km far above any concentration
        km = 1000.0 * 200.0
        mm = MMParams(vmax=0.0025 * km, km=km, v=2.0)
        for t in (336.0, 672.0, 1344.0):
            lin = conc_linear(TYPICAL, ARM5_DOSES, t)
            sat = conc_mm(mm, ARM5_DOSES, t, 2.0)
            assert sat == pytest.approx(lin, rel=1e-3)

    def test_step_halving_self_convergence(self):
        c4 = conc_mm(self.MM, ARM5_DOSES, 1344.0, 4.0)
        c2 = conc_mm(self.MM, ARM5_DOSES, 1344.0, 2.0)
        assert abs(c2 - c4) / c2 < 1e-4

    def test_step_exceeding_interdose_gap_rejected(self):
        with pytest.raises(ValueError):
            conc_mm(self.MM, ARM5_DOSES, 1344.0, 400.0)

    def test_nonpositive_step_rejected(self):
        with pytest.raises(ValueError):
            conc_mm(self.MM, ARM5_DOSES, 1344.0, 0.0)

    def test_saturation_slows_elimination(self):
        # at concentrations far above km, less drug is cleared than linearly
        lin = conc_linear(TYPICAL, ARM5_DOSES, 1344.0)
        sat = conc_mm(self.MM, ARM5_DOSES, 1344.0, 2.0)
        assert sat > lin


class TestIndividualParams:
    POP = PopulationParams(mu_cl=0.0025, mu_v=2.0, omega_cl=0.3,
                           omega_v=0.3, xi=0.02)

    def test_typical_values(self):
        p = individual_params(self.POP, 0.0, 0.0)
        assert (p.cl, p.v) == (0.0025, 2.0)

    def test_lognormal_clearance_deviation(self):
        p = individual_params(self.POP, 0.3, 0.0)
        assert p.cl == pytest.approx(0.0025 * math.exp(0.3), rel=1e-12)

    def test_lognormal_volume_deviation(self):
        p = individual_params(self.POP, 0.0, -0.3)
        assert p.v == pytest.approx(2.0 * math.exp(-0.3), rel=1e-12)


class TestApplyResidual:
    def test_zero_noise(self):
        assert apply_residual(100.0, 0.02, 0.0) == 100.0

    def test_one_sd_perturbation(self):
        assert apply_residual(100.0, 0.02, 1.0) == pytest.approx(102.0)

    def test_negative_value_floored(self):
        assert apply_residual(100.0, 0.3, -4.0) == EXPOSURE_FLOOR

    def test_negative_concentration_rejected(self):
        with pytest.raises(ValueError):
            apply_residual(-1.0, 0.02, 0.0)


class TestValidation:
    def test_dose_event_invariants(self):
        with pytest.raises(ValueError):
            DoseEvent(-1.0, 10.0)
        with pytest.raises(ValueError):
            DoseEvent(0.0, -10.0)

    def test_pk_params_positive(self):
        with pytest.raises(ValueError):
            PKParams(cl=0.0, v=2.0)
        with pytest.raises(ValueError):
            PKParams(cl=0.0025, v=-2.0)

    def test_population_params_positive(self):
        with pytest.raises(ValueError):
            PopulationParams(0.0025, 2.0, 0.3, 0.3, 0.0)

    def test_mm_params_positive(self):
        with pytest.raises(ValueError):
            MMParams(vmax=0.0, km=30.0, v=2.0)
