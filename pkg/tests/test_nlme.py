"""Laplace marginal likelihood, population fit and counterfactual sampler."""

import math

import numpy as np
import pytest
from scipy.stats import norm

from gtitrate import nlme, streams, trial
from gtitrate.nlme import (LaplaceConfig, LaplaceObjective, NLMEFit,
                           eb_estimates, fit_nlme, joint_neg2_logdensity,
                           simulate_counterfactual_nlme, subject_neg2ll_laplace,
                           two_stage_init)
from gtitrate.pk import PKParams, PopulationParams, conc_linear
from gtitrate.trial import (DOSE_TIMES, OBS_TIMES, arm_by_id, dataset_arrays,
                            make_scenario, simulate_ground_truth,
                            simulate_trial)

TRUTH = PopulationParams(0.0025, 2.0, 0.3, 0.3, 0.02)
LOG_TRUTH = np.log([0.0025, 2.0, 0.3, 0.3, 0.02])


@pytest.fixture(scope="module")
def small_observed():
    return simulate_trial(make_scenario("main", n_per_arm=60, seed=7))


def make_subject(arm_id, eta_cl, eta_v, noise=None, doses=None):
    """Subject record with exact structural troughs (optionally perturbed)."""
    arm = arm_by_id(arm_id)
    amounts = doses if doses is not None else arm.ladder
    params = PKParams(cl=TRUTH.mu_cl * math.exp(eta_cl),
                      v=TRUTH.mu_v * math.exp(eta_v))
    events = [trial.DoseEvent(t, a) for t, a in zip(DOSE_TIMES, amounts)]
    troughs = [conc_linear(params, events, t) for t in OBS_TIMES]
    if noise is not None:
        troughs = [c * (1.0 + TRUTH.xi * z) for c, z in zip(troughs, noise)]
    return trial.SubjectRecord(
        subject_id=1, arm_id=arm_id, eta_cl=eta_cl, eta_v=eta_v,
        realized_doses=tuple(events), troughs=tuple(troughs),
        ie_flags=(False, False, False), adherent=True)


def fd_gradient(obj, p, h=1e-5):
    """Central differences of the full objective (inner re-optimization)."""
    out = np.zeros(5)
    for k in range(5):
        dp = np.zeros(5)
        dp[k] = h
        obj.eta_warm = np.zeros((obj.ws.n, 2))
        fp = obj.value(p + dp)
        obj.eta_warm = np.zeros((obj.ws.n, 2))
        fm = obj.value(p - dp)
        out[k] = (fp - fm) / (2 * h)
    return out


class TestGradient:
    @pytest.mark.parametrize("scale", [1.0, 0.5, 2.0])
    def test_matches_finite_differences(self, small_observed, scale):
        arrs = dataset_arrays(small_observed)
        obj = LaplaceObjective(arrs["doses"], arrs["troughs"])
        p = LOG_TRUTH + math.log(scale)
        obj.eta_warm = np.zeros((obj.ws.n, 2))
        _, grad = obj.value_and_grad(p)
        fd = fd_gradient(obj, p)
        rel = np.abs(grad - fd).max() / np.abs(fd).max()
        assert rel < 1e-4


class TestSubjectLikelihood:
    def test_prior_collapse_approaches_fixed_effects_loglik(self):
        sub = make_subject(5, 0.0, 0.0, noise=(0.5, -0.3, 0.2, -0.1))
        tight = PopulationParams(0.0025, 2.0, 1e-4, 1e-4, 0.02)
        got = subject_neg2ll_laplace(tight, sub)
        # direct fixed-effects computation at eta = 0
        expected = 0.0
        params = PKParams(0.0025, 2.0)
        for e_obs, t in zip(sub.troughs, OBS_TIMES):
            f = conc_linear(params, sub.realized_doses, t)
            expected += -2.0 * norm.logpdf(e_obs, loc=f, scale=TRUTH.xi * f)
        assert got == pytest.approx(expected, rel=1e-4)

    def test_single_observation_residual_term(self):
        # joint density at eta = 0 with one exact observation: the residual
        # term is the normal log density at zero with SD xi * f
        sub = make_subject(5, 0.0, 0.0)
        mask = (1, 0, 0, 0)
        total = joint_neg2_logdensity(TRUTH, sub, 0.0, 0.0, obs_mask=mask)
        prior = -2.0 * (norm.logpdf(0.0, scale=TRUTH.omega_cl)
                        + norm.logpdf(0.0, scale=TRUTH.omega_v))
        f = conc_linear(PKParams(0.0025, 2.0), sub.realized_doses, OBS_TIMES[0])
        residual_term = -2.0 * norm.logpdf(0.0, scale=TRUTH.xi * f)
        assert total - prior == pytest.approx(residual_term, rel=1e-12)

    def test_requires_an_observation(self):
        sub = make_subject(5, 0.0, 0.0)
        with pytest.raises(ValueError):
            subject_neg2ll_laplace(TRUTH, sub, obs_mask=(0, 0, 0, 0))


class TestEmpiricalBayes:
    def test_modes_near_truth_for_exact_subject(self):
        sub = make_subject(5, 0.0, 0.0)
        arrs_d = np.asarray([sub.dose_amounts], float)
        arrs_e = np.asarray([sub.troughs], float)
        obj = LaplaceObjective(arrs_d, arrs_e)
        eta = obj.eta_hat(LOG_TRUTH)
        assert np.abs(eta).max() < 0.02

    def test_fit_centering_and_shrinkage(self, small_observed):
        fit = fit_nlme(small_observed, init=TRUTH)
        n = len(fit.subject_ids)
        for j, omega in ((0, fit.est.omega_cl), (1, fit.est.omega_v)):
            mean = fit.eb[:, j].mean()
            se = omega / math.sqrt(n)
            assert abs(mean) < 3 * se
            assert fit.eb[:, j].var() <= omega**2

    def test_lookup_by_subject_id(self, small_observed):
        fit = fit_nlme(small_observed, init=TRUTH)
        sid = int(fit.subject_ids[7])
        assert eb_estimates(fit, sid) == (float(fit.eb[7, 0]), float(fit.eb[7, 1]))
        with pytest.raises(ValueError):
            eb_estimates(fit, -99)


class TestFit:
    def test_recovers_truth_loosely_at_small_n(self, small_observed):
        fit = fit_nlme(small_observed, init=TRUTH)
        assert fit.converged
        assert fit.est.mu_cl == pytest.approx(0.0025, rel=0.10)
        assert fit.est.mu_v == pytest.approx(2.0, rel=0.10)
        assert fit.est.xi == pytest.approx(0.02, rel=0.30)

    def test_requires_observed_regime(self):
        gt = simulate_ground_truth(make_scenario("main", n_per_arm=10, seed=1))
        with pytest.raises(ValueError):
            fit_nlme(gt)

    def test_same_optimum_from_different_starts(self, small_observed):
        near = fit_nlme(small_observed, init=TRUTH)
        far_init = PopulationParams(0.005, 4.0, 0.6, 0.6, 0.04)
        far = fit_nlme(small_observed, init=far_init)
        assert far.converged
        assert near.neg2ll == pytest.approx(far.neg2ll, abs=0.05)
        assert far.est.mu_cl == pytest.approx(near.est.mu_cl, rel=1e-3)
        assert near.iterations <= far.iterations

    def test_objective_decreases_monotonically(self, small_observed):
        arrs = dataset_arrays(small_observed)
        obj = LaplaceObjective(arrs["doses"], arrs["troughs"])
        values = []

        from scipy import optimize
        def record(xk):
            values.append(obj.value(np.asarray(xk)))

        optimize.minimize(obj.value_and_grad, LOG_TRUTH, jac=True,
                          method="BFGS", callback=record,
                          options={"gtol": 0.5, "maxiter": 50})
        assert all(b <= a + 1e-9 for a, b in zip(values, values[1:]))

    def test_dose_unit_rescaling_shifts_volume_only(self, small_observed):
        fit_mg = fit_nlme(small_observed, init=TRUTH)
        scaled_subjects = tuple(
            trial.SubjectRecord(
                subject_id=s.subject_id, arm_id=s.arm_id, eta_cl=s.eta_cl,
                eta_v=s.eta_v,
                realized_doses=tuple(trial.DoseEvent(d.time, d.amount / 1000.0)
                                     for d in s.realized_doses),
                troughs=s.troughs, ie_flags=s.ie_flags, adherent=s.adherent)
            for s in small_observed.subjects)
        scaled = trial.TrialDataset(scenario=small_observed.scenario,
                                    regime="observed", subjects=scaled_subjects)
        init_g = PopulationParams(TRUTH.mu_cl / 1000.0, TRUTH.mu_v / 1000.0,
                                  TRUTH.omega_cl, TRUTH.omega_v, TRUTH.xi)
        fit_g = fit_nlme(scaled, init=init_g)
        assert fit_g.est.mu_v == pytest.approx(fit_mg.est.mu_v / 1000.0, rel=1e-6)
        assert fit_g.est.mu_cl == pytest.approx(fit_mg.est.mu_cl / 1000.0, rel=1e-6)
        assert fit_g.est.omega_cl == pytest.approx(fit_mg.est.omega_cl, rel=1e-6)
        assert fit_g.est.xi == pytest.approx(fit_mg.est.xi, rel=1e-6)

    def test_laplace_objective_minimal_at_truth_on_large_data(self):
        ds = simulate_trial(make_scenario("main", n_per_arm=500, seed=11))
        arrs = dataset_arrays(ds)
        obj = LaplaceObjective(arrs["doses"], arrs["troughs"])
        at_truth = obj.value(LOG_TRUTH)
        for k in range(5):
            p = LOG_TRUTH.copy()
            p[k] += math.log(1.1)
            obj.eta_warm = np.zeros((obj.ws.n, 2))
            assert obj.value(p) > at_truth

    def test_two_stage_init_ballpark(self, small_observed):
        init = two_stage_init(small_observed)
        assert init.mu_cl == pytest.approx(0.0025, rel=0.3)
        assert init.mu_v == pytest.approx(2.0, rel=0.3)
        assert init.omega_cl == pytest.approx(0.3, rel=0.5)


class TestCounterfactual:
    def _truth_fit(self, ids=None):
        ids = ids if ids is not None else np.array([1])
        return NLMEFit(est=TRUTH, subject_ids=ids, eb=np.zeros((len(ids), 2)),
                       neg2ll=0.0, converged=True, iterations=0,
                       n_inner_failures=0)

    def test_degenerate_fit_gives_constant_draws(self):
        est = PopulationParams(0.0025, 2.0, 1e-12, 1e-12, 1e-12)
        fit = NLMEFit(est=est, subject_ids=np.array([1]), eb=np.zeros((1, 2)),
                      neg2ll=0.0, converged=True, iterations=0,
                      n_inner_failures=0)
        draws = simulate_counterfactual_nlme(fit, arm_by_id(5), 100,
                                             np.random.default_rng(0))
        assert np.allclose(draws, 170.2805836, rtol=1e-6)
        assert draws.std() < 1e-6

    def test_truth_fit_matches_ground_truth_mean(self):
        sc = make_scenario("main", n_per_arm=5000, seed=13)
        gt = simulate_ground_truth(sc)
        gt5 = np.array([s.troughs[3] for s in gt.arm_subjects(5)])
        draws = simulate_counterfactual_nlme(self._truth_fit(), arm_by_id(5),
                                             5000, np.random.default_rng(1))
        se = math.hypot(gt5.std() / math.sqrt(len(gt5)),
                        draws.std() / math.sqrt(len(draws)))
        assert abs(draws.mean() - gt5.mean()) < 3 * se

    def test_default_draw_count(self):
        draws = simulate_counterfactual_nlme(self._truth_fit(), arm_by_id(1),
                                             rng=np.random.default_rng(2))
        assert len(draws) == 5000

    def test_warns_on_nonconverged_fit(self):
        fit = NLMEFit(est=TRUTH, subject_ids=np.array([1]),
                      eb=np.zeros((1, 2)), neg2ll=0.0, converged=False,
                      iterations=0, n_inner_failures=0)
        with pytest.warns(UserWarning):
            simulate_counterfactual_nlme(fit, arm_by_id(1), 10,
                                         np.random.default_rng(3))

    def test_consumes_only_estimates_and_planned_ladder(self):
        # same estimates give identical draws regardless of any dataset
        fit_a = self._truth_fit(np.array([1, 2, 3]))
        fit_b = self._truth_fit(np.array([9]))
        a = simulate_counterfactual_nlme(fit_a, arm_by_id(4), 50,
                                         streams.generator(5, 4, streams.CF))
        b = simulate_counterfactual_nlme(fit_b, arm_by_id(4), 50,
                                         streams.generator(5, 4, streams.CF))
        assert np.array_equal(a, b)


def test_laplace_config_validation():
    with pytest.raises(ValueError):
        LaplaceConfig(outer_tol=0.0)
    with pytest.raises(ValueError):
        LaplaceConfig(fd_step=-1e-4)
