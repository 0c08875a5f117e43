"""Simulation-estimation workbench for up-titration trials with
exposure-driven nonadherence, and g-method estimators of the
full-adherence exposure."""

from .errors import EstimationError, PositivityError
from .ipw import IEModel, WeightVector, compute_weights, fit_ie_model, \
    true_ie_model, weighted_summary
from .nlme import LaplaceConfig, NLMEFit, eb_estimates, fit_nlme, \
    simulate_counterfactual_nlme, subject_neg2ll_laplace, two_stage_init
from .pk import (DoseEvent, MMParams, PKParams, PopulationParams,
                 apply_residual, conc_linear, conc_mm, individual_params)
from .report import (METHODS, RunOptions, SummaryRow, emit, read_summary_csv,
                     run_scenario, run_scenario_detailed)
from .standardize import CondModel, E1Model, fit_cond_model, fit_e1_model, \
    gformula_sample
from .trial import (TRIAL_ARMS, Arm, Scenario, SubjectRecord, TrialDataset,
                    arm_by_id, cmax_thresholds, ie_probability, make_scenario,
                    per_protocol_filter, planned_dose, read_dataset_csv,
                    simulate_ground_truth, simulate_subject, simulate_trial,
                    write_dataset_csv)

__version__ = "0.1.0"

__all__ = [
    "Arm", "CondModel", "DoseEvent", "E1Model", "EstimationError", "IEModel",
    "LaplaceConfig", "METHODS", "MMParams", "NLMEFit", "PKParams",
    "PopulationParams", "PositivityError", "RunOptions", "Scenario",
    "SubjectRecord", "SummaryRow", "TRIAL_ARMS", "TrialDataset", "WeightVector",
    "apply_residual", "arm_by_id", "cmax_thresholds", "compute_weights",
    "conc_linear", "conc_mm", "eb_estimates", "emit", "fit_cond_model",
    "fit_e1_model", "fit_ie_model", "fit_nlme", "gformula_sample",
    "ie_probability", "individual_params", "make_scenario",
    "per_protocol_filter", "planned_dose", "read_dataset_csv",
    "read_summary_csv", "run_scenario", "run_scenario_detailed",
    "simulate_counterfactual_nlme", "simulate_ground_truth",
    "simulate_subject", "simulate_trial", "subject_neg2ll_laplace",
    "true_ie_model", "two_stage_init", "weighted_summary",
    "write_dataset_csv",
]
