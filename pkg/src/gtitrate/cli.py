"""Command-line entry points.

Subcommands:

* ``simulate``  write the observed and adherence-forced datasets as CSV;
* ``fit``       fit all estimator models, write their artifacts;
* ``estimate``  write counterfactual samples per (arm, method) plus
  weight diagnostics;
* ``run``       full pipeline to ``summary.csv`` / ``summary.json``.

Exit codes: 0 success, 2 usage error, 3 estimation failure with
``--strict``.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import ipw, nlme, report, standardize, streams, trial
from .config import build_scenario, load_config

FAST_N_PER_ARM = 1000


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--scenario", choices=trial.VARIANTS, default="main")
    parser.add_argument("--n-per-arm", type=int, default=None,
                        help="subjects per arm (default 5000)")
    parser.add_argument("--seed", type=int, default=None,
                        help="stream seed (default 1)")
    parser.add_argument("--draws", type=int, default=None,
                        help="counterfactual draws per arm and method (default 5000)")
    parser.add_argument("--config", type=Path, default=None,
                        help="key=value override file")
    parser.add_argument("--out", type=Path, default=Path("out"),
                        help="output directory (default ./out)")
    parser.add_argument("--fast", action="store_true",
                        help=f"preset n-per-arm={FAST_N_PER_ARM}")
    parser.add_argument("--strict", action="store_true",
                        help="exit 3 on any estimation failure")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gtitrate",
        description="Simulate up-titration trials with exposure-driven "
                    "nonadherence and estimate the full-adherence exposure "
                    "with g-methods.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("simulate", "write observed and adherence-forced datasets"),
        ("fit", "fit estimator models and write their artifacts"),
        ("estimate", "write counterfactual samples and weight diagnostics"),
        ("run", "full pipeline to summary.csv/summary.json"),
    ):
        _add_common(sub.add_parser(name, help=help_text))
    return parser


def _setup(args) -> tuple[trial.Scenario, report.RunOptions]:
    cfg = load_config(args.config) if args.config else {}
    n = args.n_per_arm
    if n is None and args.fast:
        n = FAST_N_PER_ARM
    scenario = build_scenario(args.scenario, cfg, n_per_arm=n, seed=args.seed)
    opts = report.RunOptions(
        draws=args.draws if args.draws is not None else cfg.get("draws", 5000),
        ipw_cap=cfg.get("ipw_cap"),
        ie_source=cfg.get("ie_source", "true_model"),
    )
    args.out.mkdir(parents=True, exist_ok=True)
    return scenario, opts


def _write_fit_artifacts(result: report.ScenarioResult, out: Path) -> None:
    fit = result.fit
    if fit is not None:
        payload = {
            "estimates": {
                "mu_cl": fit.est.mu_cl, "mu_v": fit.est.mu_v,
                "omega_cl": fit.est.omega_cl, "omega_v": fit.est.omega_v,
                "xi": fit.est.xi,
            },
            "neg2ll": fit.neg2ll,
            "converged": fit.converged,
            "iterations": fit.iterations,
            "n_inner_failures": fit.n_inner_failures,
            "n_subjects": int(len(fit.subject_ids)),
        }
        with open(out / "nlme_fit.json", "w", newline="") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
        with open(out / "eb_estimates.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["subject_id", "eta_cl_hat", "eta_v_hat"])
            for sid, (ec, ev) in zip(fit.subject_ids, fit.eb):
                writer.writerow([int(sid), repr(float(ec)), repr(float(ev))])
    models = {}
    for arm_id, e1 in sorted(result.e1_models.items()):
        conds = result.cond_models.get(arm_id, {})
        models[str(arm_id)] = {
            "e1": {"beta0": e1.beta0, "gamma0": e1.gamma0},
            "conditional": {
                str(t): {
                    "beta": list(cm.beta),
                    "scales": [{"d_prev": k[0], "d_cur": k[1], "scale": v}
                               for k, v in sorted(cm.scales.items())],
                } for t, cm in sorted(conds.items())
            },
        }
    with open(out / "standardization_models.json", "w", newline="") as fh:
        json.dump(models, fh, indent=2)
        fh.write("\n")
    if result.ie_model is not None:
        m = result.ie_model
        with open(out / "ie_model.json", "w", newline="") as fh:
            json.dump({"beta": m.beta, "alphas": list(m.alphas),
                       "source": m.source, "beta_se": m.beta_se},
                      fh, indent=2)
            fh.write("\n")


def _write_estimates(result: report.ScenarioResult, out: Path) -> None:
    for (arm_id, method), sample in sorted(result.samples.items()):
        path = out / f"samples_arm{arm_id}_{method}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["e4"])
            for x in sample:
                writer.writerow([repr(float(x))])
    with open(out / "ipw_weights.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["subject_id", "weight", "p_adhere_w2",
                         "p_adhere_w4", "p_adhere_w6"])
        for arm_id in sorted(result.weights):
            wv = result.weights[arm_id]
            for sid, w, probs in zip(wv.subject_ids, wv.weights,
                                     wv.adherence_probs):
                writer.writerow([int(sid), repr(float(w)),
                                 *(repr(float(p)) for p in probs)])


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    scenario, opts = _setup(args)
    out: Path = args.out

    if args.command == "simulate":
        observed = trial.simulate_trial(scenario)
        reference = trial.simulate_ground_truth(scenario)
        trial.write_dataset_csv(observed, out / "observed.csv")
        trial.write_dataset_csv(reference, out / "ground_truth.csv")
        print(f"wrote {out / 'observed.csv'} and {out / 'ground_truth.csv'}")
        return 0

    result = report.run_scenario_detailed(scenario, opts)

    if args.command == "fit":
        _write_fit_artifacts(result, out)
        print(f"wrote fit artifacts to {out}")
    elif args.command == "estimate":
        _write_estimates(result, out)
        print(f"wrote counterfactual samples to {out}")
    else:  # run
        report.emit(result.rows, "csv", out / "summary.csv")
        report.emit(result.rows, "json", out / "summary.json")
        print(f"wrote {out / 'summary.csv'} and {out / 'summary.json'}")

    failures = [r for r in result.rows if r.status in report.FAILURE_STATUSES]
    if failures:
        for r in failures:
            print(f"estimation failure: scenario={r.scenario} arm={r.arm} "
                  f"method={r.method} status={r.status}", file=sys.stderr)
        if args.strict:
            return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
