"""Flat key=value configuration for scenario and estimation overrides.

Recognized keys (one ``key=value`` per line, ``#`` comments allowed):

===================  =====================================================
``n_per_arm``        subjects per arm (int)
``seed``             stream seed (int)
``draws``            counterfactual draws per (arm, method) (int)
``beta``             event-model slope (float, >= 0)
``alphas``           three comma-separated thresholds, mg/L
``beta_scale``       multiplies beta (confounding-strength knob)
``alpha_shift``      added to every threshold (confounding-strength knob)
``mu_cl, mu_v``      typical clearance (L/h) / volume (L)
``omega_cl, omega_v``  between-subject SDs (log scale)
``xi``               proportional residual SD
``mm_vmax, mm_km, mm_v``  saturable-elimination parameters
``mm_step``          RK4 step in hours
``cmax_pure_ratio``  true/false: peak driver is dose/volume only
``ipw_cap``          weight-truncation quantile in (0, 1], or ``none``
``ie_source``        ``true`` or ``fitted`` event model for the weights
===================  =====================================================
"""

from __future__ import annotations

from dataclasses import replace

from .pk import MMParams, PopulationParams
from .trial import Scenario, make_scenario

_FLOAT_KEYS = {"beta", "beta_scale", "alpha_shift", "mu_cl", "mu_v",
               "omega_cl", "omega_v", "xi", "mm_vmax", "mm_km", "mm_v",
               "mm_step"}
_INT_KEYS = {"n_per_arm", "seed", "draws"}
_BOOL_KEYS = {"cmax_pure_ratio"}

KNOWN_KEYS = (_FLOAT_KEYS | _INT_KEYS | _BOOL_KEYS
              | {"alphas", "ipw_cap", "ie_source"})


def parse_config_text(text: str) -> dict:
    """Parse key=value lines into typed values."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        if key in _FLOAT_KEYS:
            out[key] = float(value)
        elif key in _INT_KEYS:
            out[key] = int(value)
        elif key in _BOOL_KEYS:
            if value.lower() not in ("true", "false", "1", "0"):
                raise ValueError(f"config line {lineno}: {key} must be true/false")
            out[key] = value.lower() in ("true", "1")
        elif key == "alphas":
            parts = [float(x) for x in value.split(",")]
            if len(parts) != 3:
                raise ValueError(f"config line {lineno}: alphas needs 3 values")
            out[key] = tuple(parts)
        elif key == "ipw_cap":
            out[key] = None if value.lower() == "none" else float(value)
        elif key == "ie_source":
            if value not in ("true", "fitted"):
                raise ValueError(f"config line {lineno}: ie_source must be "
                                 f"'true' or 'fitted'")
            out[key] = "true_model" if value == "true" else "fitted"
    return out


def load_config(path) -> dict:
    with open(path) as fh:
        return parse_config_text(fh.read())


def build_scenario(variant: str, cfg: dict, n_per_arm: int | None = None,
                   seed: int | None = None) -> Scenario:
    """Assemble a scenario: variant presets, then config, then explicit args."""
    base = make_scenario(variant)
    pop = base.pop
    pop_updates = {k: cfg[k] for k in ("mu_cl", "mu_v", "omega_cl", "omega_v", "xi")
                   if k in cfg}
    if pop_updates:
        pop = replace(pop, **pop_updates)
    mm = base.mm
    mm_updates = {k.removeprefix("mm_"): cfg[k]
                  for k in ("mm_vmax", "mm_km", "mm_v") if k in cfg}
    if mm_updates:
        mm = MMParams(**{**mm.__dict__, **mm_updates})
    beta = cfg.get("beta", base.beta) * cfg.get("beta_scale", 1.0)
    alphas = tuple(a + cfg.get("alpha_shift", 0.0)
                   for a in cfg.get("alphas", base.alphas))
    return Scenario(
        variant=variant,
        n_per_arm=n_per_arm if n_per_arm is not None
        else cfg.get("n_per_arm", base.n_per_arm),
        seed=seed if seed is not None else cfg.get("seed", base.seed),
        beta=beta,
        alphas=alphas,
        pop=pop,
        mm=mm,
        cmax_pure_ratio=cfg.get("cmax_pure_ratio", base.cmax_pure_ratio),
        mm_step=cfg.get("mm_step", base.mm_step),
    )
