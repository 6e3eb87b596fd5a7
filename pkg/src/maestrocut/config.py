"""Config resolution: defaults < file < flags, with strict unknown-key rejection."""

from __future__ import annotations

import copy
import json
import os
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigurationError

DEFAULTS: dict = {
    "run_id": "",  # empty -> derived as seed<master seed>
    "seed": 42,
    "seeds": 25,
    "jobs": 1,
    "out": "",  # empty -> $MAESTROCUT_OUT or ./out
    "partition": {
        "alpha": 0.6,
        "beta": 0.3,
        "gamma": 0.1,
        "ema_window": 8,
    },
    "cusum": {"kappa": 1.5, "h": 6.0, "target_arl0": 200},
    "kalman": {"q0": 1e-4, "p0": 1.0, "warmup": 10},
    "kernel": {"sigma_k2": 1.0, "ell": 1.0},
    "tail": {"rho": 0.05},
    "allocator": {"s_min": 5, "cadence": 500},
    "cascade": {
        "alpha": 1.0,
        "beta": 120.0,
        "bias_b0": 0.05,
        "bias_h_thr": 1.0,
        "pilot_fraction": 0.01,
        "enabled": True,
    },
    "phasepad": {
        "lambda": 128,
        "eta": 0.02,
        "eps_ver": 0.1,
        "envelope_size": 288,
        "header_cap": 256,
        "enabled": True,
        # Assumed runtime overhead applied to tier2 service times; 0 means
        # "use the tier1-measured share" in the dashboard.
        "overhead_level": 0.0,
    },
    "tier1": {
        "steps": 40,
        "shots_per_step": 1500,
        "sigma_spread": 4.0,
        "hot_fraction": 0.25,
        "contraction_target": 0.6,
        "reference_workload": "QAOA-MaxCut",
        "workloads": ["QAOA-MaxCut", "UCCSD-LiH", "TFIM", "RandomCliffordT", "PhaseEstimation"],
        "policies": ["Uniform", "Proportional", "TopoGP"],
    },
    "tier2": {
        "episodes": 30,
        "overhead_levels": [0.0, 0.005, 0.01, 0.02, 0.05],
        "scenarios": {
            "Baseline": {
                "arrival_rate": 0.0060,
                "service_mean_ms": 28.0,
                "service_dispersion": 0.35,
                "frags_per_job": 4,
                "burst": False,
                "burst_on_ms": 1200.0,
                "burst_off_ms": 8000.0,
                "burst_mult": 1.45,
                "retry_p": 0.0,
                "error_p": 0.0,
                "adv_rate": 0.0,
                "adv_size_mult": 8.0,
                "timeout_ms": 1500.0,
                "duration_ms": 60000.0,
            },
            "Noisy": {
                "arrival_rate": 0.0060,
                "service_mean_ms": 29.0,
                "service_dispersion": 0.5,
                "frags_per_job": 4,
                "burst": False,
                "burst_on_ms": 1200.0,
                "burst_off_ms": 8000.0,
                "burst_mult": 1.45,
                "retry_p": 0.02,
                "error_p": 0.0,
                "adv_rate": 0.0,
                "adv_size_mult": 8.0,
                "timeout_ms": 1500.0,
                "duration_ms": 60000.0,
            },
            "Bursty": {
                "arrival_rate": 0.0060,
                "service_mean_ms": 28.0,
                "service_dispersion": 0.35,
                "frags_per_job": 4,
                "burst": True,
                "burst_on_ms": 1200.0,
                "burst_off_ms": 8000.0,
                "burst_mult": 1.45,
                "retry_p": 0.0,
                "error_p": 0.0,
                "adv_rate": 0.0,
                "adv_size_mult": 8.0,
                "timeout_ms": 1500.0,
                "duration_ms": 60000.0,
            },
            "Adversarial": {
                "arrival_rate": 0.0060,
                "service_mean_ms": 28.0,
                "service_dispersion": 0.35,
                "frags_per_job": 4,
                "burst": False,
                "burst_on_ms": 1200.0,
                "burst_off_ms": 8000.0,
                "burst_mult": 1.45,
                "retry_p": 0.0,
                "error_p": 0.02,
                "adv_rate": 0.00025,
                "adv_size_mult": 8.0,
                "timeout_ms": 1500.0,
                "duration_ms": 60000.0,
            },
        },
        "slo": {
            "jitter_max": 150.0,
            "ttfr_max": 220.0,
            "success_min": 0.97,
            "timeout_max": 0.005,
            "error_max": 0.025,
            "overhead_max": 0.01,
        },
    },
    "report": {"resamples": 10000, "level": 0.95, "bootstrap_seed": 0},
}


def _merge(base: dict, override: Mapping, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        dotted = f"{path}.{key}" if path else str(key)
        if key not in base:
            raise ConfigurationError(f"unknown config key {dotted!r}")
        current = base[key]
        if isinstance(current, dict):
            if not isinstance(value, Mapping):
                raise ConfigurationError(f"config key {dotted!r} expects a section, got {type(value).__name__}")
            out[key] = _merge(current, value, dotted)
        else:
            if isinstance(value, Mapping):
                raise ConfigurationError(f"config key {dotted!r} is a value, not a section")
            if isinstance(current, bool) != isinstance(value, bool):
                raise ConfigurationError(f"config key {dotted!r} expects {type(current).__name__}")
            if isinstance(current, (int, float)) and not isinstance(value, (int, float)):
                raise ConfigurationError(f"config key {dotted!r} expects {type(current).__name__}")
            if isinstance(current, str) and not isinstance(value, str):
                raise ConfigurationError(f"config key {dotted!r} expects str")
            if isinstance(current, list) and not isinstance(value, list):
                raise ConfigurationError(f"config key {dotted!r} expects a list")
            out[key] = copy.deepcopy(value)
    return out


def _set_dotted(tree: dict, dotted: str, value: object) -> dict:
    keys = dotted.split(".")
    override: dict = {}
    node = override
    for k in keys[:-1]:
        node[k] = {}
        node = node[k]
    node[keys[-1]] = value
    return _merge(tree, override)


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved parameter tree plus run identity."""

    tree: dict

    def __getitem__(self, key: str):
        return self.tree[key]

    @property
    def seed(self) -> int:
        return int(self.tree["seed"])

    @property
    def run_id(self) -> str:
        return self.tree["run_id"] or f"seed{self.seed}"

    @property
    def out_root(self) -> Path:
        root = self.tree["out"] or os.environ.get("MAESTROCUT_OUT", "out")
        return Path(root)

    @property
    def run_dir(self) -> Path:
        return self.out_root / self.run_id

    def echo(self) -> str:
        return json.dumps(self.tree, indent=2, sort_keys=True) + "\n"


def resolve_config(
    file_path: str | None = None, flag_overrides: Mapping[str, object] | None = None
) -> RunConfig:
    """Resolve defaults, then the JSON file, then flags; reject unknown keys."""
    tree = copy.deepcopy(DEFAULTS)
    if file_path is not None:
        try:
            text = Path(file_path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigurationError(f"cannot read config file {file_path}: {exc}") from exc
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {file_path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigurationError("config file must hold a JSON object")
        tree = _merge(tree, doc)
    for dotted, value in (flag_overrides or {}).items():
        tree = _set_dotted(tree, dotted, value)
    return RunConfig(tree=tree)
