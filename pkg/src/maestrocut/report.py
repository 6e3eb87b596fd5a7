"""Metric aggregation, bootstrap confidence intervals, and deterministic emission.

CSV output uses a fixed column order, UTF-8, LF line endings, and repr-stable
float formatting, so identical inputs always produce byte-identical files.
"""

from __future__ import annotations

import json
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .errors import ConfigurationError, DomainError

CSV_COLUMNS = ("tier", "name", "policy", "seed", "metric", "value", "units")
TIMELINE_COLUMNS = ("tier", "name", "policy", "seed", "step", "metric", "value")
DECISION_COLUMNS = ("tier", "name", "policy", "seed", "step", "fragment", "entropy_bits", "shots", "choice")
OVERHEAD_COLUMNS = ("tier", "name", "level", "rel_throughput")


@dataclass(frozen=True)
class MetricRow:
    tier: str
    name: str
    policy: str
    seed: int
    metric: str
    value: float
    units: str

    def key(self) -> tuple:
        return (self.tier, self.name, self.policy, self.seed, self.metric)


@dataclass(frozen=True)
class BootstrapCI:
    statistic: float
    lower: float
    upper: float
    level: float = 0.95
    resamples: int = 10_000

    def __post_init__(self) -> None:
        if not self.lower <= self.statistic <= self.upper:
            raise DomainError("CI must bracket the statistic")


def bootstrap_ci(
    samples: Sequence[float],
    statistic: str = "mean",
    resamples: int = 10_000,
    level: float = 0.95,
    seed: int = 0,
) -> BootstrapCI:
    """Percentile bootstrap of the mean or median; deterministic given seed."""
    data = np.asarray(samples, dtype=float)
    if data.size < 2:
        raise DomainError("need at least 2 samples")
    if statistic not in ("mean", "median"):
        raise ConfigurationError("statistic must be 'mean' or 'median'")
    stat_fn = np.mean if statistic == "mean" else np.median
    point = float(stat_fn(data))
    gen = rngmod.stream(seed, "bootstrap", statistic, data.size, resamples)
    idx = gen.integers(0, data.size, size=(resamples, data.size))
    stats = stat_fn(data[idx], axis=1)
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(stats, [tail, 100.0 - tail])
    return BootstrapCI(
        statistic=point,
        lower=min(float(lo), point),
        upper=max(float(hi), point),
        level=level,
        resamples=resamples,
    )


def _fmt(value: object) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, columns: tuple[str, ...], rows: Sequence[Sequence[object]]) -> None:
    lines = [",".join(columns)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def emit(
    rows: Sequence[MetricRow],
    out_dir: str | Path,
    dashboard_doc: Mapping | None = None,
    timeline: Sequence[tuple] = (),
    decisions: Sequence[tuple] = (),
    overhead: Sequence[tuple] = (),
) -> dict[str, Path]:
    """Write the run's CSVs and dashboard.json with stable order and content.

    tier1_metrics.csv / tier2_metrics.csv carry the per-episode metric rows;
    the optional timeline, decision, and overhead tables feed the figure set.
    Re-running with identical inputs is byte-identical.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    keys = [r.key() for r in rows]
    if len(set(keys)) != len(keys):
        raise DomainError("duplicate (tier,name,policy,seed,metric) rows")

    paths: dict[str, Path] = {}
    for tier, fname in (("tier1", "tier1_metrics.csv"), ("tier2", "tier2_metrics.csv")):
        subset = sorted((r for r in rows if r.tier == tier), key=MetricRow.key)
        path = out / fname
        _write_csv(path, CSV_COLUMNS, [
            (r.tier, r.name, r.policy, r.seed, r.metric, r.value, r.units) for r in subset
        ])
        paths[fname] = path

    for fname, columns, table in (
        ("tier1_timeline.csv", TIMELINE_COLUMNS, timeline),
        ("tier1_decisions.csv", DECISION_COLUMNS, decisions),
        ("tier2_overhead.csv", OVERHEAD_COLUMNS, overhead),
    ):
        paths[fname] = out / fname
        _write_csv(paths[fname], columns, sorted(table))
    if dashboard_doc is not None:
        path = out / "dashboard.json"
        path.write_text(json.dumps(dashboard_doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        paths["dashboard.json"] = path
    return paths


@dataclass(frozen=True)
class DashboardTargets:
    contraction_max: float = 0.6
    overhead_max: float = 0.01
    jitter_max: float = 150.0
    ttfr_max: float = 220.0
    success_min: float = 0.97
    timeout_max: float = 0.005
    error_max: float = 0.025


def _mean_of(rows: Sequence[MetricRow], tier: str, metric: str, name: str | None = None,
             policy: str | None = None) -> float | None:
    vals = [
        r.value
        for r in rows
        if r.tier == tier and r.metric == metric
        and (name is None or r.name == name) and (policy is None or r.policy == policy)
    ]
    return float(np.mean(vals)) if vals else None


def _median_of(rows: Sequence[MetricRow], tier: str, metric: str, name: str) -> float | None:
    vals = [r.value for r in rows if r.tier == tier and r.metric == metric and r.name == name]
    return float(np.median(vals)) if vals else None


def dashboard(
    tier1_rows: Sequence[MetricRow],
    tier2_rows: Sequence[MetricRow],
    targets: DashboardTargets,
    reference_workload: str = "QAOA-MaxCut",
    scenarios: Sequence[str] = ("Adversarial", "Baseline", "Bursty", "Noisy"),
    phasepad_share: float | None = None,
) -> dict:
    """Pass/fail table; absent metrics land in `missing` and force failure.

    phasepad_share is measured wall-clock each run, so it arrives as an
    argument rather than through the (byte-reproducible) metric rows.
    """
    doc: dict = {"tier1": {}, "tier2": {}, "missing": []}

    def check(section: dict, key: str, label: str, value: float | None, target: float, sense: str) -> None:
        if value is None:
            doc["missing"].append(label)
            return
        ok = value <= target if sense == "max" else value >= target
        section[key] = {
            "value": value,
            "target": target,
            "sense": sense,
            "decision": "pass" if ok else "fail",
        }

    contraction = _mean_of(tier1_rows, "tier1", "contraction", name=reference_workload, policy="TopoGP")
    check(doc["tier1"], "contraction", "tier1.contraction", contraction, targets.contraction_max, "max")
    check(doc["tier1"], "phasepad_overhead", "tier1.phasepad_overhead", phasepad_share,
          targets.overhead_max, "max")

    tier2_checks = (
        ("jitter_ms", targets.jitter_max, "max"),
        ("ttfr_ms", targets.ttfr_max, "max"),
        ("success_frac", targets.success_min, "min"),
        ("timeout_frac", targets.timeout_max, "max"),
        ("error_frac", targets.error_max, "max"),
    )
    for scen in scenarios:
        section: dict = {}
        for metric, target, sense in tier2_checks:
            value = _median_of(tier2_rows, "tier2", metric, scen)
            check(section, metric, f"tier2.{scen}.{metric}", value, target, sense)
        doc["tier2"][scen] = section

    failed = any(
        entry["decision"] == "fail"
        for part in (doc["tier1"], *doc["tier2"].values())
        for entry in part.values()
    )
    doc["decision"] = "fail" if failed or doc["missing"] else "pass"
    return doc
