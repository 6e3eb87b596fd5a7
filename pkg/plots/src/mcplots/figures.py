"""Figure specifications and rendering from run CSVs.

Every figure is regenerable from the CSVs alone; target lines come from the
run's config_echo.json so the dashboard and the figures share one source of
truth. Inputs are never mutated.
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


class MissingInputError(Exception):
    """A required input file or column is absent; the message names it."""


REQUIRED_FILES = (
    "tier1_metrics.csv",
    "tier2_metrics.csv",
    "tier1_timeline.csv",
    "tier1_decisions.csv",
    "tier2_overhead.csv",
    "dashboard.json",
    "config_echo.json",
)

SCENARIO_ORDER = ("Baseline", "Noisy", "Bursty", "Adversarial")
POLICY_COLORS = {"Uniform": "#9aa0a6", "Proportional": "#f9ab00", "TopoGP": "#1a73e8"}


@dataclass(frozen=True)
class FigureSpec:
    figure_id: str
    inputs: tuple[str, ...]
    output: str
    target_lines: tuple[float, ...] = ()


def load_rows(path: Path, required: tuple[str, ...]) -> list[dict]:
    if not path.exists():
        raise MissingInputError(f"missing input file: {path}")
    with path.open(encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = tuple(reader.fieldnames or ())
        for col in required:
            if col not in cols:
                raise MissingInputError(f"{path.name}: missing column {col!r}")
        return list(reader)


def target_lines(echo: dict) -> dict[str, float]:
    """Target values shared with the dashboard: contraction, overhead, jitter, TTFR."""
    return {
        "contraction": float(echo["tier1"]["contraction_target"]),
        "overhead": float(echo["tier2"]["slo"]["overhead_max"]),
        "jitter_ms": float(echo["tier2"]["slo"]["jitter_max"]),
        "ttfr_ms": float(echo["tier2"]["slo"]["ttfr_max"]),
    }


def _group_metric(rows: list[dict], metric: str) -> dict[tuple[str, str], list[float]]:
    out: dict[tuple[str, str], list[float]] = defaultdict(list)
    for r in rows:
        if r["metric"] == metric:
            out[(r["name"], r["policy"])].append(float(r["value"]))
    return out


def _new_axes(title: str, xlabel: str, ylabel: str):
    fig, ax = plt.subplots(figsize=(7.2, 4.2))
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    return fig, ax


def _hline(ax, value: float, label: str) -> float:
    ax.axhline(value, linestyle="--", color="#d93025", linewidth=1.2, label=label)
    return value


def _save(fig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def fig_contraction(in_dir: Path, out: Path, targets: dict) -> list[float]:
    rows = load_rows(in_dir / "tier1_metrics.csv", ("name", "policy", "metric", "value"))
    grouped = _group_metric(rows, "contraction")
    workloads = sorted({k[0] for k in grouped})
    policies = [p for p in ("Proportional", "TopoGP") if any(k[1] == p for k in grouped)]
    fig, ax = _new_axes("Variance contraction vs uniform", "workload", "mean proxy ratio")
    width = 0.8 / max(len(policies), 1)
    x = np.arange(len(workloads))
    for i, pol in enumerate(policies):
        means = [np.mean(grouped.get((w, pol), [np.nan])) for w in workloads]
        ax.bar(x + i * width, means, width, label=pol, color=POLICY_COLORS.get(pol))
    drawn = _hline(ax, targets["contraction"], f"target {targets['contraction']}")
    ax.set_xticks(x + width * (len(policies) - 1) / 2)
    ax.set_xticklabels(workloads, rotation=15, ha="right")
    ax.legend(fontsize=8)
    _save(fig, out)
    return [drawn]


def fig_shot_tails(in_dir: Path, out: Path) -> list[float]:
    rows = load_rows(in_dir / "tier1_metrics.csv", ("name", "policy", "metric", "value"))
    grouped = _group_metric(rows, "p95_tail_shots")
    policies = sorted({k[1] for k in grouped})
    fig, ax = _new_axes("Final-step shot tails", "p95 per-fragment shots", "episodes")
    for pol in policies:
        vals = [v for (w, p), vs in grouped.items() if p == pol for v in vs]
        ax.hist(vals, bins=12, alpha=0.55, label=pol, color=POLICY_COLORS.get(pol))
    ax.legend(fontsize=8)
    _save(fig, out)
    return []


def fig_timeline(in_dir: Path, out: Path) -> list[float]:
    rows = load_rows(in_dir / "tier1_timeline.csv", ("step", "metric", "value"))
    series: dict[str, dict[int, float]] = defaultdict(dict)
    for r in rows:
        series[r["metric"]][int(r["step"])] = float(r["value"])
    if not series:
        raise MissingInputError("tier1_timeline.csv: no timeline rows to plot")
    steps = sorted(series["variance_proxy"])
    fig, axes = plt.subplots(3, 1, figsize=(7.2, 6.4), sharex=True)
    axes[0].plot(steps, [series["z_mean"][t] for t in steps], color="#1a73e8")
    axes[0].set_ylabel("measurement proxy")
    axes[1].plot(steps, [series["shots_p95"][t] for t in steps], color="#f9ab00")
    axes[1].set_ylabel("p95 shots")
    axes[2].plot(steps, [series["innovation_max"][t] for t in steps], color="#188038")
    axes[2].set_ylabel("max innovation")
    axes[2].set_xlabel("step")
    for t in steps:
        if series["trigger"].get(t, 0.0) >= 1.0:
            for ax in axes:
                ax.axvline(t, color="#d93025", alpha=0.4, linewidth=1.0)
    axes[0].set_title("Closed-loop timeline (repartition triggers marked)")
    _save(fig, out)
    return []


def fig_decision_boundary(in_dir: Path, out: Path, echo: dict) -> list[float]:
    rows = load_rows(in_dir / "tier1_decisions.csv", ("entropy_bits", "shots", "choice"))
    if not rows:
        raise MissingInputError("tier1_decisions.csv: no decision rows to plot")
    cas = echo["cascade"]
    fig, ax = _new_axes("Estimator choice vs model boundary", "shots", "pilot entropy (bits)")
    for choice, color in (("Shadows", "#9aa0a6"), ("MLE", "#1a73e8")):
        pts = [(float(r["shots"]), float(r["entropy_bits"])) for r in rows if r["choice"] == choice]
        if pts:
            xs, ys = zip(*pts)
            ax.scatter(xs, ys, s=14, alpha=0.7, label=choice, color=color)
    # boundary: beta/s^2 + (b0 max(0, H-h_thr))^2 = alpha/s, solved for H(s)
    s_grid = np.linspace(max(float(r["shots"]) for r in rows) * 0.05 + 1.0,
                         max(float(r["shots"]) for r in rows) * 1.1, 200)
    alpha, beta = cas["alpha"], cas["beta"]
    b0, h_thr = cas["bias_b0"], cas["bias_h_thr"]
    hs = []
    for s in s_grid:
        gap = alpha / s - beta / s**2
        hs.append(h_thr + np.sqrt(gap) / b0 if (gap >= 0 and b0 > 0) else np.nan)
    ax.plot(s_grid, hs, color="#d93025", linestyle="--", label="model boundary")
    ax.legend(fontsize=8)
    _save(fig, out)
    return []


def _dashboard_cells(section: dict) -> tuple[list[str], list[str]]:
    labels, states = [], []
    for key, entry in sorted(section.items()):
        labels.append(key)
        states.append(entry["decision"])
    return labels, states


def fig_dashboard(doc: dict, part: str, out: Path) -> list[float]:
    if part == "tier1":
        sections = {"tier1": doc["tier1"]}
    else:
        sections = doc["tier2"]
    rows = []
    for scen, section in sorted(sections.items()):
        labels, states = _dashboard_cells(section)
        for lbl, st in zip(labels, states):
            rows.append((f"{scen}.{lbl}" if part != "tier1" else lbl, st))
    fig, ax = plt.subplots(figsize=(6.0, 0.42 * max(len(rows), 3) + 0.8))
    ax.set_title(f"{part} targets dashboard")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, len(rows))
    ax.axis("off")
    for i, (label, state) in enumerate(rows):
        y = len(rows) - 1 - i
        color = "#188038" if state == "pass" else "#d93025"
        ax.add_patch(plt.Rectangle((0.62, y + 0.08), 0.3, 0.82, color=color, alpha=0.85))
        ax.text(0.6, y + 0.45, label, ha="right", va="center", fontsize=9)
        ax.text(0.77, y + 0.45, state.upper(), ha="center", va="center", fontsize=9, color="white")
    _save(fig, out)
    return []


def _tier2_medians(rows: list[dict], metric: str) -> dict[str, float]:
    vals: dict[str, list[float]] = defaultdict(list)
    for r in rows:
        if r["metric"] == metric:
            vals[r["name"]].append(float(r["value"]))
    return {k: float(np.median(v)) for k, v in vals.items()}


def fig_tier2_latency(in_dir: Path, out: Path, targets: dict) -> list[float]:
    rows = load_rows(in_dir / "tier2_metrics.csv", ("name", "metric", "value"))
    jit = _tier2_medians(rows, "jitter_ms")
    ttfr = _tier2_medians(rows, "ttfr_ms")
    scen = [s for s in SCENARIO_ORDER if s in jit]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.4, 3.8))
    x = np.arange(len(scen))
    ax1.bar(x, [jit[s] for s in scen], color="#1a73e8")
    drawn1 = _hline(ax1, targets["jitter_ms"], f"{targets['jitter_ms']:g} ms")
    ax1.set_title("Jitter (median)")
    ax1.set_xticks(x, scen, rotation=20, ha="right")
    ax1.set_ylabel("ms")
    ax1.legend(fontsize=8)
    ax2.bar(x, [ttfr[s] for s in scen], color="#f9ab00")
    drawn2 = _hline(ax2, targets["ttfr_ms"], f"{targets['ttfr_ms']:g} ms")
    ax2.set_title("TTFR (median)")
    ax2.set_xticks(x, scen, rotation=20, ha="right")
    ax2.legend(fontsize=8)
    _save(fig, out)
    return [drawn1, drawn2]


def fig_tier2_reliability(in_dir: Path, out: Path) -> list[float]:
    rows = load_rows(in_dir / "tier2_metrics.csv", ("name", "metric", "value"))
    succ = _tier2_medians(rows, "success_frac")
    tout = _tier2_medians(rows, "timeout_frac")
    err = _tier2_medians(rows, "error_frac")
    scen = [s for s in SCENARIO_ORDER if s in succ]
    fig, ax = _new_axes("Reliability (medians)", "", "fraction")
    x = np.arange(len(scen))
    s_vals = np.array([succ[s] for s in scen])
    t_vals = np.array([tout[s] for s in scen])
    e_vals = np.array([err[s] for s in scen])
    ax.bar(x, s_vals, label="success", color="#188038")
    ax.bar(x, t_vals, bottom=s_vals, label="timeout", color="#f9ab00")
    ax.bar(x, e_vals, bottom=s_vals + t_vals, label="error", color="#d93025")
    ax.set_xticks(x, scen, rotation=20, ha="right")
    ax.set_ylim(0.0, 1.05)
    ax.legend(fontsize=8, loc="lower right")
    _save(fig, out)
    return []


def fig_tier2_throughput(in_dir: Path, out: Path) -> list[float]:
    rows = load_rows(in_dir / "tier2_metrics.csv", ("name", "metric", "value"))
    raw = _tier2_medians(rows, "qps_raw")
    suc = _tier2_medians(rows, "qps_success")
    scen = [s for s in SCENARIO_ORDER if s in raw]
    fig, ax = _new_axes("Throughput (median)", "", "jobs/s")
    x = np.arange(len(scen))
    ax.bar(x - 0.18, [raw[s] for s in scen], width=0.36, label="raw", color="#1a73e8")
    ax.bar(x + 0.18, [suc[s] for s in scen], width=0.36, label="success", color="#188038")
    ax.set_xticks(x, scen, rotation=20, ha="right")
    ax.legend(fontsize=8)
    _save(fig, out)
    return []


def fig_overhead_curve(in_dir: Path, out: Path, targets: dict) -> list[float]:
    rows = load_rows(in_dir / "tier2_overhead.csv", ("name", "level", "rel_throughput"))
    if not rows:
        raise MissingInputError("tier2_overhead.csv: no sweep rows to plot")
    series: dict[str, list[tuple[float, float]]] = defaultdict(list)
    for r in rows:
        series[r["name"]].append((float(r["level"]), float(r["rel_throughput"])))
    fig, ax = _new_axes("Relative throughput vs overhead", "overhead fraction", "relative throughput")
    for scen in sorted(series):
        pts = sorted(series[scen])
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=scen)
    value = targets["overhead"]
    ax.axvline(value, linestyle="--", color="#d93025", linewidth=1.2, label=f"{value:g} budget")
    ax.legend(fontsize=8)
    _save(fig, out)
    return [value]


def render_all(in_dir: str | Path, out_dir: str | Path) -> dict[str, dict]:
    """Render the full figure set; returns {figure_id: {path, targets}}.

    Raises MissingInputError naming every absent required file before any
    figure is attempted.
    """
    in_path, out_path = Path(in_dir), Path(out_dir)
    missing = [name for name in REQUIRED_FILES if not (in_path / name).exists()]
    if missing:
        raise MissingInputError("missing inputs: " + ", ".join(sorted(missing)))
    echo = json.loads((in_path / "config_echo.json").read_text(encoding="utf-8"))
    doc = json.loads((in_path / "dashboard.json").read_text(encoding="utf-8"))
    targets = target_lines(echo)

    t1 = out_path / "figs" / "tier1"
    t2 = out_path / "figs" / "tier2"
    manifest: dict[str, dict] = {}

    def record(figure_id: str, path: Path, drawn: list[float]) -> None:
        manifest[figure_id] = {"path": str(path), "targets": drawn}

    record("tier1/contraction", t1 / "contraction.svg",
           fig_contraction(in_path, t1 / "contraction.svg", targets))
    record("tier1/shot_tails", t1 / "shot_tails.svg", fig_shot_tails(in_path, t1 / "shot_tails.svg"))
    record("tier1/timeline", t1 / "timeline.svg", fig_timeline(in_path, t1 / "timeline.svg"))
    record("tier1/decision_boundary", t1 / "decision_boundary.svg",
           fig_decision_boundary(in_path, t1 / "decision_boundary.svg", echo))
    record("tier1/dashboard", t1 / "dashboard.svg", fig_dashboard(doc, "tier1", t1 / "dashboard.svg"))
    record("tier2/latency", t2 / "latency.svg",
           fig_tier2_latency(in_path, t2 / "latency.svg", targets))
    record("tier2/reliability", t2 / "reliability.svg",
           fig_tier2_reliability(in_path, t2 / "reliability.svg"))
    record("tier2/throughput", t2 / "throughput.svg",
           fig_tier2_throughput(in_path, t2 / "throughput.svg"))
    record("tier2/overhead", t2 / "overhead.svg",
           fig_overhead_curve(in_path, t2 / "overhead.svg", targets))
    record("tier2/dashboard", t2 / "dashboard.svg", fig_dashboard(doc, "tier2", t2 / "dashboard.svg"))
    return manifest
