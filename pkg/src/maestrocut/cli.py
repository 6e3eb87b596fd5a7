"""Command-line entry point: seeded runs, suite orchestration, self-test.

Exit codes: 0 success, 1 dashboard failure, 2 execution error. Outputs land
under <out>/<run-id>/ (out defaults to $MAESTROCUT_OUT or ./out).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .cascade import CascadeFit
from .config import RunConfig, resolve_config
from .drifttrack import CusumConfig
from .allocator import KernelParams
from .errors import MaestroError
from .phasepad import SecurityParams
from .report import DashboardTargets, MetricRow, dashboard, emit
from .tier1 import EpisodeConfig, EpisodeResult, episode_metrics, run_episode, synth_workload
from .tier2 import RunMetrics, ScenarioConfig, SloTargets, evaluate_slos, overhead_sweep, simulate_queue


def _episode_config(cfg: RunConfig, seed: int, policy: str) -> EpisodeConfig:
    t1, pp, cas = cfg["tier1"], cfg["phasepad"], cfg["cascade"]
    return EpisodeConfig(
        steps=int(t1["steps"]),
        shots_per_step=int(t1["shots_per_step"]),
        cadence=int(cfg["allocator"]["cadence"]),
        s_min=int(cfg["allocator"]["s_min"]),
        seed=seed,
        policy=policy,
        kernel=KernelParams(sigma_k2=cfg["kernel"]["sigma_k2"], ell=cfg["kernel"]["ell"]),
        tail_rho=cfg["tail"]["rho"],
        cusum=CusumConfig(kappa=cfg["cusum"]["kappa"], h=cfg["cusum"]["h"]),
        kalman_q0=cfg["kalman"]["q0"],
        kalman_p0=cfg["kalman"]["p0"],
        kalman_warmup=int(cfg["kalman"]["warmup"]),
        fit=CascadeFit(
            alpha_shadows=cas["alpha"],
            beta_mle=cas["beta"],
            bias_b0=cas["bias_b0"],
            bias_h_thr=cas["bias_h_thr"],
        ),
        cascade_enabled=bool(cas["enabled"]),
        pilot_fraction=cas["pilot_fraction"],
        security=SecurityParams(
            lam=int(pp["lambda"]),
            eta=pp["eta"],
            eps_ver=pp["eps_ver"],
            envelope_size=int(pp["envelope_size"]),
            header_cap=int(pp["header_cap"]),
        ),
        secure_dispatch=bool(pp["enabled"]),
    )


def _episode_task(args: tuple) -> tuple[tuple, EpisodeResult]:
    cfg_tree, workload_name, seed, policy = args
    cfg = RunConfig(tree=cfg_tree)
    t1 = cfg["tier1"]
    workload = synth_workload(
        workload_name,
        seed,
        steps=int(t1["steps"]),
        sigma_spread=t1["sigma_spread"],
        hot_fraction=t1["hot_fraction"],
    )
    result = run_episode(workload, _episode_config(cfg, seed, policy))
    return (workload_name, seed, policy), result


def _seed_list(cfg: RunConfig) -> list[int]:
    """Episode seeds derived from the master seed via the documented stream."""
    draws = rngmod.stream(cfg.seed, "episode-seeds").integers(0, 2**63 - 1, size=int(cfg["seeds"]))
    return [int(x) for x in draws]


def run_tier1(cfg: RunConfig, policies: list[str] | None = None):
    """All tier1 episodes; returns (rows, timeline, decisions, measured phasepad share)."""
    t1 = cfg["tier1"]
    policies = policies or list(t1["policies"])
    needed = sorted(set(policies) | {"Uniform"})
    seeds = _seed_list(cfg)
    tasks = [
        (cfg.tree, w, s, p)
        for w in t1["workloads"]
        for s in seeds
        for p in needed
    ]
    results: dict[tuple, EpisodeResult] = {}
    jobs = int(cfg["jobs"])
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for key, res in pool.map(_episode_task, tasks, chunksize=4):
                results[key] = res
    else:
        for task in tasks:
            key, res = _episode_task(task)
            results[key] = res

    rows: list[MetricRow] = []
    timeline: list[tuple] = []
    decisions: list[tuple] = []
    shares: list[float] = []
    timeline_workload = (
        t1["reference_workload"] if t1["reference_workload"] in t1["workloads"] else t1["workloads"][0]
    )
    for w in t1["workloads"]:
        for s in seeds:
            uniform = results[(w, s, "Uniform")]
            for p in policies:
                res = results[(w, s, p)]
                contraction, p95, final_mse = episode_metrics(res, uniform)
                triggers = sum(any(r.cusum_triggers) for r in res.records)
                repartitions = sum(r.repartition for r in res.records)
                for metric, value, units in (
                    ("contraction", contraction, "ratio"),
                    ("p95_tail_shots", p95, "shots"),
                    ("final_mse", final_mse, "mse"),
                    ("realloc_events", float(res.realloc_events), "events"),
                    ("cusum_triggers", float(triggers), "steps"),
                    ("repartitions", float(repartitions), "count"),
                ):
                    rows.append(MetricRow("tier1", w, p, s, metric, value, units))
                shares.append(res.phasepad_share)
                if p == "TopoGP":
                    final = res.records[-1]
                    for i in range(len(final.plan.shots)):
                        decisions.append(
                            ("tier1", w, p, s, final.step, i, res.entropy_bits[i],
                             final.plan.shots[i], final.choices[i].value)
                        )
            if w == timeline_workload and s == seeds[0]:
                res = results[(w, s, "TopoGP")] if "TopoGP" in needed else uniform
                for rec in res.records:
                    for metric, value in (
                        ("variance_proxy", rec.variance_proxy),
                        ("innovation_max", max(rec.innovations)),
                        ("trigger", 1.0 if any(rec.cusum_triggers) else 0.0),
                        ("z_mean", float(np.mean(rec.observed))),
                        ("shots_p95", float(np.percentile(rec.plan.shots, 95))),
                    ):
                        timeline.append(("tier1", w, res.policy, s, rec.step, metric, value))
    share = float(np.mean(shares)) if shares else 0.0
    return rows, timeline, decisions, share


def run_tier2(cfg: RunConfig, scenario_filter: str | None = None):
    """All tier2 scenarios; returns (rows, overhead table rows)."""
    t2 = cfg["tier2"]
    level = float(cfg["phasepad"]["overhead_level"])
    names = sorted(t2["scenarios"])
    if scenario_filter is not None:
        if scenario_filter not in names:
            raise MaestroError(f"unknown scenario {scenario_filter!r}; known: {names}")
        names = [scenario_filter]
    episodes = int(t2["episodes"])
    rows: list[MetricRow] = []
    overhead_rows: list[tuple] = []
    for name in names:
        scenario = ScenarioConfig(name=name, **t2["scenarios"][name])
        metrics = simulate_queue(scenario, episodes, cfg.seed, overhead=level)
        for e, m in enumerate(metrics):
            for metric, value, units in (
                ("jitter_ms", m.jitter_ms, "ms"),
                ("ttfr_ms", m.ttfr_ms, "ms"),
                ("success_frac", m.success_frac, "fraction"),
                ("timeout_frac", m.timeout_frac, "fraction"),
                ("error_frac", m.error_frac, "fraction"),
                ("qps_raw", m.qps_raw, "jobs/s"),
                ("qps_success", m.qps_success, "jobs/s"),
            ):
                rows.append(MetricRow("tier2", name, "emulator", e, metric, value, units))
        sweep = overhead_sweep(scenario, t2["overhead_levels"], cfg.seed, episodes=episodes)
        for lvl, rel in sorted(sweep.items()):
            overhead_rows.append(("tier2", name, lvl, rel))
    return rows, overhead_rows


def _targets(cfg: RunConfig) -> DashboardTargets:
    slo = cfg["tier2"]["slo"]
    return DashboardTargets(
        contraction_max=cfg["tier1"]["contraction_target"],
        overhead_max=slo["overhead_max"],
        jitter_max=slo["jitter_max"],
        ttfr_max=slo["ttfr_max"],
        success_min=slo["success_min"],
        timeout_max=slo["timeout_max"],
        error_max=slo["error_max"],
    )


def _write_echo(cfg: RunConfig) -> None:
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    (cfg.run_dir / "config_echo.json").write_text(cfg.echo(), encoding="utf-8")


def _cmd_tier1(cfg: RunConfig, policy: str | None) -> int:
    policies = [policy] if policy else None
    rows, timeline, decisions, share = run_tier1(cfg, policies)
    _write_echo(cfg)
    emit(rows, cfg.run_dir, timeline=timeline, decisions=decisions)
    print(f"tier1: {len(rows)} metric rows, measured phasepad share {share:.4%}")
    return 0


def _cmd_tier2(cfg: RunConfig, scenario: str | None) -> int:
    rows, overhead_rows = run_tier2(cfg, scenario)
    _write_echo(cfg)
    emit(rows, cfg.run_dir, overhead=overhead_rows)
    print(f"tier2: {len(rows)} metric rows")
    return 0


def _cmd_suite(cfg: RunConfig, policy: str | None, scenario: str | None) -> int:
    t1_rows, timeline, decisions, share = run_tier1(cfg, [policy] if policy else None)
    t2_rows, overhead_rows = run_tier2(cfg, scenario)
    level = float(cfg["phasepad"]["overhead_level"])
    operative_share = level if level > 0 else share
    doc = dashboard(
        t1_rows,
        t2_rows,
        _targets(cfg),
        reference_workload=cfg["tier1"]["reference_workload"],
        scenarios=tuple(sorted(cfg["tier2"]["scenarios"])),
        phasepad_share=operative_share,
    )
    _write_echo(cfg)
    emit(t1_rows + t2_rows, cfg.run_dir, dashboard_doc=doc,
         timeline=timeline, decisions=decisions, overhead=overhead_rows)
    for part in ("tier1",):
        for key, entry in doc[part].items():
            print(f"[{entry['decision'].upper()}] {part}.{key} = {entry['value']:.4g} (target {entry['sense']} {entry['target']})")
    for scen, section in doc["tier2"].items():
        for key, entry in section.items():
            print(f"[{entry['decision'].upper()}] tier2.{scen}.{key} = {entry['value']:.4g} (target {entry['sense']} {entry['target']})")
    print(f"dashboard decision: {doc['decision']}")
    return 0 if doc["decision"] == "pass" else 1


def _read_rows(path: Path) -> list[MetricRow]:
    if not path.exists():
        return []
    rows = []
    with path.open(encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            rows.append(
                MetricRow(rec["tier"], rec["name"], rec["policy"], int(rec["seed"]),
                          rec["metric"], float(rec["value"]), rec["units"])
            )
    return rows


def _cmd_report(cfg: RunConfig) -> int:
    run_dir = cfg.run_dir
    t1_rows = _read_rows(run_dir / "tier1_metrics.csv")
    t2_rows = _read_rows(run_dir / "tier2_metrics.csv")
    share = None
    dash_path = run_dir / "dashboard.json"
    if dash_path.exists():
        prev = json.loads(dash_path.read_text(encoding="utf-8"))
        entry = prev.get("tier1", {}).get("phasepad_overhead")
        if entry:
            share = entry["value"]
    doc = dashboard(
        t1_rows, t2_rows, _targets(cfg),
        reference_workload=cfg["tier1"]["reference_workload"],
        scenarios=tuple(sorted(cfg["tier2"]["scenarios"])),
        phasepad_share=share,
    )
    dash_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"dashboard decision: {doc['decision']}")
    return 0 if doc["decision"] == "pass" else 1


def _cmd_selftest() -> int:
    from . import selftest

    return 0 if selftest.run_all() else 2


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="maestrocut", description=__doc__)
    parser.add_argument("command", choices=["tier1", "tier2", "suite", "selftest", "report"])
    parser.add_argument("--config", dest="config_path", default=None, help="JSON config file")
    parser.add_argument("--seed", type=int, default=None, help="master seed")
    parser.add_argument("--seeds", type=int, default=None, help="episode seeds per arm")
    parser.add_argument("--out", default=None, help="output root directory")
    parser.add_argument("--scenario", default=None, help="restrict tier2 to one scenario")
    parser.add_argument("--policy", default=None, help="restrict tier1 to one policy")
    parser.add_argument("--overhead", type=float, default=None,
                        help="assumed phasepad overhead fraction for tier2 service inflation")
    parser.add_argument("--jobs", type=int, default=None, help="episode worker processes")
    args = parser.parse_args(argv)

    overrides: dict[str, object] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.seeds is not None:
        overrides["seeds"] = args.seeds
    if args.out is not None:
        overrides["out"] = args.out
    if args.overhead is not None:
        overrides["phasepad.overhead_level"] = args.overhead
    if args.jobs is not None:
        overrides["jobs"] = args.jobs

    try:
        cfg = resolve_config(args.config_path, overrides)
        if args.command == "tier1":
            return _cmd_tier1(cfg, args.policy)
        if args.command == "tier2":
            return _cmd_tier2(cfg, args.scenario)
        if args.command == "suite":
            return _cmd_suite(cfg, args.policy, args.scenario)
        if args.command == "report":
            return _cmd_report(cfg)
        return _cmd_selftest()
    except MaestroError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # execution error contract
        print(f"unexpected error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
