"""Discrete-event queue emulation for the four service scenarios.

A single-stage FIFO server executes jobs of several fragments each. All
randomness for an episode (tenant arrivals, service draws, error flags,
retry coin flips, adversarial injections) is pre-generated from the seed, so
overhead levels and scenario comparisons share draws exactly; service-time
inflation then shifts completions monotonically. Admissions stop at the
episode horizon, the clock hard-stops there, and only jobs fully resolved by
the horizon enter the outcome fractions and throughput.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .errors import ConfigurationError, DomainError
from .report import bootstrap_ci


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    arrival_rate: float  # tenant jobs per ms
    service_mean_ms: float
    service_dispersion: float  # sigma of the lognormal service law
    frags_per_job: int = 4
    burst: bool = False
    burst_on_ms: float = 1500.0
    burst_off_ms: float = 8000.0
    burst_mult: float = 2.5
    retry_p: float = 0.0
    error_p: float = 0.0
    adv_rate: float = 0.0  # head-of-line injections per ms
    adv_size_mult: float = 8.0
    timeout_ms: float = 900.0
    duration_ms: float = 60_000.0

    def __post_init__(self) -> None:
        if self.arrival_rate <= 0 or self.service_mean_ms <= 0:
            raise ConfigurationError("rates and service mean must be positive")
        if self.timeout_ms <= 0 or self.duration_ms <= 0:
            raise ConfigurationError("timeout and duration must be positive")
        if self.frags_per_job < 1:
            raise ConfigurationError("jobs need at least one fragment")
        if not 0 <= self.retry_p < 1 or not 0 <= self.error_p < 1:
            raise ConfigurationError("probabilities must be in [0,1)")


@dataclass(frozen=True)
class RunMetrics:
    jitter_ms: float
    ttfr_ms: float
    success_frac: float
    timeout_frac: float
    error_frac: float
    qps_raw: float
    qps_success: float
    phasepad_overhead: float

    def __post_init__(self) -> None:
        total = self.success_frac + self.timeout_frac + self.error_frac
        if abs(total - 1.0) > 1e-9:
            raise DomainError(f"outcome fractions sum to {total}, not 1")
        if min(self.jitter_ms, self.ttfr_ms, self.qps_raw, self.qps_success) < 0:
            raise DomainError("metrics must be nonnegative")


@dataclass(frozen=True)
class SloTargets:
    jitter_max: float = 150.0
    ttfr_max: float = 220.0
    success_min: float = 0.97
    timeout_max: float = 0.005
    error_max: float = 0.025
    overhead_max: float = 0.01


def _lognormal_services(rng: np.random.Generator, mean: float, sigma: float, size) -> np.ndarray:
    mu = math.log(mean) - 0.5 * sigma * sigma
    return rng.lognormal(mu, sigma, size=size)


def _tenant_arrivals(scenario: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    """Arrival times; with bursts the rate alternates between base and base*mult."""
    times: list[float] = []
    t = 0.0
    if not scenario.burst:
        while True:
            t += rng.exponential(1.0 / scenario.arrival_rate)
            if t >= scenario.duration_ms:
                break
            times.append(t)
        return np.array(times)
    phase_on = False
    phase_end = rng.exponential(scenario.burst_off_ms)
    while t < scenario.duration_ms:
        rate = scenario.arrival_rate * (scenario.burst_mult if phase_on else 1.0)
        t += rng.exponential(1.0 / rate)
        if t >= phase_end:
            t = phase_end
            phase_on = not phase_on
            phase_end = t + rng.exponential(scenario.burst_on_ms if phase_on else scenario.burst_off_ms)
            continue
        if t < scenario.duration_ms:
            times.append(t)
    return np.array(times)


@dataclass
class _Episode:
    """Pre-generated randomness for one episode, shared across overhead levels."""

    arrivals: np.ndarray
    services: np.ndarray  # (jobs, frags)
    errors: np.ndarray
    retries: np.ndarray  # (jobs, frags) uniforms
    adv_times: np.ndarray
    adv_services: np.ndarray


def _generate_episode(scenario: ScenarioConfig, seed: int, episode: int) -> _Episode:
    arr_rng = rngmod.stream(seed, "tier2", "arrivals", episode)
    svc_rng = rngmod.stream(seed, "tier2", "services", episode)
    flag_rng = rngmod.stream(seed, "tier2", "flags", episode)
    adv_rng = rngmod.stream(seed, "tier2", "adversary", episode)

    arrivals = _tenant_arrivals(scenario, arr_rng)
    n_jobs = arrivals.size
    f = scenario.frags_per_job
    services = _lognormal_services(svc_rng, scenario.service_mean_ms, scenario.service_dispersion, (n_jobs, f))
    errors = flag_rng.random(n_jobs) < scenario.error_p
    retries = flag_rng.random((n_jobs, f))

    if scenario.adv_rate > 0:
        gaps = adv_rng.exponential(1.0 / scenario.adv_rate, size=max(16, int(scenario.duration_ms * scenario.adv_rate * 3)))
        adv_times = np.cumsum(gaps)
        adv_times = adv_times[adv_times < scenario.duration_ms]
        adv_services = _lognormal_services(
            adv_rng, scenario.service_mean_ms * scenario.adv_size_mult, scenario.service_dispersion, adv_times.size
        )
    else:
        adv_times = np.empty(0)
        adv_services = np.empty(0)
    return _Episode(arrivals, services, errors, retries, adv_times, adv_services)


_ARRIVE, _ADV, _DONE = 0, 1, 2


def _run_events(scenario: ScenarioConfig, ep: _Episode, overhead: float) -> RunMetrics:
    inflate = 1.0 + overhead
    n_jobs = ep.arrivals.size
    f = scenario.frags_per_job
    horizon = scenario.duration_ms

    heap: list[tuple[float, int, int, int, int]] = []  # (time, kind, seq, job, frag)
    seq = 0
    for j in range(n_jobs):
        heap.append((float(ep.arrivals[j]), _ARRIVE, seq, j, 0))
        seq += 1
    for a in range(ep.adv_times.size):
        heap.append((float(ep.adv_times[a]), _ADV, seq, a, 0))
        seq += 1
    heapq.heapify(heap)

    queue: deque[tuple[int, int, int]] = deque()  # (job, frag, attempt); job -1 = adversarial
    serving: tuple[int, int, int] | None = None
    first_done = np.full(n_jobs, np.nan)
    remaining = np.full(n_jobs, f, dtype=np.int64)
    job_done = np.full(n_jobs, np.nan)

    def start_service(now: float) -> None:
        nonlocal serving, seq
        if serving is not None or not queue:
            return
        job, frag, attempt = queue.popleft()
        serving = (job, frag, attempt)
        dur = (ep.adv_services[frag] if job < 0 else ep.services[job, frag]) * inflate
        heapq.heappush(heap, (now + dur, _DONE, seq, job, frag))
        seq += 1

    while heap:
        now, kind, _s, job, frag = heapq.heappop(heap)
        if now > horizon:
            break
        if kind == _ARRIVE:
            for k in range(f):
                queue.append((job, k, 0))
        elif kind == _ADV:
            queue.appendleft((-1, job, 0))
        else:  # service completion
            _sjob, sfrag, attempt = serving  # type: ignore[misc]
            serving = None
            if _sjob >= 0:
                if attempt == 0 and ep.retries[_sjob, sfrag] < scenario.retry_p:
                    queue.append((_sjob, sfrag, 1))
                else:
                    if np.isnan(first_done[_sjob]):
                        first_done[_sjob] = now
                    remaining[_sjob] -= 1
                    if remaining[_sjob] == 0:
                        job_done[_sjob] = now
        start_service(now)

    resolved = ~np.isnan(job_done)
    n_res = int(resolved.sum())
    if n_res == 0:
        return RunMetrics(0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, overhead)

    latency = job_done[resolved] - ep.arrivals[resolved]
    ttfr = first_done[resolved] - ep.arrivals[resolved]
    err = ep.errors[resolved]
    timeout = (latency > scenario.timeout_ms) & ~err
    success = ~err & ~timeout

    order = np.argsort(job_done[resolved], kind="stable")
    lat_seq = latency[order]
    jitter = float(np.median(np.abs(np.diff(lat_seq)))) if lat_seq.size >= 2 else 0.0

    dur_s = horizon / 1000.0
    return RunMetrics(
        jitter_ms=jitter,
        ttfr_ms=float(np.median(ttfr)),
        success_frac=float(success.mean()),
        timeout_frac=float(timeout.mean()),
        error_frac=float(err.mean()),
        qps_raw=n_res / dur_s,
        qps_success=float(success.sum()) / dur_s,
        phasepad_overhead=overhead,
    )


def simulate_queue(
    scenario: ScenarioConfig, episodes: int, seed: int, overhead: float = 0.0
) -> list[RunMetrics]:
    """Per-episode metrics; deterministic given (scenario, seed)."""
    if episodes < 1:
        raise ConfigurationError("need at least one episode")
    out = []
    for e in range(episodes):
        ep = _generate_episode(scenario, seed, e)
        out.append(_run_events(scenario, ep, overhead))
    return out


def overhead_sweep(
    scenario: ScenarioConfig,
    levels: Sequence[float],
    seed: int,
    episodes: int = 30,
) -> dict[float, float]:
    """Median relative throughput per overhead level, normalized to level 0.

    Episodes share pre-generated draws across levels, so the per-episode
    ratio isolates the service inflation.
    """
    for lvl in levels:
        if not 0.0 <= lvl <= 0.05:
            raise DomainError("overhead levels must be in [0, 0.05]")
    eps = [_generate_episode(scenario, seed, e) for e in range(episodes)]
    base = np.array([_run_events(scenario, ep, 0.0).qps_raw for ep in eps])
    if (base <= 0).any():
        raise DomainError("zero baseline throughput; episode too short")
    out: dict[float, float] = {}
    for lvl in levels:
        qps = np.array([_run_events(scenario, ep, lvl).qps_raw for ep in eps])
        out[float(lvl)] = float(np.median(qps / base))
    return out


def evaluate_slos(
    metrics_by_scenario: Mapping[str, Sequence[RunMetrics]],
    targets: SloTargets,
    ci_resamples: int = 10_000,
    ci_seed: int = 0,
) -> dict:
    """Median per metric with bootstrap CI and an inclusive pass/fail verdict."""
    checks = (
        ("jitter_ms", targets.jitter_max, "max"),
        ("ttfr_ms", targets.ttfr_max, "max"),
        ("success_frac", targets.success_min, "min"),
        ("timeout_frac", targets.timeout_max, "max"),
        ("error_frac", targets.error_max, "max"),
    )
    dashboard: dict = {}
    for name, metrics in sorted(metrics_by_scenario.items()):
        if len(metrics) < 30:
            raise DomainError(f"scenario {name}: need >= 30 episodes, got {len(metrics)}")
        entry: dict = {}
        for metric, target, sense in checks:
            values = [getattr(m, metric) for m in metrics]
            ci = bootstrap_ci(values, statistic="median", resamples=ci_resamples, seed=ci_seed)
            ok = ci.statistic <= target if sense == "max" else ci.statistic >= target
            entry[metric] = {
                "median": ci.statistic,
                "ci_lower": ci.lower,
                "ci_upper": ci.upper,
                "target": target,
                "sense": sense,
                "decision": "pass" if ok else "fail",
            }
        dashboard[name] = entry
    return dashboard
