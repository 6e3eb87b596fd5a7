"""Closed-loop simulation: drifting fragment truth, tracking, and allocation.

Each episode runs a fixed-horizon loop over synthetic per-fragment variance
truth. Per step: the previous plan's shots produce a sample-variance
observation, the per-fragment filters and change detectors update, a trigger
refines the partition, the active policy allocates the next budget, and the
estimator switch picks an arm per fragment. Policy arms share the truth and
observation random streams (common random numbers), so differences between
arms are attributable to allocation alone.

The stitched-variance proxy for a step is the quadratic-form bound evaluated
against the true topology covariance and true uncertainties, so arm ratios
have a closed-form oracle at every step.
"""

from __future__ import annotations

import math
import time
from collections.abc import Sequence
from dataclasses import dataclass

import networkx as nx
import numpy as np

from . import rng as rngmod
from .allocator import (
    CovarianceModel,
    KernelParams,
    ShotPlan,
    TailParams,
    Topology,
    allocate,
    build_covariance,
    cadence_events,
    heavy_hex,
    tail_factor,
    variance_bound,
    waterfill,
)
from .cascade import CascadeFit, EstimatorChoice, choose_estimator, pilot_budget, predict_mse
from .cutgraph import (
    BlockCaps,
    Gate,
    Hypergraph,
    NormalizationRefs,
    Partition,
    PolicyWeights,
    cut_set,
    e_bits,
    fm_refine,
    from_gates,
    initial_partition,
)
from .drifttrack import (
    CusumConfig,
    CusumState,
    KalmanConfig,
    KalmanState,
    calibrate_process_noise,
    cusum_update,
    kalman_step,
)
from .errors import ConfigurationError, DomainError, PairingError
from .phasepad import AuditLog, Fragment, SecurityParams, dispatch, verify_and_recover

WORKLOAD_TABLE: dict[str, dict] = {
    # fragment count and characteristic pilot-entropy range (bits)
    "QAOA-MaxCut": {"fragments": 16, "entropy": (1.0, 3.0)},
    "UCCSD-LiH": {"fragments": 12, "entropy": (1.0, 2.5)},
    "TFIM": {"fragments": 10, "entropy": (0.2, 1.2)},
    "RandomCliffordT": {"fragments": 24, "entropy": (3.0, 4.0)},
    "PhaseEstimation": {"fragments": 8, "entropy": (0.1, 1.0)},
}

POLICIES = ("Uniform", "Proportional", "TopoGP")


@dataclass(frozen=True)
class DriftEvent:
    time: int
    indices: tuple[int, ...]
    multiplier: float


@dataclass(frozen=True)
class WorkloadSpec:
    name: str
    n: int
    topology: Topology
    sigma0: tuple[float, ...]  # true initial variances
    process_q: tuple[float, ...]
    drift: tuple[DriftEvent, ...]
    entropy_bits: tuple[float, ...]
    hypergraph: Hypergraph
    caps: BlockCaps
    cut_budget: int

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ConfigurationError("need at least one fragment")
        if any(s < 0 for s in self.sigma0):
            raise ConfigurationError("true variances must be nonnegative")


def _synth_circuit(n: int) -> Hypergraph:
    """Chain of two-qubit fragments: 3 gates per pair plus bridging gates."""
    gates: list[Gate] = []
    gid = 0
    for i in range(n):
        q0, q1 = 2 * i, 2 * i + 1
        for d in range(3):
            gates.append(Gate(gid=gid, qubits=frozenset({q0, q1}), depth=d))
            gid += 1
    for i in range(n - 1):
        gates.append(Gate(gid=gid, qubits=frozenset({2 * i + 1, 2 * i + 2}), depth=1))
        gid += 1
    return from_gates(gates)


def _spread_anchors(graph, n: int, rng: np.random.Generator, min_dist: int = 3) -> list[int]:
    """Greedy anchor placement keeping pairwise hop distance >= min_dist."""
    nodes = list(graph.nodes)
    order = [nodes[int(i)] for i in rng.permutation(len(nodes))]
    chosen: list[int] = []
    dists: list[dict[int, int]] = []
    for node in order:
        if len(chosen) == n:
            break
        if all(d.get(node, min_dist) >= min_dist for d in dists):
            chosen.append(node)
            dists.append(nx.single_source_shortest_path_length(graph, node, cutoff=min_dist - 1))
    for node in order:  # best effort if the lattice is too small
        if len(chosen) == n:
            break
        if node not in chosen:
            chosen.append(node)
    if len(chosen) < n:
        raise ConfigurationError("topology too small for the fragment count")
    return chosen[:n]


def synth_workload(
    name: str,
    seed: int,
    steps: int = 40,
    sigma_spread: float = 4.0,
    hot_fraction: float = 0.25,
    drift_time: int | None = None,
) -> WorkloadSpec:
    """Deterministic workload: two-tier variance spread with hot-spot migration.

    sigma_spread is the ratio of hot to cold standard deviation. The single
    scheduled drift (default at steps//2) drops the hot set to the cold tier
    and raises an equal-size cold set, preserving the overall composition.
    """
    if name not in WORKLOAD_TABLE:
        raise ConfigurationError(f"unknown workload {name!r}; known: {sorted(WORKLOAD_TABLE)}")
    if sigma_spread < 1.0:
        raise ConfigurationError("sigma_spread must be >= 1")
    table = WORKLOAD_TABLE[name]
    n = table["fragments"]
    gen = rngmod.stream(seed, "workload", name)

    rows = max(2, math.ceil(n / 6))
    topo_graph = heavy_hex(rows, 3)
    anchor_nodes = _spread_anchors(topo_graph, n, gen)
    topology = Topology(graph=topo_graph, anchors={i: anchor_nodes[i] for i in range(n)})

    n_hot = max(1, round(hot_fraction * n)) if sigma_spread > 1.0 else 0
    hot = gen.choice(n, size=n_hot, replace=False) if n_hot else np.array([], dtype=int)
    sigma0 = np.ones(n)
    sigma0[hot] = sigma_spread**2
    process_q = tuple((0.005 * s) ** 2 for s in sigma0)

    drift_events: list[DriftEvent] = []
    t_star = steps // 2 if drift_time is None else drift_time
    if 0 < t_star < steps and n_hot and sigma_spread > 1.0:
        cold = np.setdiff1d(np.arange(n), hot)
        rising = cold[gen.permutation(cold.size)[: min(n_hot, cold.size)]]
        mult = sigma_spread**2
        drift_events.append(DriftEvent(time=t_star, indices=tuple(int(i) for i in hot), multiplier=1.0 / mult))
        drift_events.append(DriftEvent(time=t_star, indices=tuple(int(i) for i in rising), multiplier=mult))
    for ev in drift_events:
        if not 0 <= ev.time < steps:
            raise ConfigurationError("drift time outside the episode horizon")

    lo, hi = table["entropy"]
    entropy = gen.uniform(lo, hi, size=n)

    return WorkloadSpec(
        name=name,
        n=n,
        topology=topology,
        sigma0=tuple(float(s) for s in sigma0),
        process_q=process_q,
        drift=tuple(drift_events),
        entropy_bits=tuple(float(h) for h in entropy),
        hypergraph=_synth_circuit(n),
        caps=BlockCaps(max_qubits=6, max_depth=3),
        cut_budget=4 * n,
    )


@dataclass(frozen=True)
class EpisodeConfig:
    steps: int = 40
    shots_per_step: int = 1500
    cadence: int = 500
    s_min: int = 5
    seed: int = 0
    policy: str = "TopoGP"
    kernel: KernelParams = KernelParams(sigma_k2=1.0, ell=1.0)
    tail_rho: float = 0.05
    cusum: CusumConfig = CusumConfig(kappa=1.5, h=6.0)
    kalman_q0: float = 1e-4
    kalman_p0: float = 1.0
    kalman_warmup: int = 10
    fit: CascadeFit = CascadeFit(alpha_shadows=1.0, beta_mle=120.0)
    cascade_enabled: bool = True
    pilot_fraction: float = 0.01
    security: SecurityParams = SecurityParams()
    secure_dispatch: bool = True

    def __post_init__(self) -> None:
        if self.policy not in POLICIES:
            raise ConfigurationError(f"unknown policy {self.policy!r}; known: {POLICIES}")
        if self.steps < 1:
            raise ConfigurationError("need at least one step")
        if self.cadence > self.shots_per_step:
            raise ConfigurationError("cadence must not exceed the per-step budget")


@dataclass
class StepRecord:
    step: int
    plan: ShotPlan
    kalman_means: tuple[float, ...]
    innovations: tuple[float, ...]
    cusum_triggers: tuple[bool, ...]
    repartition: bool
    choices: tuple[EstimatorChoice, ...]
    variance_proxy: float
    realized_sq_err: float
    observed: tuple[float, ...]


@dataclass
class EpisodeResult:
    workload: str
    seed: int
    policy: str
    records: list[StepRecord]
    realloc_events: int
    phasepad_seconds: float
    wall_seconds: float
    cut_sizes: tuple[int, int]  # cuts before/after the episode's refinements
    entropy_bits: tuple[float, ...] = ()

    @property
    def phasepad_share(self) -> float:
        return self.phasepad_seconds / self.wall_seconds if self.wall_seconds > 0 else 0.0


def evolve_truth(
    truth: np.ndarray,
    t: int,
    rng: np.random.Generator,
    process_q: Sequence[float],
    drift: Sequence[DriftEvent] = (),
) -> np.ndarray:
    """Random-walk step (clamped at zero) plus scheduled multiplicative jumps."""
    out = truth + rng.normal(0.0, np.sqrt(np.asarray(process_q, dtype=float)))
    out = np.maximum(out, 0.0)
    for ev in drift:
        if ev.time == t:
            out[list(ev.indices)] *= ev.multiplier
    return out


def observe(truth: np.ndarray, shots: Sequence[int], rngs: Sequence[np.random.Generator]) -> np.ndarray:
    """Sample variance of s_i zero-mean draws per fragment.

    With a single draw the sample variance is undefined and the squared draw
    is used instead. Effective observation noise shrinks with s_i.
    """
    z = np.empty(len(shots))
    for i, (s, gen) in enumerate(zip(shots, rngs)):
        if s < 1:
            raise DomainError("plan entries must be >= 1")
        draws = gen.normal(0.0, math.sqrt(truth[i]), size=int(s))
        z[i] = float(np.var(draws, ddof=1)) if s >= 2 else float(draws[0] ** 2)
    return z


def _uniform_plan(n: int, total: int, s_min: int) -> ShotPlan:
    base = total // n
    rem = total - base * n
    shots = tuple(base + (1 if i < rem else 0) for i in range(n))
    return ShotPlan(shots=shots, total=total, s_min=s_min)


def _round_preserving_sum(cont: np.ndarray, total: int, s_min: int) -> tuple[int, ...]:
    # Largest-remainder rounding; the epsilon keeps floors at s_min exact.
    base = np.floor(cont + 1e-9).astype(np.int64)
    frac = cont - base
    missing = int(total - base.sum())
    order = np.argsort(-frac, kind="stable")
    for idx in order[:missing]:
        base[idx] += 1
    return tuple(int(x) for x in base)


def _proportional_plan(means: np.ndarray, total: int, s_min: int) -> ShotPlan:
    w = np.sqrt(np.maximum(means, 1e-12))
    cont = waterfill(w**1.5, float(total), float(s_min))  # u^(2/3)=w: shots proportional to w
    return ShotPlan(shots=_round_preserving_sum(cont, total, s_min), total=total, s_min=s_min)


def _serialize_block(hg: Hypergraph, part: Partition, block: int) -> bytes:
    lines = [
        f"gate {g.gid} q={','.join(str(q) for q in sorted(g.qubits))} d={g.depth}"
        for g in hg.gates
        if part.assignment[g.gid] == block
    ]
    return "\n".join(lines).encode("utf-8") or b"empty"


def run_episode(workload: WorkloadSpec, cfg: EpisodeConfig, audit: AuditLog | None = None) -> EpisodeResult:
    """One closed-loop episode under the configured policy."""
    n = workload.n
    total = cfg.shots_per_step
    if total < n * cfg.s_min:
        raise ConfigurationError(f"budget {total} < {n} * floor {cfg.s_min}")

    t_wall = time.perf_counter()
    timings: dict[str, float] = {}

    weights = PolicyWeights(0.6, 0.3, 0.1)
    part = initial_partition(
        workload.hypergraph, workload.caps, workload.cut_budget, k=n, seed=cfg.seed
    )
    cuts_initial = len(cut_set(workload.hypergraph, part))
    refs = NormalizationRefs.from_first(
        max(e_bits(workload.hypergraph, part), 1.0), 1.0
    )
    queue_model = {b: 1.0 + 0.05 * b for b in range(1, n + 1)}  # synthetic per-block delay, ms

    if cfg.secure_dispatch:
        frags = [
            Fragment(
                fragment_id=f"{workload.name}-f{b}",
                payload=_serialize_block(workload.hypergraph, part, b + 1),
                shots=total // n,
            )
            for b in range(n)
        ]
        batch, rec = dispatch(
            frags, cfg.security, rngmod.stream(cfg.seed, workload.name, cfg.policy, "dispatch"),
            batch_id=f"{workload.name}-s{cfg.seed}", timings=timings,
        )
        report, _payloads = verify_and_recover(batch, cfg.security, rec, audit=audit, timings=timings)
        if report.decision != "accept":
            raise DomainError("honest-transport dispatch failed verification")

    truth = np.asarray(workload.sigma0, dtype=float)
    truth_rng = rngmod.stream(cfg.seed, workload.name, "truth")

    tail = TailParams(rho=cfg.tail_rho, n_obs=n)
    sigma_true_cov = build_covariance(
        workload.topology, workload.topology.fragment_ids(), cfg.kernel, [0.0] * n
    )
    cov_true = CovarianceModel(sigma=sigma_true_cov.sigma, sigma_tilde=sigma_true_cov.sigma)

    states: list[KalmanState] = [KalmanState(0.0, cfg.kalman_p0)] * n
    cusums = [CusumState(0.0) for _ in range(n)]
    q_cal: list[float] = [cfg.kalman_q0] * n
    z_hist: list[list[float]] = [[] for _ in range(n)]

    prev_plan = _uniform_plan(n, total, cfg.s_min)
    records: list[StepRecord] = []

    for t in range(cfg.steps):
        if t > 0:
            truth = evolve_truth(truth, t, truth_rng, workload.process_q, workload.drift)

        obs_rngs = [rngmod.stream(cfg.seed, workload.name, "obs", t, i) for i in range(n)]
        z = observe(truth, prev_plan.shots, obs_rngs)

        innovations = np.zeros(n)
        triggers = [False] * n
        if t == 0:
            states = [KalmanState(max(float(zi), 0.0), cfg.kalman_p0) for zi in z]
        else:
            for i in range(n):
                s_i = prev_plan.shots[i]
                r_i = 2.0 * max(states[i].mean, 1e-9) ** 2 / max(s_i - 1, 1)
                kcfg = KalmanConfig(q=q_cal[i], r=r_i)
                p_prior = states[i].p + kcfg.q
                innovations[i] = abs(z[i] - states[i].mean) / math.sqrt(p_prior + r_i)
                new_state = kalman_step(states[i], float(z[i]), kcfg)
                cusums[i], triggers[i] = cusum_update(cusums[i], float(innovations[i]), cfg.cusum)
                if triggers[i]:
                    # Change point detected: the filter's confidence is stale.
                    new_state = KalmanState(new_state.mean, new_state.p + (z[i] - states[i].mean) ** 2)
                states[i] = new_state

        for i in range(n):
            z_hist[i].append(float(z[i]))
        if t == cfg.kalman_warmup:
            q_cal = [max(calibrate_process_noise(np.array(h)), 1e-12) for h in z_hist]

        repartition = any(triggers)
        if repartition:
            part = fm_refine(
                workload.hypergraph, part, weights, refs, queue_model=queue_model, max_passes=2
            )
            refs = refs.updated(max(e_bits(workload.hypergraph, part), 1e-9), 1.0)

        if cfg.policy == "Uniform":
            plan = _uniform_plan(n, total, cfg.s_min)
        elif cfg.policy == "Proportional":
            plan = _proportional_plan(np.array([st.mean for st in states]), total, cfg.s_min)
        else:
            safe_states = [
                st if st.mean > 0 else KalmanState(1e-12, st.p) for st in states
            ]
            plan = allocate(
                safe_states, workload.topology, cfg.kernel, tail, total, cfg.s_min, cfg.cadence
            )

        u_true = np.array([tail_factor(math.sqrt(v), tail) for v in truth])
        proxy = variance_bound(u_true, plan.shots, cov_true) if u_true.any() else 0.0

        err_rng = rngmod.stream(cfg.seed, workload.name, "esterr", t)
        eps = err_rng.normal(0.0, 1.0, size=n)
        choices: list[EstimatorChoice] = []
        sq_errs = np.empty(n)
        for i in range(n):
            s_eff = max(1, plan.shots[i] - pilot_budget(plan.shots[i], cfg.pilot_fraction))
            h_i = workload.entropy_bits[i]
            if cfg.cascade_enabled:
                choice = choose_estimator(cfg.fit, s_eff, h_i)
            else:
                choice = EstimatorChoice.SHADOWS
            mse_sh, mse_ml = predict_mse(cfg.fit, s_eff, h_i)
            mse = mse_ml if choice is EstimatorChoice.MLE else mse_sh
            sq_errs[i] = eps[i] ** 2 * mse
            choices.append(choice)

        records.append(
            StepRecord(
                step=t,
                plan=plan,
                kalman_means=tuple(st.mean for st in states),
                innovations=tuple(float(x) for x in innovations),
                cusum_triggers=tuple(triggers),
                repartition=repartition,
                choices=tuple(choices),
                variance_proxy=float(proxy),
                realized_sq_err=float(sq_errs.mean()),
                observed=tuple(float(zi) for zi in z),
            )
        )
        prev_plan = plan

    wall = time.perf_counter() - t_wall
    return EpisodeResult(
        workload=workload.name,
        seed=cfg.seed,
        policy=cfg.policy,
        records=records,
        realloc_events=cadence_events(cfg.steps * total, cfg.cadence),
        phasepad_seconds=sum(timings.values()),
        wall_seconds=wall,
        cut_sizes=(cuts_initial, len(cut_set(workload.hypergraph, part))),
        entropy_bits=workload.entropy_bits,
    )


def episode_metrics(
    result_policy: EpisodeResult, result_uniform: EpisodeResult
) -> tuple[float, float, float]:
    """(variance contraction, p95 tail shots, final MSE) for a paired episode.

    Contraction is the mean over steps of the per-step proxy ratio; the tail
    is the 95th percentile of final-step per-fragment shots; final MSE is
    the mean realized squared error at the final step.
    """
    if (result_policy.workload, result_policy.seed) != (result_uniform.workload, result_uniform.seed):
        raise PairingError("paired episodes must share workload and seed")
    if result_uniform.policy != "Uniform":
        raise PairingError("the reference arm must be the Uniform policy")
    ratios = [
        rp.variance_proxy / ru.variance_proxy
        for rp, ru in zip(result_policy.records, result_uniform.records)
        if ru.variance_proxy > 0
    ]
    contraction = float(np.mean(ratios)) if ratios else 1.0
    p95 = float(np.percentile(result_policy.records[-1].plan.shots, 95))
    final_mse = result_policy.records[-1].realized_sq_err
    return contraction, p95, final_mse
