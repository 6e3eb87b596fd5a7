"""Built-in oracle batteries: quick independent checks of the core math.

Each battery re-derives expected values by brute force (enumeration,
exhaustive search, or a generic numeric minimizer) and compares against the
production path. `maestrocut selftest` runs them all and prints one line per
battery.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.optimize import minimize

from . import rng as rngmod
from .allocator import CovarianceModel, integer_project, spectral_bound, variance_bound, waterfill
from .cascade import CascadeFit, choose_estimator, crossover_shots, pilot_entropy, predict_mse
from .cutgraph import (
    BlockCaps,
    Gate,
    Hyperedge,
    Hypergraph,
    NormalizationRefs,
    Partition,
    PolicyWeights,
    cut_set,
    from_gates,
    move_gain,
    objective,
)
from .drifttrack import CusumConfig, CusumState, KalmanConfig, KalmanState, cusum_update, kalman_step
from .phasepad import (
    SecurityParams,
    accept_incorrect_bound,
    detection_lower_bound,
    keystream,
    mask_payload,
    open_header,
    seal_header,
)


def _random_hypergraph(rng: np.random.Generator, n: int = 8) -> Hypergraph:
    gates = [
        Gate(gid=i, qubits=frozenset({int(rng.integers(0, 6)), int(rng.integers(6, 12))}), depth=int(rng.integers(0, 4)))
        for i in range(n)
    ]
    return from_gates(gates)


def _random_partition(rng: np.random.Generator, hg: Hypergraph, k: int = 2) -> Partition:
    assign = {g.gid: int(rng.integers(1, k + 1)) for g in hg.gates}
    return Partition(assign, BlockCaps(99, 99), cut_budget=99, num_blocks=k)


def check_cut_set() -> bool:
    rng = rngmod.stream(7, "selftest", "cut")
    for _ in range(20):
        hg = _random_hypergraph(rng)
        part = _random_partition(rng, hg)
        expected = frozenset(
            e.eid for e in hg.edges if len({part.assignment[v] for v in e.members}) >= 2
        )
        if cut_set(hg, part) != expected:
            return False
    return True


def check_move_gain() -> bool:
    rng = rngmod.stream(7, "selftest", "gain")
    weights = PolicyWeights(0.7, 0.2, 0.1)
    refs = NormalizationRefs(2.0, 3.0)
    for _ in range(10):
        hg = _random_hypergraph(rng)
        part = _random_partition(rng, hg)
        for g in hg.gates:
            for b in range(1, 3):
                before = objective(hg, part, weights, refs, queue_model={1: 1.0, 2: 2.0}).j
                after = objective(hg, part.with_move(g.gid, b), weights, refs, queue_model={1: 1.0, 2: 2.0}).j
                got = move_gain(hg, part, g.gid, b, weights, refs, queue_model={1: 1.0, 2: 2.0})
                if abs(got - (before - after)) > 1e-12:
                    return False
    return True


def check_waterfill() -> bool:
    rng = rngmod.stream(7, "selftest", "wf")
    for _ in range(25):
        n = int(rng.integers(2, 8))
        u = rng.uniform(0.1, 5.0, size=n)
        total, s_min = 200.0, 2.0
        mine = waterfill(u, total, s_min)
        res = minimize(
            lambda s: float(np.sum(u**2 / s**2)),
            x0=np.full(n, total / n),
            constraints=[{"type": "eq", "fun": lambda s: s.sum() - total}],
            bounds=[(s_min, None)] * n,
            method="SLSQP",
        )
        obj_mine = float(np.sum(u**2 / mine**2))
        if res.success and obj_mine > res.fun * (1 + 1e-6):
            return False
    return True


def check_integer_projection() -> bool:
    rng = rngmod.stream(7, "selftest", "ip")
    for _ in range(25):
        n = int(rng.integers(2, 4))
        u = rng.uniform(0.2, 4.0, size=n)
        total = int(rng.integers(n * 2, 30))
        cont = waterfill(u, float(total), 1.0)
        plan = integer_project(cont, total, u, 1)
        best = min(
            (sum(ui**2 / si**2 for ui, si in zip(u, split)), split)
            for split in itertools.product(range(1, total + 1), repeat=n)
            if sum(split) == total
        )
        got = sum(ui**2 / si**2 for ui, si in zip(u, plan.shots))
        if got > best[0] * (1 + 1e-12):
            return False
    return True


def check_spectral() -> bool:
    rng = rngmod.stream(7, "selftest", "spec")
    for _ in range(200):
        n = int(rng.integers(1, 7))
        a = rng.normal(size=(n, n))
        cov = CovarianceModel(sigma=a @ a.T, sigma_tilde=a @ a.T + np.eye(n) * 1e-9)
        u = rng.uniform(0.0, 3.0, size=n)
        s = rng.uniform(1.0, 50.0, size=n)
        if spectral_bound(u, s, cov) < variance_bound(u, s, cov) - 1e-9:
            return False
    return True


def check_tracking() -> bool:
    st = kalman_step(KalmanState(1.0, 0.05), 1.5, KalmanConfig(q=0.01, r=0.04))
    if abs(st.mean - 1.3) > 1e-12 or abs(st.p - 0.024) > 1e-12:
        return False
    s1, t1 = cusum_update(CusumState(0.0), 1.0, CusumConfig(0.5, 1.0))
    s2, t2 = cusum_update(s1, 1.0, CusumConfig(0.5, 1.0))
    return (abs(s1.s - 0.5) < 1e-12 and not t1) and (t2 and s2.s == 0.0)


def check_cascade() -> bool:
    fit = CascadeFit(alpha_shadows=1.0, beta_mle=100.0, bias_b0=0.0, bias_h_thr=0.0)
    if crossover_shots(fit, 2.0) != 100:
        return False
    for s in (50, 99, 100, 101, 200):
        mse_sh, mse_ml = predict_mse(fit, s, 2.0)
        want = "MLE" if mse_ml <= mse_sh else "Shadows"
        if choose_estimator(fit, s, 2.0).value != want:
            return False
    return abs(pilot_entropy((3, 1)) - 0.8112781244591328) < 1e-12


def check_phasepad() -> bool:
    params = SecurityParams()
    rng = rngmod.stream(7, "selftest", "pp")
    key = rng.bytes(8)
    payload = rng.bytes(64)
    if mask_payload(mask_payload(payload, key), key) != payload:
        return False
    ks = keystream(key, len(payload))
    ref = bytes(p ^ k for p, k in zip(payload, ks))
    if mask_payload(payload, key) != ref:
        return False
    hk, nonce = rng.bytes(32), rng.bytes(12)
    sealed = seal_header(b"hdr", hk, nonce, params)
    if open_header(sealed, hk, params) != b"hdr":
        return False
    tampered = bytearray(sealed)
    tampered[40] ^= 1
    try:
        open_header(bytes(tampered), hk, params)
        return False
    except Exception:
        pass
    return (
        abs(detection_lower_bound(100, 2, 10) - (1 - 0.98**10)) < 1e-12
        and abs(accept_incorrect_bound(200, 0.1) - np.exp(-4.0)) < 1e-12
    )


BATTERIES = (
    ("cut-set brute force", check_cut_set),
    ("move-gain recomputation", check_move_gain),
    ("water-filling vs SLSQP", check_waterfill),
    ("integer projection vs exhaustive", check_integer_projection),
    ("spectral vs quadratic bound", check_spectral),
    ("kalman/cusum hand values", check_tracking),
    ("cascade rules", check_cascade),
    ("phasepad round trip", check_phasepad),
)


def run_all() -> bool:
    ok = True
    for name, fn in BATTERIES:
        try:
            passed = fn()
        except Exception as exc:  # a crash is a failure, not an abort
            print(f"FAIL {name}: {type(exc).__name__}: {exc}")
            ok = False
            continue
        print(("ok   " if passed else "FAIL ") + name)
        ok = ok and passed
    return ok
