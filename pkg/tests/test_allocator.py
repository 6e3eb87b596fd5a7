"""Allocator tests: kernel, covariance, bounds, water-filling, integer projection."""

import itertools
import math

import networkx as nx
import numpy as np
import pytest
from scipy.optimize import minimize

from maestrocut import rng as rngmod
from maestrocut.allocator import (
    CovarianceModel,
    KernelParams,
    ShotPlan,
    TailParams,
    Topology,
    allocate,
    build_covariance,
    cadence_events,
    heavy_hex,
    integer_project,
    kernel,
    load_topology_graph,
    spectral_bound,
    tail_factor,
    variance_bound,
    waterfill,
)
from maestrocut.drifttrack import KalmanState
from maestrocut.errors import ConfigurationError, DomainError, InfeasibilityError

PARAMS = KernelParams(sigma_k2=1.0, ell=2.0)


def sum_inverse_sq(u, s):
    return float(sum(ui**2 / si**2 for ui, si in zip(u, s)))


def numeric_waterfill(u, total, s_min):
    """Independent oracle: SLSQP on the allocation program."""
    u = np.asarray(u, dtype=float)
    n = u.size
    res = minimize(
        lambda s: float(np.sum(u**2 / s**2)),
        x0=np.full(n, total / n),
        jac=lambda s: -2.0 * u**2 / s**3,
        constraints=[{"type": "eq", "fun": lambda s: s.sum() - total}],
        bounds=[(max(s_min, 1e-9), None)] * n,
        method="SLSQP",
        options={"maxiter": 500, "ftol": 1e-14},
    )
    assert res.success, res.message
    return res.x


class TestTopology:
    def test_heavy_hex_structure(self):
        g = heavy_hex(2, 2)
        assert nx.is_connected(g)
        degrees = {d for _, d in g.degree}
        assert degrees <= {1, 2, 3}  # heavy-hex sites have degree <= 3
        cycles = nx.minimum_cycle_basis(g)
        assert cycles and all(len(c) == 12 for c in cycles)  # 12-site cells

    def test_spec_string_and_edge_list(self, tmp_path):
        g = load_topology_graph("heavyhex:2x3")
        assert g.number_of_nodes() > 20
        p = tmp_path / "topo.txt"
        p.write_text("0 1\n1 2\n2 3\n")
        g2 = load_topology_graph(str(p))
        assert g2.number_of_edges() == 3

    def test_distances_cached_and_correct(self):
        g = heavy_hex(2, 2)
        topo = Topology(graph=g, anchors={0: 0, 1: 5, 2: 1})
        assert topo.distance(0, 2) == 1
        assert topo.distance(0, 1) == nx.shortest_path_length(g, 0, 5)
        assert topo.distance(0, 0) == 0

    def test_anchor_validation(self):
        g = heavy_hex(1, 1)
        with pytest.raises(ConfigurationError):
            Topology(graph=g, anchors={0: 10_000})

    def test_disconnected_graph_rejected(self):
        g = nx.Graph([(0, 1), (2, 3)])
        with pytest.raises(ConfigurationError):
            Topology(graph=g, anchors={0: 0})


class TestKernel:
    def test_origin_value(self):
        assert kernel(0.0, PARAMS) == PARAMS.sigma_k2

    def test_length_scale_decay(self):
        assert abs(kernel(2.0, PARAMS) - PARAMS.sigma_k2 * math.exp(-1.0)) < 1e-15

    def test_strict_monotonicity(self):
        rng = rngmod.stream(1, "kern")
        for _ in range(100):
            d1, d2 = sorted(rng.uniform(0.0, 20.0, size=2))
            if d1 < d2:
                assert kernel(d1, PARAMS) > kernel(d2, PARAMS)

    def test_negative_distance_rejected(self):
        with pytest.raises(DomainError):
            kernel(-1.0, PARAMS)


class TestCovariance:
    def test_single_fragment_scalar(self):
        topo = Topology(graph=heavy_hex(1, 1), anchors={0: 0})
        cov = build_covariance(topo, [0], PARAMS, [0.7])
        assert cov.sigma.shape == (1, 1)
        assert abs(cov.sigma_tilde[0, 0] - (PARAMS.sigma_k2 + 0.7)) < 1e-15

    def test_two_fragments_closed_form_eigenvalues(self):
        g = heavy_hex(2, 2)
        topo = Topology(graph=g, anchors={0: 0, 1: 4})
        d = topo.distance(0, 1)
        cov = build_covariance(topo, [0, 1], PARAMS, [0.3, 0.2])
        off = PARAMS.sigma_k2 * math.exp(-d / PARAMS.ell)
        assert abs(cov.sigma[0, 1] - off) < 1e-15
        evals = np.linalg.eigvalsh(cov.sigma_tilde)
        assert (evals > 0).all()

    def test_shared_anchor_rank_deficiency(self):
        topo = Topology(graph=heavy_hex(1, 1), anchors={0: 0, 1: 0})
        cov0 = build_covariance(topo, [0, 1], PARAMS, [0.0, 0.0])
        assert abs(np.linalg.det(cov0.sigma)) < 1e-12  # singular
        cov1 = build_covariance(topo, [0, 1], PARAMS, [0.1, 0.1])
        assert np.linalg.eigvalsh(cov1.sigma_tilde).min() > 0


class TestTailFactor:
    def test_zero_log(self):
        assert tail_factor(3.0, TailParams(rho=0.9999999, n_obs=1)) < 1e-3

    def test_hand_computed(self):
        u = tail_factor(2.0, TailParams(rho=0.1, n_obs=10))
        assert abs(u - 2.0 * math.sqrt(math.log(100.0))) < 1e-12
        assert abs(u - 4.29193) < 1e-4

    def test_linear_in_sigma(self):
        tail = TailParams(rho=0.05, n_obs=12)
        assert abs(tail_factor(3.0, tail) - 3.0 * tail_factor(1.0, tail)) < 1e-12

    def test_invariant_rho_below_n(self):
        with pytest.raises(ConfigurationError):
            TailParams(rho=0.5, n_obs=0)


class TestBounds:
    def test_identity_reduces_to_diagonal_sum(self):
        cov = CovarianceModel(sigma=np.eye(3), sigma_tilde=np.eye(3))
        u, s = [1.0, 2.0, 3.0], [10.0, 20.0, 30.0]
        expected = sum(ui**2 / si**2 for ui, si in zip(u, s))
        assert abs(variance_bound(u, s, cov) - expected) < 1e-15
        assert abs(spectral_bound(u, s, cov) - expected) < 1e-12

    def test_diagonal_no_cross_terms(self):
        d = np.diag([2.0, 0.5, 1.5])
        cov = CovarianceModel(sigma=d, sigma_tilde=d)
        u, s = [1.0, 1.0, 2.0], [4.0, 5.0, 6.0]
        expected = sum(d[i, i] * u[i] ** 2 / s[i] ** 2 for i in range(3))
        assert abs(variance_bound(u, s, cov) - expected) < 1e-15

    def test_matches_double_sum_on_random_psd(self):
        rng = rngmod.stream(2, "bound")
        for _ in range(50):
            a = rng.normal(size=(4, 4))
            m = a @ a.T
            cov = CovarianceModel(sigma=m, sigma_tilde=m)
            u = rng.uniform(0.1, 2.0, size=4)
            s = rng.uniform(1.0, 100.0, size=4)
            direct = sum(
                u[i] * u[j] * m[i, j] / (s[i] * s[j]) for i in range(4) for j in range(4)
            )
            assert abs(variance_bound(u, s, cov) - direct) < 1e-12

    def test_rank_one_spectral_norm(self):
        v = np.array([1.0, 2.0, 2.0])
        m = np.outer(v, v)
        cov = CovarianceModel(sigma=m, sigma_tilde=m)
        got = spectral_bound([1.0, 1.0, 1.0], [1.0, 1.0, 1.0], cov)
        assert abs(got - float(v @ v) * 3.0) < 1e-9

    def test_spectral_dominates_on_1000_instances(self):
        rng = rngmod.stream(3, "lemma")
        for _ in range(1000):
            n = int(rng.integers(1, 9))
            a = rng.normal(size=(n, n))
            m = a @ a.T
            cov = CovarianceModel(sigma=m, sigma_tilde=m)
            u = rng.uniform(0.0, 3.0, size=n)
            s = rng.uniform(1.0, 50.0, size=n)
            assert spectral_bound(u, s, cov) >= variance_bound(u, s, cov) - 1e-9

    def test_zero_shots_rejected(self):
        cov = CovarianceModel(sigma=np.eye(2), sigma_tilde=np.eye(2))
        with pytest.raises(DomainError):
            variance_bound([1.0, 1.0], [5.0, 0.0], cov)


class TestWaterfill:
    def test_symmetry(self):
        alloc = waterfill([2.0, 2.0, 2.0, 2.0], 100.0, 0.0)
        assert np.allclose(alloc, 25.0)

    def test_closed_form_two_fragments(self):
        alloc = waterfill([1.0, 8.0], 9.0, 0.0)
        assert np.allclose(alloc, [1.8, 7.2], atol=1e-12)
        oracle = numeric_waterfill([1.0, 8.0], 9.0, 1e-6)
        assert np.allclose(alloc, oracle, rtol=1e-4)

    def test_active_floor_pins(self):
        alloc = waterfill([1.0, 100.0], 10.0, 2.0)
        assert np.allclose(alloc, [2.0, 8.0], atol=1e-9)
        oracle = numeric_waterfill([1.0, 100.0], 10.0, 2.0)
        assert np.allclose(alloc, oracle, atol=1e-4)

    def test_matches_numeric_minimizer_on_random_instances(self):
        rng = rngmod.stream(4, "wf")
        for _ in range(200):
            n = int(rng.integers(2, 17))
            u = rng.uniform(0.05, 10.0, size=n)
            s_min = float(rng.choice([0.0, 1.0, 5.0]))
            total = float(n * s_min + rng.uniform(10.0, 500.0))
            mine = waterfill(u, total, s_min)
            assert abs(mine.sum() - total) < 1e-6
            assert (mine >= s_min - 1e-9).all()
            oracle = numeric_waterfill(u, total, s_min)
            obj_mine, obj_oracle = sum_inverse_sq(u, mine), sum_inverse_sq(u, oracle)
            assert obj_mine <= obj_oracle * (1.0 + 1e-6)

    def test_zero_uncertainty_sits_at_floor(self):
        alloc = waterfill([0.0, 1.0, 1.0], 100.0, 3.0)
        assert alloc[0] == 3.0

    def test_infeasible_budget(self):
        with pytest.raises(InfeasibilityError):
            waterfill([1.0, 1.0], 3.0, 2.0)


def exhaustive_integer_best(u, total, s_min):
    lo = max(s_min, 1)
    best = None
    for split in itertools.product(range(lo, total + 1), repeat=len(u)):
        if sum(split) != total:
            continue
        obj = sum_inverse_sq(u, split)
        if best is None or obj < best[0]:
            best = (obj, split)
    return best


class TestIntegerProject:
    def test_integer_input_unchanged(self):
        plan = integer_project([2.0, 7.0], 9, [1.0, 8.0], 0)
        assert plan.shots == (2, 7)

    def test_matches_exhaustive_on_spec_example(self):
        plan = integer_project([1.8, 7.2], 9, [1.0, 8.0], 0)
        assert plan.shots == (2, 7)
        best = exhaustive_integer_best([1.0, 8.0], 9, 1)
        assert abs(sum_inverse_sq([1.0, 8.0], plan.shots) - best[0]) < 1e-12

    def test_never_breaks_floor(self):
        rng = rngmod.stream(5, "ip")
        for _ in range(50):
            n = int(rng.integers(2, 6))
            u = rng.uniform(0.1, 5.0, size=n)
            s_min = int(rng.choice([1, 2, 5]))
            total = int(n * s_min + rng.integers(1, 60))
            plan = integer_project(waterfill(u, float(total), float(s_min)), total, u, s_min)
            assert sum(plan.shots) == total
            assert min(plan.shots) >= s_min

    def test_exact_optimality_small_instances(self):
        rng = rngmod.stream(6, "ip")
        for _ in range(150):
            n = int(rng.integers(2, 5))
            u = rng.uniform(0.1, 6.0, size=n)
            total = int(rng.integers(n, 41))
            cont = waterfill(u, float(total), 1.0)
            plan = integer_project(cont, total, u, 1)
            best = exhaustive_integer_best(u, total, 1)
            assert sum_inverse_sq(u, plan.shots) <= best[0] * (1 + 1e-12)

    def test_permutation_equivariance(self):
        rng = rngmod.stream(7, "ip")
        u = rng.uniform(0.2, 5.0, size=6)
        cont = waterfill(u, 200.0, 2.0)
        plan = integer_project(cont, 200, u, 2)
        perm = rng.permutation(6)
        plan_p = integer_project(cont[perm], 200, u[perm], 2)
        assert tuple(np.array(plan.shots)[perm]) == plan_p.shots

    def test_shotplan_invariants(self):
        with pytest.raises(DomainError):
            ShotPlan(shots=(3, 3), total=7, s_min=1)
        with pytest.raises(DomainError):
            ShotPlan(shots=(0, 7), total=7, s_min=1)


class TestAllocate:
    def make_topo(self, n):
        g = heavy_hex(3, 3)
        nodes = sorted(g.nodes)
        return Topology(graph=g, anchors={i: nodes[3 * i] for i in range(n)})

    def test_single_fragment_takes_all(self):
        topo = self.make_topo(1)
        plan = allocate([KalmanState(2.0, 0.1)], topo, PARAMS, TailParams(0.05, 1), 500, 1)
        assert plan.shots == (500,)

    def test_identical_states_near_uniform(self):
        topo = self.make_topo(4)
        states = [KalmanState(1.5, 0.2)] * 4
        plan = allocate(states, topo, PARAMS, TailParams(0.05, 4), 1001, 1)
        assert max(plan.shots) - min(plan.shots) <= 1

    def test_cadence_event_arithmetic(self):
        assert cadence_events(1500, 500) == 3
        assert cadence_events(1499, 500) == 2
        with pytest.raises(ConfigurationError):
            cadence_events(100, 0)

    def test_permuting_fragments_permutes_plan(self):
        g = heavy_hex(3, 3)
        nodes = sorted(g.nodes)
        anchors_a = {0: nodes[0], 1: nodes[7], 2: nodes[19]}
        # fragment i of B is fragment pi(i) of A, pi = (1, 2, 0)
        anchors_b = {0: nodes[7], 1: nodes[19], 2: nodes[0]}
        states = [KalmanState(1.0, 0.1), KalmanState(4.0, 0.1), KalmanState(2.0, 0.1)]
        plan_a = allocate(states, Topology(g, anchors_a), PARAMS, TailParams(0.05, 3), 300, 1)
        states_b = [states[1], states[2], states[0]]
        plan_b = allocate(states_b, Topology(g, anchors_b), PARAMS, TailParams(0.05, 3), 300, 1)
        assert plan_b.shots == (plan_a.shots[1], plan_a.shots[2], plan_a.shots[0])
