"""Closed-loop episode tests: workload synthesis, observation, paired metrics."""

import numpy as np
import pytest

from maestrocut import rng as rngmod
from maestrocut.allocator import cadence_events
from maestrocut.cascade import EstimatorChoice
from maestrocut.errors import ConfigurationError, PairingError
from maestrocut.report import bootstrap_ci
from maestrocut.tier1 import (
    WORKLOAD_TABLE,
    DriftEvent,
    EpisodeConfig,
    episode_metrics,
    evolve_truth,
    observe,
    run_episode,
    synth_workload,
)


class TestSynthWorkload:
    def test_determinism(self):
        a = synth_workload("TFIM", seed=5)
        b = synth_workload("TFIM", seed=5)
        assert a.sigma0 == b.sigma0
        assert a.entropy_bits == b.entropy_bits
        assert a.drift == b.drift
        assert a.topology.anchors == b.topology.anchors

    def test_degenerate_spread_is_homogeneous(self):
        spec = synth_workload("TFIM", seed=1, sigma_spread=1.0)
        assert len(set(spec.sigma0)) == 1
        assert spec.drift == ()

    def test_fragment_count_table_echo(self):
        for name, entry in WORKLOAD_TABLE.items():
            spec = synth_workload(name, seed=0)
            assert spec.n == entry["fragments"]
            assert len(spec.sigma0) == spec.n
            assert len(spec.topology.anchors) == spec.n

    def test_unknown_name_rejected(self):
        with pytest.raises(ConfigurationError):
            synth_workload("Chemistry-Mystery", seed=0)

    def test_spread_ratio_on_sigma(self):
        spec = synth_workload("QAOA-MaxCut", seed=2, sigma_spread=4.0)
        sigmas = np.sqrt(np.array(spec.sigma0))
        assert abs(sigmas.max() / sigmas.min() - 4.0) < 1e-12


class TestEvolveTruth:
    def test_frozen_process(self):
        rng = rngmod.stream(1, "truth")
        truth = np.array([1.0, 2.0, 3.0])
        out = evolve_truth(truth, 5, rng, process_q=[0.0, 0.0, 0.0])
        assert np.array_equal(out, truth)

    def test_scheduled_step_applies_exactly_at_time(self):
        rng = rngmod.stream(2, "truth")
        ev = DriftEvent(time=7, indices=(1,), multiplier=3.0)
        truth = np.array([1.0, 1.0])
        at6 = evolve_truth(truth, 6, rng, [0.0, 0.0], [ev])
        assert np.array_equal(at6, truth)
        at7 = evolve_truth(truth, 7, rng, [0.0, 0.0], [ev])
        assert at7[1] == 3.0 and at7[0] == 1.0

    def test_increment_variance_matches_q(self):
        rng = rngmod.stream(3, "truth")
        q = 0.04
        truth = np.array([1000.0])  # far from the zero clamp
        path = [truth[0]]
        for t in range(10_000):
            truth = evolve_truth(truth, t, rng, [q])
            path.append(truth[0])
        inc_var = float(np.var(np.diff(path), ddof=1))
        assert abs(inc_var - q) < 0.1 * q


class TestObserve:
    def make_rngs(self, n, tag="obs"):
        return [rngmod.stream(9, tag, i) for i in range(n)]

    def test_zero_truth_gives_zero(self):
        z = observe(np.array([0.0, 0.0]), [10, 10], self.make_rngs(2))
        assert np.allclose(z, 0.0)

    def test_large_sample_concentrates(self):
        z = observe(np.array([1.0]), [10**6], self.make_rngs(1))
        assert abs(z[0] - 1.0) < 0.01

    def test_sample_variance_unbiased(self):
        rngs = self.make_rngs(1, tag="unbiased")
        vals = [observe(np.array([2.0]), [20], rngs)[0] for _ in range(10_000)]
        se = 2.0 * np.sqrt(2.0 / 19) / np.sqrt(len(vals))
        assert abs(np.mean(vals) - 2.0) < 4 * se

    def test_single_shot_fallback_squares_draw(self):
        z = observe(np.array([4.0]), [1], self.make_rngs(1, tag="single"))
        assert z[0] >= 0.0


def quick_cfg(seed, policy, **kw):
    defaults = dict(steps=20, shots_per_step=800, cadence=400, s_min=2, seed=seed, policy=policy,
                    secure_dispatch=False)
    defaults.update(kw)
    return EpisodeConfig(**defaults)


class TestRunEpisode:
    def test_step_records_well_formed(self):
        w = synth_workload("TFIM", seed=3, steps=20)
        res = run_episode(w, quick_cfg(3, "TopoGP"))
        assert len(res.records) == 20
        for rec in res.records:
            assert sum(rec.plan.shots) == 800
            if any(rec.cusum_triggers):
                assert rec.repartition

    def test_repartition_only_on_triggers(self):
        w = synth_workload("TFIM", seed=4, steps=20)
        res = run_episode(w, quick_cfg(4, "TopoGP"))
        for rec in res.records:
            assert rec.repartition == any(rec.cusum_triggers)

    def test_homogeneous_ratio_near_one(self):
        ratios = []
        for seed in range(50):
            w = synth_workload("TFIM", seed=seed, steps=12, sigma_spread=1.0)
            uni = run_episode(w, quick_cfg(seed, "Uniform", steps=12))
            topo = run_episode(w, quick_cfg(seed, "TopoGP", steps=12))
            c, _, _ = episode_metrics(topo, uni)
            ratios.append(c)
        assert 0.9 <= float(np.mean(ratios)) <= 1.1

    def test_heterogeneous_contraction_below_one(self):
        ratios = []
        for seed in range(40):
            w = synth_workload("UCCSD-LiH", seed=seed, steps=16, sigma_spread=4.0)
            uni = run_episode(w, quick_cfg(seed, "Uniform", steps=16))
            topo = run_episode(w, quick_cfg(seed, "TopoGP", steps=16))
            ratios.append(episode_metrics(topo, uni)[0])
        ci = bootstrap_ci(ratios, statistic="mean", resamples=2000, seed=1)
        assert ci.upper < 1.0

    def test_drift_triggers_within_detection_budget(self):
        hits = 0
        seeds = 40
        for seed in range(seeds):
            w = synth_workload("QAOA-MaxCut", seed=seed, steps=24)
            res = run_episode(w, quick_cfg(seed, "TopoGP", steps=24))
            t_star = 12
            window = res.records[t_star : t_star + 11]
            hits += any(any(r.cusum_triggers) for r in window)
        assert hits >= 0.9 * seeds

    def test_realloc_event_arithmetic(self):
        w = synth_workload("PhaseEstimation", seed=5, steps=1)
        res = run_episode(w, quick_cfg(5, "TopoGP", steps=1, shots_per_step=1500, cadence=500))
        assert res.realloc_events == 3  # every 500 executed shots
        assert cadence_events(1500, 500) == 3

    def test_first_observation_shared_across_policies(self):
        w = synth_workload("TFIM", seed=6, steps=3)
        a = run_episode(w, quick_cfg(6, "Uniform", steps=3))
        b = run_episode(w, quick_cfg(6, "TopoGP", steps=3))
        assert a.records[0].observed == b.records[0].observed

    def test_cascade_beats_forced_shadows_on_low_entropy(self):
        for seed in range(8):
            w = synth_workload("PhaseEstimation", seed=seed, steps=10)
            on = run_episode(w, quick_cfg(seed, "TopoGP", steps=10, cascade_enabled=True))
            off = run_episode(w, quick_cfg(seed, "TopoGP", steps=10, cascade_enabled=False))
            mse_on = np.mean([r.realized_sq_err for r in on.records])
            mse_off = np.mean([r.realized_sq_err for r in off.records])
            assert mse_on <= mse_off + 1e-15
            assert all(c is EstimatorChoice.SHADOWS for r in off.records for c in r.choices)

    def test_budget_floor_validation(self):
        w = synth_workload("RandomCliffordT", seed=0, steps=2)
        with pytest.raises(ConfigurationError):
            run_episode(w, quick_cfg(0, "Uniform", steps=2, shots_per_step=24, s_min=5, cadence=10))


class TestEpisodeMetrics:
    def test_self_ratio_is_one(self):
        w = synth_workload("TFIM", seed=7, steps=8)
        uni = run_episode(w, quick_cfg(7, "Uniform", steps=8))
        c, p95, _ = episode_metrics(uni, uni)
        assert abs(c - 1.0) < 1e-12

    def test_uniform_tail_is_budget_over_n(self):
        w = synth_workload("TFIM", seed=8, steps=8)  # n=10 divides 800
        uni = run_episode(w, quick_cfg(8, "Uniform", steps=8))
        _, p95, _ = episode_metrics(uni, uni)
        assert p95 == 800 / w.n

    def test_pairing_requires_same_seed_and_workload(self):
        w7 = synth_workload("TFIM", seed=7, steps=6)
        w8 = synth_workload("TFIM", seed=8, steps=6)
        a = run_episode(w7, quick_cfg(7, "TopoGP", steps=6))
        b = run_episode(w8, quick_cfg(8, "Uniform", steps=6))
        with pytest.raises(PairingError):
            episode_metrics(a, b)

    def test_reference_arm_must_be_uniform(self):
        w = synth_workload("TFIM", seed=9, steps=6)
        a = run_episode(w, quick_cfg(9, "TopoGP", steps=6))
        b = run_episode(w, quick_cfg(9, "Proportional", steps=6))
        with pytest.raises(PairingError):
            episode_metrics(a, b)

    def test_proportional_policy_valid_plans(self):
        w = synth_workload("UCCSD-LiH", seed=10, steps=6)
        res = run_episode(w, quick_cfg(10, "Proportional", steps=6))
        for rec in res.records:
            assert sum(rec.plan.shots) == 800
            assert min(rec.plan.shots) >= 2
