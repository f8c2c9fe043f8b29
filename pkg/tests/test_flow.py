import math

import numpy as np
import pytest
from scipy.stats import kstest, norm

from kvchaos.flow import (FlowBatch, chain_key, detect_crossing,
                          scenario_indicator, simulate_lambda,
                          simulate_lambda_batch, simulate_sequential,
                          simulate_sequential_batch, stopped_endpoints,
                          stopped_values)
from kvchaos.noise import increment_chunks, log_uniform_chunks, sample_bundle
from kvchaos.partitions import LeaderRule, UniformRule, enumerate_chains


def coalesce_probability(gap, t):
    """Reflection-principle oracle: the gap is a variance-2 Brownian
    motion stopped at 0, so P(hit by t) = 2 Phi(-gap / sqrt(2 t))."""
    return 2.0 * norm.cdf(-gap / math.sqrt(2.0 * t))


class TestDetectCrossing:
    def test_touching_gives_one(self):
        assert detect_crossing(0.0, 0.5, 1e-2) == 1.0

    def test_far_gives_zero(self):
        assert detect_crossing(5.0, 5.0, 1e-3) < 1e-300

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            detect_crossing(-0.1, 0.5, 1e-2)

    def test_formula_against_fine_bridge_oracle(self):
        # simulate fine Brownian bridges pinned at (d0, d1) and compare
        # the empirical minimum-below-zero frequency with the formula
        rng = np.random.default_rng(2024)
        d0, d1, dt, rate = 0.06, 0.09, 1e-2, 2.0
        m, reps = 400, 20_000
        sd = math.sqrt(rate * dt / m)
        incs = rng.normal(scale=sd, size=(reps, m))
        incs -= incs.mean(axis=1, keepdims=True)  # pin the endpoint
        path = np.cumsum(incs, axis=1)
        tt = np.arange(1, m + 1) / m
        bridge = d0 + path + (d1 - d0) * tt[None, :]
        hit = (bridge.min(axis=1) <= 0.0).mean()
        p = detect_crossing(d0, d1, dt, rate)
        se = math.sqrt(p * (1 - p) / reps)
        # the discrete-minimum estimate is biased low by O(sqrt(dt/m))
        assert abs(hit - p) < 4 * se + 0.02


class TestSingleReplica:
    def test_n1_is_shifted_wiener_path(self):
        bundle = sample_bundle(1, 1.0, 1e-2, seed=5)
        system, record = simulate_sequential([0.7], bundle)
        expected = 0.7 + bundle.paths[0] - bundle.paths[0, 0]
        assert np.allclose(system.trajectories[0], expected)
        assert record.num_merges == 0

    def test_equal_starts_coalesce_immediately(self):
        bundle = sample_bundle(2, 1.0, 1e-2, seed=6)
        system, record = simulate_sequential([1.0, 1.0], bundle)
        assert record.times[0] == 0.0
        assert np.array_equal(system.trajectories[0], system.trajectories[1])

    def test_lambda_equal_starts(self):
        bundle = sample_bundle(2, 1.0, 1e-2, seed=6)
        system, record = simulate_lambda([1.0, 1.0], LeaderRule(), bundle)
        assert np.array_equal(system.trajectories[0], system.trajectories[1])
        assert record.final_partition.num_blocks == 1

    def test_lambda_singletons_follow_own_drivers(self):
        # far-apart particles never meet within the horizon
        bundle = sample_bundle(2, 0.1, 1e-3, seed=7)
        system, record = simulate_lambda([0.0, 50.0], LeaderRule(), bundle)
        incs = bundle.increments()
        assert np.allclose(np.diff(system.trajectories[0]), incs[0])
        assert np.allclose(np.diff(system.trajectories[1]), incs[1])
        assert record.num_merges == 0

    @pytest.mark.parametrize("construction", ["sequential", "lambda"])
    def test_order_and_stickiness(self, construction):
        for seed in range(5):
            bundle = sample_bundle(3, 1.0, 1e-2, seed=seed)
            if construction == "sequential":
                system, record = simulate_sequential([0.0, 0.2, 0.5], bundle)
            else:
                system, record = simulate_lambda([0.0, 0.2, 0.5],
                                                 UniformRule(), bundle)
            x = system.trajectories
            assert (x[1:] - x[:-1] >= -1e-12).all()
            # once equal at a grid point, equal forever after
            for i in range(2):
                met = np.nonzero(x[i + 1] - x[i] == 0.0)[0]
                if met.size:
                    assert (x[i + 1, met[0]:] == x[i, met[0]:]).all()

    def test_scenario_record_consistency(self):
        bundle = sample_bundle(3, 2.0, 1e-2, seed=11)
        _, record = simulate_lambda([0.0, 0.1, 0.3], UniformRule(), bundle)
        assert record.num_merges == 3 - record.final_partition.num_blocks
        for a, b in zip(record.times, record.times[1:]):
            assert a < b


class TestBatches:
    def test_coalescence_probability_lambda(self):
        reps, t, dt = 20_000, 1.0, 1e-3
        p = coalesce_probability(1.0, t)
        batch = simulate_lambda_batch([0.0, 1.0], LeaderRule(), reps, t, dt,
                                      seed=101)
        est = (batch.ev_count > 0).mean()
        assert abs(est - p) < 4 * math.sqrt(p * (1 - p) / reps) + 2e-3

    def test_coalescence_probability_sequential(self):
        reps, t, dt = 20_000, 1.0, 1e-3
        p = coalesce_probability(1.0, t)
        batch = simulate_sequential_batch([0.0, 1.0], reps, t, dt, seed=101)
        est = (batch.ev_count > 0).mean()
        assert abs(est - p) < 4 * math.sqrt(p * (1 - p) / reps) + 2e-3

    def test_plain_two_walk_cross_check(self):
        # second oracle route: direct Monte Carlo of two independent walks
        reps, steps, dt = 20_000, 200, 5e-3
        rng = np.random.default_rng(77)
        w = rng.normal(scale=math.sqrt(dt), size=(reps, steps, 2))
        gap = 1.0 + np.cumsum(w[:, :, 1] - w[:, :, 0], axis=1)
        crossed = (gap <= 0).any(axis=1).mean()  # no bridge: biased low
        batch = simulate_lambda_batch([0.0, 1.0], LeaderRule(), reps, 1.0,
                                      5e-3, seed=303, bridge=False)
        est = (batch.ev_count > 0).mean()
        assert abs(est - crossed) < 0.02

    def test_marginal_normality(self):
        reps, t, dt = 20_000, 1.0, 1e-3
        batch = simulate_lambda_batch([0.0, 1.0], LeaderRule(), reps, t, dt,
                                      seed=55)
        for i, u in enumerate([0.0, 1.0]):
            z = (batch.finals[:, i] - u) / math.sqrt(t)
            assert kstest(z, "norm").pvalue > 1e-3

    def test_marginal_normality_sequential(self):
        reps, t, dt = 20_000, 1.0, 1e-3
        batch = simulate_sequential_batch([0.0, 1.0], reps, t, dt, seed=56)
        for i, u in enumerate([0.0, 1.0]):
            z = (batch.finals[:, i] - u) / math.sqrt(t)
            assert kstest(z, "norm").pvalue > 1e-3

    def test_lambda_rules_agree_in_law(self):
        # the 2-point motion law does not depend on the lambda rule;
        # sequential construction is the oracle route
        reps, t, dt = 20_000, 1.0, 2e-3
        uni = simulate_lambda_batch([0.0, 1.0], UniformRule(), reps, t, dt,
                                    seed=900)
        seq = simulate_sequential_batch([0.0, 1.0], reps, t, dt, seed=901)
        crit = 1.95 * math.sqrt(2.0 / reps)  # two-sample KS at alpha=1e-3
        for i in range(2):
            for q in (-0.5, 0.5, 1.5):
                f1 = (uni.finals[:, i] <= q).mean()
                f2 = (seq.finals[:, i] <= q).mean()
                assert abs(f1 - f2) < crit

    def test_quadratic_covariation(self):
        # before meeting the drivers are independent; after meeting the
        # increments coincide, so QV accumulates t - tau
        from kvchaos import _backend
        from kvchaos.flow import _weights_table

        reps, steps, dt = 4000, 500, 2e-3
        rng_incs = next(increment_chunks(reps, steps, 2, dt, 313,
                                         chunk=reps))[1]
        logu = next(log_uniform_chunks(reps, steps, 1, 313, chunk=reps))[1]
        weights = _weights_table(LeaderRule(), 2)
        starts = np.array([0.0, 0.6])
        x, mask, evc, evb, evt, traj = _backend.lambda_flow_steps(
            np.repeat(starts[None, :], reps, 0), np.full(reps, 1, np.int64),
            weights, rng_incs, logu, dt, True, store_paths=True)
        dx = np.diff(traj, axis=1)  # (reps, steps, 2)
        qv = (dx[:, :, 0] * dx[:, :, 1]).sum(axis=1)
        merged = evc > 0
        tau = evt[:, 0]
        expected = np.where(merged, steps * dt - tau, 0.0)
        err = qv - expected
        assert abs(err.mean()) < 4 * err.std(ddof=1) / math.sqrt(reps) + 5e-3

    def test_gap_law_matches_absorbed_semigroup(self):
        # cross-module: survival of the particle gap equals the absorbed
        # semigroup's surviving mass at gap/sqrt(2)
        from kvchaos.semigroup import absorption_mass

        reps, t, dt = 20_000, 1.0, 1e-3
        gap = 0.8
        batch = simulate_lambda_batch([0.0, gap], LeaderRule(), reps, t, dt,
                                      seed=414)
        survive = (batch.ev_count == 0).mean()
        oracle = 1.0 - float(absorption_mass(gap / math.sqrt(2.0), t))
        assert abs(survive - oracle) < 4 * math.sqrt(oracle * (1 - oracle)
                                                     / reps) + 2e-3

    def test_records_roundtrip(self):
        batch = simulate_lambda_batch([0.0, 0.3, 0.8], UniformRule(), 200,
                                      1.0, 5e-3, seed=21)
        for rec in batch.records():
            assert rec.partitions[0].num_blocks == 3
            assert rec.num_merges == len(rec.times)
            assert rec.final_partition.num_blocks == 3 - rec.num_merges


class TestScenarioIndicator:
    def test_no_merge_cases(self):
        bundle = sample_bundle(2, 1.0, 1e-2, seed=5)
        _, record = simulate_lambda([0.0, 30.0], LeaderRule(), bundle)
        chains = enumerate_chains(2, "Rbreve")
        trivial = next(c for c in chains if c.length == 1)
        merged = next(c for c in chains if c.length == 2)
        assert scenario_indicator(record, trivial, 1.0) == 1
        assert scenario_indicator(record, merged, 1.0) == 0

    def test_partition_of_unity(self):
        chains = enumerate_chains(3, "Rbreve")
        batch = simulate_lambda_batch([0.0, 0.2, 0.5], LeaderRule(), 500,
                                      1.0, 5e-3, seed=33)
        for rec in batch.records():
            hits = sum(scenario_indicator(rec, c, 1.0) for c in chains)
            assert hits == 1

    def test_time_cutoff(self):
        bundle = sample_bundle(2, 1.0, 1e-3, seed=9)
        _, record = simulate_lambda([0.0, 0.05], LeaderRule(), bundle)
        assert record.num_merges == 1
        tau = record.times[0]
        chains = enumerate_chains(2, "Rbreve")
        trivial = next(c for c in chains if c.length == 1)
        merged = next(c for c in chains if c.length == 2)
        before = max(tau - 0.01, 0.0)
        assert scenario_indicator(record, trivial, before) == 1
        assert scenario_indicator(record, merged, tau + 0.01) == 1

    def test_chain_keys_unique(self):
        chains = enumerate_chains(4, "Rbreve")
        keys = [chain_key(c) for c in chains]
        assert len(set(keys)) == len(keys)


class TestStoppedPaths:
    def test_zero_start_absorbed_immediately(self):
        vals = stopped_endpoints(0.0, 0.5, 1e-2, seed=3, reps=100)
        assert (vals == 0.0).all()

    def test_martingale_mean(self):
        u, t = 1.0, 1.0
        vals = stopped_endpoints(u, t, 1e-3, seed=17, reps=20_000)
        se = vals.std(ddof=1) / math.sqrt(len(vals))
        assert abs(vals.mean() - u) < 4 * se + 2e-3

    def test_absorption_probability(self):
        u, t = 1.0, 1.0
        vals = stopped_endpoints(u, t, 1e-3, seed=19, reps=20_000)
        p = 2 * norm.cdf(-u / math.sqrt(t))
        est = (vals == 0.0).mean()
        assert abs(est - p) < 4 * math.sqrt(p * (1 - p) / len(vals)) + 2e-3

    def test_stopped_values_requires_logu_with_bridge(self):
        with pytest.raises(ValueError):
            stopped_values(1.0, np.zeros((2, 3)), None, 0.1, bridge=True)
