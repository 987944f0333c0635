import itertools
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stragglersim import (
    ARRemoval,
    Cluster,
    ClusterPartition,
    DecisionSnapshot,
    DynamicX,
    StaticX,
    baseline_policy_step,
    cluster_by_time,
    mode_learning_rates,
    rank_mode_candidates,
    scale_learning_rate,
    select_mode_heuristic,
    time_allreduce,
    time_dynamic,
    time_static_x,
)
from stragglersim.decisions import (
    DEFAULT_TW_GRID,
    AdjustBatches,
    NoChange,
    PolicyObservation,
    SetMode,
)
from stragglersim.domain import DomainError


def snapshot_of(times, total_batch=1024.0, phi=512.0, architecture="ps"):
    return DecisionSnapshot.from_predictions(
        times,
        model_id="toy",
        learning_rate=0.1,
        completed_steps=0,
        total_batch=total_batch,
        architecture=architecture,
        phi=phi,
    )


# Independent re-evaluations, written in a different arrangement on purpose.
def oracle_static(x, n, m, phi, times):
    ordered = sorted(times)
    return (1.0 + phi / (x * m / n)) * ordered[x - 1]


def oracle_dynamic(partition, n, m, phi):
    total_rate = 0.0
    for cluster in partition.clusters:
        per_update = (1.0 + phi / (cluster.n_ci * m / n)) * cluster.t_ci
        total_rate += 1.0 / per_update
    return 1.0 / total_rate


def oracle_allreduce(x, t_w, n, m, phi, times):
    order = sorted(range(n), key=lambda i: (times[i], i))
    kept = order[: n - x]
    removed = order[n - x :]
    t_ring = max(times[i] for i in kept)
    q = sum(1 for i in removed if times[i] <= t_ring + t_w)
    return (1.0 + phi / ((n - x + q) * m / n)) * (t_ring + t_w)


class TestStaticTiming:
    def test_uniform_times(self):
        assert time_static_x(8, 8, 1024.0, 512.0, [0.5] * 8) == pytest.approx(
            0.75, rel=1e-9
        )

    def test_partial_group_skips_slow_tail(self):
        times = [0.5] * 7 + [5.0]
        assert time_static_x(4, 8, 1024.0, 512.0, times) == pytest.approx(1.0, rel=1e-9)
        assert time_static_x(8, 8, 1024.0, 512.0, times) == pytest.approx(7.5, rel=1e-9)

    def test_zero_noise_returns_order_statistic(self):
        times = [0.9, 0.3, 0.6, 1.2]
        for x in range(1, 5):
            assert time_static_x(x, 4, 256.0, 0.0, times) == sorted(times)[x - 1]

    def test_x_out_of_range_rejected(self):
        with pytest.raises(DomainError):
            time_static_x(0, 4, 256.0, 1.0, [1.0] * 4)
        with pytest.raises(DomainError):
            time_static_x(5, 4, 256.0, 1.0, [1.0] * 4)

    @given(
        n=st.integers(min_value=2, max_value=12),
        m=st.floats(min_value=64.0, max_value=8192.0),
        phi=st.floats(min_value=1.0, max_value=4096.0),
    )
    @settings(max_examples=100, deadline=None)
    def test_efficiency_factor_strictly_decreasing_in_x(self, n, m, phi):
        factors = [1.0 + phi / (x * m / n) for x in range(1, n + 1)]
        assert all(a > b for a, b in zip(factors, factors[1:]))

    @given(
        times=st.lists(
            st.floats(min_value=0.05, max_value=20.0), min_size=2, max_size=12
        )
    )
    @settings(max_examples=100, deadline=None)
    def test_order_statistic_nondecreasing_in_x(self, times):
        n = len(times)
        stats = [sorted(times)[x - 1] for x in range(1, n + 1)]
        assert all(a <= b for a, b in zip(stats, stats[1:]))


class TestDynamicTiming:
    def test_worked_two_cluster_value(self):
        partition = ClusterPartition(
            clusters=(
                Cluster(workers=(0, 1, 2), t_ci=1.0),
                Cluster(workers=(3,), t_ci=10.0),
            )
        )
        value = time_dynamic(partition, 4, 512.0, 384.0)
        assert value == pytest.approx(1.0 / 0.525, rel=1e-9)

    def test_single_cluster_equals_full_group(self):
        rng = random.Random(11)
        for _ in range(1000):
            n = rng.randint(2, 12)
            m = rng.uniform(64.0, 8192.0)
            phi = rng.uniform(0.0, 4096.0)
            t = rng.uniform(0.05, 10.0)
            partition = ClusterPartition(
                clusters=(Cluster(workers=tuple(range(n)), t_ci=t),)
            )
            t_d = time_dynamic(partition, n, m, phi)
            t_n = time_static_x(n, n, m, phi, [t] * n)
            assert abs(t_d - t_n) < 1e-12

    def test_zero_noise_is_harmonic_combination(self):
        partition = ClusterPartition(
            clusters=(
                Cluster(workers=(0, 1), t_ci=1.0),
                Cluster(workers=(2,), t_ci=4.0),
            )
        )
        assert time_dynamic(partition, 3, 300.0, 0.0) == pytest.approx(
            1.0 / (1.0 + 0.25), rel=1e-12
        )


class TestAllReduceTiming:
    def test_no_removal_reduces_to_ring_barrier(self):
        times = [0.4, 0.5, 0.45, 0.48]
        value = time_allreduce(0, 0.0, 4, 1024.0, 512.0, times)
        assert value == pytest.approx((1.0 + 512.0 / 1024.0) * 0.5, rel=1e-12)

    def test_worked_removal_value(self):
        times = [0.5] * 6 + [0.55, 5.0]
        # Two removed, the 0.55 one makes the deadline (q=1).
        value = time_allreduce(2, 0.1, 8, 1024.0, 512.0, times)
        assert value == pytest.approx((1.0 + 512.0 / 896.0) * 0.6, rel=1e-9)

    def test_all_removed_making_deadline_restores_full_batch(self):
        times = [0.5] * 6 + [0.52, 0.58]
        value = time_allreduce(2, 0.2, 8, 1024.0, 512.0, times)
        assert value == pytest.approx((1.0 + 512.0 / 1024.0) * 0.7, rel=1e-12)

    def test_removing_every_worker_rejected(self):
        with pytest.raises(DomainError):
            time_allreduce(4, 0.1, 4, 256.0, 128.0, [1.0] * 4)


class TestRandomizedOracles:
    def test_static_matches_oracle_exactly(self):
        rng = random.Random(5)
        for _ in range(1000):
            n = rng.randint(2, 12)
            m = float(rng.choice([128, 256, 512, 1024, 4096]))
            phi = rng.uniform(0.0, 4096.0)
            times = [rng.uniform(0.05, 10.0) for _ in range(n)]
            x = rng.randint(1, n)
            assert time_static_x(x, n, m, phi, times) == oracle_static(
                x, n, m, phi, times
            )

    def test_dynamic_matches_oracle_exactly(self):
        rng = random.Random(6)
        for _ in range(1000):
            n = rng.randint(2, 12)
            m = float(rng.choice([128, 256, 512, 1024, 4096]))
            phi = rng.uniform(0.0, 4096.0)
            times = [rng.uniform(0.05, 10.0) for _ in range(n)]
            partition = cluster_by_time(times)
            assert time_dynamic(partition, n, m, phi) == oracle_dynamic(
                partition, n, m, phi
            )

    def test_allreduce_matches_oracle_exactly(self):
        rng = random.Random(7)
        for _ in range(1000):
            n = rng.randint(2, 12)
            m = float(rng.choice([128, 256, 512, 1024, 4096]))
            phi = rng.uniform(0.0, 4096.0)
            times = [rng.uniform(0.05, 10.0) for _ in range(n)]
            x = rng.randint(0, n - 1)
            t_w = rng.choice([0.0, 0.03, 0.09, 0.21])
            assert time_allreduce(x, t_w, n, m, phi, times) == oracle_allreduce(
                x, t_w, n, m, phi, times
            )


class TestClustering:
    def test_similar_times_fuse(self):
        partition = cluster_by_time([1.0, 1.05, 1.1])
        assert len(partition.clusters) == 1
        assert partition.clusters[0].workers == (0, 1, 2)

    def test_far_outlier_stays_alone(self):
        partition = cluster_by_time([1.0, 1.0, 5.0])
        assert [c.workers for c in partition.clusters] == [(0, 1), (2,)]
        assert partition.clusters[0].t_ci == 1.0
        assert partition.clusters[1].t_ci == 5.0

    def test_single_worker(self):
        partition = cluster_by_time([1.0])
        assert len(partition.clusters) == 1
        assert partition.clusters[0].workers == (0,)

    @given(
        times=st.lists(
            st.floats(min_value=0.05, max_value=30.0), min_size=1, max_size=16
        )
    )
    @settings(max_examples=200, deadline=None)
    def test_partition_properties(self, times):
        partition = cluster_by_time(times)
        seen = sorted(w for c in partition.clusters for w in c.workers)
        assert seen == list(range(len(times)))  # disjoint cover
        maxima = [c.t_ci for c in partition.clusters]
        assert maxima == sorted(maxima)  # ascending cluster max
        for cluster in partition.clusters:
            hi = max(times[w] for w in cluster.workers)
            lo = min(times[w] for w in cluster.workers)
            assert hi == cluster.t_ci
            assert (hi - lo) / lo <= 0.20 + 1e-12  # diameter bound


class TestHeuristicSelection:
    def test_equal_times_select_full_synchrony(self):
        rng = random.Random(9)
        for _ in range(200):
            n = rng.randint(2, 12)
            m = float(rng.choice([128, 512, 2048]))
            phi = rng.uniform(1e-6, 4096.0)
            t = rng.uniform(0.05, 5.0)
            chosen = select_mode_heuristic(
                snapshot_of([t] * n, total_batch=m, phi=phi)
            )
            assert chosen.mode == StaticX(n)

    def test_zero_noise_equal_times_tie_breaks_to_larger_x(self):
        chosen = select_mode_heuristic(snapshot_of([1.0] * 6, phi=0.0))
        assert chosen.mode == StaticX(6)

    def test_matches_brute_force_argmin(self):
        rng = random.Random(10)
        for _ in range(300):
            n = rng.randint(2, 10)
            m = float(rng.choice([128, 512, 2048]))
            phi = rng.uniform(0.0, 2048.0)
            times = [rng.uniform(0.05, 5.0) for _ in range(n)]
            snapshot = snapshot_of(times, total_batch=m, phi=phi)
            ranked = rank_mode_candidates(snapshot)
            best = min(c.est_time for c in ranked)
            assert ranked[0].est_time == best

    def test_dynamic_candidate_skipped_for_single_cluster(self):
        ranked = rank_mode_candidates(snapshot_of([1.0, 1.02, 1.05, 1.08]))
        assert not any(isinstance(c.mode, DynamicX) for c in ranked)

    def test_dynamic_candidate_present_with_stragglers(self):
        ranked = rank_mode_candidates(snapshot_of([0.5] * 7 + [5.0]))
        assert any(isinstance(c.mode, DynamicX) for c in ranked)

    def test_allreduce_candidates_cover_grid(self):
        snapshot = snapshot_of([0.5] * 7 + [5.0], architecture="ar")
        ranked = rank_mode_candidates(snapshot)
        removals = {c.mode.x for c in ranked}
        assert removals == {0, 1}
        waits = {c.mode.t_w for c in ranked if c.mode.x == 1}
        assert waits == set(DEFAULT_TW_GRID)

    def test_slow_tail_prefers_partial_synchrony(self):
        # One worker 10x slower: waiting for it is worse than a lower-x or
        # clustered update interval.
        chosen = select_mode_heuristic(snapshot_of([0.5] * 7 + [5.0]))
        assert chosen.mode != StaticX(8)


class TestLearningRateScaling:
    def test_exact_ratio(self):
        assert scale_learning_rate(0.8, 2, 8) == pytest.approx(0.2, rel=1e-12)
        assert scale_learning_rate(0.8, 8, 8) == 0.8

    def test_composition_multiplies_ratios(self):
        once = scale_learning_rate(0.8, 4, 8)
        twice = scale_learning_rate(once, 2, 8)
        assert twice == pytest.approx(0.8 * (4 / 8) * (2 / 8), rel=1e-12)

    def test_out_of_range_reports(self):
        with pytest.raises(DomainError):
            scale_learning_rate(0.1, 0, 8)
        with pytest.raises(DomainError):
            scale_learning_rate(0.1, 9, 8)

    def test_mode_rates(self):
        assert mode_learning_rates(StaticX(2), 8, 0.8) == pytest.approx(0.2)
        partition = ClusterPartition(
            clusters=(Cluster(workers=(0, 1), t_ci=1.0), Cluster(workers=(2,), t_ci=2.0))
        )
        rates = mode_learning_rates(DynamicX(partition), 3, 0.9)
        assert rates == pytest.approx((0.9 * 2 / 3, 0.9 / 3))
        assert mode_learning_rates(ARRemoval(2, 0.1), 8, 0.8, q=1) == pytest.approx(
            0.8 * 7 / 8
        )


class TestBaselinePolicies:
    def _obs(self, **overrides):
        defaults = dict(
            num_workers=8,
            architecture="ps",
            straggler_streak_s=(0.0,) * 8,
            extreme_pair_run=0,
            fastest_worker=None,
            slowest_worker=None,
        )
        defaults.update(overrides)
        return PolicyObservation(**defaults)

    def test_ssgd_and_asgd_are_static(self):
        assert baseline_policy_step("ssgd", self._obs()) == SetMode(StaticX(8))
        assert baseline_policy_step("asgd", self._obs()) == SetMode(StaticX(1))

    def test_sync_switch_needs_five_seconds_of_persistence(self):
        below = self._obs(straggler_streak_s=(0.0,) * 7 + (4.9,))
        at = self._obs(straggler_streak_s=(0.0,) * 7 + (5.0,))
        assert baseline_policy_step("sync-switch", below) == SetMode(StaticX(8))
        assert baseline_policy_step("sync-switch", at) == SetMode(StaticX(1))

    def test_lb_bsp_moves_batch_after_eight_rounds(self):
        quiet = self._obs(extreme_pair_run=7, fastest_worker=0, slowest_worker=5)
        assert baseline_policy_step("lb-bsp", quiet) == NoChange()
        ready = self._obs(extreme_pair_run=8, fastest_worker=0, slowest_worker=5)
        action = baseline_policy_step("lb-bsp", ready)
        assert action == AdjustBatches(deltas=((0, 32), (5, -32)))

    def test_lgc_keeps_five_fastest(self):
        assert baseline_policy_step("lgc", self._obs()) == SetMode(StaticX(5))
        small = self._obs(num_workers=4)
        assert baseline_policy_step("lgc", small) == SetMode(StaticX(4))
        ar = self._obs(architecture="ar", lgc_t_w=0.06)
        assert baseline_policy_step("lgc", ar) == SetMode(ARRemoval(3, 0.06))

    def test_pinned_static_policies(self):
        assert baseline_policy_step("static-4", self._obs()) == SetMode(StaticX(4))
        # x is clipped to the worker count.
        assert baseline_policy_step("static-16", self._obs()) == SetMode(StaticX(8))


def _labeled_dataset(rng, count, architecture="ps"):
    """Heuristic-labeled snapshots in a flat-noise world."""
    from stragglersim import RegressorDataset

    dataset = RegressorDataset()
    snapshots = []
    for _ in range(count):
        n = 8
        base = rng.uniform(0.3, 0.8)
        times = [base * rng.uniform(0.97, 1.03) for _ in range(n)]
        times[rng.randrange(n)] = base * rng.uniform(2.0, 8.0)
        snapshot = snapshot_of(times, architecture=architecture)
        snapshots.append(snapshot)
        for candidate in rank_mode_candidates(snapshot):
            dataset.add(snapshot, candidate.mode, candidate.est_time)
    return dataset, snapshots


class TestLearnedSelector:
    def test_not_ready_below_row_threshold(self):
        from stragglersim import RegressorDataset, select_mode_ml, train_mode_regressor

        dataset = RegressorDataset()
        assert train_mode_regressor(dataset, min_rows=200) is None
        assert select_mode_ml(None, snapshot_of([0.5] * 7 + [5.0])) is None

    def test_agrees_with_heuristic_on_held_out_snapshots(self):
        from stragglersim import select_mode_ml, train_mode_regressor

        rng = random.Random(21)
        dataset, _ = _labeled_dataset(rng, 60)
        regressor = train_mode_regressor(dataset, min_rows=200)
        assert regressor is not None
        matches = 0
        trials = 50
        for _ in range(trials):
            n = 8
            base = rng.uniform(0.3, 0.8)
            times = [base * rng.uniform(0.97, 1.03) for _ in range(n)]
            times[rng.randrange(n)] = base * rng.uniform(2.0, 8.0)
            snapshot = snapshot_of(times)
            learned = select_mode_ml(regressor, snapshot)
            reference = select_mode_heuristic(snapshot)
            if type(learned.mode) is type(reference.mode) and learned.mode == reference.mode:
                matches += 1
        assert matches / trials >= 0.9

    def test_architecture_support_is_per_family(self):
        from stragglersim import train_mode_regressor

        rng = random.Random(22)
        dataset, _ = _labeled_dataset(rng, 40, architecture="ps")
        regressor = train_mode_regressor(dataset, min_rows=100)
        assert regressor.supports("ps")
        assert not regressor.supports("ar")

    def test_rejects_nonpositive_labels(self):
        from stragglersim import RegressorDataset

        dataset = RegressorDataset()
        with pytest.raises(DomainError):
            dataset.add(snapshot_of([1.0] * 4), StaticX(2), 0.0)
        with pytest.raises(DomainError):
            dataset.add(snapshot_of([1.0] * 4), StaticX(2), -1.0)
