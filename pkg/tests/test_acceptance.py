"""Acceptance suite: one test per shipped guarantee, one verdict line each.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the verdict lines;
each criterion is a single test so the -v report carries one pass/fail line
per criterion either way.
"""

import json
import math
import random
import subprocess
import sys
import time
from pathlib import Path

from stragglersim import (
    ARRemoval,
    Cluster,
    ClusterPartition,
    DecisionSnapshot,
    EngineConfig,
    GroupPeer,
    ModeCandidate,
    PgnsCurve,
    Perturbation,
    RegressorDataset,
    ServerLoad,
    StaticX,
    VictimTask,
    build_comm_tree,
    cluster_by_time,
    fixed_rule_flags,
    phase_durations,
    place_high_load_task,
    plan_reallocation,
    prediction_quality,
    rank_mode_candidates,
    run_simulation,
    run_to_json,
    select_mode_heuristic,
    select_mode_ml,
    sensitivity_weighted_split,
    slack_from_fast_peers,
    time_allreduce,
    time_dynamic,
    time_static_x,
    train_mode_regressor,
)

from .conftest import make_job, make_profile, make_world

DATA = Path(__file__).resolve().parent.parent / "data"


def _verdict(number, description, ok):
    print(f"criterion {number:02d}: {'PASS' if ok else 'FAIL'} - {description}")
    assert ok, f"criterion {number} failed: {description}"


def _snapshot(times, total_batch=1024.0, phi=512.0, architecture="ps"):
    return DecisionSnapshot.from_predictions(
        times,
        model_id="toy",
        learning_rate=0.1,
        completed_steps=0,
        total_batch=total_batch,
        architecture=architecture,
        phi=phi,
    )


# Independent re-derivations of the closed-form estimates, written in a
# different arrangement from the library on purpose.
def _oracle_static(x, n, m, phi, times):
    return (1.0 + phi / (x * m / n)) * sorted(times)[x - 1]


def _oracle_dynamic(partition, n, m, phi):
    total_rate = 0.0
    for cluster in partition.clusters:
        per_update = (1.0 + phi / (cluster.n_ci * m / n)) * cluster.t_ci
        total_rate += 1.0 / per_update
    return 1.0 / total_rate


def _oracle_allreduce(x, t_w, n, m, phi, times):
    order = sorted(range(n), key=lambda i: (times[i], i))
    kept, removed = order[: n - x], order[n - x :]
    t_ring = max(times[i] for i in kept)
    q = sum(1 for i in removed if times[i] <= t_ring + t_w)
    return (1.0 + phi / ((n - x + q) * m / n)) * (t_ring + t_w)


def test_criterion_01_closed_form_estimates():
    started = time.monotonic()
    ok = True
    # Worked examples at 1e-9.
    ok &= math.isclose(
        time_static_x(8, 8, 1024.0, 512.0, [0.5] * 8), 0.75, rel_tol=1e-9
    )
    skewed = [0.5] * 7 + [5.0]
    ok &= math.isclose(time_static_x(4, 8, 1024.0, 512.0, skewed), 1.0, rel_tol=1e-9)
    ok &= math.isclose(time_static_x(8, 8, 1024.0, 512.0, skewed), 7.5, rel_tol=1e-9)
    two = ClusterPartition(
        clusters=(Cluster(tuple(range(7)), 0.5), Cluster((7,), 5.0))
    )
    ok &= math.isclose(
        time_dynamic(two, 8, 1024.0, 512.0), 275.0 / 361.0, rel_tol=1e-9
    )
    ar_times = [0.5] * 6 + [0.55, 5.0]
    ok &= math.isclose(
        time_allreduce(2, 0.1, 8, 1024.0, 512.0, ar_times),
        (1.0 + 512.0 / 896.0) * 0.6,
        rel_tol=1e-9,
    )
    # Randomized trials demand bit-exact agreement with the oracles.
    rng = random.Random(4242)
    for _ in range(1000):
        n = rng.randint(2, 12)
        m = float(n * rng.randint(32, 256))
        phi = rng.uniform(0.0, 2048.0)
        times = [rng.uniform(0.1, 5.0) for _ in range(n)]
        x = rng.randint(1, n)
        ok &= time_static_x(x, n, m, phi, times) == _oracle_static(x, n, m, phi, times)
        partition = cluster_by_time(times)
        ok &= time_dynamic(partition, n, m, phi) == _oracle_dynamic(partition, n, m, phi)
        xr = rng.randint(0, n - 1)
        t_w = rng.uniform(0.0, 0.3)
        ok &= time_allreduce(xr, t_w, n, m, phi, times) == _oracle_allreduce(
            xr, t_w, n, m, phi, times
        )
    elapsed = time.monotonic() - started
    ok &= elapsed < 5.0
    _verdict(1, f"closed-form estimates match worked examples and 1000 oracle trials in {elapsed:.2f}s", ok)


def test_criterion_02_single_cluster_reduces_to_full_barrier():
    rng = random.Random(99)
    worst = 0.0
    for _ in range(1000):
        n = rng.randint(2, 16)
        m = float(n * rng.randint(32, 256))
        phi = rng.uniform(0.0, 4.0 * m)
        times = [rng.uniform(0.05, 10.0) for _ in range(n)]
        single = ClusterPartition(
            clusters=(Cluster(tuple(range(n)), max(times)),)
        )
        worst = max(
            worst,
            abs(time_dynamic(single, n, m, phi) - time_static_x(n, n, m, phi, times)),
        )
    _verdict(2, f"single-cluster barrier equals the full barrier (worst gap {worst:.2e})", worst < 1e-12)


def test_criterion_03_equal_times_select_full_synchrony():
    rng = random.Random(7)
    hits = 0
    for _ in range(1000):
        n = rng.randint(2, 16)
        t = rng.uniform(0.05, 5.0)
        phi = rng.uniform(1e-6, 4096.0)
        chosen = select_mode_heuristic(_snapshot([t] * n, phi=phi))
        hits += chosen.mode == StaticX(n)
    _verdict(3, f"uniform workers keep full synchrony ({hits}/1000)", hits == 1000)


def test_criterion_04_adaptive_beats_both_baselines_under_throttle():
    started = time.monotonic()
    profile = make_profile(ps_update_work=1.2)
    world = make_world(profile, job=make_job())
    throttle = [
        Perturbation(
            kind="cpu_throttle", fraction=0.1, start=0.0, end=10_000.0, task="j1:w0"
        )
    ]
    tta = {
        policy: run_simulation(world, throttle, policy=policy).job("j1").tta_s
        for policy in ("ssgd", "asgd", "adaptive-h")
    }
    elapsed = time.monotonic() - started
    ok = (
        all(v is not None for v in tta.values())
        and tta["adaptive-h"] <= min(tta["ssgd"], tta["asgd"])
        and tta["adaptive-h"] <= 0.8 * tta["ssgd"]
        and elapsed < 30.0
    )
    _verdict(
        4,
        "adaptive beats both barriers with one worker at 10% cpu "
        f"(adaptive {tta['adaptive-h']:.1f}s, ssgd {tta['ssgd']:.1f}s, "
        f"asgd {tta['asgd']:.1f}s, wall {elapsed:.1f}s)",
        ok,
    )


def test_criterion_05_update_credit_and_count_monotonicity():
    profile = make_profile()  # flat phi 512
    counts = []
    ok = True
    for x in (1, 2, 4, 8):
        job = make_job(batch_per_worker=128, policy="ssgd")
        world = make_world(profile, job=job)
        metrics = run_simulation(world, config=EngineConfig(pinned_mode=StaticX(x)))
        job_metrics = metrics.job("j1")
        expected = 1.0 / (1.0 + 512.0 * 8.0 / (x * 1024.0))
        ok &= all(u.credit == expected for u in job_metrics.updates)
        ok &= all(u.reports == x for u in job_metrics.updates)
        ok &= not job_metrics.incomplete
        counts.append(job_metrics.update_count)
    ok &= all(a > b for a, b in zip(counts, counts[1:]))
    _verdict(
        5,
        f"per-update credit is exact and converged-update counts fall with x ({counts})",
        ok,
    )


def _random_plan_trial(rng):
    profile = make_profile()
    from stragglersim import BeneficiaryNeed

    k = rng.randint(1, 5)
    victims = [
        VictimTask(
            task_id=f"v{i}",
            server_id="s0",
            job_id="other",
            cpu_share=rng.uniform(0.5, 4.0),
            bw_share=rng.uniform(0.5e9, 4.0e9),
            sensitivity_cpu=rng.choice([0.0, rng.uniform(0.01, 3.0)]),
            sensitivity_bw=rng.choice([0.0, rng.uniform(0.01, 3.0)]),
            accuracy_gain=rng.uniform(0.0, 2.0),
        )
        for i in range(k)
    ]
    need = BeneficiaryNeed(
        task_id="j:ps0",
        server_id="s0",
        job_id="j",
        cpu_shortfall=rng.choice([0.0, rng.uniform(0.1, 6.0)]),
        bw_shortfall=rng.choice([0.0, 0.0, rng.uniform(0.1e9, 3.0e9)]),
    )
    group = []
    if rng.random() < 0.4:
        for g in range(rng.randint(1, 2)):
            cpu = rng.uniform(1.0, 3.0)
            bw = rng.uniform(1.0e9, 3.0e9)
            group.append(
                GroupPeer(
                    worker_id=f"g{g}",
                    predicted_time=phase_durations(cpu, bw, profile).total,
                    cpu_share=cpu,
                    bw_share=bw,
                    profile=profile,
                    comm_bytes=2.0e8,
                )
            )
        # one deliberately slow peer sets the barrier
        group.append(
            GroupPeer(
                worker_id="gz",
                predicted_time=phase_durations(0.5, 0.5e9, profile).total,
                cpu_share=0.5,
                bw_share=0.5e9,
                profile=profile,
                comm_bytes=2.0e8,
            )
        )
    candidates = [
        ModeCandidate(StaticX(i + 1), rng.uniform(0.3, 12.0))
        for i in range(rng.randint(1, 3))
    ]
    status_quo = rng.uniform(0.3, 12.0)
    loads = {
        v.task_id: (rng.uniform(0.5, 4.0), rng.uniform(0.2e9, 2.0e9)) for v in victims
    }

    def predict(victim, cpu, bw):
        if cpu <= 0.0 or bw <= 0.0:
            return math.inf
        work, traffic = loads[victim.task_id]
        return work / cpu + traffic / bw

    return need, group, victims, candidates, status_quo, predict


def _brute_force_plan(need, group, victims, candidates, status_quo, predict, floor=1e-3):
    remaining_cpu, remaining_bw = need.cpu_shortfall, need.bw_shortfall
    slack = slack_from_fast_peers(group)
    for peer in sorted(group, key=lambda p: (p.predicted_time, p.worker_id)):
        cpu_s, bw_s = slack.get(peer.worker_id, (0.0, 0.0))
        remaining_cpu -= min(cpu_s, remaining_cpu)
        remaining_bw -= min(bw_s, remaining_bw)
    cuts = [(0.0, 0.0)] * len(victims)
    if remaining_cpu > 0.0 or remaining_bw > 0.0:
        if not victims:
            return "rejected", None
        cpu_cuts = (
            sensitivity_weighted_split(
                remaining_cpu, [(v.sensitivity_cpu, v.accuracy_gain) for v in victims], floor
            )
            if remaining_cpu > 0.0
            else [0.0] * len(victims)
        )
        bw_cuts = (
            sensitivity_weighted_split(
                remaining_bw, [(v.sensitivity_bw, v.accuracy_gain) for v in victims], floor
            )
            if remaining_bw > 0.0
            else [0.0] * len(victims)
        )
        for i, victim in enumerate(victims):
            if cpu_cuts[i] > victim.cpu_share or bw_cuts[i] > victim.bw_share:
                return "rejected", None
        cuts = list(zip(cpu_cuts, bw_cuts))
        affected = list(zip(victims, cpu_cuts, bw_cuts))
    else:
        affected = []
    for candidate in candidates:
        s_o = status_quo + math.fsum(
            predict(v, v.cpu_share, v.bw_share) for v, _, _ in affected
        )
        s_w = candidate.est_time + math.fsum(
            predict(v, v.cpu_share - dc, v.bw_share - db) for v, dc, db in affected
        )
        if s_w < s_o:
            return "accepted", candidate.mode
    return "rejected", None


def test_criterion_06_reallocation_plans_match_brute_force():
    rng = random.Random(77)
    ok = True
    accepted = 0
    for _ in range(1000):
        need, group, victims, candidates, status_quo, predict = _random_plan_trial(rng)
        plan = plan_reallocation(
            need, group, victims, candidates, status_quo, predict
        )
        verdict, mode = _brute_force_plan(
            need, group, victims, candidates, status_quo, predict
        )
        ok &= plan.verdict == verdict
        if verdict == "accepted":
            accepted += 1
            ok &= plan.chosen is not None and plan.chosen.mode == mode
            net_cpu = math.fsum(d.cpu for d in plan.deltas)
            net_bw = math.fsum(d.bw for d in plan.deltas)
            ok &= abs(net_cpu) <= 1e-9 and abs(net_bw) <= 1e-9 * 1e9
            # Stage-2 donations must stay proportional to 1 / (S * A).
            victim_cpu = {
                d.task_id: -d.cpu for d in plan.deltas if d.task_id.startswith("v")
            }
            if len(victim_cpu) >= 2:
                products = []
                for victim in victims:
                    cut = victim_cpu.get(victim.task_id)
                    if cut:
                        products.append(
                            cut
                            * max(victim.sensitivity_cpu, 1e-3)
                            * max(victim.accuracy_gain, 1e-3)
                        )
                for value in products[1:]:
                    ok &= math.isclose(value, products[0], rel_tol=1e-9)
    _verdict(
        6,
        f"1000 reallocation plans conserve shares and match brute force ({accepted} accepted)",
        ok,
    )


def test_criterion_07_parameter_server_placement_balances():
    def load(i, counts, cpu=16.0):
        return ServerLoad(
            id=f"s{i}",
            ps_count=counts[i],
            cpu_headroom=cpu - 2.0 * counts[i],
            bw_headroom=8.0e9 - 1.0e9 * counts[i],
            cpu_capacity=cpu,
            bw_capacity=8.0e9,
        )

    counts = [0] * 5
    for _ in range(20):
        chosen = place_high_load_task(2.0, 1.0e9, [load(i, counts) for i in range(5)])
        counts[int(chosen[1:])] += 1
    balanced = max(counts) - min(counts) <= 1

    starved_counts = [0] * 5
    for _ in range(20):
        servers = [load(i, starved_counts) for i in range(1, 5)]
        servers.append(
            ServerLoad(
                id="s0",
                ps_count=starved_counts[0],
                cpu_headroom=1.0,  # below the 2-core need, never feasible
                bw_headroom=8.0e9,
                cpu_capacity=16.0,
                bw_capacity=8.0e9,
            )
        )
        chosen = place_high_load_task(2.0, 1.0e9, servers)
        starved_counts[int(chosen[1:])] += 1
    starved_ok = starved_counts[0] == 0 and max(starved_counts[1:]) - min(
        starved_counts[1:]
    ) <= 1
    _verdict(
        7,
        f"20 parameter servers balance over 5 servers {counts}; starved server gets none {starved_counts}",
        balanced and starved_ok,
    )


def test_criterion_08_comm_tree_invariants():
    rng = random.Random(31337)
    ok = True
    for _ in range(500):
        n = rng.randint(1, 30)
        b = rng.randint(1, 6)
        workers = [(f"w{i}", round(rng.uniform(0.0, 100.0), 1)) for i in range(n)]
        tree = build_comm_tree("root", workers, branching=b)
        lat = dict(workers)
        for worker, _ in workers:
            seen = set()
            node = worker
            while node != "root":
                ok &= node not in seen and node in tree.parent
                seen.add(node)
                node = tree.parent[node]
        ok &= set(tree.parent) == {w for w, _ in workers}
        depths = tree.depth
        for a, _ in workers:
            for c, _ in workers:
                if depths[a] < depths[c]:
                    ok &= lat[a] <= lat[c]
        if b >= n:
            ok &= all(depths[w] == 1 for w, _ in workers)
    _verdict(8, "500 random communication trees keep structure and latency order", ok)


def _prediction_suite_job(j):
    """One periodic-throttle scenario: k slow rounds then one clean round."""
    frac = (0.30, 0.25, 0.35, 0.28, 0.32, 0.30, 0.26, 0.34, 0.29, 0.31)[j]
    k = 5 if j % 2 == 0 else 6
    worker = j % 8
    slow_round = 0.3 / frac + 0.31
    cycle = k * slow_round + 0.61
    windows = [
        Perturbation(
            kind="cpu_throttle",
            fraction=frac,
            start=max(0.0, c * cycle - 0.05),
            end=c * cycle + k * slow_round - 0.15,
            task=f"j1:w{worker}",
        )
        for c in range(10)
    ]
    return windows, 10 * cycle + 1.0


def test_criterion_09_forecasts_beat_fixed_persistence_rule():
    profile = make_profile(progress_target_tta=1e6, progress_target_conv=1e6)
    totals = {"model": [0, 0, 0, 0], "fixed": [0, 0, 0, 0]}
    for j in range(10):
        windows, horizon = _prediction_suite_job(j)
        world = make_world(profile, job=make_job(policy="ssgd"))
        metrics = run_simulation(
            world, windows, config=EngineConfig(forecast_order=6, horizon_s=horizon)
        )
        records = metrics.job("j1").records
        for key, quality in (
            ("model", prediction_quality(records)),
            ("fixed", prediction_quality(records, fixed_rule_flags(records))),
        ):
            totals[key][0] += quality.false_positives
            totals[key][1] += quality.false_negatives
            totals[key][2] += quality.positives
            totals[key][3] += quality.negatives
    fp_model = totals["model"][0] / totals["model"][3]
    fn_model = totals["model"][1] / totals["model"][2]
    fp_fixed = totals["fixed"][0] / totals["fixed"][3]
    fn_fixed = totals["fixed"][1] / totals["fixed"][2]
    ok = fp_model < fp_fixed and fn_model < fn_fixed
    _verdict(
        9,
        "share forecasts out-predict the 5s persistence rule "
        f"(fp {fp_model:.3f} vs {fp_fixed:.3f}, fn {fn_model:.3f} vs {fn_fixed:.3f})",
        ok,
    )


def test_criterion_10_wait_window_sweep_is_unimodal():
    profile = make_profile(preproc_work=0.15, pgns=PgnsCurve.flat(2048.0))
    job = make_job(architecture="ar", num_ps=0, batch_per_worker=128, policy="ssgd")
    world = make_world(profile, job=job)
    # Children 5..7 rejoin at staggered offsets 0.04 / 0.07 / 0.10 s past
    # the bare ring round.
    throttles = [
        Perturbation(
            kind="cpu_throttle", fraction=0.15 / 0.18, start=0.0, end=10_000.0, task="j1:w6"
        ),
        Perturbation(
            kind="cpu_throttle", fraction=0.15 / 0.21, start=0.0, end=10_000.0, task="j1:w7"
        ),
    ]
    ttas = []
    for k in range(1, 8):
        t_w = round(0.03 * k, 9)
        config = EngineConfig(pinned_mode=ARRemoval(3, t_w), horizon_s=90.0)
        ttas.append(run_simulation(world, throttles, config=config).job("j1").tta_s)
    ok = all(t is not None for t in ttas)
    best = min(range(len(ttas)), key=lambda i: ttas[i])
    ok &= 0 < best < len(ttas) - 1
    ok &= all(ttas[i] > ttas[i + 1] for i in range(best))
    ok &= all(ttas[i] < ttas[i + 1] for i in range(best, len(ttas) - 1))
    pretty = ", ".join(f"{t:.2f}" for t in ttas)
    _verdict(10, f"wait-window sweep dips once (ttas [{pretty}], best at {0.03 * (best + 1):.2f}s)", ok)


def test_criterion_11_repeat_invocations_are_byte_identical():
    args = [
        sys.executable,
        "-m",
        "stragglersim.cli",
        "simulate",
        "--trace", str(DATA / "trace.csv"),
        "--cluster", str(DATA / "cluster.json"),
        "--calib", str(DATA / "calibration.json"),
        "--perturb", str(DATA / "perturbations.json"),
        "--horizon", "90",
    ]
    first = subprocess.run(args, capture_output=True)
    second = subprocess.run(args, capture_output=True)
    ok = (
        first.returncode == 0
        and second.returncode == 0
        and first.stdout == second.stdout
        and len(first.stdout) > 0
    )
    _verdict(11, f"two identical simulate invocations emit identical bytes ({len(first.stdout)} bytes)", ok)


def _draw_skewed_times(rng):
    base = rng.uniform(0.3, 0.8)
    times = [base * rng.uniform(0.97, 1.03) for _ in range(8)]
    times[rng.randrange(8)] = base * rng.uniform(2.0, 8.0)
    return times


def test_criterion_12_learned_selector_matches_heuristic():
    rng = random.Random(1234)
    dataset = RegressorDataset()
    for _ in range(500):
        snapshot = _snapshot(_draw_skewed_times(rng))
        for candidate in rank_mode_candidates(snapshot):
            dataset.add(snapshot, candidate.mode, candidate.est_time)
    regressor = train_mode_regressor(dataset, min_rows=200)
    matches = 0
    for _ in range(200):
        snapshot = _snapshot(_draw_skewed_times(rng))
        learned = select_mode_ml(regressor, snapshot)
        matches += learned is not None and learned.mode == select_mode_heuristic(snapshot).mode
    _verdict(12, f"learned selector agrees with the heuristic on {matches}/200 held-out snapshots", matches >= 190)
