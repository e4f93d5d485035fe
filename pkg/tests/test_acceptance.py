"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``C<n> PASS|FAIL ...`` line to the terminal, even
under output capture, before asserting.
"""

import time

import pytest

from clonesim.cache import CacheGeometry, CacheState, access, decompose
from clonesim.detector import (CLONE_DETECTED, CloneBuster, DetectorConfig, NoValidM,
                               estimate_clone_count, ladder, lockstep_miss_totals,
                               ways_for_instances)
from clonesim.eviction import (N_CHANNELS, CacheGroup, EvictionOracle, build_monitoring_set,
                               build_spoiler_groups, default_region_bytes, reduce,
                               regroup_to_cache_groups, select_channel, true_targets)
from clonesim.experiment import ExperimentSpec, run_experiment
from clonesim.linearity import check_conditions, evasion_demo, is_affine, search_nonlinear
from clonesim.osmodel import (PAGE_SIZE, AdversaryScript, ClockStall, Linear, Permuted, SlowClock,
                              World, allocate, apply_adversary)
from clonesim.scenarios import all_mc_orderings, make_platform, run_bisgx_attack

SEEDS = range(50)


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nC{n} {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail
    return emit


def linear_world(geo):
    world = World(geo)
    world.add_actor("A", allocate(Linear(64), default_region_bytes(geo) // PAGE_SIZE))
    return world


def test_c1_structural_constants(report):
    reached = {select_channel(f"enclave-{i}") for i in range(5000)}
    ok = N_CHANNELS == 64 and reached == set(range(64))
    details = [f"channels={len(reached)}"]
    for slices in (1, 2, 4):
        geo = CacheGeometry(slices=slices)
        world = linear_world(geo)
        t0 = time.perf_counter()
        ms = build_monitoring_set(world, "A", 5)
        elapsed = time.perf_counter() - t0
        spoiler = build_spoiler_groups(world, "A", 5)
        cache = regroup_to_cache_groups(spoiler, EvictionOracle(world, "A"))
        covered = len(set(true_targets(world, "A", ms)))
        ok &= len(spoiler) == 256 and len(cache) == 16 and covered == len(ms.sets) == 16 * slices
        if slices == 1:
            ok &= elapsed < 1.0
        details.append(f"s={slices}: {len(spoiler)}/{len(cache)}/{covered} in {elapsed:.2f}s")
    report(1, ok, "; ".join(details))


WAYS_BY_INSTANCES = {1: range(9, 17), 2: range(6, 9), 3: [5], 4: [4], 5: [3], 8: [2], 16: [1]}


def test_c2_ways_table(report):
    ok = all(ways_for_instances(16, N) == list(ms) for N, ms in WAYS_BY_INSTANCES.items())
    try:
        ways_for_instances(16, 7)
        ok = False
    except NoValidM:
        pass
    report(2, ok, f"N in {sorted(WAYS_BY_INSTANCES)} exact, N=7 has no valid m")


def test_c3_eviction_sets_sound_and_minimal(report):
    geos = [CacheGeometry(slices=s, ways=w, replacement=r)
            for s in (1, 2, 4) for w in (4, 8, 16) for r in ("quad_age", "lru")]
    t0 = time.perf_counter()
    failures, checked = [], 0
    for i in range(100):
        geo = geos[i % len(geos)]
        world = World(geo, seed=i)
        world.add_actor("A", allocate(Permuted(seed=i, base=64),
                                      default_region_bytes(geo) // PAGE_SIZE))
        spoiler = build_spoiler_groups(world, "A", i % 64)
        by_set = {}
        for g in spoiler:
            s = decompose(world.translate("A", g.test_address), geo).set_index
            by_set.setdefault(s, []).append(g)
        group = by_set[sorted(by_set)[i % len(by_set)]]
        found = reduce(CacheGroup(0, group), EvictionOracle(world, "A"), geo.slices, geo.ways)
        pool = [va for g in group for va in g.members]
        for es in found:
            pas = [world.translate("A", va) for va in es.members]
            target = decompose(pas[0], geo)[1:3]
            victim = next(world.translate("A", va) for va in pool if va not in es.members
                          and decompose(world.translate("A", va), geo)[1:3] == target)

            def evicts(lines):
                state = CacheState(geo)
                access(state, victim)
                for pa in lines:
                    access(state, pa)
                return not state.resident(victim)

            if not evicts(pas) or any(evicts(pas[:j] + pas[j + 1:]) for j in range(len(pas))):
                failures.append((i, target))
            checked += 1
    elapsed = time.perf_counter() - t0
    report(3, not failures and elapsed < 30,
           f"100 instances, {checked} sets, {len(failures)} failures, {elapsed:.1f}s")


def _instances(n, seed, m, N, slices):
    geo = CacheGeometry(slices=slices)
    plat = make_platform([f"V{i}" for i in range(n)], geo, seed)
    cfg = DetectorConfig(m=m, w=len(plat.monitoring["V0"].sets) * m, t=1, N=N, W=geo.ways)
    return [CloneBuster(plat.world, a, plat.monitoring[a], cfg) for a in plat.monitoring]


def test_c4_clone_contention(report):
    bad = []
    for N, m in ladder(16)[:5]:
        for seed in SEEDS:
            slices = 1 + seed % 2
            insts = _instances(N + 1, seed, m, N, slices)
            incumbents, newcomer = insts[:N], insts[N]
            for d in incumbents:
                d.start()
            totals, _ = lockstep_miss_totals(incumbents, 10 ** 4)
            if any(totals):
                bad.append(("fp", N, seed, totals))
                continue
            newcomer.start()
            for d in incumbents:
                res = d.probe()
                if (d.verdicts[-1] != CLONE_DETECTED or res.first_miss is None
                        or res.first_miss > 16 * slices):
                    bad.append(("fn", N, seed, res.first_miss))
    report(4, not bad, f"N=1..5 x 50 seeds, {len(bad)} failures {bad[:3]}")


def test_c5_evasion_closure(report):
    t0 = time.perf_counter()
    one, full = evasion_demo(1), evasion_demo(16)
    elapsed = time.perf_counter() - t0
    ok = (one.evaded and not set(one.sets_a) & set(one.sets_b)
          and check_conditions(one.mapping_a).passed and check_conditions(one.mapping_b).passed
          and not full.evaded and elapsed < 60)
    report(5, ok, f"k=1 sets {one.sets_a} vs {one.sets_b}; k=16 evaded={full.evaded}; "
                  f"{elapsed:.1f}s")


def test_c6_nonlinear_existence(report):
    t0 = time.perf_counter()
    sols = search_nonlinear(limit=8)
    elapsed = time.perf_counter() - t0
    ok = (len(sols) >= 1 and all(not is_affine(s) and check_conditions(s).passed for s in sols)
          and elapsed < 120)
    report(6, ok, f"{len(sols)} non-affine mappings re-verified, {elapsed:.1f}s")


POLLUTION = [0.0, 0.125, 0.25, 0.375, 0.5, 0.75, 1.0]


def test_c7_pollution_sweep(report):
    W, m = 16, 12
    violations, bad_zero, bad_one = 0, 0, 0
    for seed in range(20):
        spec = ExperimentSpec(m=[m], w=[64], t=[1], pollution=POLLUTION, trials=1, seed=seed,
                              observations=2048, classes="negative")
        table = run_experiment(spec)
        fpr = [table.select(pollution=p)[0]["fpr"] for p in POLLUTION]
        violations += sum(b < a for a, b in zip(fpr, fpr[1:]))
        bad_zero += sum(f != 0 for p, f in zip(POLLUTION, fpr) if p * W <= W - m)
        bad_one += fpr[-1] != 1.0
    report(7, violations == bad_zero == bad_one == 0,
           f"20 seeds: {violations} monotonicity violations, {bad_zero} nonzero below W-m, "
           f"{bad_one} runs short of 1.0 at p=1")


WINDOWS = [1, 4, 16, 64, 256, 1024]


def test_c8_window_monotonicity(report):
    spec = ExperimentSpec(m=[12], w=WINDOWS, t="auto", trials=3, observations=16384,
                          clone_duty=0.3,
                          workload=[{"profile": "random", "rate": 0.05, "sets": "channel",
                                     "footprint": 8}])
    table = run_experiment(spec)
    f1 = [table.select(w=w)[0]["f1"] for w in WINDOWS]
    drops = [a - b for a, b in zip(f1, f1[1:]) if b < a]
    ok = f1[-1] - f1[0] >= 0.05 and len(drops) <= 1 and all(d <= 0.005 for d in drops)
    report(8, ok, "F1 " + " ".join(f"w{w}={v:.4f}" for w, v in zip(WINDOWS, f1)))


def test_c9_bisgx_fork_witness(report):
    t0 = time.perf_counter()
    plat = make_platform(["E", "E'"], seed=0, identity="bisgx")
    off = run_bisgx_attack(False, platform=plat)
    mcs = [b[2] for b in off.details["blobs"]]
    ok = len(mcs) == 2 and mcs[0] == mcs[1]
    caught = 0
    for order in all_mc_orderings():
        on = run_bisgx_attack(True, order=order, platform=plat)
        vals = [b[2] for b in on.details["blobs"]]
        if on.detected and len(vals) == len(set(vals)):
            caught += 1
    elapsed = time.perf_counter() - t0
    ok &= caught == 24 and elapsed < 10
    report(9, ok, f"off: MC values {mcs}; on: {caught}/24 orderings detected without "
                  f"duplicates, {elapsed:.1f}s")


def _anomaly_run(seed, action):
    plat = make_platform(["V"], seed=seed)
    world = plat.world
    if action is not None:
        world = apply_adversary(world, AdversaryScript((action,)))
    d = CloneBuster(world, "V", plat.monitoring["V"], DetectorConfig(m=12, w=192))
    d.start()
    while world.time < 400_000:
        d.probe()
    return any(v.is_anomaly for v in d.verdicts)


def test_c10_anomaly_defenses(report):
    attacks = {"slow x2": SlowClock(2.0, 150_000, 1e9), "slow x4": SlowClock(4.0, 150_000, 1e9),
               "stall": ClockStall(150_000, 5_000)}
    hits = {name: sum(_anomaly_run(s, a) for s in SEEDS) for name, a in attacks.items()}
    clean = sum(_anomaly_run(s, None) for s in SEEDS)
    ok = all(h == 50 for h in hits.values()) and clean == 0
    report(10, ok, ", ".join(f"{k} {v}/50" for k, v in hits.items()) + f", unperturbed {clean}/50")


def test_c11_estimation_ladder(report):
    wrong = []
    for others in range(5):
        for seed in SEEDS:
            insts = _instances(1 + others, seed, 12, 1, 1)
            for d in insts:
                d.calibrate()
            est, _ = estimate_clone_count(insts)
            if est != others:
                wrong.append((others, seed, est))
    report(11, not wrong, f"0-4 others x 50 seeds, {len(wrong)} wrong {wrong[:3]}")
