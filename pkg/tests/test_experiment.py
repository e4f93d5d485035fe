import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clonesim.cache import CacheGeometry
from clonesim.experiment import (METRIC_COLUMNS, Confusion, ExperimentSpec, NoiseActor, Trace,
                                 generate_trace, manifest, noise_workload, run_experiment,
                                 window_counts, workload_name)


def test_idle_noise_issues_nothing():
    tr = generate_trace(False, 12, 1, 1024, seed=0, workload="idle")
    assert tr.noise_accesses == 0


def test_random_noise_rate():
    tr = generate_trace(False, 12, 1, 192 * 40, seed=1,
                        workload={"profile": "random", "rate": 0.5})
    expected = 0.5 * 192 * 41  # one warm-up pass plus 40 recorded
    assert abs(tr.noise_accesses - expected) < 0.05 * expected


def test_bursty_noise_duty():
    n = NoiseActor(profile="bursty", rate=1.0, duty=0.25, period=8, seed=2)
    n.bind(CacheGeometry(slices=1), 3)
    class Sink:
        def access_physical(self, *_):
            pass
    for _ in range(800):
        n.run(Sink(), 100)
    assert abs(n.accesses - 0.25 * 800 * 100) < 0.05 * 0.25 * 800 * 100


def test_noise_sets_selection():
    geo = CacheGeometry(slices=1)
    chan = NoiseActor(sets="channel", footprint=1).bind(geo, 5)
    other = NoiseActor(sets="other", footprint=1).bind(geo, 5)
    chan_sets = {(pa >> 6) & 0x3FF for pa in chan.lines}
    assert chan_sets == {5 + 64 * j for j in range(16)}
    assert not chan_sets & {(pa >> 6) & 0x3FF for pa in other.lines}
    with pytest.raises(ValueError):
        NoiseActor(profile="loud")
    with pytest.raises(ValueError):
        NoiseActor(rate=-1)


def test_noise_outside_channel_leaves_victim_unchanged():
    idle = generate_trace(False, 12, 1, 2048, seed=3)
    other = generate_trace(False, 12, 1, 2048, seed=3,
                           workload={"profile": "streaming", "rate": 2.0, "sets": "other"})
    assert other.noise_accesses > 0
    assert np.array_equal(idle.misses, other.misses)


def test_workload_helpers():
    assert workload_name("idle") == "idle"
    assert workload_name({"profile": "random", "rate": 0.1}) == "random:rate=0.1"
    assert noise_workload({"profile": "random"}, seed=4).seed == 4


@settings(max_examples=50, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=200), st.integers(1, 20))
def test_window_counts_match_slicing(bits, w):
    tr = Trace(np.array(bits), np.zeros(len(bits), dtype=bool))
    mis, bad = window_counts(tr, w)
    expected = [sum(bits[i:i + w]) for i in range(0, len(bits) - w + 1, w)]
    assert list(mis) == expected and not bad.any()


def test_confusion_hand_counts():
    c = Confusion()
    c.add(np.array([True, True, False, False, False]), np.array([True, False, True, False, False]))
    assert (c.tp, c.fn, c.fp, c.tn) == (1, 1, 1, 2)
    assert c.f1 == pytest.approx(0.5)
    assert c.fpr == pytest.approx(1 / 3) and c.fnr == pytest.approx(0.5)
    assert Confusion().f1 == Confusion().fpr == 0.0


def test_zero_trials_empty():
    assert len(run_experiment(ExperimentSpec(trials=0))) == 0


@pytest.mark.parametrize("bad", [{"window": [3]}, {"m": [8]}, {"pollution": [1.5]},
                                 {"classes": "positive"}, {"t": [0]}])
def test_invalid_specs(bad):
    with pytest.raises(ValueError):
        ExperimentSpec.from_dict(bad)


def test_two_instances_large_window_separable():
    spec = ExperimentSpec(m=[12], w=[1024], trials=2, observations=4096)
    (row,) = run_experiment(spec).rows
    assert row["f1"] >= 0.99 and row["fpr"] == 0.0


def test_small_window_fnr_bounded():
    spec = ExperimentSpec(m=[12], w=[64], trials=2, observations=4096)
    (row,) = run_experiment(spec).rows
    assert row["fnr"] <= 0.05


def test_pollution_fpr_jump():
    spec = ExperimentSpec(m=[12], w=[64], t=[1], pollution=[0.25, 0.5], trials=2,
                          observations=2048, classes="negative")
    table = run_experiment(spec)
    assert table.select(pollution=0.25)[0]["fpr"] == 0.0
    assert table.select(pollution=0.5)[0]["fpr"] == 1.0


def test_run_deterministic_and_verdicts_complete():
    spec = ExperimentSpec(m=[12], w=[64, 256], t=[1, 2], trials=2, observations=1024)
    rows_a, rows_b = [], []
    a = run_experiment(spec, rows_a)
    b = run_experiment(spec, rows_b)
    assert a.rows == b.rows and rows_a == rows_b
    assert len(a) == 4
    assert len(rows_a) == sum(r["windows"] for r in a.rows)


def test_metrics_check_and_csv():
    spec = ExperimentSpec(w=[128], trials=1, observations=512)
    table = run_experiment(spec)
    buf = io.StringIO()
    table.write_csv(buf)
    assert tuple(buf.getvalue().splitlines()[0].split(",")) == METRIC_COLUMNS
    table.rows[0]["f1"] += 0.5
    with pytest.raises(AssertionError):
        table.check()


def test_manifest_replays(tmp_path):
    spec = ExperimentSpec(trials=3, seed=5)
    path = tmp_path / "spec.json"
    path.write_text(json.dumps({"trials": 3, "seed": 5}))
    assert ExperimentSpec.load(path) == spec
    man = manifest(spec, ["metrics.csv"])
    assert man["evaluation_seeds"] == [6, 7, 8] and man["calibration_seed"] == 5
    assert ExperimentSpec.from_dict(man["spec"]) == spec
