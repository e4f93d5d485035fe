import json

import pytest
from hypothesis import given, settings, strategies as st

from clonesim.cache import (MAX_AGE, CacheGeometry, CacheState, ConfigError, access,
                            access_decomposed, decompose, dram_map, geometry_to_dict,
                            load_geometry, row_conflict)


# Reference quad-age interpreter: one list of [tag, age] per way, written from
# the rule statement rather than from the simulator.
def quad_age_reference(ways, tags, insert_age=1, hit_age=0):
    lines = [None] * ways
    out = []
    for t in tags:
        hit = next((i for i, ln in enumerate(lines) if ln is not None and ln[0] == t), None)
        if hit is not None:
            lines[hit][1] = hit_age
            out.append("hit")
            continue
        empty = next((i for i, ln in enumerate(lines) if ln is None), None)
        if empty is not None:
            lines[empty] = [t, insert_age]
            out.append(None)
            continue
        while not any(ln[1] == 3 for ln in lines):
            for ln in lines:
                ln[1] += 1
        victim = next(i for i, ln in enumerate(lines) if ln[1] == 3)
        out.append(lines[victim][0])
        lines[victim] = [t, insert_age]
    return out


def run_tags(geo, tags):
    state = CacheState(geo)
    out = []
    for t in tags:
        r = access_decomposed(state, 0, 0, t)
        out.append("hit" if r.hit else r.evicted)
    return out, state


def bit_field(value, lo, width):
    bits = bin(value)[2:].zfill(64)[::-1]
    return int(bits[lo:lo + width][::-1] or "0", 2)


def test_decompose_zero():
    assert tuple(decompose(0, CacheGeometry())) == (0, 0, 0, 0)


def test_set_index_occupies_bits_6_to_15():
    geo = CacheGeometry()
    for bit in range(6, 16):
        assert decompose(1 << bit, geo).set_index == 1 << (bit - 6)
    assert decompose(1 << 16, geo).set_index == 0
    assert decompose(1 << 5, geo).set_index == 0


def test_decompose_against_bit_extraction():
    pa = 0x12345
    mask = sum(1 << b for b in range(16, 34))
    geo = CacheGeometry(slices=2, slice_hash=(mask,))
    expected = (
        bit_field(pa, 0, 6),
        bit_field(pa, 6, 10),
        bin(bit_field(pa, 16, 18)).count("1") % 2,
        bit_field(pa, 16, 48),
    )
    assert expected == (0x05, 0x8D, 1, 1)
    assert tuple(decompose(pa, geo)) == expected


def test_empty_set_miss_without_eviction():
    state = CacheState(CacheGeometry())
    r = access(state, 0x4000)
    assert not r.hit and r.evicted is None


def test_reaccess_hits():
    state = CacheState(CacheGeometry())
    access(state, 0x4000)
    r = access(state, 0x4000)
    assert r.hit and r.evicted is None


def test_quad_age_four_way_trace():
    a, b, c, d, e, f, g, h = range(1, 9)
    seq = [a, b, c, d, b, e, f, g, h]
    expected = [None, None, None, None, "hit", a, c, d, b]
    assert quad_age_reference(4, seq) == expected
    out, _ = run_tags(CacheGeometry(ways=4), seq)
    assert out == expected


def test_fill_then_new_line_evicts_way_zero():
    out, _ = run_tags(CacheGeometry(ways=4), [1, 2, 3, 4, 5])
    assert out[-1] == 1


def test_lru_evicts_least_recent():
    out, _ = run_tags(CacheGeometry(ways=4, replacement="lru"), [1, 2, 3, 4, 1, 5, 6])
    assert out[-2:] == [2, 3]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 9), max_size=60), st.sampled_from([2, 4, 8]),
       st.integers(0, 3), st.integers(0, 3))
def test_quad_age_matches_reference(tags, ways, ins, hit):
    geo = CacheGeometry(ways=ways, insertion_age=ins, hit_age=hit)
    out, state = run_tags(geo, tags)
    assert out == quad_age_reference(ways, tags, ins, hit)


addresses = st.integers(0, (1 << 34) - 1)


@settings(max_examples=100, deadline=None)
@given(st.lists(addresses, max_size=80), st.sampled_from(["quad_age", "lru"]),
       st.sampled_from([1, 2, 4]))
def test_determinism_and_state_invariants(pas, policy, slices):
    geo = CacheGeometry(slices=slices, ways=4, sets_per_slice=64, replacement=policy)
    s1, s2 = CacheState(geo), CacheState(geo)
    t1 = [access(s1, p) for p in pas]
    t2 = [access(s2, p) for p in pas]
    assert t1 == t2 and s1.fingerprint() == s2.fingerprint()
    for cs in s1.sets.values():
        valid = [t for t in cs.tags if t is not None]
        assert len(valid) == len(set(valid))
        assert all(0 <= a <= MAX_AGE for a in cs.ages)


@settings(max_examples=100, deadline=None)
@given(st.lists(addresses, max_size=50), addresses)
def test_residency_after_access(pas, pa):
    state = CacheState(CacheGeometry(slices=2, ways=4, sets_per_slice=64))
    for p in pas:
        access(state, p)
    access(state, pa)
    assert access(state, pa).hit


@settings(max_examples=100, deadline=None)
@given(st.lists(addresses, min_size=1, max_size=50), st.integers(0, 63), st.integers(0, 1))
def test_set_isolation(pas, target_set, target_slice):
    geo = CacheGeometry(slices=2, ways=4, sets_per_slice=64)
    state = CacheState(geo)
    for p in pas:
        access(state, p)
    snapshot = {k: v.snapshot() for k, v in state.sets.items()}
    access_decomposed(state, target_set, target_slice, 12345)
    for k, v in state.sets.items():
        if k != (target_slice, target_set) and k in snapshot:
            assert v.snapshot() == snapshot[k]


@settings(max_examples=100, deadline=None)
@given(st.sampled_from([2, 4, 8, 16]), st.sampled_from(["quad_age", "lru"]),
       st.lists(st.integers(0, 1000), min_size=0, max_size=20))
def test_eviction_bound(ways, policy, warm):
    state = CacheState(CacheGeometry(ways=ways, replacement=policy))
    for t in warm:
        access_decomposed(state, 3, 0, 10_000 + t)
    first = list(range(ways))
    for t in first:
        access_decomposed(state, 3, 0, t)
    access_decomposed(state, 3, 0, ways)
    resident = [state.sets[(0, 3)].find(t) >= 0 for t in first]
    assert not all(resident)


def test_flush_removes_line():
    state = CacheState(CacheGeometry())
    access(state, 0x1000)
    assert state.flush(0x1000) and not state.resident(0x1000)
    assert not state.flush(0x1000)


def test_geometry_validation():
    with pytest.raises(ConfigError):
        CacheGeometry(sets_per_slice=1000)
    with pytest.raises(ConfigError):
        CacheGeometry(line_size=32)
    with pytest.raises(ConfigError):
        CacheGeometry(replacement="fifo")


@settings(max_examples=50, deadline=None)
@given(addresses, st.sampled_from([1, 2, 3, 4, 8, 12]))
def test_slice_in_range(pa, slices):
    if slices in (3, 12):
        mask = (1 << 16) | (1 << 20) | (1 << 25)
        geo = CacheGeometry(slices=slices, slice_hash=(mask, mask << 1, mask << 2, mask << 3))
    else:
        geo = CacheGeometry(slices=slices)
    assert 0 <= decompose(pa, geo).slice < slices


def test_geometry_round_trip(tmp_path):
    geo = CacheGeometry(slices=4, ways=8, replacement="lru")
    path = tmp_path / "geo.json"
    path.write_text(json.dumps(geometry_to_dict(geo)))
    assert load_geometry(str(path)) == geo
    with pytest.raises(ConfigError):
        load_geometry({"slices": 1, "colour": "red"})


def test_dram_zero():
    assert tuple(dram_map(0)) == (0, 0, 0, 0, 0, 0, 0)


def test_dram_bit_18():
    d = dram_map(1 << 18)
    assert (d.channel, d.bg0, d.bg1, d.ba0, d.ba1, d.rank, d.row) == (1, 0, 0, 0, 1, 1, 1)


def test_row_conflict_boundary_pair():
    assert row_conflict(0x3FFFFF, 0x400000)
    assert not row_conflict(0, 0)
    assert not row_conflict(0x1000, 0x1008)


@settings(max_examples=200, deadline=None)
@given(addresses, addresses)
def test_row_conflict_symmetric_irreflexive(a, b):
    assert row_conflict(a, b) == row_conflict(b, a)
    assert not row_conflict(a, a)
    assert dram_map(a) == dram_map(a)
