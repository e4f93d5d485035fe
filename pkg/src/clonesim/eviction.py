"""Channel selection and eviction-set construction.

The builder only sees two predicates supplied by the simulated hardware:
whether two addresses alias on their low 20 physical bits, and whether
accessing one address list evicts lines of another.  It never reads the
page table.  Every structural check that fails raises MemoryManipulation,
since on an honest OS none of them can fail.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .cache import CacheSet, access_decomposed, CacheState
from .osmodel import ALIAS_BITS, PAGE_BITS, PAGE_SIZE, UnmappedError, World

N_CHANNELS = 64
N_SPOILER_GROUPS = 256
CHANNEL_SHIFT = 6


class MemoryManipulation(RuntimeError):
    """Evidence that the OS handed the enclave a manipulated memory layout."""


# --- channel -----------------------------------------------------------------

def select_channel(binary_identity: str, config: Optional[dict] = None) -> int:
    """Channel (0..63) for an enclave binary.

    A pinned ``config["channel"]`` wins; otherwise the low 6 bits of the
    SHA-256 of the identity.  Distinct binaries may collide; a collision only
    makes both enclaves raise alarms.
    """
    if config and config.get("channel") is not None:
        ch = int(config["channel"])
        if not 0 <= ch < N_CHANNELS:
            raise ValueError(f"channel {ch} outside [0, {N_CHANNELS})")
        return ch
    digest = hashlib.sha256(binary_identity.encode()).digest()
    return int.from_bytes(digest, "big") & (N_CHANNELS - 1)


def channel_offset(channel: int) -> int:
    return channel << CHANNEL_SHIFT


# --- oracles -------------------------------------------------------------------

class AliasOracle:
    """Speculative-load aliasing predicate over one actor's memory."""

    def __init__(self, world: World, actor: str):
        self.world = world
        self.actor = actor
        self.queries = 0

    def alias(self, va1: int, va2: int) -> bool:
        self.queries += 1
        return (self.world.translate(self.actor, va1) ^ self.world.translate(self.actor, va2)) \
            & ((1 << ALIAS_BITS) - 1) == 0

    def alias_many(self, va: int, candidates: Sequence[int]) -> np.ndarray:
        """Vectorised ``alias(va, c)`` for each candidate; unmapped candidates never alias."""
        self.queries += len(candidates)
        ref = self.world.translate(self.actor, va) & ((1 << ALIAS_BITS) - 1)
        low = np.full(len(candidates), -1, dtype=np.int64)
        for i, c in enumerate(candidates):
            try:
                low[i] = self.world.translate(self.actor, c) & ((1 << ALIAS_BITS) - 1)
            except UnmappedError:
                pass
        return low == ref


class EvictionOracle:
    """Answers "does accessing ``sweep`` evict any line of ``primed``?".

    Each test runs on a private cold copy of the cache.  Only sweep lines that
    share a (set, slice) with a primed line are replayed; lines elsewhere
    cannot touch the primed sets, so skipping them does not change the answer.
    """

    def __init__(self, world: World, actor: str, passes: int = 1):
        self.world = world
        self.actor = actor
        self.passes = passes
        self.tests = 0
        self._group_index: dict = {}

    def _loc(self, va: int):
        return self.world.locate(self.actor, va)

    def _index(self, group) -> dict:
        """Lines of a spoiler group bucketed by (set, slice), cached per group object."""
        hit = self._group_index.get(id(group))
        if hit is not None and hit[0] is group:
            return hit[1]
        index: dict = {}
        for va in group.members:
            try:
                s, sl, tag = self._loc(va)
            except UnmappedError:
                continue
            index.setdefault((s, sl), []).append((s, sl, tag))
        self._group_index[id(group)] = (group, index)
        return index

    def _prime(self, primed):
        geo = self.world.geo
        plocs = [self._loc(va) for va in primed]
        sets: dict = {}
        for s, sl, _ in plocs:
            if (s, sl) not in sets:
                sets[(s, sl)] = CacheSet(geo.ways)
        state = CacheState(geo, {(sl, s): cs for (s, sl), cs in sets.items()})
        for s, sl, tag in plocs:
            access_decomposed(state, s, sl, tag)
        return plocs, sets, state

    def evicts(self, primed: Sequence[int], sweep: Iterable[int]) -> bool:
        self.tests += 1
        plocs, sets, state = self._prime(primed)
        relevant = []
        for va in sweep:
            try:
                s, sl, tag = self._loc(va)
            except UnmappedError:
                continue
            if (s, sl) in sets:
                relevant.append((s, sl, tag))
        return self._finish(plocs, state, relevant)

    def evicts_groups(self, primed: Sequence[int], groups: Sequence) -> bool:
        """``evicts(primed, all members of groups in order)`` without rescanning members."""
        self.tests += 1
        plocs, sets, state = self._prime(primed)
        relevant = {t: [] for t in sets}
        for g in groups:
            index = self._index(g)
            for t, bucket in relevant.items():
                lines = index.get(t)
                if lines:
                    bucket.extend(lines)
        return self._finish(plocs, state, [x for b in relevant.values() for x in b])

    def _finish(self, plocs, state, relevant) -> bool:
        for _ in range(self.passes):
            for s, sl, tag in relevant:
                access_decomposed(state, s, sl, tag)
        for s, sl, tag in plocs:
            if state.sets[(sl, s)].find(tag) < 0:
                return True
        return False


# --- data types --------------------------------------------------------------

@dataclass
class SpoilerGroup:
    id: int
    members: list

    @property
    def test_address(self) -> int:
        return self.members[0]


@dataclass
class CacheGroup:
    id: int
    spoiler_groups: list

    @property
    def members(self) -> list:
        return [va for g in self.spoiler_groups for va in g.members]


@dataclass
class EvictionSet:
    target: tuple  # (cache group id, slice ordinal) as seen by the enclave
    members: list


@dataclass
class MonitoringSet:
    channel: int
    sets: list = field(default_factory=list)

    def rows(self, m: int) -> list:
        """Set-interleaved order: row r touches member r of every eviction set."""
        return [es.members[r] for r in range(m) for es in self.sets]

    def columns(self, m: int) -> list:
        """Set-major order: all m members of one set before the next."""
        return [va for es in self.sets for va in es.members[:m]]

    def to_dict(self) -> dict:
        return {"channel": self.channel,
                "sets": [{"target": list(es.target), "members": es.members} for es in self.sets]}

    @classmethod
    def from_dict(cls, data: dict) -> "MonitoringSet":
        return cls(int(data["channel"]),
                   [EvictionSet(tuple(s["target"]), list(s["members"])) for s in data["sets"]])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "MonitoringSet":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class CoverageReport:
    gaps: list = field(default_factory=list)
    spacing_anomalies: list = field(default_factory=list)
    size_anomalies: list = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not (self.gaps or self.spacing_anomalies or self.size_anomalies)


# --- Algorithm -------------------------------------------------------------------

def region_addresses(n_pages: int, channel: int, base_va: int = 0) -> list:
    off = channel_offset(channel)
    return [base_va + p * PAGE_SIZE + off for p in range(n_pages)]


def default_region_bytes(geo) -> int:
    """Twice the cache size, and at least two lines per slice in every spoiler group.

    Regrouping needs each spoiler group to reach every slice of its set;
    with few ways the 2x rule alone leaves single-line groups.
    """
    return max(2 * geo.size_bytes, N_SPOILER_GROUPS * 2 * geo.slices * PAGE_SIZE)


def build_spoiler_groups(world: World, actor: str, channel: int,
                         region_bytes: Optional[int] = None, base_va: int = 0) -> list:
    """Partition the region's channel-offset addresses by low-20-bit aliasing.

    Test addresses walk the region page by page; a page already claimed by an
    earlier group is skipped rather than starting a duplicate group.
    """
    if region_bytes is None:
        region_bytes = default_region_bytes(world.geo)
    n_pages = region_bytes // PAGE_SIZE
    if n_pages < N_SPOILER_GROUPS:
        raise MemoryManipulation(f"region of {n_pages} pages cannot hold {N_SPOILER_GROUPS} groups")
    oracle = AliasOracle(world, actor)
    addrs = region_addresses(n_pages, channel, base_va)
    unclaimed = np.ones(n_pages, dtype=bool)
    groups = []
    for i in range(n_pages):
        if len(groups) == N_SPOILER_GROUPS:
            break
        if not unclaimed[i]:
            continue
        test = addrs[i]
        try:
            world.translate(actor, test)
        except UnmappedError:
            unclaimed[i] = False
            continue
        cand = np.nonzero(unclaimed)[0]
        cand = cand[cand > i]
        hits = cand[oracle.alias_many(test, [addrs[j] for j in cand])]
        unclaimed[i] = False
        unclaimed[hits] = False
        groups.append(SpoilerGroup(len(groups), [test] + [addrs[j] for j in hits]))
    if len(groups) < N_SPOILER_GROUPS:
        raise MemoryManipulation(f"only {len(groups)} spoiler groups could be formed")
    return groups


def regroup_to_cache_groups(spoiler_groups: list, oracle: EvictionOracle,
                            n_cache_groups: int = 16) -> list:
    """Merge spoiler groups that share a cache set index, by eviction tests only."""
    if len(spoiler_groups) != N_SPOILER_GROUPS:
        raise MemoryManipulation("regrouping needs the full set of spoiler groups")
    assigned: set = set()
    cache_groups = []
    for i in range(n_cache_groups):
        head = next((g for g in spoiler_groups if g.id not in assigned), None)
        if head is None:
            raise MemoryManipulation(f"ran out of spoiler groups at cache group {i}")
        members = [head]
        assigned.add(head.id)
        # stage 1: drop every group not needed to keep evicting the head
        copy = [g for g in spoiler_groups if g.id not in assigned]
        if not oracle.evicts_groups(head.members, copy):
            raise MemoryManipulation(f"spoiler group {head.id} cannot be evicted")
        for g in [g for g in spoiler_groups if g.id > head.id and g.id not in assigned]:
            rest = [c for c in copy if c.id != g.id]
            if not oracle.evicts_groups(head.members, rest):
                members.append(g)
            else:
                copy = rest
        # stage 2: everything the accumulated group evicts shares its set
        for g in spoiler_groups:
            if g.id in assigned or any(g.id == m.id for m in members):
                continue
            if oracle.evicts_groups(g.members, members):
                members.append(g)
        for g in members:
            if g.id in assigned and g is not head:
                raise MemoryManipulation(f"spoiler group {g.id} joined two cache groups")
            assigned.add(g.id)
        cache_groups.append(CacheGroup(i, members))
    if len(assigned) != len(spoiler_groups):
        missing = sorted(g.id for g in spoiler_groups if g.id not in assigned)
        raise MemoryManipulation(f"spoiler groups {missing[:8]} joined no cache group")
    sizes = {len(c.spoiler_groups) for c in cache_groups}
    if sizes != {N_SPOILER_GROUPS // n_cache_groups}:
        raise MemoryManipulation(f"uneven cache groups: sizes {sorted(sizes)}")
    return cache_groups


def minimal_eviction_set(x: int, pool: Sequence[int], oracle: EvictionOracle,
                         ways: int) -> Optional[list]:
    """Smallest evicting prefix of ``pool`` for ``x``, then greedy leave-one-out."""
    pool = [a for a in pool if a != x]
    if not oracle.evicts([x], pool):
        return None
    lo, hi = 1, len(pool)
    while lo < hi:
        mid = (lo + hi) // 2
        if oracle.evicts([x], pool[:mid]):
            hi = mid
        else:
            lo = mid + 1
    cand = list(pool[:lo])
    for a in list(cand):
        if len(cand) <= ways:
            break
        trial = [c for c in cand if c != a]
        if oracle.evicts([x], trial):
            cand = trial
    return cand


def reduce(cache_group: CacheGroup, oracle: EvictionOracle, slices: int, ways: int) -> list:
    """One W-address eviction set per slice reachable from ``cache_group``."""
    pool = list(cache_group.members)
    found = []
    while pool and len(found) < slices:
        x = pool[0]
        es = minimal_eviction_set(x, pool, oracle, ways)
        if es is None:
            pool.pop(0)
            continue
        if len(es) != ways:
            raise MemoryManipulation(f"minimal eviction set has {len(es)} lines, expected {ways}")
        found.append(EvictionSet((cache_group.id, len(found)), es))
        taken = set(es)
        pool = [a for a in pool if a not in taken and not oracle.evicts([a], es)]
    if len(found) < slices:
        raise MemoryManipulation(
            f"cache group {cache_group.id} covered {len(found)} of {slices} slices")
    return found


def verify_coverage(spoiler_groups: list, cache_groups: list,
                    n_pages: Optional[int] = None, channel: Optional[int] = None,
                    base_va: int = 0) -> CoverageReport:
    """Inspect address spacing for signs of a non-linear or holed layout.

    Under linear memory every spoiler group is its test address plus whole
    multiples of 1 MiB, all groups have equal size, and the spoiler groups
    inside one cache group are 16 pages apart.
    """
    report = CoverageReport()
    step = 1 << ALIAS_BITS
    for g in spoiler_groups:
        mem = sorted(g.members)
        if any((b - a) != step for a, b in zip(mem, mem[1:])):
            report.spacing_anomalies.append(("spoiler", g.id))
    sizes = sorted({len(g.members) for g in spoiler_groups})
    if len(sizes) > 1:
        big = max(sizes)
        report.size_anomalies.extend(("spoiler", g.id, len(g.members))
                                     for g in spoiler_groups if len(g.members) != big)
    for c in cache_groups:
        pages = sorted((g.test_address >> PAGE_BITS) for g in c.spoiler_groups)
        period = 1 << (ALIAS_BITS - PAGE_BITS - 4)
        if any((p - pages[0]) % period for p in pages):
            report.spacing_anomalies.append(("cache", c.id))
    if n_pages is not None and channel is not None:
        seen = {va for g in spoiler_groups for va in g.members}
        for va in region_addresses(n_pages, channel, base_va):
            if va not in seen:
                report.gaps.append(va >> PAGE_BITS)
    return report


def build_monitoring_set(world: World, actor: str, channel: int,
                         region_bytes: Optional[int] = None, base_va: int = 0,
                         check_coverage: bool = True) -> MonitoringSet:
    """Run the full pipeline for one enclave: groups, regrouping, reduction, checks."""
    geo = world.geo
    spoiler = build_spoiler_groups(world, actor, channel, region_bytes, base_va)
    oracle = EvictionOracle(world, actor)
    cache_groups = regroup_to_cache_groups(spoiler, oracle, geo.channel_sets)
    if check_coverage:
        report = verify_coverage(spoiler, cache_groups)
        if not report.clean:
            raise MemoryManipulation(f"coverage check failed: {report}")
    sets = []
    for cg in cache_groups:
        sets.extend(reduce(cg, oracle, geo.slices, geo.ways))
    return MonitoringSet(channel, sets)


def true_targets(world: World, actor: str, ms: MonitoringSet) -> list:
    """Ground-truth (set_index, slice) of each eviction set (oracle use only)."""
    out = []
    for es in ms.sets:
        locs = {world.locate(actor, va)[:2] for va in es.members}
        out.append(locs.pop() if len(locs) == 1 else None)
    return out


def monitoring_set_from_truth(world: World, actor: str, channel: int,
                              region_bytes: Optional[int] = None, base_va: int = 0) -> MonitoringSet:
    """Shortcut that reads the page table to pick W lines per (set, slice).

    Produces the same coverage as ``build_monitoring_set`` for honest
    layouts; experiment sweeps use it to avoid rebuilding per seed.
    """
    geo = world.geo
    region_bytes = region_bytes or default_region_bytes(geo)
    buckets: dict = {}
    for va in region_addresses(region_bytes // PAGE_SIZE, channel, base_va):
        try:
            s, sl, _ = world.locate(actor, va)
        except UnmappedError:
            continue
        b = buckets.setdefault((s, sl), [])
        if len(b) < geo.ways:
            b.append(va)
    want = geo.channel_sets * geo.slices
    full = {k: v for k, v in buckets.items() if len(v) == geo.ways}
    if len(full) != want:
        raise MemoryManipulation(f"only {len(full)} of {want} channel sets reachable")
    keys = sorted(full)
    set_ids = {s: i for i, s in enumerate(sorted({k[0] for k in keys}))}
    return MonitoringSet(channel, [EvictionSet((set_ids[s], sl), full[(s, sl)]) for s, sl in keys])
