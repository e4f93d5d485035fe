"""Addressed last-level cache and DRAM mapping.

The cache is a single inclusive level split into slices.  Each slice holds
``sets_per_slice`` sets of ``ways`` lines.  A physical address is split into
line offset (bits 0-5), set index (the next log2(sets_per_slice) bits), a
slice number computed by an XOR hash over address bits, and the remaining
high bits as tag.

Two replacement policies are available: ``quad_age`` (ages 0..3, age-3 lines
are victims, lowest way first) and plain ``lru`` for sensitivity runs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import NamedTuple, Optional, Sequence

PA_BITS = 34
PA_MASK = (1 << PA_BITS) - 1
LINE_SIZE = 64
LINE_BITS = 6
MAX_AGE = 3

REPLACEMENT_POLICIES = ("quad_age", "lru")


class ConfigError(ValueError):
    pass


@lru_cache(maxsize=None)
def default_slice_hash(slices: int) -> tuple[int, ...]:
    """Return the shipped XOR matrix (one mask per output bit) for ``slices``."""
    out_bits = max(0, math.ceil(math.log2(slices))) if slices > 1 else 0
    table = json.loads(resources.files("clonesim.data").joinpath("slice_hash.json").read_text())
    key = str(1 << out_bits)
    if key not in table:
        raise ConfigError(f"no shipped slice hash for {slices} slices")
    return tuple(bits_to_mask(col) for col in table[key])


def bits_to_mask(bits: Sequence[int]) -> int:
    mask = 0
    for b in bits:
        if not 0 <= b < PA_BITS:
            raise ConfigError(f"slice hash bit {b} outside the {PA_BITS}-bit address")
        mask |= 1 << b
    return mask


def parity(x: int) -> int:
    return bin(x).count("1") & 1


@dataclass(frozen=True)
class CacheGeometry:
    slices: int = 1
    sets_per_slice: int = 1024
    ways: int = 16
    line_size: int = LINE_SIZE
    slice_hash: Optional[tuple[int, ...]] = None
    replacement: str = "quad_age"
    insertion_age: int = 1
    hit_age: int = 0

    def __post_init__(self):
        if self.line_size != LINE_SIZE:
            raise ConfigError("line_size is fixed at 64 bytes")
        if self.sets_per_slice < 1 or self.sets_per_slice & (self.sets_per_slice - 1):
            raise ConfigError("sets_per_slice must be a power of two")
        if self.slices < 1 or self.ways < 1:
            raise ConfigError("slices and ways must be positive")
        if self.replacement not in REPLACEMENT_POLICIES:
            raise ConfigError(f"unknown replacement policy {self.replacement!r}")
        if not (0 <= self.insertion_age <= MAX_AGE and 0 <= self.hit_age <= MAX_AGE):
            raise ConfigError("ages must lie in [0, 3]")
        if self.slice_hash is None:
            object.__setattr__(self, "slice_hash", default_slice_hash(self.slices))
        else:
            object.__setattr__(self, "slice_hash", tuple(self.slice_hash))
        need = math.ceil(math.log2(self.slices)) if self.slices > 1 else 0
        if len(self.slice_hash) < need:
            raise ConfigError(f"{self.slices} slices need {need} hash output bits")

    @property
    def set_bits(self) -> int:
        return self.sets_per_slice.bit_length() - 1

    @property
    def tag_shift(self) -> int:
        return LINE_BITS + self.set_bits

    @property
    def size_bytes(self) -> int:
        return self.slices * self.sets_per_slice * self.ways * self.line_size

    @property
    def channel_sets(self) -> int:
        """Set indices reachable once page-offset set bits are fixed (16 for 1024 sets)."""
        return max(1, self.sets_per_slice >> (12 - LINE_BITS))

    def slice_of(self, pa: int) -> int:
        value = 0
        for i, mask in enumerate(self.slice_hash):
            value |= parity(pa & mask) << i
        return value % self.slices

    def monitored_lines(self) -> int:
        """Lines in one channel across all slices (16 * slices * W for 1024 sets)."""
        return self.channel_sets * self.slices * self.ways


class Decomposed(NamedTuple):
    line_offset: int
    set_index: int
    slice: int
    tag: int


def decompose(pa: int, geo: CacheGeometry) -> Decomposed:
    pa &= PA_MASK
    return Decomposed(
        pa & (LINE_SIZE - 1),
        (pa >> LINE_BITS) & (geo.sets_per_slice - 1),
        geo.slice_of(pa),
        pa >> geo.tag_shift,
    )


@dataclass
class CacheLineState:
    tag: int = 0
    valid: bool = False
    age: int = MAX_AGE
    owner: object = None


class AccessResult(NamedTuple):
    hit: bool
    evicted: Optional[int] = None
    evicted_owner: object = None


class CacheSet:
    """One (set, slice) of W ways.  ``order`` tracks recency for LRU (oldest first)."""

    __slots__ = ("tags", "ages", "owners", "order")

    def __init__(self, ways: int):
        self.tags: list[Optional[int]] = [None] * ways
        self.ages = [MAX_AGE] * ways
        self.owners: list[object] = [None] * ways
        self.order: list[int] = []

    def find(self, tag: int) -> int:
        try:
            return self.tags.index(tag)
        except ValueError:
            return -1

    def snapshot(self) -> tuple:
        return (tuple(self.tags), tuple(self.ages), tuple(self.owners), tuple(self.order))

    def copy(self) -> "CacheSet":
        c = CacheSet.__new__(CacheSet)
        c.tags = list(self.tags)
        c.ages = list(self.ages)
        c.owners = list(self.owners)
        c.order = list(self.order)
        return c


@dataclass
class CacheState:
    """Lazily materialised slices x sets x W array of lines."""

    geo: CacheGeometry
    sets: dict = field(default_factory=dict)

    def get_set(self, set_index: int, slice_: int) -> CacheSet:
        key = (slice_, set_index)
        s = self.sets.get(key)
        if s is None:
            s = self.sets[key] = CacheSet(self.geo.ways)
        return s

    def lines(self, set_index: int, slice_: int) -> list[CacheLineState]:
        s = self.sets.get((slice_, set_index))
        if s is None:
            return [CacheLineState() for _ in range(self.geo.ways)]
        return [
            CacheLineState(t if t is not None else 0, t is not None, a, o)
            for t, a, o in zip(s.tags, s.ages, s.owners)
        ]

    def resident(self, pa: int) -> bool:
        d = decompose(pa, self.geo)
        s = self.sets.get((d.slice, d.set_index))
        return s is not None and s.find(d.tag) >= 0

    def owner_counts(self, set_index: int, slice_: int) -> dict:
        counts: dict = {}
        s = self.sets.get((slice_, set_index))
        if s is None:
            return counts
        for t, o in zip(s.tags, s.owners):
            if t is not None:
                counts[o] = counts.get(o, 0) + 1
        return counts

    def fingerprint(self) -> tuple:
        return tuple(sorted((k, s.snapshot()) for k, s in self.sets.items()))

    def copy(self) -> "CacheState":
        return CacheState(self.geo, {k: s.copy() for k, s in self.sets.items()})

    def flush(self, pa: int) -> bool:
        d = decompose(pa, self.geo)
        s = self.sets.get((d.slice, d.set_index))
        if s is None:
            return False
        way = s.find(d.tag)
        if way < 0:
            return False
        s.tags[way] = None
        s.owners[way] = None
        s.ages[way] = MAX_AGE
        if way in s.order:
            s.order.remove(way)
        return True


def access(state: CacheState, pa: int, actor: object = None) -> AccessResult:
    d = decompose(pa, state.geo)
    return access_decomposed(state, d.set_index, d.slice, d.tag, actor)


def access_decomposed(state: CacheState, set_index: int, slice_: int, tag: int,
                      actor: object = None) -> AccessResult:
    geo = state.geo
    s = state.get_set(set_index, slice_)
    tags = s.tags
    way = s.find(tag)
    if geo.replacement == "lru":
        if way >= 0:
            s.order.remove(way)
            s.order.append(way)
            s.owners[way] = actor
            return AccessResult(True)
        evicted = evicted_owner = None
        try:
            way = tags.index(None)
        except ValueError:
            way = s.order.pop(0)
            evicted, evicted_owner = tags[way], s.owners[way]
        tags[way] = tag
        s.owners[way] = actor
        s.ages[way] = 0
        s.order.append(way)
        return AccessResult(False, evicted, evicted_owner)

    ages = s.ages
    if way >= 0:
        ages[way] = geo.hit_age
        s.owners[way] = actor
        return AccessResult(True)
    evicted = evicted_owner = None
    try:
        way = tags.index(None)
    except ValueError:
        oldest = max(ages)
        if oldest < MAX_AGE:
            bump = MAX_AGE - oldest
            for i in range(len(ages)):
                ages[i] += bump
        way = ages.index(MAX_AGE)
        evicted, evicted_owner = tags[way], s.owners[way]
    tags[way] = tag
    ages[way] = geo.insertion_age
    s.owners[way] = actor
    return AccessResult(False, evicted, evicted_owner)


def load_geometry(path_or_dict) -> CacheGeometry:
    """Build a geometry from a JSON file path or an already-parsed mapping.

    Keys: slices, sets_per_slice, ways, replacement, slice_hash_matrix
    (list of bit-position lists, one per hash output bit), insertion_age,
    hit_age.  Unknown keys are rejected.
    """
    if isinstance(path_or_dict, dict):
        cfg = dict(path_or_dict)
    else:
        with open(path_or_dict) as fh:
            cfg = json.load(fh)
    allowed = {"slices", "sets_per_slice", "ways", "replacement", "slice_hash_matrix",
               "insertion_age", "hit_age", "line_size"}
    unknown = set(cfg) - allowed
    if unknown:
        raise ConfigError(f"unknown geometry keys: {sorted(unknown)}")
    matrix = cfg.pop("slice_hash_matrix", None)
    if matrix is not None:
        cfg["slice_hash"] = tuple(bits_to_mask(col) for col in matrix)
    return CacheGeometry(**cfg)


def geometry_to_dict(geo: CacheGeometry) -> dict:
    return {
        "slices": geo.slices,
        "sets_per_slice": geo.sets_per_slice,
        "ways": geo.ways,
        "replacement": geo.replacement,
        "insertion_age": geo.insertion_age,
        "hit_age": geo.hit_age,
        "slice_hash_matrix": [[b for b in range(PA_BITS) if m >> b & 1] for m in geo.slice_hash],
    }


# --- DRAM -----------------------------------------------------------------

ROW_SHIFT = 18


class DramCoordinates(NamedTuple):
    channel: int
    bg0: int
    bg1: int
    ba0: int
    ba1: int
    rank: int
    row: int

    @property
    def bank(self) -> tuple:
        return self[:6]


def _bit(x: int, i: int) -> int:
    return (x >> i) & 1


def dram_map(pa: int) -> DramCoordinates:
    b = lambda i: _bit(pa, i)  # noqa: E731
    return DramCoordinates(
        channel=b(18) ^ b(15) ^ b(13) ^ b(12) ^ b(9) ^ b(8),
        bg0=b(19) ^ b(15),
        bg1=b(20) ^ b(16),
        ba0=b(21) ^ b(17),
        ba1=b(22) ^ b(18),
        rank=b(22) ^ b(18),
        row=pa >> ROW_SHIFT,
    )


def row_conflict(pa1: int, pa2: int) -> bool:
    a, b = dram_map(pa1), dram_map(pa2)
    return a.bank == b.bank and a.row != b.row
