"""The (possibly malicious) operating system.

Owns page allocation and translation, the speculative-load aliasing oracle,
the shared simulated world, and the declarative adversary scripts that
perturb it.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from .cache import PA_BITS, CacheGeometry, CacheState, access_decomposed, decompose
from .timing import ClockOracle, LatencyModel

PAGE_SIZE = 4096
PAGE_BITS = 12
PHYS_PAGES = 1 << (PA_BITS - PAGE_BITS)
ALIAS_BITS = 20
ALIAS_MASK = (1 << ALIAS_BITS) - 1
REGION_BYTES = 24 << 20
Z_BATCH = 4096  # latency draws fetched from the generator at a time


class UnmappedError(KeyError):
    pass


class ExhaustedError(RuntimeError):
    pass


class ScriptError(ValueError):
    pass


# --- policies --------------------------------------------------------------

@dataclass(frozen=True)
class Linear:
    base: int = 0


@dataclass(frozen=True)
class Permuted:
    """Shuffle the frames ``base .. base+n-1`` with a seeded generator."""

    seed: int = 0
    base: int = 0


@dataclass(frozen=True)
class Adversarial:
    """Start from ``Linear(base)`` and replay the mapping actions of ``script``."""

    script: "AdversaryScript"
    base: int = 0


Policy = Union[Linear, Permuted, Adversarial]


@dataclass
class PageMapping:
    entries: dict = field(default_factory=dict)
    policy: Optional[Policy] = None
    page_size: int = PAGE_SIZE

    @property
    def n_pages(self) -> int:
        return len(self.entries)

    def is_injective(self) -> bool:
        return len(set(self.entries.values())) == len(self.entries)

    def swap(self, vpn_a: int, vpn_b: int) -> None:
        for v in (vpn_a, vpn_b):
            if v not in self.entries:
                raise UnmappedError(v)
        e = self.entries
        e[vpn_a], e[vpn_b] = e[vpn_b], e[vpn_a]

    def remap(self, vpn: int, ppn: int) -> None:
        if vpn not in self.entries:
            raise UnmappedError(vpn)
        if not 0 <= ppn < PHYS_PAGES:
            raise ScriptError(f"frame {ppn} outside physical memory")
        holder = next((v for v, p in self.entries.items() if p == ppn and v != vpn), None)
        if holder is not None:
            # keep the mapping injective: the displaced page takes the old frame
            self.entries[holder] = self.entries[vpn]
        self.entries[vpn] = ppn

    def unmap(self, vpn: int) -> None:
        del self.entries[vpn]

    def copy(self) -> "PageMapping":
        return PageMapping(dict(self.entries), self.policy, self.page_size)


def allocate(policy: Policy, n_pages: int, phys_pages: int = PHYS_PAGES) -> PageMapping:
    if n_pages < 1:
        raise ValueError("n_pages must be at least 1")
    base = policy.base
    if base < 0 or base + n_pages > phys_pages:
        raise ExhaustedError(f"cannot place {n_pages} pages at frame {base}")
    frames = list(range(base, base + n_pages))
    if isinstance(policy, Permuted):
        frames = [base + int(i) for i in np.random.default_rng(policy.seed).permutation(n_pages)]
    mapping = PageMapping(dict(enumerate(frames)), policy)
    if isinstance(policy, Adversarial):
        for action in policy.script.actions:
            _apply_mapping_action(mapping, action)
    return mapping


def translate(mapping: PageMapping, va: int) -> int:
    vpn, offset = va >> PAGE_BITS, va & (PAGE_SIZE - 1)
    try:
        ppn = mapping.entries[vpn]
    except KeyError:
        raise UnmappedError(f"virtual page {vpn:#x} is not mapped") from None
    return (ppn << PAGE_BITS) | offset


def alias20(mapping: PageMapping, va1: int, va2: int) -> bool:
    """True when the two physical addresses agree on bits 0-19."""
    return (translate(mapping, va1) ^ translate(mapping, va2)) & ALIAS_MASK == 0


def region_pages(region_bytes: int = REGION_BYTES) -> int:
    return region_bytes // PAGE_SIZE


# --- adversary scripts ----------------------------------------------------

@dataclass(frozen=True)
class SwapPair:
    vpn_a: int
    vpn_b: int
    actor: str = "victim"


@dataclass(frozen=True)
class Remap:
    vpn: int
    ppn: int
    actor: str = "victim"


@dataclass(frozen=True)
class PolluteChannel:
    lines: int
    interval: float
    victim: str = "victim"
    start: float = 0.0


@dataclass(frozen=True)
class SlowClock:
    factor: float
    start: float
    duration: float


@dataclass(frozen=True)
class ClockStall:
    start: float
    duration: float


@dataclass(frozen=True)
class StepSchedule:
    order: tuple


ACTIONS = {cls.__name__: cls for cls in (SwapPair, Remap, PolluteChannel, SlowClock, ClockStall,
                                          StepSchedule)}


@dataclass(frozen=True)
class AdversaryScript:
    actions: tuple = ()

    def to_dict(self) -> dict:
        out = []
        for a in self.actions:
            d = asdict(a)
            if isinstance(a, StepSchedule):
                d["order"] = list(a.order)
            out.append({"type": type(a).__name__, **d})
        return {"actions": out}

    @classmethod
    def from_dict(cls, data: dict) -> "AdversaryScript":
        actions = []
        for raw in data.get("actions", []):
            raw = dict(raw)
            kind = raw.pop("type", None)
            if kind not in ACTIONS:
                raise ScriptError(f"unknown adversary action {kind!r}")
            if kind == "StepSchedule":
                raw["order"] = tuple(raw.get("order", ()))
            try:
                actions.append(ACTIONS[kind](**raw))
            except TypeError as exc:
                raise ScriptError(f"bad fields for {kind}: {exc}") from None
        return cls(tuple(actions))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def loads(cls, text: str) -> "AdversaryScript":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "AdversaryScript":
        with open(path) as fh:
            return cls.loads(fh.read())


def _apply_mapping_action(mapping: PageMapping, action) -> None:
    if isinstance(action, SwapPair):
        mapping.swap(action.vpn_a, action.vpn_b)
    elif isinstance(action, Remap):
        mapping.remap(action.vpn, action.ppn)


def swap_trick_script(base: int = 0, actor: str = "victim") -> AdversaryScript:
    """Swap the two pages straddling the first 4 MiB physical boundary.

    Under ``Linear(base)`` the consecutive pages whose frames end/start a
    22-bit aligned block are exchanged, so the clone that receives this
    mapping finds its DRAM boundary pair in mirrored order.
    """
    boundary_frame = ((base >> 10) + 1) << 10  # first frame with low 22 PA bits zero
    vpn_hi = boundary_frame - base
    return AdversaryScript((SwapPair(vpn_hi - 1, vpn_hi, actor),))


# --- the simulated machine -------------------------------------------------

@dataclass
class Pollution:
    lines: int
    interval: float
    victim: str
    next_fire: float
    addresses: list = field(default_factory=list)


class World:
    """Shared cache, per-actor page tables, the global clock and sim-time.

    Every access advances sim-time by the true latency (hit or miss) drawn
    from ``latency``; the counting-thread clock converts sim-time to ticks.
    """

    def __init__(self, geo: CacheGeometry, latency: Optional[LatencyModel] = None,
                 clock: Optional[ClockOracle] = None, seed: int = 0):
        self.geo = geo
        self.cache = CacheState(geo)
        self.latency = latency or LatencyModel()
        self.clock = clock or ClockOracle()
        self.rng = np.random.default_rng(seed)
        self.seed = seed
        self.time = 0.0
        self.mappings: dict = {}
        self.pollution: list = []
        self.schedule: tuple = ()
        self._decomp: dict = {}
        self.access_count = 0
        self._z = np.empty(0)
        self._z_pos = 0

    def add_actor(self, actor: str, mapping: PageMapping) -> None:
        self.mappings[actor] = mapping
        self._decomp.pop(actor, None)

    def translate(self, actor: str, va: int) -> int:
        return translate(self.mappings[actor], va)

    def locate(self, actor: str, va: int):
        """(set_index, slice, tag) of an actor's virtual address, memoised."""
        memo = self._decomp.setdefault(actor, {})
        d = memo.get(va)
        if d is None:
            pa = translate(self.mappings[actor], va)
            dd = decompose(pa, self.geo)
            d = memo[va] = (dd.set_index, dd.slice, dd.tag)
        return d

    def invalidate(self, actor: Optional[str] = None) -> None:
        if actor is None:
            self._decomp.clear()
        else:
            self._decomp.pop(actor, None)

    def access(self, actor: str, va: int, timed: bool = True):
        """Access one line; returns ``(hit, reading)`` where reading is in clock ticks."""
        if self.pollution:
            self._run_pollution()
        set_index, slice_, tag = self.locate(actor, va)
        res = access_decomposed(self.cache, set_index, slice_, tag, actor)
        self.access_count += 1
        if not timed:
            return res.hit, None
        if self._z_pos >= len(self._z):
            self._z = self.rng.standard_normal(Z_BATCH)
            self._z_pos = 0
        z = self._z[self._z_pos]
        self._z_pos += 1
        t0 = self.time
        self.time += self.latency.from_standard(z, not res.hit)
        clock = self.clock
        if not clock.perturbations:
            return res.hit, int(clock.rate * self.time + 1e-9) - int(clock.rate * t0 + 1e-9)
        return res.hit, clock.read(self.time) - clock.read(t0)

    def access_physical(self, actor: str, pa: int) -> bool:
        d = decompose(pa, self.geo)
        return access_decomposed(self.cache, d.set_index, d.slice, d.tag, actor).hit

    def flush(self, actor: str, va: int) -> None:
        self.cache.flush(self.translate(actor, va))

    def advance(self, dt: float) -> None:
        self.time += dt

    def _run_pollution(self) -> None:
        for p in self.pollution:
            # interval <= 0 fires before every access, even untimed ones
            if p.addresses and (p.interval <= 0 or self.time >= p.next_fire):
                for pa in p.addresses:
                    self.access_physical("os", pa)
                p.next_fire = self.time + p.interval

    def fingerprint(self) -> tuple:
        return self.cache.fingerprint()

    def copy(self) -> "World":
        w = World.__new__(World)
        w.__dict__.update(self.__dict__)
        w.cache = self.cache.copy()
        w.mappings = {a: m.copy() for a, m in self.mappings.items()}
        w.clock = ClockOracle(self.clock.rate, list(self.clock.perturbations))
        w.rng = copy.deepcopy(self.rng)
        w._z = self._z.copy()
        w.pollution = [Pollution(p.lines, p.interval, p.victim, p.next_fire, list(p.addresses))
                       for p in self.pollution]
        w._decomp = {}
        return w


def pollution_addresses(world: World, victim: str, lines: int,
                        channel_targets: list) -> list:
    """Pick ``lines`` OS-owned physical addresses spread round-robin over ``channel_targets``.

    ``channel_targets`` lists the victim's monitored ``(set_index, slice)``
    pairs.  The OS knows the true mapping, so it searches frames outside
    every actor's pages for lines that land on each target.
    """
    if lines <= 0 or not channel_targets:
        return []
    geo = world.geo
    used = {p for m in world.mappings.values() for p in m.entries.values()}
    per_target = {t: [] for t in channel_targets}
    order = list(channel_targets)
    need = {t: 0 for t in order}
    for i in range(lines):
        need[order[i % len(order)]] += 1
    want_sets = {}
    for (s, sl) in order:
        want_sets.setdefault(s, []).append(sl)
    # walk frames from the top of physical memory downwards
    frame = PHYS_PAGES - 1
    while any(len(per_target[t]) < need[t] for t in order):
        if frame < 0:
            raise ExhaustedError("no frames left for pollution lines")
        if frame not in used:
            for s, slices in want_sets.items():
                offset = (s << 6) & (PAGE_SIZE - 1)
                pa = (frame << PAGE_BITS) | offset
                d = decompose(pa, geo)
                if d.set_index == s and (s, d.slice) in per_target \
                        and len(per_target[(s, d.slice)]) < need[(s, d.slice)]:
                    per_target[(s, d.slice)].append(pa)
        frame -= 1
    out = []
    for i in range(max(need.values())):
        for t in order:
            if i < len(per_target[t]) and i < need[t]:
                out.append(per_target[t][i])
    return out


def apply_adversary(world: World, script: AdversaryScript,
                    channel_targets: Optional[dict] = None) -> World:
    """Return a copy of ``world`` with ``script`` applied.

    ``channel_targets`` maps a victim actor to its monitored
    ``(set_index, slice)`` list; it is required for ``PolluteChannel``.
    """
    w = world.copy()
    for action in script.actions:
        if isinstance(action, (SwapPair, Remap)):
            if action.actor not in w.mappings:
                raise ScriptError(f"unknown actor {action.actor!r}")
            _apply_mapping_action(w.mappings[action.actor], action)
            w.invalidate(action.actor)
        elif isinstance(action, PolluteChannel):
            if action.lines <= 0:
                continue
            if action.victim not in w.mappings:
                raise ScriptError(f"unknown actor {action.victim!r}")
            targets = (channel_targets or {}).get(action.victim)
            if not targets:
                raise ScriptError("PolluteChannel needs the victim's channel targets")
            addrs = pollution_addresses(w, action.victim, action.lines, targets)
            w.pollution.append(Pollution(action.lines, action.interval, action.victim,
                                         action.start, addrs))
        elif isinstance(action, SlowClock):
            w.clock.slow(action.factor, action.start, action.duration)
        elif isinstance(action, ClockStall):
            w.clock.stall(action.start, action.duration)
        elif isinstance(action, StepSchedule):
            unknown = [a for a in action.order if a not in w.mappings]
            if unknown:
                raise ScriptError(f"schedule names unknown actors {unknown}")
            w.schedule = tuple(action.order)
        else:
            raise ScriptError(f"unsupported action {action!r}")
    return w
