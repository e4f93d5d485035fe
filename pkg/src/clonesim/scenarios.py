"""Forking attacks against toy enclaves, with and without clone detection.

Every enclave instance is an actor in one simulated world.  With detection
on, an instance calibrates and primes its channel at launch and runs one
probe pass before every externally visible operation; any CloneDetected or
Anomaly verdict halts it, so the operation is refused.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .cache import CacheGeometry
from .detector import CloneBuster, DetectorConfig, Verdict, NO_CLONE
from .eviction import (MonitoringSet, build_monitoring_set, default_region_bytes,
                       monitoring_set_from_truth, select_channel)
from .osmodel import Linear, PAGE_SIZE, Permuted, World, allocate

PLATFORM = "platform-0"


class Refused(Exception):
    """The enclave halted after a detection verdict."""


# --- trusted services ---------------------------------------------------------------

class MonotonicCounter:
    def __init__(self, value: int = 0):
        self._value = value
        self.log: list = []

    def increment(self, who: str = "") -> int:
        self._value += 1
        self.log.append(("inc", who, self._value))
        return self._value

    def read(self, who: str = "") -> int:
        self.log.append(("read", who, self._value))
        return self._value


@dataclass(frozen=True)
class SealedBlob:
    payload: object
    mc_value: int
    sealer: str


class SealedStore:
    """Blobs scoped by (binary identity, platform); any instance of the binary may unseal."""

    def __init__(self):
        self._blobs: dict = {}

    def seal(self, identity: str, platform: str, payload, mc_value: int, sealer: str) -> SealedBlob:
        blob = SealedBlob(payload, mc_value, sealer)
        self._blobs.setdefault((identity, platform), []).append(blob)
        return blob

    def blobs(self, identity: str, platform: str) -> list:
        return list(self._blobs.get((identity, platform), []))


# --- programs (state machines) ------------------------------------------------------

class BiSgxLike:
    """Data-owner path split into its three counter-related steps."""

    def __init__(self, mc: MonotonicCounter, store: SealedStore):
        self.mc, self.store = mc, store

    def initial(self) -> dict:
        return {"mc": None, "payload": None}

    def handle(self, enc: "ToyEnclave", state: dict, op: str, arg=None):
        if op == "load":
            return {**state, "payload": arg}, None
        if op == "inc":
            self.mc.increment(enc.name)
            return state, None
        if op == "read":
            return {**state, "mc": self.mc.read(enc.name)}, None
        if op == "seal":
            blob = self.store.seal(enc.identity, enc.platform, state["payload"], state["mc"], enc.name)
            return state, blob
        if op == "interpret":
            # accept a blob only when its sealed counter equals the requested index
            index, blob = arg
            return state, (blob.payload if blob.mc_value == index else None)
        raise ValueError(f"unknown op {op!r}")


class KvStore:
    """Key-value store; ``persistent`` snapshots are sealed with inc-then-store counters."""

    def __init__(self, mc: Optional[MonotonicCounter] = None, store: Optional[SealedStore] = None):
        self.mc, self.store = mc, store

    def initial(self) -> dict:
        return {"kv": {}}

    def handle(self, enc: "ToyEnclave", state: dict, op: str, arg=None):
        if op == "put":
            k, v = arg
            kv = {**state["kv"], k: v}
            if self.store is not None:
                ctr = self.mc.read(enc.name) + 1
                self.store.seal(enc.identity, enc.platform, dict(kv), ctr, enc.name)
                self.mc.increment(enc.name)
            return {**state, "kv": kv}, "ACK"
        if op == "get":
            return state, state["kv"].get(arg)
        if op == "restore":
            blob = arg
            if blob is None or blob.mc_value != self.mc.read(enc.name):
                return state, False
            return {**state, "kv": dict(blob.payload)}, True
        raise ValueError(f"unknown op {op!r}")


class Proxy:
    """Forwards decrypted requests without the client identity."""

    def initial(self) -> dict:
        return {"queue": []}

    def handle(self, enc: "ToyEnclave", state: dict, op: str, arg=None):
        if op == "submit":
            return {**state, "queue": state["queue"] + [arg]}, "ACK"
        if op == "flush":
            order = list(state["queue"])
            arg.shuffle(order)  # arg: seeded generator used for request mixing
            return {**state, "queue": []}, order
        raise ValueError(f"unknown op {op!r}")


class ToyEnclave:
    """One enclave instance: identity, program state, optional detector."""

    def __init__(self, name: str, identity: str, program, platform: str = PLATFORM,
                 detector: Optional[CloneBuster] = None):
        self.name = name
        self.identity = identity
        self.platform = platform
        self.program = program
        self.state = program.initial()
        self.detector = detector
        self.halted = False
        self.verdict: Verdict = NO_CLONE
        self.trace: list = []

    def launch(self) -> None:
        if self.detector is not None:
            bad = self.detector.start()
            if bad is not None:
                self._halt(bad)

    def _halt(self, verdict: Verdict) -> None:
        self.halted = True
        self.verdict = verdict
        self.trace.append(("halt", str(verdict)))

    def guard(self) -> bool:
        if self.halted:
            return False
        if self.detector is not None:
            n = len(self.detector.verdicts)
            self.detector.probe()
            bad = [v for v in self.detector.verdicts[n:] if v.kind != "NoClone"]
            if bad:
                self._halt(bad[0])
                return False
        return True

    def call(self, op: str, arg=None, guarded: bool = True):
        if guarded and not self.guard():
            self.trace.append((op, "refused"))
            raise Refused(f"{self.name} refused {op}: {self.verdict}")
        self.state, out = self.program.handle(self, self.state, op, arg)
        self.trace.append((op, out))
        return out

    def teardown(self) -> None:
        if self.detector is not None:
            self.detector.flush()


# --- world setup ---------------------------------------------------------------------

@dataclass
class Platform:
    world: World
    monitoring: dict  # actor -> MonitoringSet
    channel: int


def make_platform(actors: Sequence[str], geo: Optional[CacheGeometry] = None, seed: int = 0,
                  identity: str = "toy-enclave", policy: str = "permuted",
                  builder: str = "truth", world_kwargs: Optional[dict] = None) -> Platform:
    """A world with one page table and channel monitoring set per actor.

    ``builder="eviction"`` runs the full eviction-set construction for each
    actor; ``"truth"`` reads the page table (same coverage, much faster).
    """
    geo = geo or CacheGeometry(slices=1)
    world = World(geo, seed=seed, **(world_kwargs or {}))
    n = default_region_bytes(geo) // PAGE_SIZE
    channel = select_channel(identity)
    monitoring = {}
    for k, actor in enumerate(actors):
        base = 64 + k * (n + 1)
        pol = Permuted(seed=seed * 1000 + k, base=base) if policy == "permuted" else Linear(base)
        world.add_actor(actor, allocate(pol, n))
        if builder == "eviction":
            monitoring[actor] = build_monitoring_set(world, actor, channel,
                                                     check_coverage=(policy == "linear"))
        else:
            monitoring[actor] = monitoring_set_from_truth(world, actor, channel)
    return Platform(world, monitoring, channel)


def _detector(platform: Platform, actor: str, m: int, oracle_mode: bool = False) -> CloneBuster:
    ms: MonitoringSet = platform.monitoring[actor]
    cfg = DetectorConfig(m=m, w=len(ms.sets) * m, t=1, N=1, W=platform.world.geo.ways)
    return CloneBuster(platform.world, actor, ms, cfg, oracle_mode=oracle_mode)


def _enclaves(platform: Platform, names: Sequence[str], program, with_detector: bool,
              m: int, identity: str) -> list:
    out = []
    for name in names:
        det = _detector(platform, name, m) if with_detector else None
        out.append(ToyEnclave(name, identity, program, detector=det))
    return out


@dataclass
class AttackOutcome:
    scenario: str
    with_detector: bool
    forked: bool
    verdicts: dict
    details: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)

    @property
    def detected(self) -> bool:
        return any(v == "CloneDetected" for v in self.verdicts.values())

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "with_detector": self.with_detector,
                "forked": self.forked, "detected": self.detected,
                "verdicts": self.verdicts, "details": self.details}


# --- BI-SGX ---------------------------------------------------------------------------

FORK_ORDER = ("E.inc", "E'.inc", "E.read", "E'.read")


def all_mc_orderings() -> list:
    """The 24 orderings of the four counter operations."""
    return list(itertools.permutations(FORK_ORDER))


def run_bisgx_attack(with_detector: bool, order: Sequence[str] = FORK_ORDER,
                     clones: int = 2, seed: int = 0, geo: Optional[CacheGeometry] = None,
                     m: int = 12, platform: Optional[Platform] = None) -> AttackOutcome:
    """Two (or one) data-owner enclaves racing on one monotonic counter.

    ``order`` lists counter operations by enclave; each entry runs that
    enclave's next step in program order (inc, then read).  Sealing follows
    in enclave order.  ``platform`` may be shared across calls; it is copied.
    """
    names = ["E", "E'"][:clones]
    identity = "bisgx"
    if platform is None:
        platform = make_platform(names, geo, seed, identity)
    platform = Platform(platform.world.copy(), platform.monitoring, platform.channel)
    mc, store = MonotonicCounter(), SealedStore()
    program = BiSgxLike(mc, store)
    encs = {e.name: e for e in _enclaves(platform, names, program, with_detector, m, identity)}
    for e in encs.values():
        e.launch()
    for name, payload in zip(names, ["d", "d'"]):
        encs[name].call("load", payload, guarded=False)
    pending = {n: ["inc", "read"] for n in names}
    trace = []
    for label in order:
        who = label.split(".")[0]
        if who not in encs or not pending[who]:
            continue
        op = pending[who].pop(0)
        try:
            encs[who].call(op)
            trace.append(f"{who}.{op}")
        except Refused:
            trace.append(f"{who}.{op}:refused")
    for name in names:
        for op in pending[name]:  # a single instance still completes its own steps
            try:
                encs[name].call(op)
                trace.append(f"{name}.{op}")
            except Refused:
                trace.append(f"{name}.{op}:refused")
        if encs[name].halted:
            continue
        try:
            encs[name].call("seal")
            trace.append(f"{name}.seal")
        except Refused:
            trace.append(f"{name}.seal:refused")
    blobs = store.blobs(identity, PLATFORM)
    mcs = [b.mc_value for b in blobs]
    forked = len(mcs) != len(set(mcs))
    return AttackOutcome("bisgx", with_detector, forked,
                         {n: encs[n].verdict.kind for n in names},
                         {"blobs": [(b.sealer, b.payload, b.mc_value) for b in blobs],
                          "order": list(order)}, trace)


# --- state-continuity attacks on other services ----------------------------------------

def _try(enc: ToyEnclave, op: str, arg=None):
    try:
        return enc.call(op, arg)
    except Refused:
        return Refused


def run_fim_scenario(with_detector: bool, clones: int = 2, seed: int = 0,
                     geo: Optional[CacheGeometry] = None, m: int = 12) -> AttackOutcome:
    """Two clients on (possibly) two in-memory KVS instances."""
    names = ["EA", "EB"][:clones]
    identity = "kvs"
    platform = make_platform(names, geo, seed, identity)
    encs = _enclaves(platform, names, KvStore(), with_detector, m, identity)
    for e in encs:
        e.launch()
    ea, eb = encs[0], encs[-1]
    _try(ea, "put", ("k", "v_A"))
    _try(eb, "put", ("k", "v_B"))
    got = _try(ea, "get", "k")
    latest = "v_B"
    forked = got is not Refused and got != latest
    return AttackOutcome("fim", with_detector, forked, {e.name: e.verdict.kind for e in encs},
                         {"get_by_A": None if got is Refused else got, "latest": latest})


def run_forkvs_scenario(with_detector: bool, clones: int = 2, seed: int = 0,
                        geo: Optional[CacheGeometry] = None, m: int = 12) -> AttackOutcome:
    """Persistent KVS: a second instance restored from the same snapshot serves stale data.

    With one instance the client-visible "crash" is a real restart that
    restores from the newest snapshot.
    """
    identity = "pkvs"
    mc, store = MonotonicCounter(), SealedStore()
    store.seal(identity, PLATFORM, {"k": "v0"}, 0, "init")
    program = KvStore(mc, store)
    names = ["EC", "EC'"] if clones >= 2 else ["EC", "EC-restart"]
    platform = make_platform(names, geo, seed, identity)
    first = _enclaves(platform, names[:1], program, with_detector, m, identity)[0]
    first.launch()
    first.call("restore", store.blobs(identity, PLATFORM)[-1], guarded=False)
    second = None
    if clones >= 2:
        second = _enclaves(platform, names[1:], program, with_detector, m, identity)[0]
        second.launch()
        second.call("restore", store.blobs(identity, PLATFORM)[-1], guarded=False)
    _try(first, "put", ("k", "v1"))
    seen_first = _try(first, "get", "k")
    if second is None:
        first.teardown()
        second = _enclaves(platform, names[1:], program, with_detector, m, identity)[0]
        second.launch()
        second.call("restore", store.blobs(identity, PLATFORM)[-1], guarded=False)
    seen_after = _try(second, "get", "k")
    latest = "v1" if seen_first == "v1" else "v0"
    forked = seen_after is not Refused and seen_first is not Refused and seen_after != latest
    encs = [first, second]
    return AttackOutcome("forkvs", with_detector, forked, {e.name: e.verdict.kind for e in encs},
                         {"first_session": None if seen_first is Refused else seen_first,
                          "second_session": None if seen_after is Refused else seen_after})


def run_bug_scenario(with_detector: bool, clones: int = 2, seed: int = 0,
                     geo: Optional[CacheGeometry] = None, m: int = 12) -> AttackOutcome:
    """Proxy unlinkability: with one proxy per client the forwarder reveals the client."""
    names = ["EA", "EB"][:clones]
    identity = "proxy"
    platform = make_platform(names, geo, seed, identity)
    encs = _enclaves(platform, names, Proxy(), with_detector, m, identity)
    for e in encs:
        e.launch()
    truth = {"A": "req_A", "B": "req_B"}
    connect = {"A": encs[0], "B": encs[-1]}
    for client, req in truth.items():
        _try(connect[client], "submit", req)
    rng = np.random.default_rng(seed)
    forwarded = []  # (enclave, request) as seen on the wire
    for e in encs:
        out = _try(e, "flush", rng)
        if out is not Refused:
            forwarded.extend((e.name, r) for r in out)
    # adversary: a request forwarded by an enclave belongs to one of that enclave's clients
    clients_of = {e.name: [c for c, enc in connect.items() if enc is e] for e in encs}
    recovered, anonymity = {}, {}
    for enc_name, req in forwarded:
        cands = clients_of[enc_name]
        anonymity[req] = len(cands)
        if len(cands) == 1:
            recovered[cands[0]] = req
    forked = bool(forwarded) and recovered == truth
    return AttackOutcome("bug", with_detector, forked, {e.name: e.verdict.kind for e in encs},
                         {"recovered": recovered, "anonymity": anonymity,
                          "forwarded": len(forwarded)})


SCENARIOS = {
    "bisgx": run_bisgx_attack,
    "fim": run_fim_scenario,
    "forkvs": run_forkvs_scenario,
    "bug": run_bug_scenario,
}
