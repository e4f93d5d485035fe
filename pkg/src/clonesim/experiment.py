"""Background noise, trace generation and parameter sweeps.

A trace is the victim's stream of per-access miss decisions while its
channel is shared with ``N - 1`` benign co-instances (negative class) or
with one extra clone as well (positive class).  Windows of ``w``
consecutive observations are cut from the trace and classified; seeds are
replicated instead of cross-validating, since windows are generated.
"""

from __future__ import annotations

import csv
import json
import platform as _platform
import sys
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .cache import CacheGeometry, PA_BITS, load_geometry, geometry_to_dict
from .detector import (CloneBuster, DetectorConfig, VERDICT_COLUMNS, fit_threshold,
                       ways_for_instances)
from .eviction import true_targets
from .osmodel import AdversaryScript, PolluteChannel, apply_adversary
from .scenarios import make_platform
from .timing import LatencyModel

PROFILES = ("idle", "streaming", "random", "bursty")


# --- noise -----------------------------------------------------------------------

@dataclass
class NoiseActor:
    """Seeded background process touching cache lines between victim passes.

    ``rate`` is accesses per victim observation.  ``sets`` picks target set
    indices: "channel" (the victim's 16 sets), "other" (sets outside it) or
    an explicit list.  Each set gets a pool of ``footprint`` lines.
    """

    profile: str = "idle"
    rate: float = 0.0
    duty: float = 1.0
    period: int = 8
    sets: object = "channel"
    footprint: int = 8
    seed: int = 0
    accesses: int = 0
    rng: np.random.Generator = field(init=False, repr=False)
    lines: list = field(init=False, repr=False, default_factory=list)
    _cursor: int = field(init=False, repr=False, default=0)
    _tick: int = field(init=False, repr=False, default=0)

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown noise profile {self.profile!r}")
        if self.rate < 0 or not 0 <= self.duty <= 1:
            raise ValueError("rate must be >= 0 and duty in [0, 1]")
        self.rng = np.random.default_rng(self.seed)

    def bind(self, geo: CacheGeometry, channel: int) -> "NoiseActor":
        if isinstance(self.sets, str):
            step = 1 << 6
            chan = [channel + j * step for j in range(geo.sets_per_slice // step)] \
                if geo.sets_per_slice >= step else list(range(geo.sets_per_slice))
            if self.sets == "channel":
                targets = chan
            elif self.sets == "other":
                chan_set = set(chan)
                targets = [s for s in range(geo.sets_per_slice) if s not in chan_set][:64]
            else:
                raise ValueError(f"unknown set selection {self.sets!r}")
        else:
            targets = list(self.sets)
        top = (1 << (PA_BITS - geo.tag_shift)) - 1
        self.lines = [((top - k) << geo.tag_shift) | (s << 6)
                      for k in range(self.footprint) for s in targets]
        return self

    def run(self, world, observations: int) -> int:
        """Issue the accesses due for ``observations`` victim observations."""
        self._tick += 1
        if self.profile == "idle" or self.rate == 0 or not self.lines:
            return 0
        if self.profile == "bursty":
            on = (self._tick % self.period) < round(self.duty * self.period)
            if not on:
                return 0
        n = int(self.rng.poisson(self.rate * observations))
        if self.profile == "streaming":
            for _ in range(n):
                world.access_physical("noise", self.lines[self._cursor % len(self.lines)])
                self._cursor += 1
        else:
            picks = self.rng.integers(0, len(self.lines), size=n)
            for i in picks:
                world.access_physical("noise", self.lines[int(i)])
        self.accesses += n
        return n


def noise_workload(profile, seed: int = 0) -> NoiseActor:
    """Build a noise actor from a profile name or a dict of NoiseActor fields."""
    if isinstance(profile, str):
        return NoiseActor(profile=profile, seed=seed)
    cfg = dict(profile)
    cfg.setdefault("seed", seed)
    return NoiseActor(**cfg)


def workload_name(profile) -> str:
    if isinstance(profile, str):
        return profile
    parts = [profile.get("profile", "idle")]
    for k in ("rate", "duty", "sets"):
        if k in profile:
            parts.append(f"{k}={profile[k]}")
    return ":".join(parts)


# --- traces ---------------------------------------------------------------------

@dataclass
class Trace:
    misses: np.ndarray
    out_of_band: np.ndarray
    noise_accesses: int = 0


def generate_trace(positive: bool, m: int, N: int, observations: int, seed: int,
                   workload=None, pollution: float = 0.0, clone_duty: float = 1.0,
                   geo: Optional[CacheGeometry] = None, latency: Optional[LatencyModel] = None,
                   pollution_interval: Optional[float] = None, warmup: int = 1) -> Trace:
    """Victim observations with N instances (+1 clone when ``positive``).

    The first ``warmup`` lockstep passes are run but not recorded, so the
    start-up phase of pollution against a fresh prime is excluded.

    ``pollution`` is the fraction of the channel's 16*slices*W lines the OS
    re-touches every interval (default: one victim pass of hits).
    """
    geo = geo or CacheGeometry(slices=1)
    k = N + (1 if positive else 0)
    actors = [f"V{i}" for i in range(k)]
    plat = make_platform(actors, geo, seed, identity="experiment",
                         world_kwargs={"latency": latency} if latency else None)
    world = plat.world
    ms0 = plat.monitoring["V0"]
    per_pass = len(ms0.sets) * m
    if pollution > 0:
        lines = int(round(pollution * len(ms0.sets) * geo.ways))
        interval = pollution_interval if pollution_interval is not None \
            else per_pass * world.latency.hit_mean
        targets = {"V0": true_targets(world, "V0", ms0)}
        world = apply_adversary(world, AdversaryScript((PolluteChannel(lines, interval, "V0"),)),
                                targets)
    cfg = DetectorConfig(m=m, w=per_pass, t=1, N=N, W=geo.ways)
    insts = [CloneBuster(world, a, plat.monitoring[a], cfg) for a in actors]
    for inst in insts:
        inst.calibrate()
    for inst in insts:
        inst.prime()
    noise = noise_workload(workload or "idle", seed + 7919).bind(geo, plat.channel)
    rng = np.random.default_rng(seed + 104729)
    victim = insts[0]
    misses, oob = [], []
    passes = 0
    while len(misses) < observations:
        noise.run(world, per_pass)
        res = victim.probe()
        passes += 1
        if passes > warmup:
            misses.extend(res.misses)
            if victim.calib is None:
                # calibration itself was refused; every observation is anomalous
                oob.extend([True] * len(res.misses))
            else:
                oob.extend(not victim.calib.in_band(r) or r <= 0 for r in res.readings)
        for inst in insts[1:]:
            if positive and inst is insts[-1] and rng.random() >= clone_duty:
                continue
            inst.probe()
    return Trace(np.array(misses[:observations], dtype=bool),
                 np.array(oob[:observations], dtype=bool), noise.accesses)


def window_counts(trace: Trace, w: int):
    """(miss counts, anomaly flags) of the non-overlapping windows in a trace."""
    n = len(trace.misses) // w
    mis = trace.misses[: n * w].reshape(n, w).sum(axis=1)
    bad = trace.out_of_band[: n * w].reshape(n, w).any(axis=1)
    return mis, bad


# --- metrics ---------------------------------------------------------------------

@dataclass
class Confusion:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def add(self, truth: np.ndarray, alarm: np.ndarray) -> None:
        self.tp += int(np.sum(truth & alarm))
        self.fp += int(np.sum(~truth & alarm))
        self.tn += int(np.sum(~truth & ~alarm))
        self.fn += int(np.sum(truth & ~alarm))

    @property
    def f1(self) -> float:
        d = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / d if d else 0.0

    @property
    def fpr(self) -> float:
        d = self.fp + self.tn
        return self.fp / d if d else 0.0

    @property
    def fnr(self) -> float:
        d = self.fn + self.tp
        return self.fn / d if d else 0.0


METRIC_COLUMNS = ("m", "w", "t", "N", "workload", "pollution", "trials", "windows",
                  "tp", "fp", "tn", "fn", "f1", "fpr", "fnr", "f1_mean", "f1_std")


@dataclass
class MetricsTable:
    rows: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def check(self) -> None:
        """Every row's rates must follow from its own confusion counts."""
        for r in self.rows:
            c = Confusion(r["tp"], r["fp"], r["tn"], r["fn"])
            if not (abs(c.f1 - r["f1"]) < 1e-12 and abs(c.fpr - r["fpr"]) < 1e-12
                    and abs(c.fnr - r["fnr"]) < 1e-12):
                raise AssertionError(f"inconsistent metrics row {r}")

    def select(self, **match) -> list:
        return [r for r in self.rows if all(r.get(k) == v for k, v in match.items())]

    def write_csv(self, fh) -> None:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for r in self.rows:
            writer.writerow(r)


# --- sweeps ----------------------------------------------------------------------

SPEC_KEYS = {"m", "w", "t", "N", "workload", "pollution", "trials", "seed", "observations",
             "clone_duty", "geometry", "latency", "classes", "pollution_interval"}


@dataclass
class ExperimentSpec:
    """Sweep axes and replication.

    ``t`` is a list of thresholds or "auto" (fit on the calibration seed
    ``seed`` to maximise F1, then evaluated on ``trials`` further seeds).
    ``classes`` chooses which traces to simulate: both, or only the negative
    class (pollution sweeps measure false positives only).
    """

    m: list = field(default_factory=lambda: [12])
    w: list = field(default_factory=lambda: [64])
    t: object = "auto"
    N: list = field(default_factory=lambda: [1])
    workload: list = field(default_factory=lambda: ["idle"])
    pollution: list = field(default_factory=lambda: [0.0])
    trials: int = 10
    seed: int = 0
    observations: int = 8192
    clone_duty: float = 1.0
    geometry: dict = field(default_factory=lambda: {"slices": 1})
    latency: dict = field(default_factory=dict)
    classes: str = "both"
    pollution_interval: Optional[float] = None

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        unknown = set(data) - SPEC_KEYS
        if unknown:
            raise ValueError(f"invalid sweep axes: {sorted(unknown)}")
        spec = cls(**data)
        spec.validate()
        return spec

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def validate(self) -> None:
        geo = self.geo()
        for m in self.m:
            for N in self.N:
                if m not in ways_for_instances(geo.ways, N):
                    raise ValueError(f"m={m} invalid for N={N}, W={geo.ways}")
        if self.t != "auto" and not all(int(t) >= 1 for t in self.t):
            raise ValueError("thresholds must be positive")
        if self.classes not in ("both", "negative"):
            raise ValueError("classes must be 'both' or 'negative'")
        if self.trials < 0:
            raise ValueError("trials must be non-negative")
        for p in self.pollution:
            if not 0 <= p <= 1:
                raise ValueError("pollution fractions lie in [0, 1]")

    def geo(self) -> CacheGeometry:
        return load_geometry(self.geometry)

    def eval_seeds(self) -> list:
        return [self.seed + 1 + i for i in range(self.trials)]


def run_experiment(spec: ExperimentSpec, verdict_rows: Optional[list] = None) -> MetricsTable:
    """Evaluate every sweep cell; optionally collect per-window verdict rows."""
    spec.validate()
    table = MetricsTable()
    if spec.trials == 0:
        return table
    geo = spec.geo()
    latency = LatencyModel(**spec.latency) if spec.latency else None
    max_w = max(spec.w)
    obs = max(spec.observations, max_w)
    cache: dict = {}

    def trace(positive, m, N, wl, pol, seed):
        key = (positive, m, N, json.dumps(wl, sort_keys=True), pol, seed)
        if key not in cache:
            cache[key] = generate_trace(positive, m, N, obs, seed, wl, pol, spec.clone_duty,
                                        geo, latency, spec.pollution_interval)
        return cache[key]

    classes = (False,) if spec.classes == "negative" else (True, False)
    for m in spec.m:
        for N in spec.N:
            for wl in spec.workload:
                for pol in spec.pollution:
                    for w in spec.w:
                        if spec.t == "auto":
                            counts, labels = [], []
                            for positive in classes:
                                mis, _ = window_counts(trace(positive, m, N, wl, pol, spec.seed), w)
                                counts.extend(mis)
                                labels.extend([positive] * len(mis))
                            ts = [fit_threshold(counts, labels)]
                        else:
                            ts = [int(t) for t in spec.t]
                        for t in ts:
                            total = Confusion()
                            f1s = []
                            for seed in spec.eval_seeds():
                                c = Confusion()
                                for positive in classes:
                                    mis, bad = window_counts(trace(positive, m, N, wl, pol, seed), w)
                                    alarm = bad | (mis >= t)
                                    truth = np.full(len(mis), positive)
                                    c.add(truth, alarm)
                                    if verdict_rows is not None:
                                        for cnt, b, a in zip(mis, bad, alarm):
                                            verdict_rows.append({
                                                "seed": seed, "m": m, "w": w, "t": t, "N": N,
                                                "workload": workload_name(wl), "misses": int(cnt),
                                                "verdict": "Anomaly" if b else
                                                ("CloneDetected" if a else "NoClone"),
                                                "truth": "clone" if positive else "benign"})
                                total.tp += c.tp
                                total.fp += c.fp
                                total.tn += c.tn
                                total.fn += c.fn
                                f1s.append(c.f1)
                            table.rows.append({
                                "m": m, "w": w, "t": t, "N": N, "workload": workload_name(wl),
                                "pollution": pol, "trials": len(f1s),
                                "windows": total.tp + total.fp + total.tn + total.fn,
                                "tp": total.tp, "fp": total.fp, "tn": total.tn, "fn": total.fn,
                                "f1": total.f1, "fpr": total.fpr, "fnr": total.fnr,
                                "f1_mean": float(np.mean(f1s)), "f1_std": float(np.std(f1s)),
                            })
    table.check()
    return table


def manifest(spec: ExperimentSpec, outputs: Sequence[str] = ()) -> dict:
    """Everything needed to replay a run."""
    from . import __version__
    return {
        "package": "clonesim",
        "version": __version__,
        "python": sys.version.split()[0],
        "platform": _platform.platform(),
        "spec": asdict(spec),
        "geometry": geometry_to_dict(spec.geo()),
        "calibration_seed": spec.seed,
        "evaluation_seeds": spec.eval_seeds(),
        "outputs": list(outputs),
        "verdict_columns": list(VERDICT_COLUMNS),
    }
