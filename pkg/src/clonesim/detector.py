"""Clone detection by prime-and-probe on a shared cache channel.

Each instance fills ``m`` ways of every set in its channel and keeps
re-reading them.  While at most ``N`` instances share the channel and
``N * m <= W`` everything stays resident; one more instance overflows the
sets and forces misses.  Readings come from the counting-thread clock, so
the runtime also has to notice when that clock misbehaves.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .eviction import MonitoringSet
from .osmodel import World
from .timing import ClockOracle, LatencyModel

__all__ = [
    "ClockOracle", "LatencyModel", "DetectorConfig", "Verdict", "NO_CLONE", "CLONE_DETECTED",
    "ObservationWindow", "Calibration", "NoValidM", "Anomalous", "UntrainedModel",
    "ways_for_instances", "ladder", "calibrate", "calibrate_from_samples", "prime", "probe_pass",
    "classify_threshold", "fit_threshold", "features", "GaussianNB", "classify_naive_bayes",
    "detect_anomaly", "CloneBuster", "estimate_clone_count", "VERDICT_COLUMNS", "write_verdicts",
]


class NoValidM(ValueError):
    """No integer way count separates N from N+1 instances."""


class UntrainedModel(RuntimeError):
    pass


# --- parameters ----------------------------------------------------------------

def ways_for_instances(W: int, N: int) -> list:
    """Integers m with W/(N+1) < m <= W/N."""
    if W < 1 or N < 1:
        raise ValueError("W and N must be positive")
    lo = W // (N + 1) + 1  # smallest m with m*(N+1) > W
    hi = W // N
    if lo > hi:
        raise NoValidM(f"no integer m separates {N} from {N + 1} instances with W={W}")
    return list(range(lo, hi + 1))


def ladder(W: int = 16, first_m: Optional[int] = None) -> list:
    """(N, m) rungs for clone-count estimation, largest m first.

    Every N in 1..W with a valid m appears once, using the largest valid m;
    the first rung uses ``first_m`` (default ceil(3W/4)) when it is valid.
    """
    rungs = []
    for N in range(1, W + 1):
        try:
            valid = ways_for_instances(W, N)
        except NoValidM:
            continue
        rungs.append((N, valid[-1]))
    if rungs:
        m0 = first_m if first_m is not None else math.ceil(3 * W / 4)
        if m0 in ways_for_instances(W, 1):
            rungs[0] = (1, m0)
    return rungs


@dataclass
class DetectorConfig:
    m: int = 12
    w: int = 64
    t: int = 1
    N: int = 1
    W: int = 16
    recalibration_period: float = math.inf
    order: str = "interleaved"

    def __post_init__(self):
        if self.m not in ways_for_instances(self.W, self.N):
            raise ValueError(f"m={self.m} violates W/(N+1) < m <= W/N for W={self.W}, N={self.N}")
        if self.w < 1 or self.t < 1:
            raise ValueError("w and t must be positive")
        if self.order not in ("interleaved", "column"):
            raise ValueError(f"unknown probe order {self.order!r}")


# --- verdicts ------------------------------------------------------------------

@dataclass(frozen=True)
class Verdict:
    kind: str  # NoClone | CloneDetected | Anomaly
    reason: Optional[str] = None

    @property
    def is_clone(self) -> bool:
        return self.kind == "CloneDetected"

    @property
    def is_anomaly(self) -> bool:
        return self.kind == "Anomaly"

    def __str__(self) -> str:
        return f"Anomaly({self.reason})" if self.reason else self.kind


NO_CLONE = Verdict("NoClone")
CLONE_DETECTED = Verdict("CloneDetected")


def anomaly(reason: str) -> Verdict:
    return Verdict("Anomaly", reason)


class Anomalous(RuntimeError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.verdict = anomaly(reason)


@dataclass
class ObservationWindow:
    misses: list
    readings: list = field(default_factory=list)

    def __post_init__(self):
        if self.readings and len(self.readings) != len(self.misses):
            raise ValueError("readings and misses differ in length")

    def __len__(self) -> int:
        return len(self.misses)

    @property
    def miss_count(self) -> int:
        return int(sum(self.misses))


# --- calibration and anomalies ---------------------------------------------------

@dataclass(frozen=True)
class Calibration:
    threshold: float
    hit_band: tuple
    miss_band: tuple
    hit_mean: float
    miss_mean: float

    def in_band(self, reading: float) -> bool:
        return (self.hit_band[0] <= reading <= self.hit_band[1]
                or self.miss_band[0] <= reading <= self.miss_band[1])

    def is_miss(self, reading: float) -> bool:
        return reading > self.threshold


BAND_SIGMAS = 5.0
MIN_HALF_WIDTH = 2.0  # ticks; absorbs clock quantisation when spreads are zero


def calibrate_from_samples(hits: Sequence[float], misses: Sequence[float]) -> Calibration:
    h, m = np.asarray(hits, dtype=float), np.asarray(misses, dtype=float)
    if len(h) == 0 or len(m) == 0:
        raise Anomalous("calibration-empty")
    hw_h = max(BAND_SIGMAS * h.std(), MIN_HALF_WIDTH)
    hw_m = max(BAND_SIGMAS * m.std(), MIN_HALF_WIDTH)
    hit_band = (h.mean() - hw_h, h.mean() + hw_h)
    miss_band = (m.mean() - hw_m, m.mean() + hw_m)
    if hit_band[1] >= miss_band[0]:
        raise Anomalous("indistinguishable-latency")
    return Calibration((h.mean() + m.mean()) / 2, hit_band, miss_band, float(h.mean()), float(m.mean()))


def calibrate(world: World, actor: str, va: int, samples: int = 64) -> Calibration:
    """Flush-and-reload timing of one line: reload after flush is a miss, the next a hit."""
    hits, misses = [], []
    for _ in range(samples):
        world.flush(actor, va)
        misses.append(world.access(actor, va)[1])
        hits.append(world.access(actor, va)[1])
    world.flush(actor, va)  # the probe line must not occupy a monitored way afterwards
    return calibrate_from_samples(hits, misses)


def detect_anomaly(readings: Sequence[float], calib: Calibration) -> Optional[Verdict]:
    """Clock stalls first (a zero-tick access), then readings matching neither band."""
    for r in readings:
        if r <= 0:
            return anomaly("clock-stall")
    for r in readings:
        if not calib.in_band(r):
            return anomaly("out-of-band-latency")
    return None


# --- prime / probe ---------------------------------------------------------------

def _order(ms: MonitoringSet, m: int, order: str) -> list:
    return ms.rows(m) if order == "interleaved" else ms.columns(m)


def prime(world: World, actor: str, ms: MonitoringSet, m: int, verify: bool = True) -> None:
    """Load ``m`` lines of every monitored set.

    With ``verify`` a second untimed pass confirms residency; if none of the
    lines survived, the channel is saturated by someone else.
    """
    if any(len(es.members) < m for es in ms.sets):
        raise ValueError(f"eviction sets hold fewer than m={m} lines")
    lines = ms.rows(m)
    for va in lines:
        world.access(actor, va, timed=False)
    if verify:
        hits = sum(world.access(actor, va, timed=False)[0] for va in lines)
        if hits == 0:
            raise Anomalous("prime-failed")


@dataclass
class PassResult:
    misses: list
    readings: list

    @property
    def first_miss(self) -> Optional[int]:
        """1-based index of the first miss in this pass."""
        for i, miss in enumerate(self.misses):
            if miss:
                return i + 1
        return None


def probe_pass(world: World, actor: str, ms: MonitoringSet, m: int,
               calib: Optional[Calibration] = None, order: str = "interleaved") -> PassResult:
    """Re-read every primed line once, timing each access through the clock.

    Without a calibration the ground-truth hit flag is used (oracle mode).
    """
    misses, readings = [], []
    for va in _order(ms, m, order):
        hit, reading = world.access(actor, va)
        readings.append(reading)
        misses.append(calib.is_miss(reading) if calib is not None else not hit)
    return PassResult(misses, readings)


# --- classifiers ---------------------------------------------------------------

def classify_threshold(window: ObservationWindow, t: int,
                       calib: Optional[Calibration] = None) -> Verdict:
    if calib is not None and window.readings:
        bad = detect_anomaly(window.readings, calib)
        if bad is not None:
            return bad
    return CLONE_DETECTED if window.miss_count >= t else NO_CLONE


def fit_threshold(miss_counts: Sequence[int], labels: Sequence[bool]) -> int:
    """Threshold maximising F1 on labelled windows (smallest on ties)."""
    counts = np.asarray(miss_counts)
    y = np.asarray(labels, dtype=bool)
    best_t, best_f1 = 1, -1.0
    for t in range(1, int(counts.max(initial=0)) + 2):
        pred = counts >= t
        f1 = f1_score(y, pred)
        if f1 > best_f1:
            best_t, best_f1 = t, f1
    return best_t


def f1_score(truth, pred) -> float:
    truth, pred = np.asarray(truth, dtype=bool), np.asarray(pred, dtype=bool)
    tp = int(np.sum(truth & pred))
    fp = int(np.sum(~truth & pred))
    fn = int(np.sum(truth & ~pred))
    return 2 * tp / (2 * tp + fp + fn) if tp else 0.0


def features(window: ObservationWindow) -> np.ndarray:
    """(miss count, longest run of consecutive misses)."""
    run = best = 0
    for miss in window.misses:
        run = run + 1 if miss else 0
        best = max(best, run)
    return np.array([window.miss_count, best], dtype=float)


class GaussianNB:
    """Two-class Gaussian naive Bayes with variance smoothing."""

    def __init__(self, var_smoothing: float = 1e-9):
        self.var_smoothing = var_smoothing
        self.classes_ = None

    def fit(self, X, y) -> "GaussianNB":
        X = np.asarray(X, dtype=float)
        y = np.asarray(y)
        self.classes_ = np.unique(y)
        eps = self.var_smoothing * max(X.var(axis=0).max(initial=0.0), 1.0)
        self.theta_ = np.array([X[y == c].mean(axis=0) for c in self.classes_])
        self.var_ = np.array([X[y == c].var(axis=0) + eps for c in self.classes_])
        self.prior_ = np.array([np.mean(y == c) for c in self.classes_])
        return self

    def _joint_log_likelihood(self, X) -> np.ndarray:
        if self.classes_ is None:
            raise UntrainedModel("fit the model first")
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = []
        for prior, mu, var in zip(self.prior_, self.theta_, self.var_):
            ll = -0.5 * np.sum(np.log(2 * np.pi * var)) - 0.5 * np.sum((X - mu) ** 2 / var, axis=1)
            out.append(np.log(prior) + ll)
        return np.array(out).T

    def predict_proba(self, X) -> np.ndarray:
        jll = self._joint_log_likelihood(X)
        jll -= jll.max(axis=1, keepdims=True)
        p = np.exp(jll)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return self.classes_[np.argmax(self._joint_log_likelihood(X), axis=1)]


def classify_naive_bayes(window: ObservationWindow, model: GaussianNB,
                         calib: Optional[Calibration] = None) -> Verdict:
    if calib is not None and window.readings:
        bad = detect_anomaly(window.readings, calib)
        if bad is not None:
            return bad
    label = model.predict(features(window)[None, :])[0]
    return CLONE_DETECTED if bool(label) else NO_CLONE


# --- runtime -------------------------------------------------------------------

class CloneBuster:
    """Detector state for one enclave: calibration, priming and windowed verdicts.

    ``on_detect`` receives each CloneDetected or Anomaly verdict; what to do
    about it (halt, log, refuse to seal) is the caller's policy.
    """

    def __init__(self, world: World, actor: str, ms: MonitoringSet, config: DetectorConfig,
                 on_detect: Optional[Callable] = None, oracle_mode: bool = False):
        self.world = world
        self.actor = actor
        self.ms = ms
        self.config = config
        self.on_detect = on_detect
        self.oracle_mode = oracle_mode
        self.calib: Optional[Calibration] = None
        self.base_calib: Optional[Calibration] = None
        self.calibrated_at = -math.inf
        self.pending_misses: list = []
        self.pending_readings: list = []
        self.verdicts: list = []

    def calibrate(self) -> Optional[Verdict]:
        """(Re)measure the threshold; drift against the first calibration is an anomaly."""
        va = self.ms.sets[0].members[-1]
        try:
            calib = calibrate(self.world, self.actor, va)
        except Anomalous as exc:
            return self._emit(exc.verdict)
        self.calibrated_at = self.world.time
        if self.base_calib is None:
            self.base_calib = calib
        elif not (self.base_calib.hit_band[0] <= calib.hit_mean <= self.base_calib.hit_band[1]
                  and self.base_calib.miss_band[0] <= calib.miss_mean <= self.base_calib.miss_band[1]):
            return self._emit(anomaly("calibration-drift"))
        self.calib = calib
        return None

    def start(self) -> Optional[Verdict]:
        if not self.oracle_mode:
            bad = self.calibrate()
            if bad is not None:
                return bad
        return self.prime()

    def prime(self) -> Optional[Verdict]:
        try:
            prime(self.world, self.actor, self.ms, self.config.m)
        except Anomalous as exc:
            return self._emit(exc.verdict)
        return None

    def probe(self) -> PassResult:
        """One probe pass; completed windows are classified and recorded."""
        if (not self.oracle_mode
                and self.world.time - self.calibrated_at >= self.config.recalibration_period):
            self.calibrate()
        res = probe_pass(self.world, self.actor, self.ms, self.config.m,
                         None if self.oracle_mode else self.calib, self.config.order)
        self.pending_misses.extend(res.misses)
        self.pending_readings.extend(res.readings)
        w = self.config.w
        while len(self.pending_misses) >= w:
            win = ObservationWindow(self.pending_misses[:w], self.pending_readings[:w])
            del self.pending_misses[:w], self.pending_readings[:w]
            self._emit(classify_threshold(win, self.config.t,
                                          None if self.oracle_mode else self.calib))
        return res

    def flush(self) -> None:
        """Evict own monitored lines (used when changing m between ladder rungs)."""
        for es in self.ms.sets:
            for va in es.members:
                self.world.flush(self.actor, va)
        self.pending_misses.clear()
        self.pending_readings.clear()

    def _emit(self, verdict: Verdict) -> Verdict:
        self.verdicts.append(verdict)
        if verdict.kind != "NoClone" and self.on_detect is not None:
            self.on_detect(verdict)
        return verdict

    @property
    def detected(self) -> bool:
        return any(v.kind != "NoClone" for v in self.verdicts)


def run_lockstep(instances: Sequence[CloneBuster], passes: int) -> list:
    """Round-robin probe passes; returns per-instance lists of PassResult."""
    out = [[] for _ in instances]
    for _ in range(passes):
        for i, inst in enumerate(instances):
            out[i].append(inst.probe())
    return out


def lockstep_miss_totals(instances: Sequence[CloneBuster], passes: int):
    """Total probe misses per instance over ``passes`` lockstep rounds.

    Without pollution or clock perturbation the cache evolves
    deterministically, so once a post-round cache state repeats the miss
    counts repeat with the same period; the remaining rounds are
    extrapolated exactly from that cycle.  Returns ``(totals, simulated)``.
    """
    world = instances[0].world
    if world.pollution:
        raise ValueError("cycle extrapolation needs a pollution-free world")
    totals = [0] * len(instances)
    seen: dict = {}
    history: list = []
    for r in range(passes):
        key = world.fingerprint()
        if key in seen:
            start = seen[key]
            period = history[start:]
            remaining = passes - r
            cycles, tail = divmod(remaining, len(period))
            for i in range(len(instances)):
                totals[i] += cycles * sum(p[i] for p in period) + sum(p[i] for p in period[:tail])
            return totals, r
        seen[key] = r
        counts = [sum(inst.probe().misses) for inst in instances]
        history.append(counts)
        for i, c in enumerate(counts):
            totals[i] += c
    return totals, passes


def estimate_clone_count(instances: Sequence[CloneBuster], W: int = 16,
                         passes_per_rung: int = 2, first_m: Optional[int] = None):
    """Walk the ladder from the first instance's viewpoint.

    All instances follow the same rung schedule (they run the same binary).
    At each rung everyone drops their lines, primes ``m`` ways and probes;
    the first rung where instance 0 sees no miss gives ``N - 1`` others.
    Returns ``(estimate, rung_log)``; estimate is the string ">=16" when
    every rung detects contention.
    """
    log = []
    for N, m in ladder(W, first_m):
        for inst in instances:
            inst.flush()
            inst.config = DetectorConfig(m=m, w=inst.config.w, t=inst.config.t, N=N, W=W,
                                         recalibration_period=inst.config.recalibration_period,
                                         order=inst.config.order)
        for inst in instances:
            prime(inst.world, inst.actor, inst.ms, m, verify=False)
        missed = False
        for _ in range(passes_per_rung):
            for i, inst in enumerate(instances):
                res = probe_pass(inst.world, inst.actor, inst.ms, m,
                                 None if inst.oracle_mode else inst.calib, inst.config.order)
                if i == 0 and any(res.misses):
                    missed = True
        log.append((N, m, missed))
        if not missed:
            return N - 1, log
    return ">=16", log


# --- CSV -----------------------------------------------------------------------

VERDICT_COLUMNS = ("seed", "m", "w", "t", "N", "workload", "misses", "verdict", "truth")


def write_verdicts(fh, rows: Sequence[dict]) -> None:
    """Write verdict rows (dicts keyed by VERDICT_COLUMNS) to an open text file."""
    writer = csv.DictWriter(fh, fieldnames=VERDICT_COLUMNS, extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: str(row.get(k, "")) for k in VERDICT_COLUMNS})
