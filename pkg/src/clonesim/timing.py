"""Access-latency distributions and the counting-thread clock."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class LatencyModel:
    """Hit and miss latencies in abstract time units.

    Samples are normal draws clipped to ``mean +/- clip_sigma * std`` so the two
    bands stay disjoint (the configured overlap is zero by default).
    """

    hit_mean: float = 100.0
    hit_std: float = 8.0
    miss_mean: float = 450.0
    miss_std: float = 25.0
    clip_sigma: float = 4.0

    def __post_init__(self):
        if self.hit_std < 0 or self.miss_std < 0:
            raise ValueError("latency spreads must be non-negative")

    def band(self, miss: bool) -> tuple[float, float]:
        mean, std = (self.miss_mean, self.miss_std) if miss else (self.hit_mean, self.hit_std)
        return mean - self.clip_sigma * std, mean + self.clip_sigma * std

    def overlap(self) -> float:
        """Width of the intersection of the two clipped bands (0 when separable)."""
        lo = max(self.band(False)[0], self.band(True)[0])
        hi = min(self.band(False)[1], self.band(True)[1])
        return max(0.0, hi - lo)

    def sample(self, rng: np.random.Generator, miss: bool) -> float:
        return self.from_standard(float(rng.standard_normal()), miss)

    def from_standard(self, z: float, miss: bool) -> float:
        """Latency for a standard-normal draw ``z``."""
        if miss:
            zc = min(self.clip_sigma, max(-self.clip_sigma, z))
            return self.miss_mean + self.miss_std * zc
        zc = min(self.clip_sigma, max(-self.clip_sigma, z))
        return self.hit_mean + self.hit_std * zc


@dataclass
class ClockOracle:
    """A counter that advances ``rate`` ticks per time unit.

    ``perturbations`` holds ``(start, end, factor)`` windows during which the
    rate is divided by ``factor``; ``factor = inf`` stalls the counter.
    """

    rate: float = 1.0
    perturbations: list = field(default_factory=list)

    def slow(self, factor: float, start: float, duration: float) -> None:
        if factor <= 0:
            raise ValueError("slowdown factor must be positive")
        self.perturbations.append((start, start + duration, factor))

    def stall(self, start: float, duration: float) -> None:
        self.perturbations.append((start, start + duration, math.inf))

    def ticks(self, t: float) -> float:
        total = self.rate * t
        for start, end, factor in self.perturbations:
            lo, hi = max(0.0, start), min(t, end)
            if hi > lo:
                slowed = 0.0 if math.isinf(factor) else 1.0 / factor
                total -= self.rate * (hi - lo) * (1.0 - slowed)
        return total

    def read(self, t: float) -> int:
        return int(math.floor(self.ticks(t) + 1e-9))

    def perturbed_at(self, t: float) -> bool:
        return any(start <= t < end for start, end, _ in self.perturbations)
