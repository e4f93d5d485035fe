"""Linearity conditions and the search for look-alike non-linear layouts.

An enclave that assumes its memory is contiguous can test five observable
properties: distinct frames (C1), low-20-bit aliasing (C2), shared cache set
for shared set bits (C3), DRAM row hit/conflict patterns (C4) and the row
conflict at the 22-bit boundary (C5).  This module checks those properties
for a concrete page table and searches a miniature address space for page
tables that pass all five without being contiguous.

Mappings are tuples ``frames[vpn] = ppn``.  All checks run at page
granularity because page offsets are preserved by translation.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .osmodel import AdversaryScript, PageMapping, Remap

CONDITIONS = (1, 2, 3, 4, 5)


def _bit(x, i):
    return (x >> i) & 1


def _full_bank(x):
    # channel, bg0, bg1, ba0, ba1; rank duplicates ba1 so it adds no information
    return (
        (_bit(x, 18) ^ _bit(x, 15) ^ _bit(x, 13) ^ _bit(x, 12) ^ _bit(x, 9) ^ _bit(x, 8))
        | (_bit(x, 19) ^ _bit(x, 15)) << 1
        | (_bit(x, 20) ^ _bit(x, 16)) << 2
        | (_bit(x, 21) ^ _bit(x, 17)) << 3
        | (_bit(x, 22) ^ _bit(x, 18)) << 4
    )


def _scaled_bank(x):
    return (_bit(x, 3) ^ _bit(x, 6)) | (_bit(x, 4) ^ _bit(x, 7)) << 1


@dataclass(frozen=True)
class AddressLayout:
    """Bit boundaries of one address model.

    ``alias_bits``: low bits compared by the aliasing oracle.
    ``set_end``: C3 compares bits ``[0, set_end)``.
    ``boundary_bits``: consecutive addresses conflict iff this many low bits are ones.
    """

    name: str
    addr_bits: int
    page_bits: int
    alias_bits: int
    set_end: int
    row_shift: int
    boundary_bits: int
    bank: Callable = field(compare=False, repr=False)

    @property
    def n_frames(self) -> int:
        return 1 << (self.addr_bits - self.page_bits)

    @property
    def alias_pages(self) -> int:
        return 1 << (self.alias_bits - self.page_bits)

    @property
    def set_pages(self) -> int:
        """Pages per repetition of the OS-controlled set bits."""
        return 1 << (self.set_end - self.page_bits)

    def conflict(self, x, y):
        return (self.bank(x) == self.bank(y)) & ((x >> self.row_shift) != (y >> self.row_shift))


FULL_LAYOUT = AddressLayout("full", 34, 12, 20, 16, 18, 22, _full_bank)
# 8-bit miniature: line bits 0-1, set bits 2-4 (bit 2 enclave-fixed), 8-byte pages,
# aliasing on bits 0-5, banks (a3^a6, a4^a7), rows from bit 6.
SCALED_LAYOUT = AddressLayout("scaled8", 8, 3, 6, 5, 6, 7, _scaled_bank)


# --- checking ------------------------------------------------------------------

@dataclass
class ConditionResult:
    condition: int
    passed: bool
    counterexample: Optional[tuple] = None  # (va_i, va_j)
    checked: int = 0


@dataclass
class ConditionReport:
    results: dict

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results.values())

    def failed(self) -> list:
        return [c for c, r in sorted(self.results.items()) if not r.passed]

    def summary(self) -> str:
        return " ".join(f"C{c}={'ok' if r.passed else 'FAIL'}" for c, r in sorted(self.results.items()))


def _frames(mapping) -> np.ndarray:
    if isinstance(mapping, PageMapping):
        n = max(mapping.entries) + 1 if mapping.entries else 0
        if sorted(mapping.entries) != list(range(n)):
            raise ValueError("mapping must cover pages 0..n-1 without holes")
        return np.array([mapping.entries[v] for v in range(n)], dtype=np.int64)
    return np.asarray(mapping, dtype=np.int64)


def check_conditions(mapping, layout: AddressLayout = SCALED_LAYOUT,
                     conditions: Sequence[int] = CONDITIONS,
                     endpoint_conflict: bool = False) -> ConditionReport:
    """Evaluate the five linearity conditions on a page table.

    Observations come from the true frames; expectations come from the
    contiguous hypothesis ``pa == va``.  ``endpoint_conflict`` adds the extra
    first-vs-last row-conflict clause of the printed encoding.
    """
    frames = _frames(mapping)
    n = len(frames)
    pb = layout.page_bits
    vpn = np.arange(n, dtype=np.int64)
    pa, va = frames << pb, vpn << pb
    results = {}

    if 1 in conditions:
        _, first, counts = np.unique(frames, return_index=True, return_counts=True)
        dup = np.nonzero(counts > 1)[0]
        if len(dup):
            i = int(first[dup[0]])
            j = int(np.nonzero(frames == frames[i])[0][1])
            results[1] = ConditionResult(1, False, (i << pb, j << pb), n)
        else:
            results[1] = ConditionResult(1, True, None, n)

    for cond, period, bits in ((2, layout.alias_pages, layout.alias_bits),
                               (3, layout.set_pages, layout.set_end)):
        if cond not in conditions:
            continue
        # pages in the same residue class must agree on the low bits
        res = ConditionResult(cond, True, None, 0)
        low = pa & ((1 << bits) - 1)
        for r in range(min(period, n)):
            idx = vpn[r::period]
            res.checked += len(idx) - 1
            bad = low[idx] != low[idx[0]]
            if bad.any():
                res.passed = False
                res.counterexample = (int(idx[0]) << pb, int(idx[np.argmax(bad)]) << pb)
                break
        results[cond] = res

    if 4 in conditions:
        res = ConditionResult(4, True, None, 0)
        hyp_bank, true_bank = layout.bank(va), layout.bank(pa)
        hyp_row, true_row = va >> layout.row_shift, pa >> layout.row_shift
        for b in np.unique(hyp_bank):
            idx = np.nonzero(hyp_bank == b)[0]
            if len(idx) < 2:
                continue
            same_bank = true_bank[idx][:, None] == true_bank[idx][None, :]
            want_conf = hyp_row[idx][:, None] != hyp_row[idx][None, :]
            got_conf = same_bank & (true_row[idx][:, None] != true_row[idx][None, :])
            got_hit = same_bank & ~got_conf
            ok = np.where(want_conf, got_conf, got_hit)
            res.checked += len(idx) * (len(idx) - 1)
            if not ok.all():
                i, j = np.argwhere(~ok)[0]
                res.passed = False
                res.counterexample = (int(idx[i]) << pb, int(idx[j]) << pb)
                break
        results[4] = res

    if 5 in conditions:
        res = ConditionResult(5, True, None, max(0, n - 1))
        ones = (1 << pb) - 1
        last_va = va[:-1] | ones
        last_pa, next_pa = pa[:-1] | ones, pa[1:]
        boundary = (1 << layout.boundary_bits) - 1
        want = (last_va & boundary) == boundary
        got = layout.conflict(last_pa, next_pa)
        bad = want != got
        if bad.any():
            k = int(np.argmax(bad))
            res.passed = False
            res.counterexample = (int(last_va[k]), int(va[k + 1]))
        elif endpoint_conflict and n > 1:
            if not layout.conflict(pa[0], pa[-1] | ones):
                res.passed = False
                res.counterexample = (0, int(va[-1] | ones))
        results[5] = res

    return ConditionReport(results)


def check_pair(mapping, layout: AddressLayout, condition: int, va_i: int, va_j: int) -> bool:
    """Re-check one condition on one address pair; True when the pair is consistent."""
    frames = _frames(mapping)
    pb = layout.page_bits
    pa_i = (int(frames[va_i >> pb]) << pb) | (va_i & ((1 << pb) - 1))
    pa_j = (int(frames[va_j >> pb]) << pb) | (va_j & ((1 << pb) - 1))
    if condition == 1:
        return pa_i != pa_j or va_i == va_j
    if condition in (2, 3):
        bits = layout.alias_bits if condition == 2 else layout.set_end
        mask = (1 << bits) - 1
        return (va_i & mask) != (va_j & mask) or (pa_i & mask) == (pa_j & mask)
    if condition == 4:
        if layout.bank(va_i) != layout.bank(va_j):
            return True
        want = (va_i >> layout.row_shift) != (va_j >> layout.row_shift)
        same_bank = layout.bank(pa_i) == layout.bank(pa_j)
        diff_row = (pa_i >> layout.row_shift) != (pa_j >> layout.row_shift)
        return same_bank and (diff_row == want)
    if condition == 5:
        boundary = (1 << layout.boundary_bits) - 1
        if va_j == va_i + 1:
            want = (va_i & boundary) == boundary
        else:
            want = True  # endpoint clause
        return bool(layout.conflict(pa_i, pa_j)) == want
    raise ValueError(f"unknown condition {condition}")


# --- search ------------------------------------------------------------------

def is_affine(frames: Sequence[int]) -> bool:
    """Contiguous frames: ``frames[v] == frames[0] + v`` for every page."""
    return all(f - frames[0] == v for v, f in enumerate(frames))


class ConstraintSearch:
    """Backtracking over page->frame assignments with forward checking.

    Every condition is binary between two pages, so compatibility is
    precomputed as bitmasks: ``allowed[p][q][a]`` holds the frames page ``q``
    may take when page ``p`` takes frame ``a``.  Singleton domains are
    propagated immediately; branching picks the smallest domain first.
    """

    def __init__(self, layout: AddressLayout = SCALED_LAYOUT, n_pages: Optional[int] = None,
                 conditions: Sequence[int] = CONDITIONS, affinity: bool = False,
                 restrict: Optional[dict] = None, endpoint_conflict: bool = True):
        self.layout = layout
        self.n = n_pages or layout.n_frames
        self.f = layout.n_frames
        if self.n > self.f:
            raise ValueError("more pages than frames")
        if self.f > 4096:
            raise ValueError("search is limited to miniature layouts")
        self.conditions = tuple(conditions)
        self.nodes = 0
        full = (1 << self.f) - 1
        self.initial = [full] * self.n
        for v, allowed in (restrict or {}).items():
            self.initial[v] &= sum(1 << a for a in allowed)
        self.allowed = self._tables(affinity, endpoint_conflict)

    def _tables(self, affinity: bool, endpoint_conflict: bool):
        L, n, f = self.layout, self.n, self.f
        pb = L.page_bits
        ones = (1 << pb) - 1
        frames = np.arange(f, dtype=np.int64)
        A, B = np.meshgrid(frames, frames, indexing="ij")  # A: frame of p, B: frame of q
        pa, pb_ = A << pb, B << pb
        hyp_bank = L.bank(np.arange(n, dtype=np.int64) << pb)
        boundary = (1 << L.boundary_bits) - 1
        weights = 1 << np.arange(f, dtype=object)
        allowed = [[None] * n for _ in range(n)]
        for p in range(n):
            for q in range(n):
                if p == q:
                    continue
                ok = np.ones((f, f), dtype=bool)
                if 1 in self.conditions:
                    ok &= A != B
                if 2 in self.conditions and (p - q) % L.alias_pages == 0:
                    m = (1 << L.alias_bits) - 1
                    ok &= (pa & m) == (pb_ & m)
                if 3 in self.conditions and (p - q) % L.set_pages == 0:
                    m = (1 << L.set_end) - 1
                    ok &= (pa & m) == (pb_ & m)
                if 4 in self.conditions and hyp_bank[p] == hyp_bank[q]:
                    want = ((p << pb) >> L.row_shift) != ((q << pb) >> L.row_shift)
                    same_bank = L.bank(pa) == L.bank(pb_)
                    diff_row = (pa >> L.row_shift) != (pb_ >> L.row_shift)
                    ok &= same_bank & (diff_row == want)
                if 5 in self.conditions:
                    if q == p + 1:
                        want = (((p << pb) | ones) & boundary) == boundary
                        ok &= L.conflict(pa | ones, pb_) == want
                    if endpoint_conflict and p == 0 and q == n - 1:
                        ok &= L.conflict(pa, pb_ | ones)
                    if endpoint_conflict and q == 0 and p == n - 1:
                        ok &= L.conflict(pb_, pa | ones)
                if affinity:
                    ok &= (B - A) == (q - p)
                masks = (ok.astype(object) * weights[None, :]).sum(axis=1)
                allowed[p][q] = [int(x) for x in masks]
        return allowed

    def solutions(self, limit: Optional[int] = None, accept: Optional[Callable] = None):
        """Yield complete assignments in depth-first order; ``accept`` filters them."""
        found = 0
        for sol in self._search(self.initial[:]):
            if accept is None or accept(sol):
                yield sol
                found += 1
                if limit is not None and found >= limit:
                    return

    def _propagate(self, dom, var, val, assigned):
        queue = [(var, val)]
        while queue:
            p, a = queue.pop()
            row = self.allowed[p]
            for q in range(self.n):
                if q == p or q in assigned:
                    continue
                new = dom[q] & row[q][a]
                if new != dom[q]:
                    if new == 0:
                        return False
                    dom[q] = new
                    if new & (new - 1) == 0:
                        assigned[q] = new.bit_length() - 1
                        queue.append((q, assigned[q]))
        return True

    def _search(self, dom, assigned=None):
        assigned = dict(assigned or {})
        if not assigned:
            for v in range(self.n):
                if dom[v] == 0:
                    return
                if dom[v] & (dom[v] - 1) == 0:
                    assigned[v] = dom[v].bit_length() - 1
            for v, a in list(assigned.items()):
                if not self._propagate(dom, v, a, assigned):
                    return
        self.nodes += 1
        free = [v for v in range(self.n) if v not in assigned]
        if not free:
            yield tuple(assigned[v] for v in range(self.n))
            return
        var = min(free, key=lambda v: (bin(dom[v]).count("1"), v))
        d = dom[var]
        while d:
            low = d & -d
            a = low.bit_length() - 1
            d ^= low
            nd = dom[:]
            nd[var] = low
            na = dict(assigned)
            na[var] = a
            if self._propagate(nd, var, a, na):
                yield from self._search(nd, na)


def search_nonlinear(layout: AddressLayout = SCALED_LAYOUT, n_pages: Optional[int] = None,
                     conditions: Sequence[int] = CONDITIONS, limit: int = 8,
                     affinity: bool = False, include_affine: bool = False) -> list:
    """Page tables that satisfy ``conditions`` yet are not contiguous.

    With ``affinity=True`` the contiguity constraint is added to the encoding,
    and ``include_affine`` should be set to see the survivors.
    """
    search = ConstraintSearch(layout, n_pages, conditions, affinity)
    accept = None if include_affine else (lambda s: not is_affine(s))
    return sorted(search.solutions(limit, accept))


# --- evasion -------------------------------------------------------------------

@dataclass
class EvasionResult:
    k: int
    scaled_k: int
    mapping_a: Optional[tuple] = None
    mapping_b: Optional[tuple] = None
    sets_a: tuple = ()
    sets_b: tuple = ()
    feasible_subsets: dict = field(default_factory=dict)
    nodes: int = 0

    @property
    def evaded(self) -> bool:
        return self.mapping_a is not None


def believed_sets(k: int, layout: AddressLayout = SCALED_LAYOUT) -> int:
    """Monitored sets at miniature scale: k of 16 becomes ceil(k * c / 16) of c."""
    if not 1 <= k <= 16:
        raise ValueError("k must lie in [1, 16]")
    return math.ceil(k * layout.set_pages / 16)


def monitored_true_sets(frames: Sequence[int], k_scaled: int, layout: AddressLayout = SCALED_LAYOUT) -> set:
    """True OS-controlled set values hit by the pages a clone believes cover sets < k_scaled."""
    c = layout.set_pages
    return {int(frames[v]) % c for v in range(len(frames)) if v % c < k_scaled}


def evasion_demo(k: int, layout: AddressLayout = SCALED_LAYOUT) -> EvasionResult:
    """Look for two layouts passing every condition whose monitored sets are disjoint.

    Each clone assumes contiguous memory and monitors the pages it believes
    cover ``k`` of the 16 OS-controlled set values.  Feasibility of "all
    monitored pages land in subset S" is decided by exhaustive search for
    each non-empty S; evasion exists iff two disjoint feasible subsets exist.
    """
    ks = believed_sets(k, layout)
    c = layout.set_pages
    n = layout.n_frames
    result = EvasionResult(k, ks)
    witness = {}
    for size in range(1, c + 1):
        for subset in itertools.combinations(range(c), size):
            restrict = {v: [a for a in range(n) if a % c in subset]
                        for v in range(n) if v % c < ks}
            search = ConstraintSearch(layout, restrict=restrict)
            sol = next(search.solutions(limit=1), None)
            result.nodes += search.nodes
            result.feasible_subsets[subset] = sol is not None
            if sol is not None:
                witness[subset] = sol
    for sa, sb in itertools.permutations(witness, 2):
        if not set(sa) & set(sb):
            result.mapping_a, result.mapping_b = witness[sa], witness[sb]
            result.sets_a = tuple(sorted(monitored_true_sets(witness[sa], ks, layout)))
            result.sets_b = tuple(sorted(monitored_true_sets(witness[sb], ks, layout)))
            break
    return result


def mapping_to_script(frames: Sequence[int], actor: str = "victim", base: int = 0) -> AdversaryScript:
    """Remap actions that turn ``Linear(base)`` into ``frames`` (offset by ``base``)."""
    return AdversaryScript(tuple(Remap(v, base + int(f), actor) for v, f in enumerate(frames)))
