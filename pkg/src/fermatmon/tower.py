"""TowerSketch flow-size counter and the four-way hierarchy classifier."""
from dataclasses import dataclass
from enum import IntEnum
import math

import numpy as np

from .fermat import Saturated
from .hashing import derive_seeds, mix64, mix64_array

DEFAULT_LEVELS = ((32768, 8), (16384, 16))

SAMPLE_SPACE = 1 << 16

# stands in for +inf when a saturated counter is excluded from the minimum
_INF = np.int64(1 << 62)


class Hierarchy(IntEnum):
    """Per-packet tag; fits the two header bits used to carry it."""

    HH = 0
    HL = 1
    SAMPLED_LL = 2
    NONSAMPLED_LL = 3


def _dtype_for(bits):
    for dt in (np.uint8, np.uint16, np.uint32, np.uint64):
        if np.iinfo(dt).bits >= bits:
            return dt
    raise ValueError(f"counter width {bits} too large")


@dataclass(frozen=True)
class TowerConfig:
    levels: tuple = DEFAULT_LEVELS
    seeds: tuple = None

    def __post_init__(self):
        levels = tuple((int(w), int(b)) for w, b in self.levels)
        object.__setattr__(self, "levels", levels)
        if not levels:
            raise ValueError("need at least one level")
        if self.seeds is None:
            object.__setattr__(self, "seeds", tuple(derive_seeds(0, len(levels), salt=0x70)))
        if len(self.seeds) != len(levels):
            raise ValueError("one seed per level")
        widths = [b for _, b in levels]
        if any(a >= b for a, b in zip(widths, widths[1:])):
            raise ValueError("counter widths must strictly increase")
        if len({w * b for w, b in levels}) != 1:
            raise ValueError("every level must use the same number of bits")
        if any(w < 1 or b < 1 for w, b in levels):
            raise ValueError("empty level")

    @classmethod
    def from_seed(cls, seed, levels=DEFAULT_LEVELS):
        return cls(levels=levels, seeds=tuple(derive_seeds(seed, len(levels), salt=0x70)))

    @property
    def caps(self):
        return tuple((1 << b) - 1 for _, b in self.levels)


@dataclass(frozen=True)
class ClassifierThresholds:
    T_h: int = 1
    T_l: int = 1
    sample_rate: float = 1.0

    def __post_init__(self):
        if not 1 <= self.T_l <= self.T_h:
            raise ValueError(f"need 1 <= T_l <= T_h, got T_l={self.T_l}, T_h={self.T_h}")
        if not 0.0 <= self.sample_rate <= 1.0:
            raise ValueError("sample_rate must lie in [0, 1]")

    @property
    def sample_threshold(self):
        return math.ceil(SAMPLE_SPACE * self.sample_rate)


def is_sampled(f, sample_rate, sample_seed):
    """Flow-consistent sampling verdict: every switch with the seed agrees."""
    return (mix64(f, sample_seed) & 0xFFFF) < math.ceil(SAMPLE_SPACE * sample_rate)


def sampled_mask(flows, sample_rate, sample_seed):
    h = mix64_array(flows, sample_seed) & np.uint64(0xFFFF)
    return h < np.uint64(math.ceil(SAMPLE_SPACE * sample_rate))


def classify_size(size, f, th, sample_seed):
    if size >= th.T_h:
        return Hierarchy.HH
    if size >= th.T_l:
        return Hierarchy.HL
    if is_sampled(f, th.sample_rate, sample_seed):
        return Hierarchy.SAMPLED_LL
    return Hierarchy.NONSAMPLED_LL


def classify_sizes(sizes, flows, th, sample_seed):
    """Vectorised :func:`classify_size`; returns a ``uint8`` array of tags."""
    sizes = np.asarray(sizes)
    out = np.full(sizes.shape, Hierarchy.HL, dtype=np.uint8)
    out[sizes >= th.T_h] = Hierarchy.HH
    low = sizes < th.T_l
    if low.any():
        samp = sampled_mask(np.asarray(flows)[low], th.sample_rate, sample_seed)
        out[low] = np.where(samp, Hierarchy.SAMPLED_LL, Hierarchy.NONSAMPLED_LL)
    return out


def _running_rank(idx):
    """1-based occurrence number of each element among equal values, in order."""
    order = np.argsort(idx, kind="stable")
    srt = idx[order]
    n = srt.size
    starts = np.flatnonzero(np.r_[True, srt[1:] != srt[:-1]])
    lengths = np.diff(np.r_[starts, n])
    rank_sorted = np.arange(n) - np.repeat(starts, lengths) + 1
    rank = np.empty(n, dtype=np.int64)
    rank[order] = rank_sorted
    return rank


class TowerSketch:
    def __init__(self, config=None):
        self.config = config or TowerConfig()
        self.arrays = [np.zeros(w, dtype=_dtype_for(b)) for w, b in self.config.levels]

    def copy(self):
        out = TowerSketch(self.config)
        for a, b in zip(out.arrays, self.arrays):
            a[:] = b
        return out

    def clear(self):
        for a in self.arrays:
            a[:] = 0

    def _slots(self, f):
        return [mix64(f, s) % w for (w, _), s in zip(self.config.levels, self.config.seeds)]

    def update(self, f):
        for arr, j, cap in zip(self.arrays, self._slots(f), self.config.caps):
            if arr[j] < cap:
                arr[j] += 1

    def query(self, f):
        """Minimum over non-saturated mapped counters, or :class:`Saturated`."""
        best = None
        for arr, j, cap in zip(self.arrays, self._slots(f), self.config.caps):
            v = int(arr[j])
            if v < cap and (best is None or v < best):
                best = v
        if best is None:
            return Saturated(max(self.config.caps))
        return best

    def _indices(self, flows):
        flows = np.asarray(flows, dtype=np.uint64)
        return [(mix64_array(flows, s) % np.uint64(w)).astype(np.int64)
                for (w, _), s in zip(self.config.levels, self.config.seeds)]

    def query_many(self, flows):
        """Vectorised query; saturated flows report the largest cap as a floor."""
        est = np.full(np.shape(flows), _INF, dtype=np.int64)
        for arr, idx, cap in zip(self.arrays, self._indices(flows), self.config.caps):
            v = arr[idx].astype(np.int64)
            est = np.minimum(est, np.where(v < cap, v, _INF))
        return np.where(est == _INF, max(self.config.caps), est)

    def insert_many(self, flows):
        """Insert a packet sequence; returns each packet's post-insertion estimate.

        Identical to calling :meth:`update` then :meth:`query` per packet in
        order.  Fully saturated packets are reported as a huge sentinel so they
        compare above any threshold.
        """
        flows = np.asarray(flows, dtype=np.uint64)
        est = np.full(flows.shape, _INF, dtype=np.int64)
        if flows.size == 0:
            return est
        for arr, idx, cap in zip(self.arrays, self._indices(flows), self.config.caps):
            base = arr[idx].astype(np.int64)
            after = np.minimum(base + _running_rank(idx), cap)
            est = np.minimum(est, np.where(after < cap, after, _INF))
            # last occurrence per slot carries its final value
            uniq, last = np.unique(idx[::-1], return_index=True)
            arr[uniq] = after[::-1][last].astype(arr.dtype)
        return est

    def largest_array(self):
        return max(self.arrays, key=len)

    def to_dict(self):
        return {
            "format": "towersketch",
            "version": 1,
            "levels": [list(lv) for lv in self.config.levels],
            "seeds": list(self.config.seeds),
            "arrays": [a.tolist() for a in self.arrays],
        }

    @classmethod
    def from_dict(cls, data):
        if data.get("format") != "towersketch" or data.get("version") != 1:
            raise ValueError("not a version-1 towersketch dump")
        out = cls(TowerConfig(levels=tuple(map(tuple, data["levels"])), seeds=tuple(data["seeds"])))
        for a, vals in zip(out.arrays, data["arrays"]):
            a[:] = np.array(vals, dtype=a.dtype)
        return out


def tower_update(t, f):
    t.update(f)


def tower_query(t, f):
    return t.query(f)


def classify(t, f, th, sample_seed):
    """Hierarchy of ``f`` from its (post-insertion) size estimate."""
    return classify_size(t.query(f), f, th, sample_seed)
