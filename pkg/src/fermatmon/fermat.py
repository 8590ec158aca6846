"""FermatSketch: an invertible counting sketch over a prime field.

Each of ``d`` bucket arrays holds ``m`` buckets of ``(count, idsum)``; a flow
``f`` seen ``n`` times adds ``n`` to the count and ``n * f (mod p)`` to the
idsum of one bucket per array.  Because the sketch is linear, sketches built
with the same parameters can be added and subtracted, and a bucket that holds a
single flow gives its ID back as ``idsum * count^(p-2) mod p``.
"""
from collections import deque
from dataclasses import dataclass, field, replace
import json
import math
import struct

import numpy as np

from .hashing import derive_seeds, mix64, mix64_array, MASK64

MERSENNE61 = (1 << 61) - 1

# idsums live in uint64 and two residues must add without wrapping
MAX_PRIME = 1 << 63


class FermatError(Exception):
    pass


class NoInverse(FermatError, ZeroDivisionError):
    pass


class IdOutOfRange(FermatError, ValueError):
    pass


class IncompatibleSketches(FermatError, ValueError):
    pass


class FoldIndivisible(FermatError, ValueError):
    pass


class Saturated(int):
    """An estimate that hit the capacity of its structure.

    Behaves as the integer floor it carries, so arithmetic keeps working, but
    callers can tell a lower bound apart from a real estimate with
    ``isinstance(x, Saturated)``.
    """

    saturated = True

    def __repr__(self):
        return f"Saturated(>={int(self)})"


_MR_BASES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


def is_prime(n):
    """Deterministic Miller-Rabin, exact for n < 3.3e24."""
    if n < 2:
        return False
    for q in _MR_BASES:
        if n % q == 0:
            return n == q
    d, r = n - 1, 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for a in _MR_BASES:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def mod_inverse(a, p):
    """Inverse of ``a`` modulo prime ``p`` via Fermat's little theorem."""
    if a % p == 0:
        raise NoInverse(f"{a} has no inverse modulo {p}")
    return pow(a % p, p - 2, p)


@dataclass(frozen=True)
class FermatParams:
    d: int = 3
    m: int = 1024
    p: int = MERSENNE61
    seeds: tuple = None
    fingerprint_bits: int = 0
    fingerprint_seed: int = 0

    def __post_init__(self):
        if self.seeds is None:
            object.__setattr__(self, "seeds", tuple(derive_seeds(0, self.d)))
        else:
            object.__setattr__(self, "seeds", tuple(int(s) & MASK64 for s in self.seeds))
        if self.d < 2:
            raise ValueError("need at least two bucket arrays")
        if self.m < 1:
            raise ValueError("need at least one bucket per array")
        if len(self.seeds) != self.d or len(set(self.seeds)) != self.d:
            raise ValueError("need d pairwise distinct seeds")
        if self.fingerprint_bits < 0:
            raise ValueError("fingerprint_bits must be >= 0")
        if not 2 < self.p < MAX_PRIME or not is_prime(self.p):
            raise ValueError(f"p={self.p} is not a prime in (2, 2^63)")
        if self.max_flow_id < 1:
            raise ValueError("prime too small for the fingerprint width")

    @classmethod
    def from_seed(cls, seed, d=3, m=1024, p=MERSENNE61, fingerprint_bits=0):
        seeds = derive_seeds(seed, d + 1, salt=0xFE)
        return cls(d=d, m=m, p=p, seeds=tuple(seeds[:d]),
                   fingerprint_bits=fingerprint_bits, fingerprint_seed=seeds[d])

    @property
    def max_flow_id(self):
        """Largest admissible flow ID (its extended ID must stay below p)."""
        # (f + 1) * 2^w <= p  <=>  f * 2^w + 2^w - 1 < p
        return (self.p >> self.fingerprint_bits) - 1

    def with_m(self, m):
        return replace(self, m=m)

    def fingerprint(self, f):
        return mix64(f, self.fingerprint_seed) & ((1 << self.fingerprint_bits) - 1)

    def extend(self, f):
        """Encoded ID: the flow ID with its fingerprint appended."""
        w = self.fingerprint_bits
        if w == 0:
            return f
        return (f << w) | self.fingerprint(f)

    def index(self, i, f):
        return mix64(f, self.seeds[i]) % self.m

    def indices(self, flows):
        """``(d, n)`` array of bucket indices for an array of flow IDs."""
        flows = np.asarray(flows, dtype=np.uint64)
        m = np.uint64(self.m)
        return np.stack([(mix64_array(flows, s) % m).astype(np.int64) for s in self.seeds])


class Flowset(dict):
    """Signed multiset of flows: ``flow_id -> frequency``, zeros never stored."""

    def add(self, f, n):
        total = self.get(f, 0) + n
        if total:
            self[f] = total
        else:
            self.pop(f, None)
        return total

    def total(self):
        return sum(self.values())


@dataclass
class DecodeOutcome:
    success: bool
    flowset: Flowset
    residual_nonzero_buckets: int
    blocklist_events: list = field(default_factory=list)
    pops: int = 0

    @property
    def status(self):
        return "success" if self.success else "failure"


class FermatSketch:
    def __init__(self, params):
        self.params = params
        self.counts = np.zeros((params.d, params.m), dtype=np.int64)
        self.idsums = np.zeros((params.d, params.m), dtype=np.uint64)

    @classmethod
    def create(cls, m, d=3, seed=0, **kw):
        return cls(FermatParams.from_seed(seed, d=d, m=m, **kw))

    @property
    def d(self):
        return self.params.d

    @property
    def m(self):
        return self.params.m

    def copy(self):
        out = FermatSketch(self.params)
        out.counts[:] = self.counts
        out.idsums[:] = self.idsums
        return out

    def __eq__(self, other):
        return (isinstance(other, FermatSketch) and self.params == other.params
                and np.array_equal(self.counts, other.counts)
                and np.array_equal(self.idsums, other.idsums))

    def __repr__(self):
        return f"FermatSketch(d={self.d}, m={self.m}, nonzero={int(self.nonzero_mask().sum())})"

    def _encoded(self, f):
        f = int(f)
        if f < 0 or f > self.params.max_flow_id:
            raise IdOutOfRange(f"flow id {f} outside [0, {self.params.max_flow_id}]")
        return self.params.extend(f)

    def update(self, f, n=1):
        """Add ``n`` packets of flow ``f`` (negative ``n`` deletes)."""
        n = int(n)
        if n == 0:
            return
        p = self.params.p
        term = (n % p) * self._encoded(f) % p
        for i in range(self.d):
            j = self.params.index(i, f)
            self.counts[i, j] += n
            self.idsums[i, j] = (int(self.idsums[i, j]) + term) % p

    def insert(self, f):
        self.update(f, 1)

    def update_many(self, flows, counts=None):
        """Bulk :meth:`update`; equal to applying each ``(f, n)`` in turn."""
        flows = np.asarray(flows, dtype=np.uint64).ravel()
        if counts is None:
            counts = np.ones(flows.shape, dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64).ravel()
        keep = counts != 0
        flows, counts = flows[keep], counts[keep]
        if flows.size == 0:
            return
        prm = self.params
        if int(flows.max()) > prm.max_flow_id:
            raise IdOutOfRange(f"flow id {int(flows.max())} exceeds {prm.max_flow_id}")
        p = prm.p
        w = prm.fingerprint_bits
        if w:
            fp = mix64_array(flows, prm.fingerprint_seed) & np.uint64((1 << w) - 1)
            ext = (flows << np.uint64(w)) | fp
        else:
            ext = flows
        mag = np.abs(counts).astype(np.uint64)
        if int(ext.max()) < (1 << 32) and int(mag.max()) < (1 << 31):
            terms = (mag * ext) % np.uint64(p)
        else:
            terms = np.array([a * b % p for a, b in zip(mag.tolist(), ext.tolist())],
                             dtype=np.uint64)
        neg = counts < 0
        terms[neg] = (np.uint64(p) - terms[neg]) % np.uint64(p)
        lo = terms & np.uint64(0xFFFFFFFF)
        hi = terms >> np.uint64(32)
        idx = prm.indices(flows)
        for i in range(self.d):
            np.add.at(self.counts[i], idx[i], counts)
            lo_sum = np.zeros(self.m, dtype=np.uint64)
            hi_sum = np.zeros(self.m, dtype=np.uint64)
            np.add.at(lo_sum, idx[i], lo)
            np.add.at(hi_sum, idx[i], hi)
            touched = np.flatnonzero(lo_sum | hi_sum)
            if touched.size:
                merged = (self.idsums[i, touched].astype(object)
                          + (hi_sum[touched].astype(object) << 32)
                          + lo_sum[touched].astype(object)) % p
                self.idsums[i, touched] = merged.astype(np.uint64)

    def nonzero_mask(self):
        return (self.counts != 0) | (self.idsums != 0)

    def is_zero(self):
        return not self.nonzero_mask().any()

    def linear_count(self, i=0):
        """Distinct-flow estimate from the empty buckets of array ``i``."""
        return linear_count(self.nonzero_mask()[i] == 0, self.m, zeros_given=True)

    def __add__(self, other):
        return combine(self, other, +1)

    def __sub__(self, other):
        return combine(self, other, -1)

    def decode(self):
        return decode(self)

    # -- serialization -----------------------------------------------------

    def to_dict(self):
        prm = self.params
        return {
            "format": "fermatsketch",
            "version": 1,
            "d": prm.d,
            "m": prm.m,
            "p": prm.p,
            "seeds": list(prm.seeds),
            "fingerprint_bits": prm.fingerprint_bits,
            "fingerprint_seed": prm.fingerprint_seed,
            "counts": self.counts.tolist(),
            "idsums": self.idsums.tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        if data.get("format") != "fermatsketch" or data.get("version") != 1:
            raise ValueError("not a version-1 fermatsketch dump")
        prm = FermatParams(d=data["d"], m=data["m"], p=data["p"], seeds=tuple(data["seeds"]),
                           fingerprint_bits=data["fingerprint_bits"],
                           fingerprint_seed=data["fingerprint_seed"])
        out = cls(prm)
        out.counts[:] = np.array(data["counts"], dtype=np.int64)
        out.idsums[:] = np.array(data["idsums"], dtype=np.uint64)
        if (out.idsums >= np.uint64(prm.p)).any():
            raise ValueError("idsum outside [0, p)")
        return out

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    _MAGIC = b"FSK\x01"
    _HEADER = struct.Struct("<4sIIQIQ")

    def to_bytes(self):
        prm = self.params
        head = self._HEADER.pack(self._MAGIC, prm.d, prm.m, prm.p,
                                 prm.fingerprint_bits, prm.fingerprint_seed)
        seeds = struct.pack(f"<{prm.d}Q", *prm.seeds)
        return (head + seeds + self.counts.astype("<i8").tobytes()
                + self.idsums.astype("<u8").tobytes())

    @classmethod
    def from_bytes(cls, blob):
        magic, d, m, p, w, fseed = cls._HEADER.unpack_from(blob)
        if magic != cls._MAGIC:
            raise ValueError("not a version-1 fermatsketch dump")
        off = cls._HEADER.size
        seeds = struct.unpack_from(f"<{d}Q", blob, off)
        off += 8 * d
        prm = FermatParams(d=d, m=m, p=p, seeds=seeds, fingerprint_bits=w, fingerprint_seed=fseed)
        out = cls(prm)
        n = d * m
        out.counts[:] = np.frombuffer(blob, dtype="<i8", count=n, offset=off).reshape(d, m)
        out.idsums[:] = np.frombuffer(blob, dtype="<u8", count=n, offset=off + 8 * n).reshape(d, m)
        return out


def combine(a, b, sign=+1):
    """Bucketwise ``a + sign * b``."""
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    if a.params != b.params:
        raise IncompatibleSketches("sketches differ in d, m, p, seeds or fingerprint setup")
    p = np.uint64(a.params.p)
    out = FermatSketch(a.params)
    if sign > 0:
        out.counts[:] = a.counts + b.counts
        s = a.idsums + b.idsums
    else:
        out.counts[:] = a.counts - b.counts
        s = a.idsums + (p - b.idsums)
    out.idsums[:] = s % p
    return out


def fold(s, k):
    """Shrink to ``m / k`` buckets per array; the folded index is ``h mod (m/k)``."""
    if k < 1 or s.m % k:
        raise FoldIndivisible(f"{k} does not divide m={s.m}")
    if k == 1:
        return s.copy()
    m2 = s.m // k
    out = FermatSketch(s.params.with_m(m2))
    out.counts[:] = s.counts.reshape(s.d, k, m2).sum(axis=1)
    parts = s.idsums.reshape(s.d, k, m2).astype(object).sum(axis=1) % s.params.p
    out.idsums[:] = parts.astype(np.uint64)
    return out


def is_pure(s, i, j, blocklist=()):
    """Return ``(flow, frequency)`` if bucket ``(i, j)`` looks pure, else ``None``."""
    prm = s.params
    p = prm.p
    count = int(s.counts[i, j])
    idsum = int(s.idsums[i, j])
    c = count % p
    if c == 0:
        return None
    ext = idsum * mod_inverse(c, p) % p
    w = prm.fingerprint_bits
    f = ext >> w
    if w and (ext & ((1 << w) - 1)) != prm.fingerprint(f):
        return None
    if prm.index(i, f) != j:
        return None
    if (f, count) in blocklist or (f, count, i, j) in blocklist:
        return None
    return f, count


def decode(s):
    """Peel the sketch into a :class:`Flowset`; ``s`` itself is left untouched."""
    prm = s.params
    d, m, p = prm.d, prm.m, prm.p
    w = prm.fingerprint_bits
    wmask = (1 << w) - 1
    fseed = prm.fingerprint_seed
    seeds = prm.seeds
    counts = s.counts.tolist()
    ids = s.idsums.tolist()

    queue = deque((i, j) for i in range(d) for j in range(m) if counts[i][j] or ids[i][j])
    flowset = Flowset()
    blocklist = set()
    origin = {}
    events = []
    inverses = {}
    cap = 4 * d * m
    idle = 0
    pops = 0

    while queue:
        i, j = queue.popleft()
        pops += 1
        idle += 1
        if idle > cap:
            break
        count = counts[i][j]
        c = count % p
        if c == 0:
            continue
        inv = inverses.get(c)
        if inv is None:
            inv = inverses[c] = pow(c, p - 2, p)
        ext = ids[i][j] * inv % p
        f = ext >> w
        if w and (ext & wmask) != mix64(f, fseed) & wmask:
            continue
        if mix64(f, seeds[i]) % m != j:
            continue
        if (f, count, i, j) in blocklist:
            continue
        # pure: delete (f, count) from every mapped bucket
        idsum = ids[i][j]
        for i2 in range(d):
            j2 = j if i2 == i else mix64(f, seeds[i2]) % m
            counts[i2][j2] -= count
            v = ids[i2][j2] - idsum
            ids[i2][j2] = v + p if v < 0 else v
            if i2 != i and (counts[i2][j2] or ids[i2][j2]):
                queue.append((i2, j2))
        idle = 0
        # a flow cancelled to zero means one of its two extractions was a
        # false positive; pin each doublet to the bucket that produced it so
        # neither bucket repeats it, while the flow stays extractable elsewhere
        first = origin.get(f)
        origin[f] = (count, i, j)
        if flowset.add(f, count) == 0:
            events.append((f, -count))
            blocklist.add((f, count, i, j))
            if first is not None:
                blocklist.add((f,) + first)

    residual = sum(1 for i in range(d) for j in range(m) if counts[i][j] or ids[i][j])
    return DecodeOutcome(residual == 0, flowset, residual, events, pops)


def linear_count(array, total=None, zeros_given=False):
    """Linear-counting estimate ``-total * ln(z / total)``.

    ``array`` is a sequence of counters (zeros are empty cells) or, with
    ``zeros_given``, a boolean mask of empty cells.  A full array yields a
    :class:`Saturated` floor of ``total * ln(total)``.
    """
    a = np.asarray(array)
    if total is None:
        total = a.size
    if total < 1:
        raise ValueError("total must be >= 1")
    z = int(np.count_nonzero(a)) if zeros_given else int(np.count_nonzero(a == 0))
    if z == 0:
        return Saturated(round(total * math.log(total)))
    return round(-total * math.log(z / total))
