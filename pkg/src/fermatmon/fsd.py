"""Flow-size distribution from counter arrays, entropy, and threshold choice.

Low sizes come from an MRAC-style EM over the smallest counter array: every
counter value is explained as the sum of at most three colliding flows, and EM
alternates between splitting counter values by the current distribution and
re-estimating the distribution from the split.
"""
import math

import numpy as np

EM_MAX_ITER = 50
EM_TOL = 1e-4
MAX_PARTS = 3

_partition_cache = {}


def _partitions(vmax):
    """All partitions of 1..vmax into at most three parts, as flat arrays.

    Returns ``(value, a, b, c, sym)`` with ``a >= b >= c >= 0`` (0 = unused
    part) and ``sym`` the product of multiplicity factorials.
    """
    hit = _partition_cache.get(vmax)
    if hit is not None:
        return hit
    vals, pa, pb, pc = [], [], [], []
    for v in range(1, vmax + 1):
        for a in range(v, 0, -1):
            rest = v - a
            if rest == 0:
                vals.append(v); pa.append(a); pb.append(0); pc.append(0)
                continue
            for b in range(min(a, rest), 0, -1):
                c = rest - b
                if c > b:
                    break
                vals.append(v); pa.append(a); pb.append(b); pc.append(c)
    vals, pa, pb, pc = (np.array(x, dtype=np.int64) for x in (vals, pa, pb, pc))
    sym = np.ones(vals.size)
    three_eq = (pa == pb) & (pb == pc) & (pc > 0)
    two_eq = ((pa == pb) & (pb > 0)) | ((pb == pc) & (pc > 0))
    sym[two_eq] = 2.0
    sym[three_eq] = 6.0
    out = (vals, pa, pb, pc, sym)
    _partition_cache[vmax] = out
    return out


def mrac(counters, vmax=None, max_iter=EM_MAX_ITER, tol=EM_TOL):
    """EM estimate of flow counts by size from one counter array.

    Counters above ``vmax`` (e.g. saturated ones) are ignored.  Returns a float
    array ``n`` where ``n[s]`` is the estimated number of flows of size ``s``.
    """
    counters = np.asarray(counters, dtype=np.int64)
    w = counters.size
    if vmax is None:
        vmax = int(counters.max(initial=0))
    hist = np.bincount(counters[(counters > 0) & (counters <= vmax)], minlength=vmax + 1)
    n = hist.astype(float)
    if vmax == 0 or n.sum() == 0:
        return n
    vals, pa, pb, pc, sym = _partitions(vmax)
    keep = hist[vals] > 0
    vals, pa, pb, pc, sym = vals[keep], pa[keep], pb[keep], pc[keep], sym[keep]
    y = hist[vals].astype(float)
    for _ in range(max_iter):
        total = n.sum()
        lam = total / w
        rate = np.r_[1.0, lam * n[1:] / total]  # rate[0] = 1 stands for "no part"
        wt = rate[pa] * rate[pb] * rate[pc] / sym
        norm = np.bincount(vals, weights=wt, minlength=vmax + 1)[vals]
        share = np.divide(y * wt, norm, out=np.zeros_like(wt), where=norm > 0)
        new = np.zeros_like(n)
        for part in (pa, pb, pc):
            used = part > 0
            new += np.bincount(part[used], weights=share[used], minlength=vmax + 1)
        change = np.abs(new - n).sum() / max(new.sum(), 1.0)
        n = new
        if change < tol:
            break
    return n


def estimate_fsd(tower, hh_sizes=()):
    """Flow-size histogram ``{size: flows}`` for one switch.

    The first array covers sizes below its saturation value via :func:`mrac`.
    Each higher array covers ``[cap_{i-1}, cap_i)``: the number of such flows
    is taken from the saturated counters of the array below, their sizes from
    the largest counters of this array minus the mean background load.  Sizes
    at or above the last cap come from ``hh_sizes`` (sizes decoded from the
    HH encoder).
    """
    caps = tower.config.caps
    fsd = {}
    first = tower.arrays[0].astype(np.int64)
    n = mrac(first, vmax=caps[0] - 1)
    for s in np.flatnonzero(n > 1e-9):
        fsd[int(s)] = float(n[s])
    for lvl in range(1, len(caps)):
        below = tower.arrays[lvl - 1].astype(np.int64)
        n_big = int(np.count_nonzero(below >= caps[lvl - 1]))
        if n_big == 0:
            continue
        arr = tower.arrays[lvl].astype(np.int64)
        quiet = arr[arr < caps[lvl - 1]]
        background = float(quiet.mean()) if quiet.size else 0.0
        cand = np.sort(arr[(arr >= caps[lvl - 1]) & (arr < caps[lvl])])[::-1][:n_big]
        for v in cand:
            s = max(int(round(v - background)), caps[lvl - 1])
            fsd[s] = fsd.get(s, 0.0) + 1.0
    for s in hh_sizes:
        if s >= caps[-1]:
            fsd[int(s)] = fsd.get(int(s), 0.0) + 1.0
    return fsd


def exact_fsd(sizes):
    vals, cnt = np.unique(np.asarray(sizes, dtype=np.int64), return_counts=True)
    return {int(v): float(c) for v, c in zip(vals, cnt) if v > 0}


def entropy(fsd):
    """``-sum n_i (i/N) ln(i/N)`` with ``N = sum i n_i``."""
    N = sum(s * c for s, c in fsd.items())
    if N <= 0:
        return 0.0
    return -sum(c * (s / N) * math.log(s / N) for s, c in fsd.items() if c > 0 and s > 0)


def ccdf(fsd, T):
    return sum(c for s, c in fsd.items() if s >= T)


def choose_threshold(fsd, capacity_flows):
    """Smallest ``T`` with at most ``capacity_flows`` flows of size ``>= T``."""
    if not fsd:
        raise ValueError("empty flow-size distribution")
    sizes = sorted(fsd)
    if capacity_flows <= 0:
        return sizes[-1] + 1
    # tail[k] = flows with size >= sizes[k]
    tail = np.cumsum([fsd[s] for s in reversed(sizes)])[::-1]
    # only T = 1 or T = (some size) + 1 can be minimal
    if tail[0] <= capacity_flows:
        return 1
    for k, s in enumerate(sizes):
        rest = tail[k + 1] if k + 1 < len(sizes) else 0.0
        if rest <= capacity_flows:
            return s + 1
    return sizes[-1] + 1


def retarget_threshold(fsd, current, observed, capacity_flows, ceiling=None):
    """Threshold for ``capacity_flows`` after calibrating ``fsd`` to an observation.

    ``observed`` flows were recorded at threshold ``current``; the distribution
    tail is rescaled to match before choosing, which absorbs the gap between
    true sizes and the classifier's overestimates.  With ``ceiling``, the next
    lower threshold wins when its expected count is nearer ``capacity_flows``
    without exceeding ``ceiling`` (coarse size steps can otherwise leave the
    part well under target).
    """
    if not fsd:
        return current
    base = ccdf(fsd, current)
    if base > 0 and observed > 0:
        fsd = {s: c * observed / base for s, c in fsd.items()}
    T = choose_threshold(fsd, capacity_flows)
    if ceiling is not None and T > 1:
        lower = max([1] + [s + 1 for s in fsd if s + 1 < T])
        hi, lo = ccdf(fsd, T), ccdf(fsd, lower)
        if lo <= ceiling and abs(lo - capacity_flows) < abs(hi - capacity_flows):
            T = lower
    return T
