"""Deterministic desk-scale network simulator with ground truth.

Flows enter at one edge switch and leave at another.  Each epoch every flow of
the current workload sends its packets (shuffled together), victim packets
are dropped in transit, and the collected sketch groups go to the controller.
"""
import csv
from dataclasses import dataclass, field
import json

import numpy as np

from .controller import (
    ControllerState,
    analyze_epoch,
    epoch_record,
    shift_attention,
)
from .edge import EdgeSwitch
from .hashing import derive_seeds, mix64_array
from .tower import Hierarchy, _running_rank, sampled_mask

ID_BITS = 32

# Coarse (packets, cumulative probability) shapes of the four usual
# data-center size distributions, scaled down to desk size.
PROFILES = {
    "DCTCP": ((1, .10), (2, .20), (4, .30), (8, .40), (16, .53), (64, .60), (256, .70),
              (512, .80), (1024, .90), (2048, .97), (4096, 1.0)),
    "HADOOP": ((1, .50), (2, .60), (4, .70), (8, .80), (32, .90), (128, .95), (512, .98),
               (2048, 1.0)),
    "VL2": ((1, .50), (2, .65), (3, .75), (8, .85), (64, .95), (1024, .99), (8192, 1.0)),
    "CACHE": ((1, .30), (3, .50), (10, .65), (50, .80), (200, .90), (1000, .97), (5000, 1.0)),
}


@dataclass(frozen=True)
class WorkloadSpec:
    """``dist`` is ``"zipf"``, ``"powerlaw"``, a key of :data:`PROFILES`, or ``"trace"``.

    Zipf draws ``total_packets`` over ``n_flows`` ranks with weight
    ``rank ** -zipf_alpha`` (plus ``min_size`` packets per flow); ranks that
    draw nothing are not flows.  Powerlaw draws each size independently with
    ``P(size >= s) = (s / min_size) ** (1 - zipf_alpha)``, capped at
    ``max_size``.  Profiles draw each flow's size from the table.  Traces
    replay ``flow_id,packets[,ingress,egress]`` rows.
    """

    n_flows: int = 10_000
    dist: str = "zipf"
    zipf_alpha: float = 1.0
    total_packets: int = None
    min_size: int = 0
    max_size: int = 1 << 16
    trace_path: str = None
    n_switches: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.dist != "trace":
            if self.n_flows < 1:
                raise ValueError("n_flows must be positive")
            if self.n_flows >= (1 << ID_BITS) - 1:
                raise ValueError("n_flows exceeds the flow-ID space")
        if self.dist == "zipf" and self.total_packets is not None \
                and self.total_packets < self.n_flows * max(self.min_size, 1) and self.min_size:
            raise ValueError("total_packets must cover min_size for every flow")
        if self.dist == "powerlaw" and self.zipf_alpha <= 1.0:
            raise ValueError("powerlaw sizes need zipf_alpha > 1")
        if self.dist not in ("zipf", "powerlaw", "trace") and self.dist.upper() not in PROFILES:
            raise ValueError(f"unknown distribution {self.dist!r}")
        if self.n_switches < 2:
            raise ValueError("need at least two edge switches")


@dataclass
class Workload:
    flows: np.ndarray     # uint64 IDs
    sizes: np.ndarray     # packets per epoch
    ingress: np.ndarray
    egress: np.ndarray
    n_switches: int

    @property
    def n_flows(self):
        return self.flows.size

    @property
    def total_packets(self):
        return int(self.sizes.sum())


@dataclass(frozen=True)
class LossSpec:
    """Which flows lose packets, and how many.

    ``victims`` (a count) overrides ``victim_ratio``.  ``failed_route`` is an
    ``(ingress, egress)`` pair whose packets are all dropped from position
    ``fail_at`` (fraction of the epoch) on.
    """

    victim_ratio: float = 0.0
    loss_rate: float = 0.0
    victims: int = None
    failed_route: tuple = None
    fail_at: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ValueError("loss_rate must lie in [0, 1]")
        if not 0.0 <= self.victim_ratio <= 1.0:
            raise ValueError("victim_ratio must lie in [0, 1]")


@dataclass
class GroundTruth:
    workload: Workload
    lost: np.ndarray           # lost packets per flow (aligned with workload.flows)
    lost_visible: np.ndarray   # lost packets whose tag is not NONSAMPLED_LL
    delivered: np.ndarray
    epoch: int = 0

    def _as_dict(self, arr):
        nz = np.flatnonzero(arr)
        return {int(f): int(n) for f, n in zip(self.workload.flows[nz], arr[nz])}

    def losses(self):
        return self._as_dict(self.lost)

    def visible_losses(self):
        """Per-flow losses the delta encoders can see (tag HH, HL or sampled LL)."""
        return self._as_dict(self.lost_visible)

    def sizes(self):
        return {int(f): int(s) for f, s in zip(self.workload.flows, self.workload.sizes)}


def _flow_ids(rng, n):
    return (rng.choice((1 << ID_BITS) - 1, n, replace=False) + 1).astype(np.uint64)


def _routes(rng, n, k):
    ing = rng.integers(0, k, n)
    egr = (ing + rng.integers(1, k, n)) % k
    return ing, egr


def _profile_sizes(rng, table, n):
    sizes = np.array([s for s, _ in table], dtype=float)
    cum = np.array([c for _, c in table])
    u = rng.random(n)
    k = np.minimum(np.searchsorted(cum, u, side="right"), len(cum) - 1)
    lo = np.where(k > 0, sizes[k - 1], 1.0)
    hi = sizes[k]
    # log-uniform over (lo, hi] inside each step of the table
    u = 1.0 - rng.random(n)
    out = np.ceil(np.exp(np.log(lo) + u * (np.log(hi) - np.log(lo))) - 1e-9)
    return np.clip(out, 1, hi).astype(np.int64)


def zipf_mass(n, alpha=1.0):
    w = np.arange(1, n + 1, dtype=float) ** -alpha
    return w / w.sum()


def read_trace(path):
    flows, sizes, ing, egr = [], [], [], []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#") or row[0] == "flow_id":
                continue
            flows.append(int(row[0]))
            sizes.append(int(row[1]))
            if len(row) >= 4:
                ing.append(int(row[2]))
                egr.append(int(row[3]))
    return flows, sizes, (ing if len(ing) == len(flows) else None), \
        (egr if len(egr) == len(flows) else None)


def write_trace(path, workload):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["flow_id", "packets", "ingress", "egress"])
        for row in zip(workload.flows, workload.sizes, workload.ingress, workload.egress):
            w.writerow([int(x) for x in row])


def generate(spec):
    """Flows, per-epoch sizes and routes; a pure function of ``spec``."""
    rng = np.random.default_rng([spec.seed, 0x51])
    k = spec.n_switches
    if spec.dist == "trace":
        flows, sizes, ing, egr = read_trace(spec.trace_path)
        flows = np.array(flows, dtype=np.uint64)
        sizes = np.array(sizes, dtype=np.int64)
        if ing is None:
            ing, egr = _routes(rng, flows.size, k)
        return Workload(flows, sizes, np.asarray(ing), np.asarray(egr), k)
    if spec.dist == "zipf":
        total = spec.total_packets or 10 * spec.n_flows
        extra = total - spec.min_size * spec.n_flows
        sizes = spec.min_size + rng.multinomial(extra, zipf_mass(spec.n_flows, spec.zipf_alpha))
        sizes = sizes[sizes > 0].astype(np.int64)
    elif spec.dist == "powerlaw":
        u = 1.0 - rng.random(spec.n_flows)
        raw = max(spec.min_size, 1) * u ** (-1.0 / (spec.zipf_alpha - 1.0))
        sizes = np.minimum(np.floor(raw), spec.max_size).astype(np.int64)
    else:
        sizes = _profile_sizes(rng, PROFILES[spec.dist.upper()], spec.n_flows)
    flows = _flow_ids(rng, sizes.size)
    ing, egr = _routes(rng, sizes.size, k)
    return Workload(flows, sizes, ing, egr, k)


def packet_stream(workload, seed, epoch=0):
    """Indices into ``workload.flows``, one per packet, in arrival order."""
    rng = np.random.default_rng([seed, epoch, 0x57])
    return rng.permutation(np.repeat(np.arange(workload.n_flows), workload.sizes))


def pick_victims(workload, loss):
    n = workload.n_flows
    k = loss.victims if loss.victims is not None else int(round(loss.victim_ratio * n))
    k = min(k, n)
    rng = np.random.default_rng([loss.seed, 0x71])
    mask = np.zeros(n, dtype=bool)
    mask[rng.permutation(n)[:k]] = True
    return mask


def drop_mask(workload, stream, loss, epoch, victims=None):
    """Per-packet drop verdict keyed on (flow, packet index, epoch)."""
    drop = np.zeros(stream.size, dtype=bool)
    if victims is None:
        victims = pick_victims(workload, loss)
    if loss.loss_rate > 0 and victims.any():
        idx = _running_rank(stream)
        key = (workload.flows[stream] << np.uint64(32)) | idx.astype(np.uint64)
        seed = derive_seeds(loss.seed, 1, salt=0x1000 + epoch)[0]
        u = (mix64_array(key, seed) >> np.uint64(11)).astype(float) / float(1 << 53)
        drop |= victims[stream] & (u < loss.loss_rate)
    if loss.failed_route is not None:
        i, e = loss.failed_route
        on = (workload.ingress[stream] == i) & (workload.egress[stream] == e)
        drop |= on & (np.arange(stream.size) >= int(loss.fail_at * stream.size))
    return drop


class Network:
    """Edge switches of one deployment, all starting from the same config."""

    def __init__(self, deployment, n_switches=4, configs=None):
        self.dep = deployment
        self.switches = [EdgeSwitch(i, deployment, (configs or {}).get(i)) for i in range(n_switches)]

    def run_epoch(self, workload, loss=None, epoch=0, seed=0, victims=None):
        """Push one epoch of traffic and collect every switch's frozen group.

        All in-flight packets are delivered before rotation.  Returns
        ``(groups, truth)``.
        """
        if workload.n_switches != len(self.switches):
            raise ValueError("workload and network disagree on the switch count")
        stream = packet_stream(workload, seed, epoch)
        loss = loss or LossSpec()
        drop = drop_mask(workload, stream, loss, epoch, victims)
        tags = np.empty(stream.size, dtype=np.uint8)
        bits = {}
        ing = workload.ingress[stream]
        for sw in self.switches:
            sel = np.flatnonzero(ing == sw.id)
            tags[sel], bits[sw.id] = sw.ingress_batch(workload.flows[stream[sel]])
        egr = workload.egress[stream]
        for sw in self.switches:
            sel = np.flatnonzero((egr == sw.id) & ~drop)
            # each packet carries its ingress switch's epoch bit
            for b in sorted(set(bits.values())):
                part = sel[np.isin(ing[sel], [k for k, v in bits.items() if v == b])]
                sw.egress_batch(workload.flows[stream[part]], tags[part], b)
        n = workload.n_flows
        lost = np.bincount(stream[drop], minlength=n)
        vis = drop & (tags != Hierarchy.NONSAMPLED_LL)
        truth = GroundTruth(workload, lost, np.bincount(stream[vis], minlength=n),
                            workload.sizes - lost, epoch)
        groups = {sw.id: sw.rotate_epoch() for sw in self.switches}
        return groups, truth

    def stage(self, configs):
        for sw in self.switches:
            cfg = configs[sw.id]
            sw.stage_reconfig(cfg.layout, cfg.thresholds)
            sw.apply_staged()


class Controller:
    """Collects each epoch, runs the analysis and (optionally) reconfigures."""

    def __init__(self, deployment, switch_ids, adaptive=True, with_fsd=True, **state_kw):
        self.dep = deployment
        self.adaptive = adaptive
        self.with_fsd = with_fsd
        self.state = ControllerState.initial(deployment, switch_ids, **state_kw)
        self.history = []

    def configs(self):
        return self.state.configs()

    def collect(self, epoch, groups):
        analysis = analyze_epoch(groups, self.dep.sample_seed, with_fsd=self.with_fsd)
        notes = []
        if self.adaptive:
            self.state, notes = shift_attention(analysis, self.state, self.dep)
        rec = epoch_record(epoch, analysis, self.state, notes, self.dep)
        self.history.append(rec)
        return analysis, rec


def run_window(phases, network, controller, seed=0, log=None, on_epoch=None):
    """Run ``phases``: a list of ``(workload, loss, n_epochs)``.

    Each epoch's collected groups go to the controller, whose new configs are
    staged so they take effect from the next epoch.  Returns the list of
    per-epoch records; ``log`` (a path) also receives them as JSON lines.
    """
    network.stage(controller.configs())
    records = []
    epoch = 0
    out = open(log, "w") if log else None
    try:
        for phase, (workload, loss, n_epochs) in enumerate(phases):
            victims = pick_victims(workload, loss or LossSpec())
            for _ in range(n_epochs):
                groups, truth = network.run_epoch(workload, loss, epoch, seed, victims)
                analysis, rec = controller.collect(epoch, groups)
                rec["phase"] = phase
                rec["truth"] = {"flows": workload.n_flows,
                                "victims": int(np.count_nonzero(truth.lost)),
                                "visible_victims": int(np.count_nonzero(truth.lost_visible))}
                network.stage(controller.configs())
                records.append(rec)
                if out:
                    out.write(json.dumps(rec, sort_keys=True) + "\n")
                if on_epoch:
                    on_epoch(epoch, groups, truth, analysis, rec)
                epoch += 1
    finally:
        if out:
            out.close()
    return records


@dataclass
class DiffMetrics:
    exact: bool
    precision: float
    recall: float
    f1: float
    count_error: int
    missing: set = field(default_factory=set)
    spurious: set = field(default_factory=set)


def prf(reported, truth):
    reported, truth = set(reported), set(truth)
    tp = len(reported & truth)
    precision = tp / len(reported) if reported else 1.0
    recall = tp / len(truth) if truth else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def oracle_diff(truth, report, sample_rate=1.0, sample_seed=None, tags_known=True):
    """Compare a loss report with ground truth.

    With ``tags_known`` the truth is the tag-aware visible loss (what the data
    plane could record).  Otherwise non-sampled victims are removed by
    recomputing the shared sampling hash, for callers without packet tags.
    """
    if tags_known:
        want = truth.visible_losses()
    else:
        want = truth.losses()
        if sample_rate < 1.0:
            flows = np.fromiter(want, dtype=np.uint64, count=len(want))
            keep = sampled_mask(flows, sample_rate, sample_seed)
            want = {int(f): want[int(f)] for f in flows[keep]}
    got = {int(f): int(n) for f, n in report.items()}
    p, r, f1 = prf(got, want)
    keys = set(got) | set(want)
    err = sum(abs(got.get(f, 0) - want.get(f, 0)) for f in keys)
    return DiffMetrics(got == want, p, r, f1, err,
                       set(want) - set(got), set(got) - set(want))
