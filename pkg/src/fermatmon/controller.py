"""Central controller: per-epoch analysis, measurement tasks, attention shifting."""
from dataclasses import dataclass, field, replace
from enum import Enum
import math

import numpy as np

from .edge import EncoderLayout, SwitchConfig
from .fermat import DecodeOutcome, Flowset, Saturated, combine, linear_count
from .fsd import ccdf, entropy, estimate_fsd, retarget_threshold
from .tower import ClassifierThresholds, sampled_mask

DELTA_H = 500
DELTA_C = 250


class Mode(str, Enum):
    HEALTHY = "healthy"
    ILL = "ill"


class Provenance(str, Enum):
    SUCCESS = "success"      # exact, from a successful decode
    ESTIMATED = "estimated"  # linear counting on a failed decode
    OVERLOAD = "overload"    # no empty bucket left: value is only a floor
    SKIPPED = "skipped"      # not computed (part absent or analysis aborted)


@dataclass(frozen=True)
class Estimate:
    value: float
    provenance: Provenance

    @property
    def exact(self):
        return self.provenance is Provenance.SUCCESS


def count_estimate(sketch, outcome=None):
    """Flow count of a FermatSketch: exact if decoded, else linear counting.

    The fallback averages the estimate over all arrays, which is steadier than
    a single array at the high loads where decoding fails.
    """
    if sketch is None:
        return Estimate(0, Provenance.SKIPPED)
    if outcome is not None and outcome.success:
        return Estimate(len(outcome.flowset), Provenance.SUCCESS)
    vals = [sketch.linear_count(i) for i in range(sketch.d)]
    if any(isinstance(v, Saturated) for v in vals):
        return Estimate(max(vals), Provenance.OVERLOAD)
    return Estimate(float(np.mean(vals)), Provenance.ESTIMATED)


# -- analysis ---------------------------------------------------------------


@dataclass
class SwitchAnalysis:
    switch_id: object
    config: SwitchConfig
    hh: DecodeOutcome
    hh_count: Estimate
    cardinality: int
    fsd: dict

    @property
    def hh_flowset(self):
        return self.hh.flowset if self.hh.success else None


@dataclass
class LossReport:
    status: str                      # "ok", "partial" (a delta failed) or "aborted"
    losses: Flowset = field(default_factory=Flowset)
    light: set = field(default_factory=set)   # flows only seen by the LL delta
    hl: DecodeOutcome = None
    ll: DecodeOutcome = None
    hl_count: Estimate = Estimate(0, Provenance.SKIPPED)
    ll_count: Estimate = Estimate(0, Provenance.SKIPPED)

    @property
    def hl_ok(self):
        return self.hl is not None and self.hl.success

    @property
    def ll_ok(self):
        return self.ll is None or self.ll.success


@dataclass
class EpochAnalysis:
    switches: dict
    loss: LossReport
    victim_count: Estimate = Estimate(0, Provenance.SKIPPED)
    victim_fsd: dict = field(default_factory=dict)
    epoch_bit: int = 0

    @property
    def hh_ok(self):
        return all(sa.hh.success for sa in self.switches.values())


def flow_size(group, hh_flowset, f):
    """Size estimate of ``f`` at one switch: HH value if decoded there, else the tower."""
    if hh_flowset is not None and f in hh_flowset:
        return group.config.thresholds.T_h - 1 + hh_flowset[f]
    return group.tower.query(f)


def network_flow_size(groups, analyses, f):
    return max(flow_size(g, analyses[sid].hh_flowset, f) for sid, g in groups.items())


def analyze_switch(group, with_fsd=True):
    hh_sketch = group.upstream["hh"]
    hh = hh_sketch.decode()
    th = group.config.thresholds
    fsd = {}
    if with_fsd:
        hh_sizes = [th.T_h - 1 + q for q in hh.flowset.values()] if hh.success else ()
        fsd = estimate_fsd(group.tower, hh_sizes)
    card = linear_count(group.tower.largest_array())
    return SwitchAnalysis(group.switch_id, group.config, hh, count_estimate(hh_sketch, hh),
                          card, fsd)


def _check_same_epoch(groups):
    bits = {g.epoch_bit for g in groups.values()}
    if len(bits) > 1:
        raise ValueError(f"groups come from different epochs: bits {sorted(bits)}")
    return bits.pop() if bits else 0


def _sum(sketches):
    sketches = [s for s in sketches if s is not None]
    if not sketches:
        return None
    out = sketches[0].copy()
    for s in sketches[1:]:
        out = combine(out, s, +1)
    return out


def delta_encoders(groups, analyses):
    """Delta HL and LL encoders (upstream minus downstream, network-wide).

    Each switch's decoded HH flows are folded back into a copy of its upstream
    HL part so that HH packets, which the egress side records as HL, cancel.
    """
    up_hl = []
    for sid, g in groups.items():
        hl = g.upstream["hl"].copy()
        fs = analyses[sid].hh.flowset
        if fs:
            flows = np.fromiter(fs.keys(), dtype=np.uint64, count=len(fs))
            counts = np.fromiter(fs.values(), dtype=np.int64, count=len(fs))
            hl.update_many(flows, counts)
        up_hl.append(hl)
    d_hl = combine(_sum(up_hl), _sum(g.downstream["hl"] for g in groups.values()), -1)
    up_ll = _sum(g.upstream["ll"] for g in groups.values())
    d_ll = None
    if up_ll is not None:
        d_ll = combine(up_ll, _sum(g.downstream["ll"] for g in groups.values()), -1)
    return d_hl, d_ll


def detect_losses(groups, analyses=None):
    """Network-wide loss report for one epoch's collected groups."""
    _check_same_epoch(groups)
    if analyses is None:
        analyses = {sid: analyze_switch(g, with_fsd=False) for sid, g in groups.items()}
    if not all(a.hh.success for a in analyses.values()):
        return LossReport("aborted")
    d_hl, d_ll = delta_encoders(groups, analyses)
    hl = d_hl.decode()
    ll = d_ll.decode() if d_ll is not None else None
    rep = LossReport("ok", hl=hl, ll=ll,
                     hl_count=count_estimate(d_hl, hl), ll_count=count_estimate(d_ll, ll))
    if not hl.success or (ll is not None and not ll.success):
        rep.status = "partial"
    if hl.success:
        for f, n in hl.flowset.items():
            rep.losses.add(f, n)
    if ll is not None and ll.success:
        for f, n in ll.flowset.items():
            if f not in rep.losses:
                rep.light.add(f)
            rep.losses.add(f, n)
    return rep


def _histogram(sizes, weight=1.0):
    out = {}
    for s in sizes:
        s = int(s)
        out[s] = out.get(s, 0.0) + weight
    return out


def analyze_epoch(groups, sample_seed, with_fsd=True):
    """Decode everything collected for one epoch and estimate victim statistics."""
    bit = _check_same_epoch(groups)
    analyses = {sid: analyze_switch(g, with_fsd) for sid, g in groups.items()}
    loss = detect_losses(groups, analyses)
    out = EpochAnalysis(analyses, loss, epoch_bit=bit)
    if loss.status == "aborted":
        return out
    th = next(iter(groups.values())).config.thresholds
    R = th.sample_rate
    size_of = lambda f: network_flow_size(groups, analyses, f)
    if loss.ll is None:
        # healthy layout: every victim goes to the HL delta
        out.victim_count = loss.hl_count
        if loss.hl_ok:
            out.victim_fsd = _histogram(size_of(f) for f in loss.hl.flowset)
        return out
    ll_flows = list(loss.ll.flowset) if loss.ll.success else []
    scale = 1.0 / R if R > 0 else 0.0
    if loss.hl_ok and loss.ll.success:
        hl_flows = np.fromiter(loss.hl.flowset.keys(), dtype=np.uint64, count=len(loss.hl.flowset))
        picked = hl_flows[sampled_mask(hl_flows, R, sample_seed)] if hl_flows.size else hl_flows
        sampled = set(int(f) for f in picked) | set(ll_flows)
        out.victim_count = Estimate(len(sampled) * scale, Provenance.ESTIMATED)
        out.victim_fsd = _histogram((size_of(f) for f in sampled), scale)
    elif loss.ll.success:
        out.victim_count = Estimate(loss.hl_count.value + len(ll_flows) * scale,
                                    loss.hl_count.provenance)
        out.victim_fsd = _histogram((size_of(f) for f in ll_flows), scale)
    return out


# -- measurement tasks ------------------------------------------------------


@dataclass
class TaskResults:
    hh_status: str
    heavy_hitters: dict
    heavy_changes: set
    cardinality: int
    fsd: dict
    entropy: float
    losses: Flowset = None


def heavy_hitters(group, hh_flowset, delta_h=DELTA_H):
    if hh_flowset is None:
        return {}
    T_h = group.config.thresholds.T_h
    return {f: T_h - 1 + q for f, q in hh_flowset.items() if T_h - 1 + q > delta_h}


def heavy_changes(cur, prev, delta_c=DELTA_C):
    """Flows whose size moved by more than ``delta_c`` between two epochs.

    ``cur`` and ``prev`` are ``(group, hh_flowset)`` pairs; candidates are the
    flows decoded as HH in either epoch.
    """
    (g1, fs1), (g0, fs0) = cur, prev
    if fs1 is None or fs0 is None:
        return set()
    out = set()
    for f in set(fs1) | set(fs0):
        if abs(flow_size(g1, fs1, f) - flow_size(g0, fs0, f)) > delta_c:
            out.add(f)
    return out


def accumulation_tasks(group, analysis=None, prev=None, delta_h=DELTA_H, delta_c=DELTA_C,
                       losses=None):
    """Run the per-switch measurement tasks for one collected group.

    ``prev`` is the ``(group, hh_flowset)`` of the previous epoch at the same
    switch, needed for heavy changes.
    """
    if analysis is None:
        analysis = analyze_switch(group)
    fs = analysis.hh_flowset
    hc = heavy_changes((group, fs), prev, delta_c) if prev is not None else set()
    return TaskResults(
        hh_status=analysis.hh.status,
        heavy_hitters=heavy_hitters(group, fs, delta_h),
        heavy_changes=hc,
        cardinality=analysis.cardinality,
        fsd=analysis.fsd,
        entropy=entropy(analysis.fsd),
        losses=losses,
    )


# -- attention shifting -----------------------------------------------------


@dataclass(frozen=True)
class ControllerState:
    mode: Mode
    layout: EncoderLayout
    T_h: dict                     # switch id -> T_h
    T_l: int = 1
    sample_rate: float = 1.0
    target_load: float = 0.70
    low_load: float = 0.60
    max_load: float = 1 / 1.23
    reserve_hl: int = 512
    ill_layout: EncoderLayout = EncoderLayout(1024, 2560, 512)

    def __post_init__(self):
        if not self.low_load < self.target_load < self.max_load:
            raise ValueError("need low_load < target_load < max_load")

    @classmethod
    def initial(cls, deployment, switch_ids, **kw):
        reserve = kw.get("reserve_hl", 512)
        return cls(Mode.HEALTHY, EncoderLayout(deployment.m_uf - reserve, reserve, 0),
                   {s: 1 for s in switch_ids}, **kw)

    def thresholds(self, sid):
        T_h = self.T_h[sid]
        return ClassifierThresholds(T_h, min(self.T_l, T_h), self.sample_rate)

    def config(self, sid):
        return SwitchConfig(self.layout, self.thresholds(sid))

    def configs(self):
        return {sid: self.config(sid) for sid in self.T_h}


def load_factor(flows, m, d):
    return flows / (m * d) if m else math.inf


def required_buckets(flows, d, target=0.70):
    """Buckets per array so that ``flows`` fill ``target`` of an m x d sketch."""
    # rounding guards exact multiples against float noise (2100 / 2.1)
    return max(1, math.ceil(round(flows / (target * d), 9)))


def _raise_threshold(fsd, current, observed, capacity):
    return max(current + 1, retarget_threshold(fsd, current, observed, capacity))


def _network_fsd(analysis):
    out = {}
    for sa in analysis.switches.values():
        for s, c in sa.fsd.items():
            out[s] = out.get(s, 0.0) + c
    return out


def shift_attention(analysis, state, deployment):
    """Next controller state (and so next configs) from one epoch's analysis.

    A pure function of its inputs.  Returns ``(new_state, notes)`` where notes
    list the steps that fired.
    """
    d = deployment.d
    cap = lambda m: state.target_load * m * d
    # retargeting may overshoot the target a little, never past this
    ceiling = lambda m: (state.target_load + state.max_load) / 2 * m * d
    notes = []
    T_h = dict(state.T_h)
    new = replace(state)

    # step 1: every HH encoder must decode
    failed = [sid for sid, sa in analysis.switches.items() if not sa.hh.success]
    for sid in failed:
        sa = analysis.switches[sid]
        T_h[sid] = _raise_threshold(sa.fsd, T_h[sid], sa.hh_count.value, cap(state.layout.m_hh))
        notes.append(f"hh-fail {sid}: T_h {state.T_h[sid]} -> {T_h[sid]}")
    if failed:
        return replace(state, T_h=T_h), notes

    loss = analysis.loss
    layout, T_l, R, mode = state.layout, state.T_l, state.sample_rate, state.mode
    if state.mode is Mode.HEALTHY:
        if not loss.hl_ok:
            E = loss.hl_count.value
            need = required_buckets(E, d, state.target_load)
            if loss.hl_count.provenance is Provenance.OVERLOAD or need > deployment.m_df:
                mode = Mode.ILL
                layout = state.ill_layout
                T_l = max(T_h.values())
                R = min(1.0, cap(layout.m_ll) / E) if E > 0 else 1.0
                notes.append(f"healthy -> ill: ~{E:.0f} victims need {need} buckets/array")
            else:
                m_hl = max(need, state.reserve_hl)
                layout = EncoderLayout(deployment.m_uf - m_hl, m_hl, 0)
                notes.append(f"expand HL to {m_hl}")
        else:
            n = len(loss.hl.flowset)
            if load_factor(n, layout.m_hl, d) < state.low_load:
                m_hl = max(required_buckets(n, d, state.target_load), state.reserve_hl)
                if m_hl != layout.m_hl:
                    layout = EncoderLayout(deployment.m_uf - m_hl, m_hl, 0)
                    notes.append(f"shrink HL to {m_hl}")
    else:
        if not loss.ll_ok:
            n_ll = loss.ll_count.value
            R = _rate_for(R, n_ll, cap(layout.m_ll))
            notes.append(f"ll-fail: sample rate -> {R:.4f}")
            return replace(state, sample_rate=R), notes
        victims = analysis.victim_fsd
        if not loss.hl_ok:
            # victims of size >= T_l are assumed to become HL; calibrate the
            # shape to the observed HL count at the current T_l
            shape = victims if ccdf(victims, T_l) > 0 else _network_fsd(analysis)
            T_l = _raise_threshold(shape, T_l, loss.hl_count.value, cap(layout.m_hl))
            notes.append(f"hl-fail: T_l {state.T_l} -> {T_l}")
        else:
            V = analysis.victim_count.value
            need = required_buckets(V, d, state.target_load)
            if need <= deployment.m_df:
                mode = Mode.HEALTHY
                m_hl = max(need, state.reserve_hl)
                layout = EncoderLayout(deployment.m_uf - m_hl, m_hl, 0)
                T_l, R = 1, 1.0
                notes.append(f"ill -> healthy: ~{V:.0f} victims fit in {m_hl} buckets/array")
            else:
                n_hl = len(loss.hl.flowset)
                if load_factor(n_hl, layout.m_hl, d) < state.low_load and T_l > 1:
                    T_l = max(1, retarget_threshold(victims or _network_fsd(analysis), T_l, n_hl,
                                                    cap(layout.m_hl), ceiling(layout.m_hl)))
                    if T_l != state.T_l:
                        notes.append(f"hl underused: T_l {state.T_l} -> {T_l}")
                n_ll = len(loss.ll.flowset)
                if load_factor(n_ll, layout.m_ll, d) < state.low_load and R < 1.0:
                    R = _rate_for(R, n_ll, cap(layout.m_ll))
                    if R != state.sample_rate:
                        notes.append(f"ll underused: sample rate -> {R:.4f}")

    # final step: trim each T_h to the HH capacity left by the layout
    for sid, sa in analysis.switches.items():
        n = len(sa.hh.flowset)
        lf = load_factor(n, layout.m_hh, d)
        if lf < state.low_load or lf > state.target_load:
            T = max(1, retarget_threshold(sa.fsd, T_h[sid], n, cap(layout.m_hh),
                                          ceiling(layout.m_hh)))
            if T != T_h[sid]:
                notes.append(f"trim {sid}: T_h {T_h[sid]} -> {T}")
                T_h[sid] = T
    return replace(new, mode=mode, layout=layout, T_h=T_h, T_l=T_l, sample_rate=R), notes


def _rate_for(R, recorded, capacity):
    """Sample rate putting ``recorded`` (seen at rate ``R``) at ``capacity``."""
    if recorded <= 0:
        return 1.0
    return float(min(1.0, max(1.0 / 65536, R * capacity / recorded)))


def epoch_record(epoch, analysis, state, notes=(), deployment=None):
    """JSON-ready summary of one epoch's analysis and the resulting state."""
    d = deployment.d if deployment else 3
    loss = analysis.loss
    lay = next(iter(analysis.switches.values())).config.layout
    rec = {
        "epoch": epoch,
        "mode": state.mode.value,
        "layout": [state.layout.m_hh, state.layout.m_hl, state.layout.m_ll],
        "T_h": {str(k): v for k, v in state.T_h.items()},
        "T_l": state.T_l,
        "sample_rate": state.sample_rate,
        "observed_layout": [lay.m_hh, lay.m_hl, lay.m_ll],
        "hh": {str(sid): {"status": sa.hh.status, "flows": sa.hh_count.value,
                          "load": load_factor(sa.hh_count.value, lay.m_hh, d),
                          "cardinality": int(sa.cardinality)}
               for sid, sa in analysis.switches.items()},
        "loss_status": loss.status,
        "hl": {"status": loss.hl.status if loss.hl else "skipped",
               "flows": loss.hl_count.value, "provenance": loss.hl_count.provenance.value,
               "load": load_factor(loss.hl_count.value, lay.m_hl, d)},
        "ll": {"status": loss.ll.status if loss.ll else "skipped",
               "flows": loss.ll_count.value, "provenance": loss.ll_count.provenance.value,
               "load": load_factor(loss.ll_count.value, lay.m_ll, d) if lay.m_ll else None},
        "victims": {"value": analysis.victim_count.value,
                    "provenance": analysis.victim_count.provenance.value},
        "reported_losses": len(loss.losses),
        "notes": list(notes),
    }
    return rec
