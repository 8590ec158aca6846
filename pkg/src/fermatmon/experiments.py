"""Experiment runners behind the command line: sweeps, scenario, accuracy."""
import csv
from dataclasses import asdict, dataclass, field, fields
import json
import time

import numpy as np

from .controller import accumulation_tasks, analyze_switch, detect_losses
from .edge import Deployment
from .fermat import FermatSketch
from .fsd import entropy, exact_fsd
from .simnet import (
    Controller,
    LossSpec,
    Network,
    WorkloadSpec,
    generate,
    oracle_diff,
    pick_victims,
    prf,
    run_window,
)

KINDS = ("threshold-sweep", "loss-sweep", "shift-scenario", "accuracy")


@dataclass
class ExperimentConfig:
    kind: str = "threshold-sweep"
    seed: int = 0
    trials: int = 200
    output: str = None
    # threshold sweep
    n_flows: int = 10_000
    d: int = 3
    buckets_per_flow: list = field(default_factory=lambda: [1.0, 1.1, 1.15, 1.2, 1.22, 1.25,
                                                             1.3, 1.4, 1.6])
    # loss sweep: axis -> values; probes use `probe_trials` and need `probe_successes`
    victims: list = field(default_factory=lambda: [100, 200, 400, 800, 1600, 3200, 6000])
    loss_rates: list = field(default_factory=lambda: [0.01, 0.1, 1.0])
    flow_counts: list = field(default_factory=lambda: [1_000, 10_000, 100_000])
    axes: list = field(default_factory=lambda: ["victims", "loss_rate", "flows"])
    fixed_victims: int = 100
    fixed_flows: int = 10_000
    fixed_loss_rate: float = 0.1
    probe_trials: int = 21
    probe_successes: int = 20
    repeats: int = 3
    # shift scenario: list of [flows, victims, epochs]
    phases: list = None
    loss_rate: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        if self.trials < 1:
            raise ValueError("trials must be positive")

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**data)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return asdict(self)


# -- threshold sweep --------------------------------------------------------


def _unique_ids(rng, n):
    return (rng.choice((1 << 32) - 1, n, replace=False) + 1).astype(np.uint64)


def decode_trial(n_flows, m, d, seed, trial):
    """Insert ``n_flows`` random flows into a fresh m x d sketch; decode exactly?"""
    rng = np.random.default_rng([seed, trial, n_flows])
    ids = _unique_ids(rng, n_flows)
    s = FermatSketch.create(m, d=d, seed=seed * 1_000_003 + trial)
    s.update_many(ids)
    out = s.decode()
    ok = out.success and len(out.flowset) == n_flows and all(out.flowset.get(int(f)) == 1 for f in ids)
    return ok, out


def success_rate(n_flows, bpf, trials, seed=0, d=3):
    m = max(1, int(round(bpf * n_flows / d)))
    wins = sum(decode_trial(n_flows, m, d, seed, t)[0] for t in range(trials))
    return wins / trials, m


def run_threshold_sweep(cfg):
    rows = []
    for bpf in cfg.buckets_per_flow:
        rate, m = success_rate(cfg.n_flows, bpf, cfg.trials, cfg.seed, cfg.d)
        rows.append({"buckets_per_flow": bpf, "m": m, "d": cfg.d, "n_flows": cfg.n_flows,
                     "trials": cfg.trials, "success_rate": rate, "seed": cfg.seed})
    return rows


def crossing_point(rows, level=0.5):
    """Buckets/flow where the success rate first crosses ``level`` (linear interpolation)."""
    pts = sorted((r["buckets_per_flow"], r["success_rate"]) for r in rows)
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        if y0 < level <= y1:
            return x0 + (level - y0) * (x1 - x0) / (y1 - y0)
    return None


# -- loss sweep -------------------------------------------------------------


def delta_trial(n_flows, n_victims, loss_rate, m, seed, trial, d=3):
    """Upstream and downstream encoders over a workload; does the delta decode exactly?"""
    wl = generate(WorkloadSpec(n_flows=n_flows, dist="powerlaw", zipf_alpha=2.2, min_size=1,
                               seed=seed * 7919 + trial))
    rng = np.random.default_rng([seed, trial, 0xD1])
    victims = pick_victims(wl, LossSpec(victims=n_victims, seed=seed * 31 + trial))
    lost = np.zeros(wl.n_flows, dtype=np.int64)
    vs = wl.sizes[victims]
    # every victim loses at least one packet so the victim count is exact
    lost[victims] = np.maximum(1, rng.binomial(vs, loss_rate))
    up = FermatSketch.create(m, d=d, seed=seed * 1_000_003 + trial)
    down = up.copy()
    up.update_many(wl.flows, wl.sizes)
    down.update_many(wl.flows, wl.sizes - lost)
    t0 = time.perf_counter()
    out = (up - down).decode()
    dt = time.perf_counter() - t0
    want = {int(f): int(n) for f, n in zip(wl.flows[victims], lost[victims])}
    return out.success and dict(out.flowset) == want, dt


def min_buckets(n_flows, n_victims, loss_rate, seed=0, trials=21, need=20, d=3):
    """Smallest m (buckets per array) with at least ``need`` of ``trials`` decodes.

    Binary search; every probe reuses the same trial seeds.
    """
    times = {}

    def passes(m):
        wins, spent = 0, 0.0
        for t in range(trials):
            ok, dt = delta_trial(n_flows, n_victims, loss_rate, m, seed, t, d)
            wins += ok
            spent += dt
        times[m] = spent / trials
        return wins >= need

    lo, hi = 1, max(8, n_victims)
    while not passes(hi):
        hi *= 2
    while lo < hi:
        mid = (lo + hi) // 2
        if passes(mid):
            hi = mid
        else:
            lo = mid + 1
    return lo, times.get(lo, 0.0)


def run_loss_sweep(cfg):
    rows = []
    axis_values = {"victims": cfg.victims, "loss_rate": cfg.loss_rates, "flows": cfg.flow_counts}
    for axis in cfg.axes:
        for v in axis_values[axis]:
            n_flows = v if axis == "flows" else cfg.fixed_flows
            n_victims = v if axis == "victims" else cfg.fixed_victims
            rate = v if axis == "loss_rate" else cfg.fixed_loss_rate
            if axis == "victims" and n_victims > n_flows:
                n_flows = n_victims * 2
            found = [min_buckets(n_flows, n_victims, rate, cfg.seed + r, cfg.probe_trials,
                                 cfg.probe_successes, cfg.d) for r in range(cfg.repeats)]
            ms = [m for m, _ in found]
            rows.append({"axis": axis, "value": v, "flows": n_flows, "victims": n_victims,
                         "loss_rate": rate, "min_buckets_per_array": float(np.mean(ms)),
                         "min_buckets_total": float(np.mean(ms)) * cfg.d,
                         "decode_seconds": float(np.mean([t for _, t in found])),
                         "repeats": cfg.repeats, "seed": cfg.seed})
    return rows


# -- shift scenario ---------------------------------------------------------

# (flows, victims) per phase; each phase lasts five epochs
DEFAULT_PHASES = [
    [10_000, 1_000, 5],
    [20_000, 1_000, 5],
    [20_000, 3_000, 5],
    [20_000, 6_000, 5],
    [20_000, 10_000, 5],
    [20_000, 14_000, 5],
    [20_000, 5_000, 5],
    [20_000, 2_000, 5],
    [10_000, 1_000, 5],
]


def scenario_phases(cfg):
    phases = []
    for i, (n, v, epochs) in enumerate(cfg.phases or DEFAULT_PHASES):
        wl = generate(WorkloadSpec(n_flows=n, dist="powerlaw", zipf_alpha=2.2, min_size=4,
                                   seed=cfg.seed * 101 + 10 + i))
        loss = LossSpec(victims=v, loss_rate=cfg.loss_rate, seed=cfg.seed * 101 + 20 + i)
        phases.append((wl, loss, epochs))
    return phases


def run_shift_scenario(cfg, log=None):
    dep = Deployment(seed=cfg.seed)
    net = Network(dep)
    ctl = Controller(dep, [sw.id for sw in net.switches])
    return run_window(scenario_phases(cfg), net, ctl, seed=cfg.seed, log=log)


def _config_key(rec):
    return (rec["mode"], tuple(rec["layout"]), tuple(sorted(rec["T_h"].items())), rec["T_l"],
            rec["sample_rate"])


def settle_report(records):
    """Per phase: how many epochs the controller needed before its config stopped changing.

    A phase's config settles at epoch ``s`` when the state chosen after ``s``
    is kept for the rest of the phase; the latency is ``s - start + 1``.
    Also lists the delta-HL loads of the settled epochs, i.e. epochs that ran
    with the phase's final configuration.
    """
    out = []
    phases = sorted({r["phase"] for r in records})
    for p in phases:
        recs = [r for r in records if r["phase"] == p]
        keys = [_config_key(r) for r in recs]
        s = len(recs) - 1
        while s > 0 and keys[s - 1] == keys[-1]:
            s -= 1
        settled_loads = [r["hl"]["load"] for r in recs[s + 1:] if r["hl"]["status"] == "success"]
        out.append({"phase": p, "start": recs[0]["epoch"], "settled_at": recs[s]["epoch"],
                    "latency": s + 1, "stable": s + 1 < len(recs),
                    "mode": recs[-1]["mode"], "settled_hl_loads": settled_loads})
    return out


# -- accuracy ---------------------------------------------------------------


def run_accuracy(cfg):
    """Heavy hitters, cardinality, entropy, FSD and loss accuracy on one network."""
    dep = Deployment(seed=cfg.seed)
    rows = []
    for trial in range(cfg.trials):
        wl = generate(WorkloadSpec(n_flows=cfg.n_flows, dist="zipf", zipf_alpha=1.0,
                                   total_packets=10 * cfg.n_flows, seed=cfg.seed * 977 + trial))
        loss = LossSpec(victim_ratio=0.02, loss_rate=0.1, seed=cfg.seed * 977 + trial)
        net = Network(dep)
        ctl = Controller(dep, [sw.id for sw in net.switches], adaptive=False)
        net.stage(ctl.configs())
        groups, truth = net.run_epoch(wl, loss, epoch=0, seed=cfg.seed + trial)
        analyses = {sid: analyze_switch(g) for sid, g in groups.items()}
        rep = detect_losses(groups, analyses)
        diff = oracle_diff(truth, rep.losses)
        for sid, g in groups.items():
            at = wl.ingress == sid
            sizes = wl.sizes[at]
            res = accumulation_tasks(g, analyses[sid])
            true_hh = {int(f) for f, s in zip(wl.flows[at], sizes) if s > 500}
            _, _, f1 = prf(res.heavy_hitters, true_hh)
            true_ent = entropy(exact_fsd(sizes))
            card = res.cardinality
            rows.append({"trial": trial, "seed": cfg.seed, "switch": sid,
                         "flows": int(at.sum()), "hh_f1": f1,
                         "cardinality": int(card),
                         "cardinality_rel_err": abs(card - at.sum()) / at.sum(),
                         "entropy": res.entropy, "entropy_true": true_ent,
                         "entropy_rel_err": abs(res.entropy - true_ent) / true_ent,
                         "loss_f1": diff.f1, "loss_exact": diff.exact})
    return rows


# -- output -----------------------------------------------------------------


def write_csv(rows, path_or_fh):
    if not rows:
        return
    own = isinstance(path_or_fh, str)
    fh = open(path_or_fh, "w", newline="") if own else path_or_fh
    try:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
    finally:
        if own:
            fh.close()


def write_jsonl(rows, path_or_fh):
    own = isinstance(path_or_fh, str)
    fh = open(path_or_fh, "w") if own else path_or_fh
    try:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    finally:
        if own:
            fh.close()


def loglog_slope(xs, ys):
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])

