import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fermatmon.controller import (
    ControllerState,
    Mode,
    Provenance,
    accumulation_tasks,
    analyze_epoch,
    analyze_switch,
    count_estimate,
    detect_losses,
    flow_size,
    heavy_changes,
    load_factor,
    required_buckets,
    shift_attention,
)
from fermatmon.edge import Deployment, EdgeSwitch, EncoderLayout, SwitchConfig
from fermatmon.fermat import FermatSketch, FermatParams
from fermatmon.simnet import LossSpec, Network, WorkloadSpec, generate
from fermatmon.tower import ClassifierThresholds

DEP = Deployment(seed=11)


def epoch(wl_spec, loss=None, state=None, seed=0):
    wl = generate(wl_spec)
    net = Network(DEP, wl.n_switches)
    state = state or ControllerState.initial(DEP, range(wl.n_switches))
    net.stage(state.configs())
    groups, truth = net.run_epoch(wl, loss, 0, seed)
    return groups, truth, state


def test_lossless_epoch_reports_nothing():
    groups, _, _ = epoch(WorkloadSpec(n_flows=3000, seed=1))
    rep = detect_losses(groups)
    assert rep.status == "ok" and rep.losses == {}


def test_single_victim_loses_seven():
    spec = WorkloadSpec(n_flows=1, dist="zipf", total_packets=10, seed=2)
    wl = generate(spec)
    net = Network(DEP, 4)
    net.stage(ControllerState.initial(DEP, range(4)).configs())
    groups, truth = net.run_epoch(wl, LossSpec(victims=1, loss_rate=1.0), 0, 0)
    rep = detect_losses(groups)
    f = int(wl.flows[0])
    assert rep.losses == {f: 10}
    # drop exactly seven packets
    stream = np.zeros(10, dtype=np.int64)
    a, b = EdgeSwitch(0, DEP), EdgeSwitch(1, DEP)
    pkts = [a.process_ingress(f, 1) for _ in stream]
    for p in pkts[7:]:
        b.process_egress(p)
    rep = detect_losses({0: a.rotate_epoch(), 1: b.rotate_epoch()})
    assert rep.losses == {f: 7}


def test_count_estimate_within_ten_percent():
    errs = []
    rng = np.random.default_rng(3)
    for trial in range(20):
        sk = FermatSketch(FermatParams.from_seed(trial, m=1024))
        flows = rng.choice(1 << 30, 2600, replace=False).astype(np.uint64) + 1
        sk.update_many(flows, np.ones(flows.size, dtype=np.int64))
        est = count_estimate(sk, sk.decode())
        assert est.provenance in (Provenance.SUCCESS, Provenance.ESTIMATED)
        errs.append(est.value / flows.size - 1)
    assert abs(np.mean(errs)) < 0.10


def test_count_estimate_overload_and_skip():
    sk = FermatSketch(FermatParams.from_seed(0, d=2, m=4))
    sk.update_many(np.arange(1, 200, dtype=np.uint64), np.ones(199, dtype=np.int64))
    assert count_estimate(sk, sk.decode()).provenance is Provenance.OVERLOAD
    assert count_estimate(None).provenance is Provenance.SKIPPED


def test_required_buckets():
    assert required_buckets(2100, 3) == 1000
    assert required_buckets(2101, 3) == 1001
    assert load_factor(2100, 1000, 3) == pytest.approx(0.7)
    for E in (1, 17, 999, 12345):
        m = required_buckets(E, 3)
        assert load_factor(E, m, 3) <= 0.70 + 1e-12
        assert load_factor(E, m - 1, 3) > 0.70 or m == 1


def test_shrink_to_reserve_after_quiet_epoch():
    state = ControllerState.initial(DEP, range(4))
    state = state.__class__(**{**state.__dict__, "layout": EncoderLayout(2048, 2048, 0)})
    groups, _, _ = epoch(WorkloadSpec(n_flows=2000, seed=4), LossSpec(victims=20, loss_rate=0.5),
                         state)
    new, notes = shift_attention(analyze_epoch(groups, DEP.sample_seed), state, DEP)
    assert new.layout == EncoderLayout(DEP.m_uf - 512, 512, 0)
    assert new.mode is Mode.HEALTHY
    assert any("shrink" in n for n in notes)


def test_expand_then_transition_to_ill():
    wl = WorkloadSpec(n_flows=10000, seed=5)
    groups, truth, state = epoch(wl, LossSpec(victims=1500, loss_rate=1.0))
    new, notes = shift_attention(analyze_epoch(groups, DEP.sample_seed), state, DEP)
    assert new.mode is Mode.HEALTHY
    m = new.layout.m_hl
    assert m >= required_buckets(1500, 3) * 0.9
    assert new.layout.m_hh + m == DEP.m_uf

    groups, truth, state = epoch(WorkloadSpec(n_flows=40000, seed=6),
                                 LossSpec(victim_ratio=0.25, loss_rate=1.0))
    new, notes = shift_attention(analyze_epoch(groups, DEP.sample_seed), state, DEP)
    assert new.mode is Mode.ILL
    assert new.layout == EncoderLayout(1024, 2560, 512)
    assert new.T_l == max(new.T_h.values()) or new.T_l == max(state.T_h.values())
    assert 0 < new.sample_rate <= 1


def test_ten_percent_victims_at_10k_flows_stays_healthy():
    groups, _, state = epoch(WorkloadSpec(n_flows=10000, seed=7),
                             LossSpec(victim_ratio=0.10, loss_rate=0.5))
    new, _ = shift_attention(analyze_epoch(groups, DEP.sample_seed), state, DEP)
    assert new.mode is Mode.HEALTHY


def test_hh_failure_raises_threshold():
    state = ControllerState.initial(DEP, range(4))
    # 40K flows through a 3584-bucket HH part at T_h = 1 cannot decode
    groups, _, _ = epoch(WorkloadSpec(n_flows=40000, min_size=1, total_packets=400000, seed=8),
                         state=state)
    an = analyze_epoch(groups, DEP.sample_seed)
    assert not an.hh_ok and an.loss.status == "aborted"
    new, notes = shift_attention(an, state, DEP)
    assert all(new.T_h[s] > 1 for s in range(4))
    assert new.layout == state.layout


def test_epoch_mismatch_raises():
    a, b = EdgeSwitch(0, DEP), EdgeSwitch(1, DEP)
    g0 = a.rotate_epoch()
    b.rotate_epoch()
    g1 = b.rotate_epoch()
    with pytest.raises(ValueError):
        detect_losses({0: g0, 1: g1})


def test_flow_size_passthrough():
    cfg = SwitchConfig(EncoderLayout(1024, 2560, 512), ClassifierThresholds(10, 3, 1.0))
    sw = EdgeSwitch(0, DEP, cfg)
    for _ in range(7):
        sw.process_ingress(42)
    for _ in range(30):
        sw.process_ingress(43)
    g = sw.rotate_epoch()
    fs = analyze_switch(g).hh_flowset
    assert flow_size(g, fs, 42) == 7
    assert 43 in fs and flow_size(g, fs, 43) == 30


def test_heavy_changes_symmetric():
    def group_with(sizes):
        sw = EdgeSwitch(0, DEP, SwitchConfig(EncoderLayout(3584, 512, 0),
                                              ClassifierThresholds(100, 1, 1.0)))
        for f, n in sizes.items():
            sw.ingress_batch(np.full(n, f, dtype=np.uint64))
        g = sw.rotate_epoch()
        return g, analyze_switch(g).hh_flowset

    a = group_with({1: 900, 2: 400, 3: 150})
    b = group_with({1: 500, 2: 420, 4: 700})
    ab, ba = heavy_changes(a, b), heavy_changes(b, a)
    assert ab == ba == {1, 4}
    tasks = accumulation_tasks(a[0], prev=b)
    assert tasks.heavy_hitters == {1: 900}
    assert tasks.heavy_changes == {1, 4}


def test_shift_attention_is_pure():
    groups, _, state = epoch(WorkloadSpec(n_flows=8000, seed=9),
                             LossSpec(victims=2000, loss_rate=0.5))
    an = analyze_epoch(groups, DEP.sample_seed)
    snapshot = (state.layout, dict(state.T_h), state.T_l)
    r1 = shift_attention(an, state, DEP)
    r2 = shift_attention(an, state, DEP)
    assert r1 == r2
    assert (state.layout, dict(state.T_h), state.T_l) == snapshot


@settings(max_examples=15)
@given(st.integers(1000, 30000), st.floats(0.0, 0.5), st.floats(0.05, 1.0), st.integers(0, 99))
def test_configs_always_legal(n_flows, ratio, rate, seed):
    groups, _, state = epoch(WorkloadSpec(n_flows=n_flows, seed=seed),
                             LossSpec(victim_ratio=ratio, loss_rate=rate, seed=seed))
    new, _ = shift_attention(analyze_epoch(groups, DEP.sample_seed), state, DEP)
    for cfg in new.configs().values():
        DEP.validate(cfg)
        th = cfg.thresholds
        assert 1 <= th.T_l <= th.T_h and 0 < th.sample_rate <= 1
