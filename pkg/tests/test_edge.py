import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fermatmon.controller import detect_losses
from fermatmon.edge import (
    Deployment,
    EdgeSwitch,
    EncoderLayout,
    SketchGroup,
    SwitchConfig,
    process_egress,
    process_ingress,
    rotate_epoch,
    stage_reconfig,
)
from fermatmon.fermat import combine
from fermatmon.tower import ClassifierThresholds, Hierarchy, sampled_mask

DEP = Deployment(seed=3)


def ill_switch(sid=0, T_h=5, T_l=3, R=1.0):
    cfg = SwitchConfig(EncoderLayout(1024, 2560, 512), ClassifierThresholds(T_h, T_l, R))
    return EdgeSwitch(sid, DEP, cfg)


def test_defaults():
    assert (DEP.m_uf, DEP.m_df, DEP.d) == (4096, 3072, 3)
    cfg = DEP.healthy_config()
    assert cfg.layout == EncoderLayout(3584, 512, 0)
    EncoderLayout(1024, 2560, 512).validate(DEP.m_uf, DEP.m_df)


def test_layout_validation():
    with pytest.raises(ValueError):
        EncoderLayout(1000, 2560, 512).validate(4096, 3072)
    with pytest.raises(ValueError):
        EncoderLayout(500, 3096, 500).validate(4096, 3072)
    with pytest.raises(ValueError):
        EncoderLayout(4096, 0, 0).validate(4096, 3072)
    sw = EdgeSwitch(0, DEP)
    with pytest.raises(ValueError):
        stage_reconfig(sw, EncoderLayout(1, 2, 3), ClassifierThresholds())
    with pytest.raises(ValueError):
        # LL candidates with nowhere to go
        stage_reconfig(sw, EncoderLayout(3584, 512, 0), ClassifierThresholds(5, 3, 0.5))


def test_hh_packet_hits_hh_part():
    sw = EdgeSwitch(0, DEP)  # T_h = 1: every packet is an HH candidate
    pkt = process_ingress(sw, 1234, egress_switch=1)
    assert pkt.hierarchy == Hierarchy.HH and pkt.epoch_bit == 0
    hh = sw.active.upstream["hh"]
    assert hh.counts.sum(axis=1).tolist() == [1, 1, 1]
    assert sw.active.upstream["hl"].is_zero()
    assert sw.active.upstream["ll"] is None


def test_nonsampled_ll_skips_encoders():
    sw = ill_switch(R=0.0)
    pkt = process_ingress(sw, 99)
    assert pkt.hierarchy == Hierarchy.NONSAMPLED_LL
    assert all(s.is_zero() for s in sw.active.upstream.values())
    assert sw.active.tower.query(99) == 1


def test_tl_one_never_uses_ll_part():
    sw = EdgeSwitch(0, DEP, SwitchConfig(EncoderLayout(1024, 2560, 512),
                                         ClassifierThresholds(3, 1, 1.0)))
    sw.ingress_batch(np.arange(1, 3000, dtype=np.uint64) % 500 + 1)
    assert sw.active.upstream["ll"].is_zero()


def test_egress_routes_by_tag():
    a, b = ill_switch(0), ill_switch(1)
    pkts = [process_ingress(a, 7) for _ in range(6)]
    assert [p.hierarchy for p in pkts] == [Hierarchy.SAMPLED_LL] * 2 + [Hierarchy.HL] * 2 \
        + [Hierarchy.HH] * 2
    for p in pkts:
        process_egress(b, p)
    down = b.active.downstream
    assert down["ll"].counts.sum(axis=1).tolist() == [2, 2, 2]
    assert down["hl"].counts.sum(axis=1).tolist() == [4, 4, 4]
    # the downstream switch never classified anything
    assert b.active.tower.query(7) == 0


def test_dropped_packet_shows_in_delta():
    a, b = ill_switch(0, T_h=100, T_l=1), ill_switch(1, T_h=100, T_l=1)
    pkts = [process_ingress(a, 55) for _ in range(3)]
    for p in pkts[:2]:
        process_egress(b, p)
    ga, gb = rotate_epoch(a), rotate_epoch(b)
    rep = detect_losses({0: ga, 1: gb})
    assert rep.losses == {55: 1}


def test_rotation_alternates_and_catches_late_packets():
    a, b = EdgeSwitch(0, DEP), EdgeSwitch(1, DEP)
    late = process_ingress(a, 5)
    g0 = rotate_epoch(a)
    assert a.current_bit == 1 and g0.epoch_bit == 0
    process_egress(b, late)  # arrives after the flip, stamped bit 0
    assert b.groups[0].downstream["hl"].counts.sum() == 3
    assert b.groups[1].downstream["hl"].is_zero()
    g1 = rotate_epoch(a)
    assert g1.epoch_bit == 1 and g1 is not g0
    assert rotate_epoch(a).epoch_bit == 0


def test_staged_config_waits_for_rotation():
    sw = EdgeSwitch(0, DEP)
    new = EncoderLayout(3072, 1024, 0)
    stage_reconfig(sw, new, ClassifierThresholds(4, 1, 1.0))
    assert sw.active_config.layout == EncoderLayout(3584, 512, 0)
    process_ingress(sw, 1)
    with pytest.raises(RuntimeError):
        sw.apply_staged()
    rotate_epoch(sw)
    assert sw.active_config.layout == new
    assert sw.active.upstream["hl"].m == 1024


def test_apply_staged_before_traffic():
    sw = EdgeSwitch(0, DEP)
    rotate_epoch(sw)
    sw.stage_reconfig(EncoderLayout(1024, 2560, 512), ClassifierThresholds(9, 4), sample_rate=0.25)
    assert sw.apply_staged()
    assert sw.active_config.thresholds == ClassifierThresholds(9, 4, 0.25)
    assert not sw.apply_staged()


def test_identical_staging_is_invisible():
    sw = EdgeSwitch(0, DEP)
    before = sw.active_config
    stage_reconfig(sw, before.layout, before.thresholds)
    rotate_epoch(sw)
    assert sw.active_config == before


def test_batch_matches_per_packet():
    rng = np.random.default_rng(0)
    flows = rng.integers(1, 300, 3000).astype(np.uint64)
    a, b = ill_switch(0, T_h=8, T_l=3, R=0.5), ill_switch(0, T_h=8, T_l=3, R=0.5)
    tags = [int(process_ingress(a, int(f)).hierarchy) for f in flows]
    btags, bit = b.ingress_batch(flows)
    assert btags.tolist() == tags and bit == 0
    for part in ("hh", "hl", "ll"):
        assert a.active.upstream[part] == b.active.upstream[part]
    c, d = ill_switch(1), ill_switch(1)
    for f, t in zip(flows, tags):
        process_egress(c, type("P", (), {"flow": int(f), "hierarchy": t, "epoch_bit": 0})())
    d.egress_batch(flows, btags, 0)
    for part in ("hl", "ll"):
        assert c.active.downstream[part] == d.active.downstream[part]


def test_group_round_trip():
    sw = ill_switch()
    sw.ingress_batch(np.arange(1, 500, dtype=np.uint64) % 97 + 1)
    g = sw.active
    h = SketchGroup.from_dict(g.to_dict())
    assert h.config == g.config
    assert all(h.upstream[k] == g.upstream[k] for k in g.upstream)
    assert h.epoch_bit == g.epoch_bit
    assert SketchGroup.from_dict(EdgeSwitch(0, DEP).active.to_dict()).upstream["ll"] is None


@settings(max_examples=30)
@given(st.lists(st.tuples(st.integers(1, 2000), st.integers(0, 3), st.integers(1, 3)),
                min_size=1, max_size=300),
       st.integers(1, 30), st.integers(0, 29), st.floats(0, 1))
def test_lossless_round_trip_and_epoch_isolation(packets, T_h, gap, R):
    th = ClassifierThresholds(T_h, max(1, T_h - gap), R)
    cfg = SwitchConfig(EncoderLayout(1024, 2560, 512), th)
    sws = [EdgeSwitch(i, DEP, cfg) for i in range(4)]
    for f, ing, hop in packets:
        pkt = process_ingress(sws[ing], f, (ing + hop) % 4)
        process_egress(sws[pkt.egress_switch], pkt)
    for sw in sws:
        assert all(s is None or s.is_zero() for s in sw.groups[1].upstream.values())
        assert all(s is None or s.is_zero() for s in sw.groups[1].downstream.values())
    groups = {sw.id: rotate_epoch(sw) for sw in sws}
    rep = detect_losses(groups)
    assert rep.status == "ok" and rep.losses == {}


def test_part_compatibility():
    a, b = ill_switch(0), ill_switch(1)
    for part in ("hl", "ll"):
        combine(a.active.upstream[part], b.active.downstream[part], -1)


def test_sampled_ll_consistent_with_controller_rule():
    sw = ill_switch(T_h=50, T_l=50, R=0.3)
    flows = np.arange(1, 4000, dtype=np.uint64)
    tags, _ = sw.ingress_batch(flows)
    want = sampled_mask(flows, 0.3, DEP.sample_seed)
    assert np.array_equal(tags == Hierarchy.SAMPLED_LL, want)
