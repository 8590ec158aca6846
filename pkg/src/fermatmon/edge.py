"""Edge-switch data plane: classifier, divided flow encoders, epoch rotation."""
from dataclasses import dataclass, replace

import numpy as np

from .fermat import FermatParams, FermatSketch, MERSENNE61
from .hashing import derive_seeds
from .tower import (
    DEFAULT_LEVELS,
    ClassifierThresholds,
    Hierarchy,
    TowerConfig,
    TowerSketch,
    classify,
    classify_sizes,
)

PARTS_UP = ("hh", "hl", "ll")
PARTS_DOWN = ("hl", "ll")

# where each tag goes: (upstream part, downstream part)
_ROUTE = {
    Hierarchy.HH: ("hh", "hl"),
    Hierarchy.HL: ("hl", "hl"),
    Hierarchy.SAMPLED_LL: ("ll", "ll"),
}


@dataclass(frozen=True)
class EncoderLayout:
    m_hh: int
    m_hl: int
    m_ll: int = 0

    @property
    def m_uf(self):
        return self.m_hh + self.m_hl + self.m_ll

    def validate(self, m_uf, m_df):
        if min(self.m_hh, self.m_hl, self.m_ll) < 0:
            raise ValueError(f"negative part size in {self}")
        if self.m_hh < 1 or self.m_hl < 1:
            raise ValueError(f"HH and HL parts need at least one bucket: {self}")
        if self.m_uf != m_uf:
            raise ValueError(f"{self} does not sum to m_uf={m_uf}")
        if self.m_hl + self.m_ll > m_df:
            raise ValueError(f"{self} does not fit m_df={m_df}")
        return self


@dataclass(frozen=True)
class SwitchConfig:
    layout: EncoderLayout
    thresholds: ClassifierThresholds = ClassifierThresholds()

    def to_dict(self):
        th = self.thresholds
        return {"m_hh": self.layout.m_hh, "m_hl": self.layout.m_hl, "m_ll": self.layout.m_ll,
                "T_h": th.T_h, "T_l": th.T_l, "sample_rate": th.sample_rate}


@dataclass(frozen=True)
class Deployment:
    """Parameters every switch and the controller must share."""

    seed: int = 0
    d: int = 3
    p: int = MERSENNE61
    m_uf: int = 4096
    m_df: int = 3072
    tower_levels: tuple = DEFAULT_LEVELS
    fermat_seeds: tuple = None
    tower_seeds: tuple = None
    sample_seed: int = None

    def __post_init__(self):
        if self.m_df > self.m_uf:
            raise ValueError("downstream encoder cannot exceed the upstream one")
        if self.fermat_seeds is None:
            object.__setattr__(self, "fermat_seeds", tuple(derive_seeds(self.seed, self.d, salt=1)))
        if self.tower_seeds is None:
            object.__setattr__(self, "tower_seeds",
                               tuple(derive_seeds(self.seed, len(self.tower_levels), salt=2)))
        if self.sample_seed is None:
            object.__setattr__(self, "sample_seed", derive_seeds(self.seed, 1, salt=3)[0])

    def fermat_params(self, m):
        return FermatParams(d=self.d, m=m, p=self.p, seeds=self.fermat_seeds)

    def tower_config(self):
        return TowerConfig(levels=self.tower_levels, seeds=self.tower_seeds)

    def validate(self, config):
        config.layout.validate(self.m_uf, self.m_df)
        th = config.thresholds
        if config.layout.m_ll == 0 and th.T_l > 1 and th.sample_rate > 0:
            raise ValueError("sampled LL candidates need a non-empty LL part")
        return config

    def healthy_config(self, m_hl=512, T_h=1):
        return SwitchConfig(EncoderLayout(self.m_uf - m_hl, m_hl, 0), ClassifierThresholds(T_h, 1, 1.0))

    def new_group(self, config):
        return SketchGroup.empty(self, config)


@dataclass
class SketchGroup:
    """One epoch's classifier plus upstream and downstream encoder parts."""

    config: SwitchConfig
    tower: TowerSketch
    upstream: dict
    downstream: dict
    packets: int = 0
    epoch_bit: int = 0
    switch_id: object = None

    @classmethod
    def empty(cls, dep, config, epoch_bit=0, switch_id=None):
        lay = config.layout
        sizes = {"hh": lay.m_hh, "hl": lay.m_hl, "ll": lay.m_ll}
        up = {k: FermatSketch(dep.fermat_params(sizes[k])) if sizes[k] else None for k in PARTS_UP}
        down = {k: FermatSketch(dep.fermat_params(sizes[k])) if sizes[k] else None
                for k in PARTS_DOWN}
        return cls(config, TowerSketch(dep.tower_config()), up, down,
                   epoch_bit=epoch_bit, switch_id=switch_id)

    def copy(self):
        return SketchGroup(self.config, self.tower.copy(),
                           {k: v.copy() if v is not None else None for k, v in self.upstream.items()},
                           {k: v.copy() if v is not None else None for k, v in self.downstream.items()},
                           self.packets, self.epoch_bit, self.switch_id)

    def to_dict(self):
        return {
            "format": "sketchgroup",
            "version": 1,
            "switch_id": self.switch_id,
            "epoch_bit": self.epoch_bit,
            "config": self.config.to_dict(),
            "tower": self.tower.to_dict(),
            "upstream": {k: v.to_dict() if v is not None else None for k, v in self.upstream.items()},
            "downstream": {k: v.to_dict() if v is not None else None
                           for k, v in self.downstream.items()},
        }

    @classmethod
    def from_dict(cls, data):
        if data.get("format") != "sketchgroup" or data.get("version") != 1:
            raise ValueError("not a version-1 sketchgroup dump")
        c = data["config"]
        config = SwitchConfig(EncoderLayout(c["m_hh"], c["m_hl"], c["m_ll"]),
                              ClassifierThresholds(c["T_h"], c["T_l"], c["sample_rate"]))
        load = lambda parts: {k: FermatSketch.from_dict(v) if v else None for k, v in parts.items()}
        return cls(config, TowerSketch.from_dict(data["tower"]), load(data["upstream"]),
                   load(data["downstream"]), epoch_bit=data["epoch_bit"],
                   switch_id=data["switch_id"])


@dataclass
class TaggedPacket:
    flow: int
    ingress_switch: object
    egress_switch: object
    hierarchy: Hierarchy
    epoch_bit: int


class EdgeSwitch:
    def __init__(self, switch_id, deployment, config=None):
        self.id = switch_id
        self.dep = deployment
        self.config = deployment.validate(config or deployment.healthy_config())
        self.staged = None
        self.current_bit = 0
        self.groups = [self._fresh(0), self._fresh(1)]

    def _fresh(self, bit):
        return SketchGroup.empty(self.dep, self.config, epoch_bit=bit, switch_id=self.id)

    @property
    def active(self):
        return self.groups[self.current_bit]

    @property
    def active_config(self):
        return self.active.config

    # -- per packet --------------------------------------------------------

    def process_ingress(self, f, egress_switch=None):
        g = self.active
        g.tower.update(f)
        tag = classify(g.tower, f, g.config.thresholds, self.dep.sample_seed)
        route = _ROUTE.get(tag)
        if route is not None:
            g.upstream[route[0]].update(f, 1)
        g.packets += 1
        return TaggedPacket(f, self.id, egress_switch, tag, self.current_bit)

    def process_egress(self, pkt):
        route = _ROUTE.get(Hierarchy(pkt.hierarchy))
        g = self.groups[pkt.epoch_bit]
        if route is not None:
            g.downstream[route[1]].update(pkt.flow, 1)
        g.packets += 1

    # -- batched (same result as the per-packet path, in arrival order) ----

    def ingress_batch(self, flows):
        """Process a packet sequence; returns ``(tags, epoch_bit)``."""
        flows = np.asarray(flows, dtype=np.uint64)
        g = self.active
        est = g.tower.insert_many(flows)
        tags = classify_sizes(est, flows, g.config.thresholds, self.dep.sample_seed)
        for tag, (part, _) in _ROUTE.items():
            _encode(g.upstream[part], flows[tags == tag])
        g.packets += flows.size
        return tags, self.current_bit

    def egress_batch(self, flows, tags, epoch_bit):
        flows = np.asarray(flows, dtype=np.uint64)
        tags = np.asarray(tags)
        g = self.groups[epoch_bit]
        _encode(g.downstream["hl"], flows[(tags == Hierarchy.HH) | (tags == Hierarchy.HL)])
        _encode(g.downstream["ll"], flows[tags == Hierarchy.SAMPLED_LL])
        g.packets += flows.size

    # -- control plane -----------------------------------------------------

    def rotate_epoch(self):
        """Flip the epoch bit and hand back the group of the epoch that ended.

        The returned group still receives late egress packets stamped with its
        bit; the group taking over is reinitialised with the staged config.
        """
        ended = self.current_bit
        if self.staged is not None:
            self.config, self.staged = self.staged, None
        self.current_bit ^= 1
        self.groups[self.current_bit] = self._fresh(self.current_bit)
        return self.groups[ended]

    def stage_reconfig(self, layout, thresholds, sample_rate=None):
        if sample_rate is not None:
            thresholds = replace(thresholds, sample_rate=sample_rate)
        self.staged = self.dep.validate(SwitchConfig(layout, thresholds))

    def apply_staged(self):
        """Install the staged config right away, provided no packet hit the active group.

        Lets a simulator whose controller answers instantly reconfigure at the
        epoch boundary instead of one rotation later.
        """
        if self.staged is None:
            return False
        if self.active.packets:
            raise RuntimeError("active group already recording; wait for rotation")
        self.config, self.staged = self.staged, None
        self.groups[self.current_bit] = self._fresh(self.current_bit)
        return True


def _encode(sketch, flows):
    if flows.size == 0:
        return
    if sketch is None:
        raise RuntimeError("packet routed to an encoder part with no memory")
    uniq, cnt = np.unique(flows, return_counts=True)
    sketch.update_many(uniq, cnt)


def process_ingress(sw, f, egress_switch=None):
    return sw.process_ingress(f, egress_switch)


def process_egress(sw, pkt):
    sw.process_egress(pkt)


def rotate_epoch(sw):
    return sw.rotate_epoch()


def stage_reconfig(sw, layout, thresholds, sample_rate=None):
    sw.stage_reconfig(layout, thresholds, sample_rate)
