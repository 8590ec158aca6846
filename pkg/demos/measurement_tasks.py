"""Heavy hitters, cardinality, entropy and losses from one epoch of one network."""
import numpy as np

from fermatmon.controller import accumulation_tasks, analyze_switch, detect_losses
from fermatmon.edge import Deployment
from fermatmon.fsd import entropy, exact_fsd
from fermatmon.simnet import (ControllerState, LossSpec, Network, WorkloadSpec, generate,
                              oracle_diff)

dep = Deployment(seed=3)
net = Network(dep)
net.stage(ControllerState.initial(dep, range(4)).configs())

wl = generate(WorkloadSpec(n_flows=10_000, zipf_alpha=1.0, total_packets=100_000, seed=3))
groups, truth = net.run_epoch(wl, LossSpec(victim_ratio=0.02, loss_rate=0.1, seed=3))

for sid, g in groups.items():
    res = accumulation_tasks(g, analyze_switch(g))
    at = wl.ingress == sid
    print(f"switch {sid}: {at.sum()} flows, cardinality {res.cardinality}, "
          f"entropy {res.entropy:.3f} (true {entropy(exact_fsd(wl.sizes[at])):.3f}), "
          f"heavy hitters {sorted(res.heavy_hitters.values(), reverse=True)[:5]}")

rep = detect_losses(groups)
diff = oracle_diff(truth, rep.losses)
print(rep.status, len(rep.losses), "victims, exact:", diff.exact)
print("largest losses", sorted(rep.losses.values(), reverse=True)[:5],
      "true", sorted(np.asarray(truth.lost)[truth.lost > 0].tolist(), reverse=True)[:5])
