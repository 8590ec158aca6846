"""Watch the controller move encoder memory as losses grow and then fade."""
from fermatmon.edge import Deployment
from fermatmon.simnet import Controller, LossSpec, Network, WorkloadSpec, generate, run_window

dep = Deployment(seed=0)
net = Network(dep)  # four edge switches
ctl = Controller(dep, [sw.id for sw in net.switches])

wl = generate(WorkloadSpec(n_flows=20_000, dist="powerlaw", zipf_alpha=2.2, min_size=4, seed=1))

# calm, then a burst of victims too large for the delta encoder, then calm again
phases = [
    (wl, LossSpec(victims=500, loss_rate=0.5, seed=1), 3),
    (wl, LossSpec(victims=12_000, loss_rate=0.5, seed=2), 5),
    (wl, LossSpec(victims=500, loss_rate=0.5, seed=3), 4),
]
records = run_window(phases, net, ctl, seed=0)

for r in records:
    hl = r["hl"]
    print(f"epoch {r['epoch']:2d} {r['mode']:7s} layout {r['layout']} T_l {r['T_l']:3d} "
          f"R {r['sample_rate']:.3f} HL {hl['status']:8s} load {hl['load']:.2f} "
          f"victims {r['truth']['victims']}")
    for note in r["notes"]:
        print("         ", note)
