"""FermatSketch walkthrough: encode flows, subtract, peel the difference."""
import numpy as np

from fermatmon.fermat import FermatSketch, fold

# two sketches with the same seeds, one per end of a link
up = FermatSketch.create(m=256, d=3, seed=1)
down = up.copy()

rng = np.random.default_rng(0)
flows = rng.choice(1 << 32, 500, replace=False).astype(np.uint64) + 1
sizes = rng.integers(1, 40, flows.size)
up.update_many(flows, sizes)  # every packet sent

# three flows lose packets in transit
lost = np.zeros_like(sizes)
lost[[3, 77, 400]] = [2, 5, 1]
down.update_many(flows, sizes - lost)  # every packet delivered

delta = up - down  # bucketwise, so it holds only the lost traffic
out = delta.decode()
print(out.status, dict(out.flowset))
print({int(f): int(n) for f, n in zip(flows[lost > 0], lost[lost > 0])})

# the full sketch holds 500 flows in 768 buckets: load 0.65, below ~0.81
print(up.decode().success, len(up.decode().flowset))

# folding shrinks a sketch after the fact; 4x smaller still decodes the delta
small = fold(delta, 4)
print(small.m, small.decode().flowset == out.flowset)

# too many flows for the buckets: decoding fails as a value, not an exception
crowded = FermatSketch.create(m=64, seed=2)
crowded.update_many(flows)
res = crowded.decode()
print(res.status, res.residual_nonzero_buckets, crowded.linear_count())
