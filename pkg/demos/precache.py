"""Freeze conditioning into cached scale/shift and drop the conditioning weights."""

import numpy as np

from depthprune.net import forward, init_net, strip_conditioning

rng = np.random.default_rng(80)
net = init_net(6, 8, 4, seed=80)
for blk in net.layers:  # give the modulation something to do
    blk.modulation.w_cond.data = rng.normal(0, 0.3, blk.modulation.w_cond.shape)
    blk.modulation.b_cond.data = rng.normal(0, 0.3, blk.modulation.b_cond.shape)

cond = np.array([0.2, -0.1, 0.4, 0.0])
small = strip_conditioning(net, cond)
print("parameters", net.param_count(), "->", small.param_count())

x = rng.uniform(-1, 1, (100, 8))
a = forward(net, x, np.tile(cond, (100, 1))).data
b = forward(small, x).data
print("bitwise equal:", a.tobytes() == b.tobytes())

# a different conditioning vector no longer matters
c = forward(net, x, np.tile(cond + 1.0, (100, 1))).data
print("max change had cond moved:", np.abs(a - c).max())
