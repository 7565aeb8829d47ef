"""Straight-through Gumbel-Softmax: hard samples forward, soft gradients backward."""

import numpy as np

from depthprune import tensor as T
from depthprune.gumbel import gumbel_softmax, select_mask
from depthprune.masks import BlockPartition, OptionTable

rng = np.random.default_rng(80)
logits = np.array([1.0, 0.0, -0.5])

# argmax frequencies track softmax(logits) at any temperature
z = np.tile(logits, (50_000, 1))
for tau in (1.0, 0.3):
    soft = gumbel_softmax(z, tau, rng).data
    freq = np.bincount(soft.argmax(axis=1), minlength=3) / len(z)
    print(f"tau={tau}: argmax freq {np.round(freq, 3)}")
p = np.exp(logits) / np.exp(logits).sum()
print("softmax         ", np.round(p, 3))

# one draw of a local mask for a block of 4 keeping 2
part = BlockPartition(8, 4, 2)
table = OptionTable.for_partition(part)
q = T.Tensor(np.zeros(len(table)), requires_grad=True)
local, choice = select_mask(q, table, 0, rng)
print("picked option", choice, "->", local.data)

# the hard forward still sends a gradient to every logit
T.backward(T.tsum(local * T.Tensor([1.0, 2.0, 3.0, 4.0])))
print("d/dlogits", np.round(q.grad, 4))
