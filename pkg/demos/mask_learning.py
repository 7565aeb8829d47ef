"""Learn a pruning-mask distribution on a small teacher, then decide a mask."""

import numpy as np

from depthprune.learning import TrainConfig, decide_mask, smoothed, train_mask
from depthprune.masks import BlockPartition, OptionTable, mask_to_string, marginal_profile
from depthprune.recovery import train_teacher
from depthprune.task import make_splits

data = make_splits(80, n_train=1024, n_heldout=256)
fit = train_teacher(data, n_layers=8, d=8, steps=1500)
print(f"teacher held-out MSE {fit.heldout_loss:.4f}")

cfg = TrainConfig(steps=400, block_size=4, keep=2, batch=32)
res = train_mask(fit.net, data.train, cfg)
sm = smoothed(res.history, 50)
print(f"pruning loss {sm[0]:.4f} -> {sm[-1]:.4f}")

part = BlockPartition(8, 4, 2)
table = OptionTable.for_partition(part)
print("retention marginals", np.round(marginal_profile(res.dist, table), 3))
print("transform probs (corrode, identity, expand):",
      [np.round(np.exp(q.data) / np.exp(q.data).sum(), 3) for q in res.dist.transform_logits])

log = []
mask = decide_mask(res.dist, table, part, log)
print("decided mask", mask_to_string(mask))
print("\n".join(log))
