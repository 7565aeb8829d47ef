"""Compare how well masks from each strategy recover under distillation."""

import numpy as np

from depthprune.learning import TrainConfig
from depthprune.recovery import BenchmarkConfig, FinetuneConfig, run_benchmark, train_teacher
from depthprune.task import make_splits

data = make_splits(80, n_train=1024, n_heldout=256)
teacher = train_teacher(data, n_layers=8, d=8, steps=1500).net

cfg = BenchmarkConfig(mask=TrainConfig(steps=300, batch=32), finetune=FinetuneConfig(steps=300, batch=32))
records = run_benchmark(teacher, data, seeds=[80, 81], cfg=cfg)

print(f"{'strategy':<12} {'seed':>4} {'mask':>9} {'before':>8} {'after':>8} {'ratio':>6}")
for r in records:
    print(f"{r.strategy:<12} {r.seed:>4} {''.join(map(str, r.mask)):>9} "
          f"{r.loss_init:8.4f} {r.loss_final:8.4f} {r.recovery_ratio:6.3f}")

for name in dict.fromkeys(r.strategy for r in records):
    print(name, "median after:", round(float(np.median([r.loss_final for r in records if r.strategy == name])), 4))
