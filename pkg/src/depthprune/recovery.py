"""Teacher fitting, distillation fine-tuning of pruned students, and the strategy benchmark."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from depthprune import baselines
from depthprune.learning import TrainConfig, decide_mask, train_mask
from depthprune.masks import BlockPartition, OptionTable, mask_to_string
from depthprune.net import LayeredNet, attach_deltas, forward, forward_gated, init_net
from depthprune.optim import Adam, clip_grad_norm, sgd_step, zero_grad
from depthprune.task import COND_DIM, Splits, TaskData
from depthprune.tensor import DomainError, backward, l1, mse

log = logging.getLogger(__name__)

TEACHER_TARGET_LOSS = 0.05
REPORT_HEADER = ("strategy", "seed", "mask", "loss_init", "loss_final", "recovery_ratio")


class FinetuneDiverged(RuntimeError):
    def __init__(self, step: int, student: LayeredNet):
        super().__init__(f"non-finite distillation loss at step {step}")
        self.step = step
        self.student = student


@dataclass
class TeacherFit:
    net: LayeredNet
    heldout_loss: float
    reached_target: bool


def train_teacher(data: Splits, n_layers: int = 12, d: int = 16, seed: int = 80, steps: int = 5000,
                  lr: float = 3e-3, batch: int = 64) -> TeacherFit:
    """Fit a full network (all layers on) to the synthetic target with Adam.

    The learning rate decays with a cosine schedule.  If held-out MSE stays
    above 0.05 a warning is logged and the net is still returned.
    """
    if steps < 1:
        raise DomainError("teacher training needs at least one step")
    net = init_net(n_layers, d, COND_DIM, seed)
    params = net.parameters()
    for p in params:
        p.requires_grad = True
    opt = Adam(params, lr)
    rng = np.random.default_rng(seed)
    train = data.train
    for step in range(steps):
        idx = rng.integers(0, len(train), batch)
        out = forward(net, train.x[idx], train.cond[idx])
        loss = mse(out, train.target[idx])
        zero_grad(params)
        backward(loss)
        opt.step(lr * 0.5 * (1.0 + math.cos(math.pi * step / steps)))
    for p in params:
        p.requires_grad = False
        p.grad = None
    held = heldout_mse(net, data.heldout)
    ok = held < TEACHER_TARGET_LOSS
    if not ok:
        log.warning("teacher held-out MSE %.4f did not reach %.2f in %d steps", held, TEACHER_TARGET_LOSS, steps)
    return TeacherFit(net, held, ok)


def heldout_mse(net: LayeredNet, data: TaskData) -> float:
    out = forward(net, data.x, data.cond).data
    return float(np.mean((out - data.target) ** 2))


@dataclass
class FinetuneConfig:
    steps: int = 2000
    lr: float = 0.05
    batch: int = 64
    rank: int = 4
    seed: int = 80
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1 or self.lr <= 0 or self.rank < 1:
            raise DomainError("invalid fine-tuning configuration")


@dataclass
class RecoveryRecord:
    strategy: str
    seed: int
    mask: np.ndarray
    loss_init: float
    loss_final: float

    @property
    def recovery_ratio(self) -> float:
        """loss_final / loss_init; 1.0 when both are zero (nothing lost, nothing to recover)."""
        if self.loss_init > 0:
            return self.loss_final / self.loss_init
        return 1.0 if self.loss_final == 0 else math.inf


def distill_loss(student: LayeredNet, teacher_out: np.ndarray, mask, data: TaskData) -> float:
    out = forward_gated(student, mask, data.x, data.cond).data
    return float(np.mean(np.abs(out - teacher_out)))


def finetune_student(teacher: LayeredNet, mask, data: Splits, cfg: FinetuneConfig,
                     strategy: str = "") -> tuple[LayeredNet, RecoveryRecord]:
    """Recover a pruned student by L1 distillation onto the frozen teacher.

    Only the low-rank deltas of the retained layers train.  Losses are mean
    absolute output error on the held-out split, before and after.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise DomainError("finetune_student needs a binary mask")
    student = attach_deltas(teacher, cfg.rank, cfg.seed)
    train, held = data.train, data.heldout
    teacher_train = forward(teacher, train.x, train.cond).data
    teacher_held = forward(teacher, held.x, held.cond).data
    params = [t for keep, layer in zip(mask, student.deltas) if keep
              for dl in layer.values() for t in (dl.A, dl.B)]
    loss_init = distill_loss(student, teacher_held, mask, held)
    rng = np.random.default_rng(cfg.seed)
    for step in range(cfg.steps):
        idx = rng.integers(0, len(train), cfg.batch)
        loss = l1(forward_gated(student, mask, train.x[idx], train.cond[idx]), teacher_train[idx])
        if not np.isfinite(loss.item()):
            raise FinetuneDiverged(step, student)
        zero_grad(params)
        backward(loss)
        clip_grad_norm(params, cfg.grad_clip)
        sgd_step(params, cfg.lr)
    loss_final = loss_init if cfg.steps == 0 else distill_loss(student, teacher_held, mask, held)
    for p in student.delta_parameters():
        p.grad = None
    return student, RecoveryRecord(strategy, cfg.seed, mask.astype(np.int8), loss_init, loss_final)


# -- report ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_report(records, path) -> None:
    """CSV ``strategy,seed,mask,loss_init,loss_final,recovery_ratio`` sorted by (strategy, seed)."""
    rows = sorted(records, key=lambda r: (r.strategy, r.seed))
    lines = [",".join(REPORT_HEADER)]
    for r in rows:
        lines.append(",".join([r.strategy, str(r.seed), mask_to_string(r.mask),
                               _fmt(r.loss_init), _fmt(r.loss_final), _fmt(r.recovery_ratio)]))
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc


def recoverability_report(records, path) -> None:
    records = list(records)
    if not records:
        raise DomainError("no records to report")
    write_report(records, path)


def read_report(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["seed"] = int(r["seed"])
        for key in ("loss_init", "loss_final", "recovery_ratio"):
            r[key] = float(r[key])
    return rows


# -- benchmark ------------------------------------------------------------------------

STRATEGIES = ("random-min", "similarity", "sensitivity", "uniform", "learned")
EXTRA_STRATEGIES = ("block-local",)


@dataclass
class BenchmarkConfig:
    block_size: int = 4
    keep: int = 2
    random_trials: int = 8
    mask: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)


def strategy_mask(name: str, teacher: LayeredNet, data: Splits, seed: int,
                  cfg: BenchmarkConfig) -> np.ndarray:
    """The pruning mask a strategy picks for this teacher at the configured rate."""
    n = teacher.n_layers
    part = BlockPartition(n, cfg.block_size, cfg.keep)
    retain = part.retained
    probe = data.heldout.head(baselines.PROBE_SIZE)
    if name == "random-min":
        return baselines.random_min(teacher, probe, retain, cfg.random_trials, seed).mask
    if name == "similarity":
        return baselines.similarity_prune(teacher, probe, retain).mask
    if name == "sensitivity":
        return baselines.sensitivity_prune(teacher, probe, retain).mask
    if name == "uniform":
        return baselines.uniform_prune(n, retain, 0).mask
    if name in ("learned", "block-local"):
        mcfg = replace(cfg.mask, seed=seed, block_size=cfg.block_size, keep=cfg.keep,
                       activation_enabled=(name == "learned"))
        res = train_mask(teacher, data.train, mcfg)
        return decide_mask(res.dist, OptionTable.for_partition(part), part)
    raise DomainError(f"unknown strategy {name!r}")


def run_cell(args) -> RecoveryRecord:
    name, seed, teacher, data, cfg = args
    mask = strategy_mask(name, teacher, data, seed, cfg)
    _, rec = finetune_student(teacher, mask, data, replace(cfg.finetune, seed=seed), name)
    log.info("%s seed=%d mask=%s loss %.5f -> %.5f", name, seed, mask_to_string(mask),
             rec.loss_init, rec.loss_final)
    return rec


def run_benchmark(teacher: LayeredNet, data: Splits, seeds, strategies=STRATEGIES,
                  cfg: BenchmarkConfig | None = None, jobs: int = 1) -> list[RecoveryRecord]:
    cfg = cfg or BenchmarkConfig()
    cells = [(name, int(s), teacher, data, cfg) for name in strategies for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run_cell, cells))
    return [run_cell(c) for c in cells]
