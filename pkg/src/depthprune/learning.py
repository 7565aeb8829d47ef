"""Joint learning of blockwise mask distributions, inter-block transforms and low-rank deltas.

The distribution has two logit families:

* ``block_logits[j]`` over the C(B, s) local masks of block j (the factored p(m));
* ``transform_logits[j]`` over (corrode, identity, expand) for the adjacent
  pair (j, j+1).  "expand" moves k retained layers from block j into block
  j+1, "corrode" moves k layers from block j+1 back into block j.

Each step samples a mask through straight-through Gumbel-Softmax, runs the
gated student (frozen teacher weights + low-rank deltas) and backpropagates
the pruning loss into the deltas and both logit families.
"""

from __future__ import annotations

import copy
import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from depthprune.gumbel import anneal_tau, gumbel_softmax, select_mask
from depthprune.masks import (
    BACKWARD,
    FORWARD,
    BlockPartition,
    OptionTable,
    TransformationInfeasible,
    apply_transformation,
    compose_mask,
    marginal_profile,
    transform_tensor,
)
from depthprune.net import LayeredNet, attach_deltas, forward, forward_gated
from depthprune.optim import clip_grad_norm, sgd_step, zero_grad
from depthprune.task import TaskData
from depthprune.tensor import (
    ContractError,
    DomainError,
    Tensor,
    backward,
    concat,
    l1,
    mse,
    straight_through,
)

log = logging.getLogger(__name__)

TRANSFORMS = ("corrode", "identity", "expand")
CORRODE, IDENTITY, EXPAND = range(3)
_DIRECTION = {EXPAND: FORWARD, CORRODE: BACKWARD}


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, state):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.state = state


@dataclass
class PruningDistribution:
    block_logits: list[Tensor]
    transform_logits: list[Tensor]
    tau: float = 1.0
    k: int = 1

    def __post_init__(self):
        if not self.tau > 0:
            raise DomainError("tau must be positive")
        if self.transform_logits and len(self.transform_logits) != len(self.block_logits) - 1:
            raise DomainError("need one transform logit vector per adjacent block pair")

    @classmethod
    def uniform(cls, part: BlockPartition, tau: float = 1.0, k: int = 1) -> PruningDistribution:
        n_opt = math.comb(part.block_size, part.keep_per_block)
        blocks = [Tensor(np.zeros(n_opt), requires_grad=True) for _ in range(part.n_blocks)]
        pairs = [Tensor(np.zeros(len(TRANSFORMS)), requires_grad=True) for _ in range(part.n_blocks - 1)]
        return cls(blocks, pairs, tau, k)

    def parameters(self) -> list[Tensor]:
        return [*self.block_logits, *self.transform_logits]

    def to_state(self) -> dict[str, np.ndarray]:
        st = {f"p.block.{j}": t.data for j, t in enumerate(self.block_logits)}
        st.update({f"q.pair.{j}": t.data for j, t in enumerate(self.transform_logits)})
        st["dist.tau"] = np.asarray(self.tau)
        st["dist.k"] = np.asarray(float(self.k))
        return st

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> PruningDistribution:
        K = sum(1 for k in state if k.startswith("p.block."))
        blocks = [Tensor(state[f"p.block.{j}"], requires_grad=True) for j in range(K)]
        pairs = [Tensor(state[f"q.pair.{j}"], requires_grad=True) for j in range(K - 1) if f"q.pair.{j}" in state]
        return cls(blocks, pairs, float(state["dist.tau"]), int(state["dist.k"]))


@dataclass
class TrainConfig:
    lambda_task: float = 1.0
    lambda_distill: float = 1.0
    steps: int = 2000
    lr_params: float = 0.01
    lr_logits: float = 0.05
    batch: int = 64
    seed: int = 80
    activation_enabled: bool = True
    tau: float = 1.0
    tau_final: float | None = None
    k: int = 1
    grad_clip: float = 1.0
    block_size: int = 4
    keep: int = 2
    rank: int = 4
    pi_every: int = 1

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1 or self.lr_params <= 0 or self.lr_logits <= 0:
            raise DomainError("steps must be >= 0; batch and learning rates positive")
        if self.tau <= 0 or (self.tau_final is not None and self.tau_final <= 0):
            raise DomainError("temperatures must be positive")
        if self.k < 0 or self.pi_every < 1:
            raise DomainError("k must be >= 0 and pi_every >= 1")


def pruning_loss(student_out: Tensor, teacher_out, target, cfg: TrainConfig) -> Tensor:
    """lambda_task * MSE(student, target) + lambda_distill * mean|student - teacher|."""
    if student_out.shape != np.shape(getattr(teacher_out, "data", teacher_out)) or \
            student_out.shape != np.shape(getattr(target, "data", target)):
        raise ContractError("student, teacher and target shapes must agree")
    return cfg.lambda_task * mse(student_out, target) + cfg.lambda_distill * l1(student_out, teacher_out)


@dataclass
class SampleTrace:
    choices: list[int]
    transforms: list[int] = field(default_factory=list)
    applied: list[bool] = field(default_factory=list)


@dataclass
class SampledMask:
    mask: Tensor
    trace: SampleTrace


def sample_training_mask(dist: PruningDistribution, table: OptionTable, part: BlockPartition,
                         pi, rng: np.random.Generator, activation: bool = True) -> SampledMask:
    """Draw local masks per block, then (optionally) one transform per adjacent pair.

    Pairs are processed in ascending order, each seeing the previous result.
    All three transform candidates are built so the straight-through weights
    pass gradients to every transform logit; the forward value is exactly the
    sampled candidate.  An infeasible candidate falls back to the identity.
    """
    locals_, choices = [], []
    for j, logits in enumerate(dist.block_logits):
        local, choice = select_mask(logits, table, j, rng, dist.tau)
        locals_.append(local)
        choices.append(choice)
    m = concat(locals_)
    trace = SampleTrace(choices)
    if not activation or dist.k < 1:
        return SampledMask(m, trace)
    for j, q in enumerate(dist.transform_logits):
        w = straight_through(gumbel_softmax(q, dist.tau, rng))
        t = int(np.argmax(w.data))
        candidates = []
        feasible = []
        for option in range(len(TRANSFORMS)):
            if option == IDENTITY:
                candidates.append(m)
                feasible.append(True)
                continue
            try:
                candidates.append(transform_tensor(m, j, _DIRECTION[option], dist.k, pi, part))
                feasible.append(True)
            except TransformationInfeasible:
                candidates.append(m)
                feasible.append(False)
        m = w[0] * candidates[0] + w[1] * candidates[1] + w[2] * candidates[2]
        trace.transforms.append(t)
        trace.applied.append(feasible[t] and t != IDENTITY)
    return SampledMask(m, trace)


def _softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def total_mask_probability(dist: PruningDistribution, trace: SampleTrace) -> float:
    """Product of block and transform probabilities along a trace (reachability weight fixed at 1)."""
    p = 1.0
    for logits, c in zip(dist.block_logits, trace.choices):
        p *= _softmax(logits.data)[c]
    for logits, t in zip(dist.transform_logits, trace.transforms):
        p *= _softmax(logits.data)[t]
    return float(p)


def transformed_marginal_profile(dist: PruningDistribution, table: OptionTable, part: BlockPartition,
                                 max_traces: int = 2_000_000) -> np.ndarray:
    """Per-layer retention probability over the transform-augmented distribution.

    Exact enumeration of every (choices, transforms) trace; diagnostic only.
    """
    K = part.n_blocks
    n_opt = len(table)
    n_pairs = len(dist.transform_logits)
    if n_opt ** K * 3 ** n_pairs > max_traces:
        raise DomainError("too many traces to enumerate")
    pi = marginal_profile(dist, table)
    pb = [_softmax(t.data) for t in dist.block_logits]
    pq = [_softmax(t.data) for t in dist.transform_logits]
    out = np.zeros(part.n_layers)
    for choices in itertools.product(range(n_opt), repeat=K):
        base = compose_mask(choices, table, part)
        p_base = math.prod(pb[j][c] for j, c in enumerate(choices))
        for ts in itertools.product(range(3), repeat=n_pairs):
            m = base
            for j, t in enumerate(ts):
                if t != IDENTITY:
                    try:
                        m = apply_transformation(m, j, _DIRECTION[t], dist.k, pi, part)
                    except TransformationInfeasible:
                        pass
            out += p_base * math.prod(pq[j][t] for j, t in enumerate(ts)) * m
    return out


def _argmax_prefer_identity(q) -> int:
    # An untrained (flat) transform distribution must not move any budget.
    q = np.asarray(q)
    if q[IDENTITY] == q.max():
        return IDENTITY
    return int(np.argmax(q))


def decide_mask(dist: PruningDistribution, table: OptionTable, part: BlockPartition,
                log_lines: list[str] | None = None) -> np.ndarray:
    """Final binary mask from a trained distribution.

    Start from the top-s layers of each block by marginal pi, then apply the
    argmax transform of each pair in ascending order (expansion adds the
    highest-pi inactive layers, corrosion drops the lowest-pi active ones).
    Infeasible transforms are skipped and logged.  Layer ties go to lower
    indices; a transform tie involving identity resolves to identity.
    """
    pi = marginal_profile(dist, table)
    s = part.keep_per_block
    m = np.zeros(part.n_layers, dtype=np.int8)
    for j in range(part.n_blocks):
        rng_j = part.block_range(j)
        order = sorted(rng_j, key=lambda i: (-pi[i], i))
        m[order[:s]] = 1
    lines = log_lines if log_lines is not None else []
    for j, q in enumerate(dist.transform_logits):
        t = _argmax_prefer_identity(q.data)
        if t == IDENTITY:
            lines.append(f"pair {j}-{j + 1}: identity")
            continue
        try:
            m = apply_transformation(m, j, _DIRECTION[t], dist.k, pi, part)
            lines.append(f"pair {j}-{j + 1}: {TRANSFORMS[t]} k={dist.k}")
        except TransformationInfeasible as exc:
            lines.append(f"pair {j}-{j + 1}: {TRANSFORMS[t]} infeasible ({exc}); identity used")
    for j in range(part.n_blocks):
        lines.append(f"block {j}: keeps {int(part.block_counts(m)[j])} layers")
    return m


@dataclass
class MaskLearningResult:
    dist: PruningDistribution
    student: LayeredNet
    history: list[float]

    @property
    def deltas(self):
        return self.student.deltas


def smoothed(history, window: int = 100) -> np.ndarray:
    h = np.asarray(history, dtype=np.float64)
    if len(h) < window:
        return np.array([h.mean()]) if len(h) else h
    c = np.cumsum(np.concatenate([[0.0], h]))
    return (c[window:] - c[:-window]) / window


def _precompute_teacher(teacher: LayeredNet, data: TaskData) -> np.ndarray:
    return forward(teacher, data.x, data.cond).data


def train_mask(teacher: LayeredNet, data: TaskData, cfg: TrainConfig) -> MaskLearningResult:
    """Jointly optimise the mask distribution and low-rank deltas with SGD."""
    part = BlockPartition(teacher.n_layers, cfg.block_size, cfg.keep)
    table = OptionTable.for_partition(part)
    dist = PruningDistribution.uniform(part, cfg.tau, cfg.k)
    student = attach_deltas(teacher, cfg.rank, cfg.seed)
    teacher_out = _precompute_teacher(teacher, data)
    rng = np.random.default_rng(cfg.seed)
    deltas = student.delta_parameters()
    logits = dist.parameters()
    params = deltas + logits
    history: list[float] = []
    pi = marginal_profile(dist, table)
    for step in range(cfg.steps):
        dist.tau = anneal_tau(step, cfg.steps, cfg.tau, cfg.tau_final)
        if step % cfg.pi_every == 0:
            pi = marginal_profile(dist, table)
        idx = rng.integers(0, len(data), cfg.batch)
        sample = sample_training_mask(dist, table, part, pi, rng, cfg.activation_enabled)
        out = forward_gated(student, sample.mask, data.x[idx], data.cond[idx])
        loss = pruning_loss(out, teacher_out[idx], data.target[idx], cfg)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(step, MaskLearningResult(dist, student, history))
        zero_grad(params)
        backward(loss)
        clip_grad_norm(deltas, cfg.grad_clip)
        clip_grad_norm(logits, cfg.grad_clip)
        sgd_step(deltas, cfg.lr_params)
        sgd_step(logits, cfg.lr_logits)
        history.append(value)
    dist.tau = cfg.tau if cfg.tau_final is None else cfg.tau_final
    return MaskLearningResult(dist, student, history)


def evaluate_distribution(student: LayeredNet, dist: PruningDistribution, data: TaskData,
                          cfg: TrainConfig, n_samples: int = 100, seed: int = 0) -> float:
    """Mean pruning loss over fresh mask/batch samples; no parameters change."""
    part = BlockPartition(student.n_layers, cfg.block_size, cfg.keep)
    table = OptionTable.for_partition(part)
    pi = marginal_profile(dist, table)
    rng = np.random.default_rng(seed)
    teacher_out = _precompute_teacher(_base_teacher(student), data)
    dist = copy.deepcopy(dist)
    for t in dist.parameters():
        t.requires_grad = False
    total = 0.0
    for _ in range(n_samples):
        idx = rng.integers(0, len(data), cfg.batch)
        sample = sample_training_mask(dist, table, part, pi, rng, cfg.activation_enabled)
        out = forward_gated(student, sample.mask.data, data.x[idx], data.cond[idx])
        total += pruning_loss(out, teacher_out[idx], data.target[idx], cfg).item()
    return total / n_samples


def _base_teacher(student: LayeredNet) -> LayeredNet:
    t = copy.copy(student)
    t.deltas = None
    return t
