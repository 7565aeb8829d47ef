"""Reference depth-pruning strategies: random-min, similarity, sensitivity and uniform spacing.

All strategies return a :class:`StrategyResult` whose mask retains exactly
``retain`` layers.  Probe data defaults to the first 256 held-out samples.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from depthprune.net import LayeredNet, forward_gated
from depthprune.task import TaskData
from depthprune.tensor import ContractError, DomainError

PROBE_SIZE = 256


@dataclass
class StrategyResult:
    mask: np.ndarray
    score: float
    diagnostics: np.ndarray
    trial_losses: np.ndarray | None = None


def task_loss(net: LayeredNet, mask, data: TaskData) -> float:
    out = forward_gated(net, np.asarray(mask, dtype=np.float64), data.x, data.cond).data
    return float(np.mean((out - data.target) ** 2))


def _check_retain(n: int, retain: int) -> None:
    if not 0 <= retain <= n:
        raise DomainError(f"cannot retain {retain} of {n} layers")


def _prune_by_score(scores: np.ndarray, retain: int) -> np.ndarray:
    """Drop the N - retain highest-scoring layers; ties drop the lower index first."""
    n = len(scores)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    mask = np.ones(n, dtype=np.int8)
    mask[order[:n - retain]] = 0
    return mask


def random_min(teacher: LayeredNet, data: TaskData, retain: int, trials: int = 8,
               seed: int = 80) -> StrategyResult:
    """Best of ``trials`` uniformly random masks by gated task loss on the probe batch.

    Trial t draws from its own substream of ``SeedSequence(seed)``.
    Diagnostics hold, per layer, the mean trial loss over trials that kept it.
    """
    n = teacher.n_layers
    _check_retain(n, retain)
    if trials < 1:
        raise DomainError("trials must be >= 1")
    masks, losses = [], []
    for child in np.random.SeedSequence(seed).spawn(trials):
        rng = np.random.default_rng(child)
        mask = np.zeros(n, dtype=np.int8)
        mask[rng.choice(n, retain, replace=False)] = 1
        masks.append(mask)
        losses.append(task_loss(teacher, mask, data))
    best = int(np.argmin(losses))
    kept = np.array(masks, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        diag = (kept * np.array(losses)[:, None]).sum(axis=0) / kept.sum(axis=0)
    return StrategyResult(masks[best], float(losses[best]), diag, np.array(losses))


def layer_similarities(teacher: LayeredNet, data: TaskData) -> np.ndarray:
    """Mean cosine similarity between each layer's input and output over the probe batch."""
    if len(data) == 0:
        raise ContractError("probe data is empty")
    states: list = []
    forward_gated(teacher, np.ones(teacher.n_layers), data.x, data.cond, hidden=states)
    scores = np.zeros(teacher.n_layers)
    for i in range(teacher.n_layers):
        a, b = states[i].data, states[i + 1].data
        na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
        ok = (na > 0) & (nb > 0)
        if not ok.any():
            raise ContractError(f"layer {i}: every probe sample has a zero-norm activation")
        cos = np.sum(a[ok] * b[ok], axis=1) / (na[ok] * nb[ok])
        scores[i] = cos.mean()
    return scores


def similarity_prune(teacher: LayeredNet, data: TaskData, retain: int) -> StrategyResult:
    _check_retain(teacher.n_layers, retain)
    scores = layer_similarities(teacher, data)
    mask = _prune_by_score(scores, retain)
    pruned = scores[mask == 0]
    return StrategyResult(mask, float(pruned.mean()) if pruned.size else 0.0, scores)


def layer_sensitivities(teacher: LayeredNet, data: TaskData) -> np.ndarray:
    """Task-loss increase when each single layer is gated off."""
    if len(data) == 0:
        raise ContractError("probe data is empty")
    n = teacher.n_layers
    base = task_loss(teacher, np.ones(n), data)
    out = np.zeros(n)
    for i in range(n):
        mask = np.ones(n)
        mask[i] = 0.0
        out[i] = task_loss(teacher, mask, data) - base
    return out


def sensitivity_prune(teacher: LayeredNet, data: TaskData, retain: int) -> StrategyResult:
    _check_retain(teacher.n_layers, retain)
    sens = layer_sensitivities(teacher, data)
    mask = _prune_by_score(-sens, retain)
    return StrategyResult(mask, float(sens[mask == 0].sum()), sens)


def uniform_prune(n_layers: int, retain: int, phase: int = 0) -> StrategyResult:
    """Keep evenly spaced layers ``round(phase + i * N / M) mod N`` (halves round up)."""
    _check_retain(n_layers, retain)
    mask = np.zeros(n_layers, dtype=np.int8)
    if retain == 0:
        return StrategyResult(mask, 0.0, mask.astype(np.float64))
    if not 0 <= phase < math.ceil(n_layers / retain):
        raise DomainError(f"phase {phase} outside [0, {math.ceil(n_layers / retain)})")
    step = n_layers / retain
    idx = [int(math.floor(phase + i * step + 0.5)) % n_layers for i in range(retain)]
    mask[idx] = 1
    return StrategyResult(mask, 0.0, mask.astype(np.float64))


def write_scores(scores, path) -> None:
    """Per-layer diagnostics as CSV rows ``layer,score``."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "score"])
        for i, s in enumerate(scores):
            w.writerow([i, format(float(s), ".17g")])
