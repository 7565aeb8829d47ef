"""Synthetic regression task standing in for the image data pipeline.

Inputs are uniform on [-1, 1]^8, the target is a fixed random one-hidden-layer
tanh map generated from :data:`TARGET_SEED`, and the conditioning vector is
the first :data:`COND_DIM` input coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

IN_DIM = 8
OUT_DIM = 8
COND_DIM = 4
TARGET_HIDDEN = 16
TARGET_SEED = 2024
N_TRAIN = 4096
N_HELDOUT = 1024


@dataclass(frozen=True)
class TaskData:
    x: np.ndarray
    cond: np.ndarray
    target: np.ndarray

    def __len__(self) -> int:
        return len(self.x)

    def take(self, idx) -> TaskData:
        return TaskData(self.x[idx], self.cond[idx], self.target[idx])

    def head(self, n: int) -> TaskData:
        return self.take(slice(0, n))


@dataclass(frozen=True)
class Splits:
    train: TaskData
    heldout: TaskData
    seed: int


def target_map(x: np.ndarray) -> np.ndarray:
    rng = np.random.default_rng(TARGET_SEED)
    w1 = rng.normal(0.0, 1.5 / np.sqrt(IN_DIM), (IN_DIM, TARGET_HIDDEN))
    b1 = rng.normal(0.0, 0.3, TARGET_HIDDEN)
    w2 = rng.normal(0.0, 1.0 / np.sqrt(TARGET_HIDDEN), (TARGET_HIDDEN, OUT_DIM))
    return np.tanh(x @ w1 + b1) @ w2


def make_task(n: int, seed: int) -> TaskData:
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, (n, IN_DIM))
    return TaskData(x, x[:, :COND_DIM].copy(), target_map(x))


def make_splits(seed: int = 80, n_train: int = N_TRAIN, n_heldout: int = N_HELDOUT) -> Splits:
    """Training pool from ``seed``; held-out set from ``seed + 1``, never trained on."""
    return Splits(make_task(n_train, seed), make_task(n_heldout, seed + 1), seed)
