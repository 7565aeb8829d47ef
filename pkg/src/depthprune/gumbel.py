"""Gumbel-Softmax sampling with a straight-through hard forward pass."""

from __future__ import annotations

import numpy as np

from depthprune.masks import OptionTable
from depthprune.tensor import ContractError, Tensor, as_tensor, matmul, softmax_temperature, straight_through

UNIFORM_EPS = 1e-12


def gumbel_from_uniform(u) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=np.float64), UNIFORM_EPS, 1.0 - UNIFORM_EPS)
    return -np.log(-np.log(u))


def sample_gumbel(shape, rng: np.random.Generator) -> Tensor:
    """Standard Gumbel noise; uniforms are nudged into [eps, 1 - eps] so draws stay finite."""
    return Tensor(gumbel_from_uniform(rng.random(shape)))


def gumbel_softmax(logits, tau: float, rng: np.random.Generator) -> Tensor:
    """Relaxed categorical sample ``softmax((logits + g) / tau)`` along the last axis.

    Gradients flow to ``logits``; the noise is a constant.
    """
    logits = as_tensor(logits)
    return softmax_temperature(logits + sample_gumbel(logits.shape, rng), tau)


def select_mask(logits, table: OptionTable, block: int, rng: np.random.Generator,
                tau: float = 1.0) -> tuple[Tensor, int]:
    """Sample one local mask for ``block``: ``straight_through(G(logits)) @ options``.

    Returns the local mask (exactly binary on the forward pass, gradients to
    ``logits`` through the soft weights) and the chosen option index.
    """
    logits = as_tensor(logits)
    options = table.block(block)
    if logits.shape != (len(options),):
        raise ContractError(f"block {block} has {len(options)} options but {logits.shape} logits")
    weights = straight_through(gumbel_softmax(logits, tau, rng))
    choice = int(np.argmax(weights.data))
    local = matmul(weights.reshape(1, -1), Tensor(options.astype(np.float64))).reshape(-1)
    return local, choice


def anneal_tau(step: int, steps: int, tau: float, tau_final: float | None) -> float:
    """Constant ``tau``, or a linear ramp to ``tau_final`` over ``steps``."""
    if tau_final is None or steps <= 1:
        return tau
    frac = min(step / (steps - 1), 1.0)
    return tau + (tau_final - tau) * frac
