"""Finite-difference verification of every differentiable operation.

:func:`run_suite` checks each op on ``n_inputs`` random points and reports the
worst relative error.  Straight-through paths are checked against a surrogate:
the hard forward is frozen at its sampled value, and the surrogate replaces it
by the soft weights contracted with the upstream gradient, which is exactly
what an identity backward must reproduce.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from depthprune import tensor as T
from depthprune.gumbel import gumbel_from_uniform, select_mask
from depthprune.masks import BlockPartition, OptionTable
from depthprune.net import attach_deltas, forward_gated, init_net
from depthprune.tensor import Tensor, backward, finite_diff_check

TOLERANCE = 1e-4
STEP = 1e-6
GELU_STATIONARY = -0.7517916


def _weighted(f: Callable[[Tensor], Tensor], w: np.ndarray) -> Callable[[Tensor], Tensor]:
    # A random projection avoids coordinates whose true gradient is exactly zero.
    return lambda x: T.tsum(f(x) * Tensor(w))


def _away_from(rng, shape, points, margin=0.05, lo=-2.0, hi=2.0):
    x = rng.uniform(lo, hi, shape)
    for p in points:
        close = np.abs(x - p) < margin
        x[close] += np.where(x[close] >= p, margin, -margin)
    return x


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[Tensor], Tensor], np.ndarray]]:
    """One random instance of every checked function: name -> (f, x)."""
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    gain, bias = rng.normal(size=4), rng.normal(size=4)
    w34, w3 = rng.normal(size=(3, 4)), rng.normal(size=3)
    w_aff, b_aff = rng.normal(size=(4, 5)), rng.normal(size=5)
    target = rng.normal(size=(3, 4))
    row = rng.normal(size=4)
    cases = {
        "add": (_weighted(lambda x: x + Tensor(row), w34), rng.normal(size=(3, 4))),
        "sub": (_weighted(lambda x: Tensor(b[:, 0]) - x, rng.normal(size=(3, 4))), rng.normal(size=(3, 4))),
        "mul": (_weighted(lambda x: x * x[0:1], w34), rng.normal(size=(3, 4))),
        "div": (_weighted(lambda x: x / (T.square(x) + 1.0), w34), rng.normal(size=(3, 4))),
        "matmul_left": (_weighted(lambda x: T.matmul(x, Tensor(b)), rng.normal(size=(3, 2))), a),
        "matmul_right": (_weighted(lambda x: T.matmul(Tensor(a), x), rng.normal(size=(3, 2))), b),
        "affine_rows": (_weighted(lambda x: T.affine_rows(x, Tensor(w_aff), Tensor(b_aff)),
                                  rng.normal(size=(3, 5))), a),
        "layer_norm": (_weighted(lambda x: T.layer_norm(x, Tensor(gain), Tensor(bias)), w34), a),
        # gelu' vanishes near -0.7518; relative error is meaningless there.
        "gelu": (_weighted(T.gelu, w34), _away_from(rng, (3, 4), [GELU_STATIONARY], lo=-4.0, hi=4.0)),
        "tanh": (_weighted(T.tanh, w34), rng.normal(size=(3, 4))),
        "exp": (_weighted(T.exp, w34), rng.normal(size=(3, 4))),
        "log": (_weighted(T.log, w34), rng.uniform(0.2, 3.0, (3, 4))),
        "abs": (_weighted(T.tabs, w34), _away_from(rng, (3, 4), [0.0])),
        "clamp01": (_weighted(T.clamp01, w34), _away_from(rng, (3, 4), [0.0, 1.0], lo=-1.0, hi=2.0)),
        "softmax_temperature": (_weighted(lambda x: T.softmax_temperature(x, 0.7), w3), rng.normal(size=3)),
        "sum_mean": (lambda x: T.tsum(T.mean(T.square(x), axis=1) * Tensor(w3)), a),
        "index_concat_reshape": (_weighted(lambda x: T.concat([x[1], x[0] * 2.0]).reshape(2, 4),
                                           rng.normal(size=(2, 4))), a),
        "mse": (lambda x: T.mse(x, target), a),
        "l1": (lambda x: T.l1(x, Tensor(target)), target + _away_from(rng, (3, 4), [0.0])),
        "ln_gelu": (_weighted(lambda x: T.gelu(T.layer_norm(x, Tensor(gain), Tensor(bias))), w34), a),
    }
    return cases


def _net_cases(rng: np.random.Generator):
    seed = int(rng.integers(1 << 30))
    net = init_net(3, 4, 2, seed, in_dim=3, out_dim=2)
    for blk in net.layers:
        blk.modulation.w_cond = Tensor(rng.normal(0, 0.3, blk.modulation.w_cond.shape))
        blk.modulation.b_cond = Tensor(rng.normal(0, 0.3, blk.modulation.b_cond.shape))
    x = rng.normal(size=(2, 3))
    cond = rng.normal(size=(2, 2))
    wo = rng.normal(size=(2, 2))
    mask = rng.uniform(0.1, 0.9, 3)
    student = attach_deltas(net, 2, seed)
    for layer in student.deltas:
        for dl in layer.values():
            dl.B.data = rng.normal(0, 0.3, dl.B.shape)
    A0 = student.deltas[1]["w_in"]
    base_A = A0.A.data.copy()

    def via_delta(a):
        A0.A = a
        out = forward_gated(student, mask, x, cond)
        A0.A = Tensor(base_A)
        return T.tsum(out * Tensor(wo))

    return {
        "forward_gated_mask": (lambda m: T.tsum(forward_gated(net, m, x, cond) * Tensor(wo)), mask),
        "forward_gated_input": (lambda xx: T.tsum(forward_gated(net, mask, xx, cond) * Tensor(wo)), x),
        "forward_gated_cond": (lambda cc: T.tsum(forward_gated(net, mask, x, cc) * Tensor(wo)), cond),
        "low_rank_delta": (via_delta, base_A),
    }


def surrogate_error(analytic: np.ndarray, surrogate: Callable[[np.ndarray], float],
                    x: np.ndarray, step: float = STEP) -> float:
    """Max relative gap between ``analytic`` and central differences of ``surrogate``."""
    num = np.zeros_like(x)
    flat = num.reshape(-1)
    for i in range(x.size):
        xp, xm = x.copy().reshape(-1), x.copy().reshape(-1)
        xp[i] += step
        xm[i] -= step
        flat[i] = (surrogate(xp.reshape(x.shape)) - surrogate(xm.reshape(x.shape))) / (2 * step)
    rel = np.abs(analytic - num) / (np.abs(analytic) + np.abs(num) + 1e-12)
    return float(rel.max())


def straight_through_error(rng: np.random.Generator, n: int = 5, width: int = 4, tau: float = 0.8) -> float:
    """d(loss)/d(logits) through ST(Gumbel-Softmax) mixed over fixed candidate rows."""
    logits = rng.normal(size=n)
    g = gumbel_from_uniform(rng.random(n))
    cand = rng.normal(size=(n, width))
    w = rng.normal(size=width)

    def head(y: Tensor) -> Tensor:
        return T.tsum(T.gelu(y) * Tensor(w))

    lt = Tensor(logits, requires_grad=True)
    hard = T.straight_through(T.softmax_temperature(lt + Tensor(g), tau))
    y = T.matmul(hard.reshape(1, -1), Tensor(cand)).reshape(-1)
    backward(head(y))

    yl = Tensor(y.data.copy(), requires_grad=True)
    backward(head(yl))
    upstream = yl.grad

    def surrogate(z):
        soft = T.softmax_temperature(Tensor(z + g), tau).data
        return float(upstream @ (soft @ cand))

    return surrogate_error(lt.grad, surrogate, logits)


def select_mask_pipeline_error(rng: np.random.Generator, tau: float = 1.0) -> float:
    """d(pruning loss)/d(block logits) through select_mask and the gated network."""
    part = BlockPartition(4, 2, 1)
    table = OptionTable.for_partition(part)
    net = init_net(4, 4, 0, int(rng.integers(1 << 30)), in_dim=3, out_dim=2)
    x = rng.normal(size=(3, 3))
    target = rng.normal(size=(3, 2))
    logits = [rng.normal(size=len(table)) for _ in range(part.n_blocks)]
    seed = int(rng.integers(1 << 30))

    leaves = [Tensor(z, requires_grad=True) for z in logits]
    r = np.random.default_rng(seed)
    locals_ = [select_mask(z, table, j, r, tau)[0] for j, z in enumerate(leaves)]
    mask = T.concat(locals_)
    backward(T.mse(forward_gated(net, mask, x), target))
    analytic = np.concatenate([z.grad for z in leaves])

    hard = Tensor(mask.data.copy(), requires_grad=True)
    backward(T.mse(forward_gated(net, hard, x), target))
    upstream = hard.grad

    r = np.random.default_rng(seed)
    noise = [gumbel_from_uniform(r.random(len(table))) for _ in range(part.n_blocks)]
    opts = table.options.astype(np.float64)

    def surrogate(flat):
        total = 0.0
        for j in range(part.n_blocks):
            z = flat[j * len(table):(j + 1) * len(table)]
            soft = T.softmax_temperature(Tensor(z + noise[j]), tau).data
            total += float(upstream[part.block_range(j)] @ (soft @ opts))
        return total

    return surrogate_error(analytic, surrogate, np.concatenate(logits))


def run_suite(seed: int = 80, n_inputs: int = 20, step: float = STEP) -> dict[str, float]:
    """Worst relative error per check over ``n_inputs`` random instances."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(n_inputs):
        cases = {**op_cases(rng), **_net_cases(rng)}
        for name, (f, x) in cases.items():
            err = finite_diff_check(f, x, step)
            worst[name] = max(worst.get(name, 0.0), err)
        for name, err in (("straight_through", straight_through_error(rng)),
                          ("select_mask_pipeline", select_mask_pipeline_error(rng))):
            worst[name] = max(worst.get(name, 0.0), err)
    return worst
