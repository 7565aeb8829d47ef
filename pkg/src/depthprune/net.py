"""Toy residual network with mask-gated layers and architecture surgery.

Each layer computes ``phi(x) = x + W_out^T gelu(W_in^T mod(LN(x)) + b_in) + b_out``
and the gated rule ``x_next = m * phi(x) + (1 - m) * x`` decides how much of
it is used.  ``m = 0`` turns the layer into an identity skip.
"""

from __future__ import annotations

import copy
import hashlib
import re
from dataclasses import dataclass

import numpy as np

from depthprune import checkpoint
from depthprune.tensor import (
    ContractError,
    DomainError,
    Tensor,
    affine_rows,
    as_tensor,
    gelu,
    layer_norm,
    matmul,
)

DEFAULT_SEED = 80
HIDDEN_RATIO = 4
WEIGHT_NAMES = ("w_in", "w_out")


@dataclass
class Modulation:
    """adaLN-style scale/shift computed from a conditioning vector.

    Once ``cached`` is set the conditioning weights are never read again.
    """

    w_cond: Tensor | None
    b_cond: Tensor | None
    cached: tuple[Tensor, Tensor] | None = None

    def scale_shift(self, cond, d: int) -> tuple[Tensor, Tensor]:
        if self.cached is not None:
            return self.cached
        if cond is None:
            raise ContractError("conditioning input required: modulation is live and not cached")
        p = affine_rows(as_tensor(cond), self.w_cond, self.b_cond)
        return p[:, :d], p[:, d:]


@dataclass
class LowRankDelta:
    """Additive update ``(alpha / rank) * A @ B`` on a frozen base weight."""

    A: Tensor
    B: Tensor
    alpha: float

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    def apply(self, base: Tensor) -> Tensor:
        return base + matmul(self.A, self.B) * (self.alpha / self.rank)

    def merged(self, base: np.ndarray) -> np.ndarray:
        # Same op sequence as apply() so merged weights are bit-identical.
        return base + (self.A.data @ self.B.data) * np.asarray(self.alpha / self.rank)


@dataclass
class LayerBlock:
    norm_gain: Tensor
    norm_bias: Tensor
    w_in: Tensor
    b_in: Tensor
    w_out: Tensor
    b_out: Tensor
    modulation: Modulation | None = None

    def tensors(self) -> dict[str, Tensor]:
        return {"norm_gain": self.norm_gain, "norm_bias": self.norm_bias, "w_in": self.w_in,
                "b_in": self.b_in, "w_out": self.w_out, "b_out": self.b_out}

    def phi(self, x: Tensor, cond=None, delta: dict[str, LowRankDelta] | None = None) -> Tensor:
        d = self.norm_gain.shape[0]
        h = layer_norm(x, self.norm_gain, self.norm_bias)
        if self.modulation is not None:
            scale, shift = self.modulation.scale_shift(cond, d)
            h = h * (1.0 + scale) + shift
        w_in, w_out = self.w_in, self.w_out
        if delta:
            if "w_in" in delta:
                w_in = delta["w_in"].apply(w_in)
            if "w_out" in delta:
                w_out = delta["w_out"].apply(w_out)
        u = gelu(matmul(h, w_in) + self.b_in)
        return x + (matmul(u, w_out) + self.b_out)


@dataclass
class LayeredNet:
    layers: list[LayerBlock]
    d: int
    c: int
    in_w: Tensor
    in_b: Tensor
    out_w: Tensor
    out_b: Tensor
    deltas: list[dict[str, LowRankDelta]] | None = None

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def has_live_modulation(self) -> bool:
        return any(b.modulation is not None and b.modulation.cached is None for b in self.layers)

    def parameters(self) -> list[Tensor]:
        return list(state_tensors(self).values())

    def trainable(self) -> list[Tensor]:
        return [t for t in self.parameters() if t.requires_grad]

    def delta_parameters(self) -> list[Tensor]:
        if not self.deltas:
            return []
        return [t for layer in self.deltas for dl in layer.values() for t in (dl.A, dl.B)]

    def param_count(self) -> int:
        return sum(t.size for name, t in state_tensors(self).items() if not name.endswith(".alpha"))

    def checksum(self) -> str:
        return hashlib.sha256(checkpoint.dumps(to_state(self))).hexdigest()


def init_net(n_layers: int, d: int, c: int, seed: int = DEFAULT_SEED,
             in_dim: int = 8, out_dim: int = 8) -> LayeredNet:
    """Random network; modulation weights start at zero (adaLN-Zero)."""
    if n_layers < 1 or d < 2 or c < 0 or in_dim < 1 or out_dim < 1:
        raise DomainError(f"invalid dims: n_layers={n_layers}, d={d}, c={c}")
    rng = np.random.default_rng(seed)
    h = HIDDEN_RATIO * d
    out_scale = 1.0 / np.sqrt(h * n_layers)
    layers = []
    for _ in range(n_layers):
        mod = None
        if c > 0:
            mod = Modulation(Tensor(np.zeros((c, 2 * d))), Tensor(np.zeros(2 * d)))
        layers.append(LayerBlock(
            norm_gain=Tensor(np.ones(d)),
            norm_bias=Tensor(np.zeros(d)),
            w_in=Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (d, h))),
            b_in=Tensor(np.zeros(h)),
            w_out=Tensor(rng.normal(0.0, out_scale, (h, d))),
            b_out=Tensor(np.zeros(d)),
            modulation=mod,
        ))
    return LayeredNet(
        layers=layers, d=d, c=c,
        in_w=Tensor(rng.normal(0.0, 1.0 / np.sqrt(in_dim), (in_dim, d))),
        in_b=Tensor(np.zeros(d)),
        out_w=Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), (d, out_dim))),
        out_b=Tensor(np.zeros(out_dim)),
    )


def _mask_tensor(mask, n: int) -> Tensor:
    m = as_tensor(mask)
    if m.shape != (n,):
        raise ContractError(f"mask has shape {m.shape}, network has {n} layers")
    if np.any(m.data < 0.0) or np.any(m.data > 1.0):
        raise ContractError("mask entries must lie in [0, 1]")
    return m


def _check_cond(net: LayeredNet, cond, batch: int):
    if not net.has_live_modulation:
        return None
    if cond is None:
        raise ContractError("conditioning input required: network has live modulation")
    cond = as_tensor(cond)
    if cond.shape != (batch, net.c):
        raise ContractError(f"cond has shape {cond.shape}, expected {(batch, net.c)}")
    return cond


def forward_gated(net: LayeredNet, mask, x, cond=None, hidden: list | None = None) -> Tensor:
    """Run the network with each layer gated by its mask entry.

    Constant mask entries of exactly 0 or 1 take the corresponding branch
    directly (same values, no wasted compute); entries that carry gradients or
    lie strictly inside (0, 1) use the full interpolation so the mask receives
    gradients.  If ``hidden`` is a list, the per-layer states x_0..x_N are
    appended to it.
    """
    m = _mask_tensor(mask, net.n_layers)
    x = as_tensor(x)
    cond = _check_cond(net, cond, x.shape[0])
    h = matmul(x, net.in_w) + net.in_b
    if hidden is not None:
        hidden.append(h)
    for i, block in enumerate(net.layers):
        delta = net.deltas[i] if net.deltas else None
        mi = m.data[i]
        if not m.requires_grad and mi == 0.0:
            pass
        elif not m.requires_grad and mi == 1.0:
            h = block.phi(h, cond, delta)
        else:
            gate = m[i]
            h = gate * block.phi(h, cond, delta) + (1.0 - gate) * h
        if hidden is not None:
            hidden.append(h)
    return matmul(h, net.out_w) + net.out_b


def forward(net: LayeredNet, x, cond=None) -> Tensor:
    """Ungated forward: every layer runs."""
    return forward_gated(net, np.ones(net.n_layers), x, cond)


def project_only(net: LayeredNet, x) -> Tensor:
    x = as_tensor(x)
    return matmul(matmul(x, net.in_w) + net.in_b, net.out_w) + net.out_b


# -- surgery ----------------------------------------------------------------------

def frozen_copy(net: LayeredNet, requires_grad: bool = False) -> LayeredNet:
    """Deep copy with fresh tensors; ``requires_grad`` applies to base weights."""
    out = copy.deepcopy(net)
    for t in out.parameters():
        t.requires_grad = requires_grad
        t.grad = None
        t._parents, t._backward = (), None
    for t in out.delta_parameters():
        t.requires_grad = True
    return out


def attach_deltas(net: LayeredNet, rank: int = 4, seed: int = DEFAULT_SEED,
                  alpha: float | None = None) -> LayeredNet:
    """Frozen copy of ``net`` with fresh zero-effect low-rank deltas on every layer."""
    if rank < 1:
        raise DomainError("rank must be >= 1")
    out = frozen_copy(merge_deltas(net))
    alpha = float(rank) if alpha is None else float(alpha)
    rng = np.random.default_rng(seed)
    deltas = []
    for block in out.layers:
        layer = {}
        for name in WEIGHT_NAMES:
            w = getattr(block, name)
            fan_in, fan_out = w.shape
            A = Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, rank)), requires_grad=True)
            B = Tensor(np.zeros((rank, fan_out)), requires_grad=True)
            layer[name] = LowRankDelta(A, B, alpha)
        deltas.append(layer)
    out.deltas = deltas
    return out


def merge_deltas(net: LayeredNet) -> LayeredNet:
    """Fold deltas into base weights; the result has no deltas."""
    out = copy.deepcopy(net)
    if out.deltas:
        for block, layer in zip(out.layers, out.deltas):
            for name, dl in layer.items():
                setattr(block, name, Tensor(dl.merged(getattr(block, name).data)))
    out.deltas = None
    return out


def extract_subnetwork(net: LayeredNet, mask) -> LayeredNet:
    """Physically drop layers with mask 0 (deltas merged into the survivors)."""
    bits = np.asarray(mask, dtype=np.float64)
    if bits.shape != (net.n_layers,):
        raise ContractError(f"mask length {bits.size} does not match {net.n_layers} layers")
    if not np.all((bits == 0.0) | (bits == 1.0)):
        raise DomainError("extract_subnetwork needs a binary mask")
    merged = frozen_copy(merge_deltas(net))
    merged.layers = [b for b, keep in zip(merged.layers, bits) if keep == 1.0]
    return merged


def precache_modulation(net: LayeredNet, cond) -> LayeredNet:
    """Evaluate every layer's scale/shift at ``cond`` once and store the result."""
    cond = np.asarray(cond, dtype=np.float64)
    out = copy.deepcopy(net)
    if not any(b.modulation is not None for b in out.layers):
        return out
    if cond.shape != (out.c,):
        raise ContractError(f"cond has shape {cond.shape}, expected ({out.c},)")
    for block in out.layers:
        mod = block.modulation
        if mod is None or mod.w_cond is None:
            continue
        p = affine_rows(Tensor(cond[None, :]), Tensor(mod.w_cond.data), Tensor(mod.b_cond.data)).data
        mod.cached = (Tensor(p[0, :out.d].copy()), Tensor(p[0, out.d:].copy()))
    return out


def strip_conditioning(net: LayeredNet, cond=None) -> LayeredNet:
    """Cache modulation at ``cond`` (default all zeros), then delete the conditioning weights."""
    if net.c == 0:
        return copy.deepcopy(net)
    cond = np.zeros(net.c) if cond is None else cond
    out = precache_modulation(net, cond)
    for block in out.layers:
        if block.modulation is not None:
            block.modulation.w_cond = None
            block.modulation.b_cond = None
    out.c = 0
    return out


# -- serialisation ----------------------------------------------------------------------

def state_tensors(net: LayeredNet) -> dict[str, Tensor]:
    st: dict[str, Tensor] = {"in_proj.w": net.in_w, "in_proj.b": net.in_b,
                             "out_proj.w": net.out_w, "out_proj.b": net.out_b}
    for i, block in enumerate(net.layers):
        for name, t in block.tensors().items():
            st[f"layer.{i}.{name}"] = t
        mod = block.modulation
        if mod is not None:
            if mod.w_cond is not None:
                st[f"mod.{i}.w_cond"] = mod.w_cond
                st[f"mod.{i}.b_cond"] = mod.b_cond
            if mod.cached is not None:
                st[f"mod.{i}.cached.scale"] = mod.cached[0]
                st[f"mod.{i}.cached.shift"] = mod.cached[1]
    if net.deltas:
        for i, layer in enumerate(net.deltas):
            for name, dl in layer.items():
                st[f"delta.{i}.{name}.A"] = dl.A
                st[f"delta.{i}.{name}.B"] = dl.B
                st[f"delta.{i}.{name}.alpha"] = Tensor(np.asarray(dl.alpha))
    return st


def to_state(net: LayeredNet) -> dict[str, np.ndarray]:
    return {k: t.data for k, t in state_tensors(net).items()}


_LAYER_RE = re.compile(r"^(layer|mod|delta)\.(\d+)\.(.+)$")


def from_state(state: dict[str, np.ndarray]) -> LayeredNet:
    try:
        in_w, in_b = state["in_proj.w"], state["in_proj.b"]
        out_w, out_b = state["out_proj.w"], state["out_proj.b"]
    except KeyError as exc:
        raise checkpoint.CheckpointError(f"missing tensor {exc.args[0]!r}") from None
    per: dict[str, dict[int, dict[str, np.ndarray]]] = {"layer": {}, "mod": {}, "delta": {}}
    for key, arr in state.items():
        m = _LAYER_RE.match(key)
        if m:
            per[m.group(1)].setdefault(int(m.group(2)), {})[m.group(3)] = arr
    n = len(per["layer"])
    if sorted(per["layer"]) != list(range(n)):
        raise checkpoint.CheckpointError("layer indices are not contiguous")
    d = in_w.shape[1]
    c = 0
    layers = []
    for i in range(n):
        p = per["layer"][i]
        mod = None
        if i in per["mod"]:
            mp = per["mod"][i]
            w = Tensor(mp["w_cond"]) if "w_cond" in mp else None
            b = Tensor(mp["b_cond"]) if "b_cond" in mp else None
            cached = None
            if "cached.scale" in mp:
                cached = (Tensor(mp["cached.scale"]), Tensor(mp["cached.shift"]))
            if w is not None:
                c = w.shape[0]
            mod = Modulation(w, b, cached)
        layers.append(LayerBlock(*(Tensor(p[k]) for k in
                                   ("norm_gain", "norm_bias", "w_in", "b_in", "w_out", "b_out")),
                                 modulation=mod))
    deltas = None
    if per["delta"]:
        deltas = []
        for i in range(n):
            dp = per["delta"].get(i, {})
            layer = {}
            for name in WEIGHT_NAMES:
                if f"{name}.A" in dp:
                    layer[name] = LowRankDelta(Tensor(dp[f"{name}.A"], requires_grad=True),
                                               Tensor(dp[f"{name}.B"], requires_grad=True),
                                               float(dp[f"{name}.alpha"]))
            deltas.append(layer)
    return LayeredNet(layers, d, c, Tensor(in_w), Tensor(in_b), Tensor(out_w), Tensor(out_b), deltas)


def save_net(net: LayeredNet, path) -> None:
    checkpoint.save(path, to_state(net))


def load_net(path) -> LayeredNet:
    return from_state(checkpoint.load(path))


__all__ = [
    "LayerBlock", "LayeredNet", "LowRankDelta", "Modulation",
    "attach_deltas", "extract_subnetwork", "forward", "forward_gated", "from_state",
    "frozen_copy", "init_net", "load_net", "merge_deltas", "precache_modulation",
    "project_only", "save_net", "state_tensors", "strip_conditioning", "to_state",
]
