"""Pruning masks, block partitions and the expansion/corrosion algebra.

Masks are plain ``int8`` numpy vectors of 0/1.  Where a mask must carry
gradients (training), the candidate builders accept a :class:`Tensor` and
return the relaxed forms ``m * m_hat`` and ``clamp(m + m_hat, 0, 1)`` on the
tape; ``m_hat`` itself is always a constant built by sorting.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from depthprune.tensor import DomainError, Tensor, as_tensor, clamp01

FORWARD = "forward"    # block j gives k layers to block j+1
BACKWARD = "backward"  # block j+1 gives k layers to block j


class TransformationInfeasible(ValueError):
    """Donor has too few active layers or receiver too few inactive ones."""


class MaskParseError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} at byte offset {offset}")
        self.offset = offset


@dataclass(frozen=True)
class BlockPartition:
    n_layers: int
    block_size: int
    keep_per_block: int

    def __post_init__(self):
        N, B, s = self.n_layers, self.block_size, self.keep_per_block
        if B < 1 or N < 1 or N % B:
            raise DomainError(f"block size {B} must divide layer count {N}")
        if not 0 <= s <= B:
            raise DomainError(f"keep_per_block {s} outside [0, {B}]")

    @property
    def n_blocks(self) -> int:
        return self.n_layers // self.block_size

    @property
    def retained(self) -> int:
        return self.n_blocks * self.keep_per_block

    def block_range(self, j: int) -> range:
        if not 0 <= j < self.n_blocks:
            raise DomainError(f"block {j} out of range [0, {self.n_blocks})")
        return range(j * self.block_size, (j + 1) * self.block_size)

    def block_counts(self, mask) -> np.ndarray:
        m = np.asarray(mask).reshape(self.n_blocks, self.block_size)
        return m.sum(axis=1).astype(int)

    def is_valid(self, mask) -> bool:
        return bool(np.all(self.block_counts(mask) == self.keep_per_block))


@dataclass(frozen=True)
class OptionTable:
    """The C(B, s) local masks of one block, lexicographically descending.

    Every block shares the same table.
    """

    options: np.ndarray
    n_blocks: int

    @classmethod
    def for_partition(cls, part: BlockPartition) -> OptionTable:
        B, s = part.block_size, part.keep_per_block
        rows = []
        for combo in itertools.combinations(range(B), s):
            row = np.zeros(B, dtype=np.int8)
            row[list(combo)] = 1
            rows.append(row)
        opts = np.array(rows, dtype=np.int8).reshape(len(rows), B)
        opts.setflags(write=False)
        return cls(opts, part.n_blocks)

    def __len__(self) -> int:
        return len(self.options)

    def block(self, j: int) -> np.ndarray:
        if not 0 <= j < self.n_blocks:
            raise DomainError(f"block {j} out of range [0, {self.n_blocks})")
        return self.options


@dataclass(frozen=True)
class SubspaceStats:
    valid: int
    total: int
    fraction: float


def count_search_space(N: int, M: int) -> int:
    if N < 0 or not 0 <= M <= N:
        raise DomainError(f"cannot choose {M} of {N}")
    return math.comb(N, M)


def valid_subspace_stats(part: BlockPartition) -> SubspaceStats:
    valid = math.comb(part.block_size, part.keep_per_block) ** part.n_blocks
    total = math.comb(part.n_layers, part.retained)
    return SubspaceStats(valid, total, float(Fraction(valid, total)))


def compose_mask(choices, table: OptionTable, part: BlockPartition) -> np.ndarray:
    choices = list(choices)
    if len(choices) != part.n_blocks:
        raise DomainError(f"need {part.n_blocks} choices, got {len(choices)}")
    n_opt = len(table)
    for j, c in enumerate(choices):
        if not 0 <= int(c) < n_opt:
            raise DomainError(f"choice {c} for block {j} outside [0, {n_opt})")
    return np.concatenate([table.block(j)[int(c)] for j, c in enumerate(choices)]).astype(np.int8)


def _softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def _block_logits(dist) -> list[np.ndarray]:
    logits = getattr(dist, "block_logits", dist)
    return [as_tensor(t).data for t in logits]


def marginal_profile(dist, table: OptionTable) -> np.ndarray:
    """Per-layer retention probability under the blockwise distribution p(m).

    ``dist`` is a PruningDistribution or a plain list of per-block logits.
    """
    logits = _block_logits(dist)
    if len(logits) != table.n_blocks:
        raise DomainError(f"{len(logits)} block logit vectors for {table.n_blocks} blocks")
    pieces = []
    for j, z in enumerate(logits):
        if not np.all(np.isfinite(z)):
            raise DomainError(f"block {j} logits are not finite")
        pieces.append(_softmax(z) @ table.block(j).astype(np.float64))
    return np.concatenate(pieces)


# -- candidate construction ---------------------------------------------------------

def _hard(m) -> np.ndarray:
    arr = m.data if isinstance(m, Tensor) else np.asarray(m, dtype=np.float64)
    return (arr > 0.5).astype(np.int8)


def lowest_active(m, pi, block: range, k: int) -> list[int]:
    """The k active layers of ``block`` with smallest pi (lower index on ties)."""
    bits = _hard(m)
    active = [i for i in block if bits[i] == 1]
    if len(active) < k:
        raise TransformationInfeasible(f"block {block.start}-{block.stop - 1} has {len(active)} active layers, need {k}")
    return sorted(sorted(active, key=lambda i: (pi[i], i))[:k])


def highest_inactive(m, pi, block: range, k: int) -> list[int]:
    """The k inactive layers of ``block`` with largest pi (lower index on ties)."""
    bits = _hard(m)
    inactive = [i for i in block if bits[i] == 0]
    if len(inactive) < k:
        raise TransformationInfeasible(f"block {block.start}-{block.stop - 1} has {len(inactive)} inactive layers, need {k}")
    return sorted(sorted(inactive, key=lambda i: (-pi[i], i))[:k])


@dataclass
class ExpansionCandidate:
    m_hat: np.ndarray
    m_plus: Tensor


@dataclass
class CorrosionCandidate:
    m_hat: np.ndarray
    m_minus: Tensor


def build_expansion_candidate(m, pi, block: int, k: int, part: BlockPartition) -> ExpansionCandidate:
    """Add the k highest-pi inactive layers of ``block``: m+ = clamp(m + m_hat, 0, 1)."""
    pi = np.asarray(pi, dtype=np.float64)
    bits = _hard(m)
    added = highest_inactive(bits, pi, part.block_range(block), k)
    m_hat = bits.copy()
    m_hat[added] = 1
    m_plus = clamp01(as_tensor(m) + Tensor(m_hat.astype(np.float64)))
    return ExpansionCandidate(m_hat, m_plus)


def build_corrosion_candidate(m, pi, block: int, k: int, part: BlockPartition) -> CorrosionCandidate:
    """Remove the k lowest-pi active layers of ``block``: m- = m * m_hat."""
    pi = np.asarray(pi, dtype=np.float64)
    bits = _hard(m)
    removed = lowest_active(bits, pi, part.block_range(block), k)
    m_hat = np.ones_like(bits)
    m_hat[removed] = 0
    m_minus = as_tensor(m) * Tensor(m_hat.astype(np.float64))
    return CorrosionCandidate(m_hat, m_minus)


def apply_transformation(m, pair: int, direction: str, k: int, pi, part: BlockPartition) -> np.ndarray:
    """Move k retained layers between blocks ``pair`` and ``pair + 1``.

    ``direction="forward"`` makes block ``pair`` the donor; ``"backward"``
    makes block ``pair + 1`` the donor.  The donor loses its k lowest-pi
    active layers and the receiver gains its k highest-pi inactive layers.
    """
    if direction not in (FORWARD, BACKWARD):
        raise DomainError(f"unknown direction {direction!r}")
    if not 0 <= pair < part.n_blocks - 1:
        raise DomainError(f"pair {pair} has no successor block")
    bits = _hard(m).copy()
    if k == 0:
        return bits
    pi = np.asarray(pi, dtype=np.float64)
    donor, receiver = (pair, pair + 1) if direction == FORWARD else (pair + 1, pair)
    removed = lowest_active(bits, pi, part.block_range(donor), k)
    added = highest_inactive(bits, pi, part.block_range(receiver), k)
    bits[removed] = 0
    bits[added] = 1
    return bits


def transform_tensor(m: Tensor, pair: int, direction: str, k: int, pi, part: BlockPartition) -> Tensor:
    """Differentiable :func:`apply_transformation`: corrode the donor, then expand the receiver."""
    donor, receiver = (pair, pair + 1) if direction == FORWARD else (pair + 1, pair)
    bits = _hard(m)
    lowest_active(bits, pi, part.block_range(donor), k)
    highest_inactive(bits, pi, part.block_range(receiver), k)
    corroded = build_corrosion_candidate(m, pi, donor, k, part).m_minus
    return build_expansion_candidate(corroded, pi, receiver, k, part).m_plus


# -- text format ---------------------------------------------------------------------

def mask_to_string(mask) -> str:
    return "".join("1" if b else "0" for b in _hard(mask))


def parse_mask(text: str | bytes) -> np.ndarray:
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    if not raw:
        raise MaskParseError("empty mask file", 0)
    for pos, ch in enumerate(raw):
        if ch == 0x0A:
            if pos != len(raw) - 1:
                raise MaskParseError("content after newline", pos + 1)
        elif ch not in (0x30, 0x31):
            raise MaskParseError(f"unexpected character {chr(ch)!r}", pos)
    if raw[-1] != 0x0A:
        raise MaskParseError("missing terminating newline", len(raw))
    return np.frombuffer(raw[:-1], dtype=np.uint8).astype(np.int8) - 0x30


def mask_read(path) -> np.ndarray:
    return parse_mask(Path(path).read_bytes())


def mask_write(mask, path) -> None:
    Path(path).write_bytes((mask_to_string(mask) + "\n").encode("ascii"))
