"""How small the block-structured subspace is compared with all masks of the same size."""

import itertools

import numpy as np

from depthprune.masks import BlockPartition, OptionTable, count_search_space, valid_subspace_stats

# 24 layers, keep half, blocks of 4 with 2 kept each
part = BlockPartition(24, 4, 2)
st = valid_subspace_stats(part)
print(f"all masks keeping {part.retained} of 24: {count_search_space(24, part.retained):,}")
print(f"block-valid masks: {st.valid:,} ({100 * st.fraction:.4f}%)")

# the local patterns each block chooses from
table = OptionTable.for_partition(part)
print("options per block:", ["".join(map(str, o)) for o in table.options])

# the fraction shrinks quickly with depth
for n in (8, 12, 16, 24, 32):
    s = valid_subspace_stats(BlockPartition(n, 4, 2))
    print(f"N={n:2d}  valid={s.valid:>10,}  total={s.total:>14,}  fraction={s.fraction:.2e}")

# brute force agrees on a small case
small = BlockPartition(8, 4, 2)
hits = 0
for kept in itertools.combinations(range(8), 4):
    m = np.zeros(8, dtype=int)
    m[list(kept)] = 1
    hits += small.is_valid(m)
print("N=8 brute force:", hits, "of", count_search_space(8, 4))
