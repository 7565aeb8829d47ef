import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from depthprune.masks import (BACKWARD, FORWARD, BlockPartition, MaskParseError, OptionTable,
                              TransformationInfeasible, apply_transformation, build_corrosion_candidate,
                              build_expansion_candidate, compose_mask, count_search_space, marginal_profile,
                              mask_read, mask_to_string, mask_write, parse_mask, transform_tensor,
                              valid_subspace_stats)
from depthprune.tensor import DomainError, Tensor, backward, tsum


def test_count_search_space():
    assert count_search_space(24, 12) == 2_704_156
    assert count_search_space(4, 2) == 6
    assert all(count_search_space(n, 0) == 1 for n in range(10))
    with pytest.raises(DomainError):
        count_search_space(3, 4)


def test_valid_subspace_paper_figures():
    st_ = valid_subspace_stats(BlockPartition(24, 4, 2))
    assert (st_.valid, st_.total) == (46_656, 2_704_156)
    assert round(100 * st_.fraction, 4) == 1.7253


def test_single_block_is_unconstrained():
    assert valid_subspace_stats(BlockPartition(5, 5, 2)).fraction == 1.0


def _brute_valid(part):
    total = valid = 0
    for kept in itertools.combinations(range(part.n_layers), part.retained):
        m = np.zeros(part.n_layers, dtype=np.int8)
        m[list(kept)] = 1
        total += 1
        valid += part.is_valid(m)
    return valid, total


def test_valid_subspace_by_enumeration():
    st_ = valid_subspace_stats(BlockPartition(8, 4, 2))
    assert (st_.valid, st_.total) == (36, 70) == _brute_valid(BlockPartition(8, 4, 2))
    assert st_.fraction == 36 / 70


def test_partition_validation():
    with pytest.raises(DomainError):
        BlockPartition(10, 4, 2)
    with pytest.raises(DomainError):
        BlockPartition(8, 4, 5)


def test_option_table_order():
    part = BlockPartition(4, 4, 2)
    got = [mask_to_string(o) for o in OptionTable.for_partition(part).options]
    assert got == ["1100", "1010", "1001", "0110", "0101", "0011"]


def test_compose_examples(rng):
    part = BlockPartition(2, 2, 1)
    assert mask_to_string(compose_mask([0], OptionTable.for_partition(part), part)) == "10"
    part = BlockPartition(12, 4, 2)
    table = OptionTable.for_partition(part)
    assert mask_to_string(compose_mask([1, 1, 1], table, part)) == "101010101010"
    for _ in range(500):
        m = compose_mask(rng.integers(0, len(table), 3), table, part)
        assert m.sum() == 6 and part.is_valid(m)
    with pytest.raises(DomainError):
        compose_mask([0, 0, 6], table, part)


def test_marginal_profile_examples():
    part = BlockPartition(8, 4, 2)
    table = OptionTable.for_partition(part)
    np.testing.assert_allclose(marginal_profile([np.zeros(6)] * 2, table), 0.5, rtol=0, atol=1e-15)
    spike = np.full(6, -60.0)
    spike[3] = 60.0
    np.testing.assert_allclose(marginal_profile([spike, spike], table), [0, 1, 1, 0] * 2, atol=1e-9)
    logits = np.array([2.0, 0, 0, 0, 0, 0])
    p = np.exp(logits) / np.exp(logits).sum()
    want = np.zeros(4)
    for prob, opt in zip(p, itertools.combinations(range(4), 2)):
        for i in opt:
            want[i] += prob
    np.testing.assert_allclose(marginal_profile([logits], OptionTable.for_partition(BlockPartition(4, 4, 2))),
                               want, rtol=1e-14)


@given(st.lists(st.lists(st.floats(-5, 5), min_size=6, max_size=6), min_size=3, max_size=3))
def test_marginal_sums_to_keep(logits):
    part = BlockPartition(12, 4, 2)
    pi = marginal_profile([np.array(z) for z in logits], OptionTable.for_partition(part))
    np.testing.assert_allclose(pi.reshape(3, 4).sum(axis=1), 2.0, atol=1e-9)


def test_apply_transformation_examples():
    part = BlockPartition(8, 4, 2)
    pi = [0.9, 0.8, 0.1, 0.2, 0.3, 0.4, 0.7, 0.6]
    m = parse_mask("11001100\n")
    out = apply_transformation(m, 0, FORWARD, 1, pi, part)
    assert mask_to_string(out) == "10001110"
    assert tuple(part.block_counts(out)) == (1, 3)
    assert mask_to_string(apply_transformation(m, 0, FORWARD, 0, pi, part)) == "11001100"
    back = apply_transformation(m, 0, BACKWARD, 1, pi, part)
    # block 1 drops layer 4 (pi .3 < .4 of layer 5), block 0 adds layer 3 (pi .2 > .1)
    assert mask_to_string(back) == "11010100"


def test_apply_transformation_infeasible():
    part = BlockPartition(8, 4, 2)
    with pytest.raises(TransformationInfeasible):
        apply_transformation(parse_mask("11001111\n"), 0, FORWARD, 1, np.full(8, 0.5), part)
    with pytest.raises(TransformationInfeasible):
        apply_transformation(parse_mask("00001100\n"), 0, FORWARD, 1, np.full(8, 0.5), part)


def _brute_transform(m, pi, donor, receiver, part):
    best = None
    for drop in part.block_range(donor):
        for add in part.block_range(receiver):
            if m[drop] == 1 and m[add] == 0:
                key = (pi[drop] - pi[add], drop, add)
                best = key if best is None or key < best else best
    out = m.copy()
    out[best[1]], out[best[2]] = 0, 1
    return out


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31))
def test_transformation_matches_brute_force(seed):
    r = np.random.default_rng(seed)
    part = BlockPartition(12, 4, 2)
    table = OptionTable.for_partition(part)
    m = compose_mask(r.integers(0, 6, 3), table, part)
    pi = r.random(12)
    pair = int(r.integers(0, 2))
    direction = FORWARD if r.random() < 0.5 else BACKWARD
    donor, receiver = (pair, pair + 1) if direction == FORWARD else (pair + 1, pair)
    out = apply_transformation(m, pair, direction, 1, pi, part)
    np.testing.assert_array_equal(out, _brute_transform(m, pi, donor, receiver, part))
    assert out.sum() == m.sum()


def test_candidate_examples():
    part = BlockPartition(4, 4, 2)
    pi = np.array([0.1, 0.4, 0.3, 0.2])
    with pytest.raises(TransformationInfeasible):
        build_expansion_candidate(np.ones(4), pi, 0, 1, part)
    with pytest.raises(TransformationInfeasible):
        build_corrosion_candidate(np.zeros(4), pi, 0, 1, part)
    m = np.array([1, 1, 0, 0])
    np.testing.assert_array_equal(build_expansion_candidate(m, pi, 0, 2, part).m_plus.data, np.ones(4))
    np.testing.assert_array_equal(build_corrosion_candidate(m, pi, 0, 2, part).m_minus.data, np.zeros(4))
    exp = build_expansion_candidate(m, pi, 0, 1, part)
    np.testing.assert_array_equal(exp.m_plus.data, [1, 1, 1, 0])
    cor = build_corrosion_candidate(m, pi, 0, 1, part)
    np.testing.assert_array_equal(cor.m_hat, [0, 1, 1, 1])
    np.testing.assert_array_equal(cor.m_minus.data, [0, 1, 0, 0])


def test_ties_go_to_lower_index():
    part = BlockPartition(4, 4, 2)
    flat = np.full(4, 0.5)
    m = np.array([0, 1, 0, 1])
    np.testing.assert_array_equal(build_expansion_candidate(m, flat, 0, 1, part).m_plus.data, [1, 1, 0, 1])
    np.testing.assert_array_equal(build_corrosion_candidate(m, flat, 0, 1, part).m_minus.data, [0, 0, 0, 1])


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([1, 2]))
def test_candidate_cardinality(seed, k):
    r = np.random.default_rng(seed)
    part = BlockPartition(12, 4, 2)
    m = compose_mask(r.integers(0, 6, 3), OptionTable.for_partition(part), part)
    pi = r.random(12)
    j = int(r.integers(0, 3))
    exp = build_expansion_candidate(m, pi, j, k, part)
    assert int(np.maximum(m, exp.m_hat).sum()) - int(m.sum()) == k
    assert part.block_counts(exp.m_plus.data)[j] == 2 + k and not part.is_valid(exp.m_plus.data)
    cor = build_corrosion_candidate(m, pi, j, k, part)
    assert int(m.sum()) - int(np.minimum(m, cor.m_hat).sum()) == k
    assert part.block_counts(cor.m_minus.data)[j] == 2 - k and not part.is_valid(cor.m_minus.data)


def test_transform_tensor_matches_hard_and_passes_gradient(rng):
    part = BlockPartition(8, 4, 2)
    pi = rng.random(8)
    m = Tensor(parse_mask("01101001\n").astype(np.float64), requires_grad=True)
    out = transform_tensor(m, 0, FORWARD, 1, pi, part)
    np.testing.assert_array_equal(out.data, apply_transformation(m.data, 0, FORWARD, 1, pi, part))
    backward(tsum(out * Tensor(np.arange(1.0, 9.0))))
    assert m.grad is not None and np.any(m.grad != 0)


def test_mask_text_format(tmp_path, rng):
    assert parse_mask("1010\n").tolist() == [1, 0, 1, 0]
    with pytest.raises(MaskParseError) as err:
        parse_mask("10x0\n")
    assert err.value.offset == 2
    for bad, offset in [("", 0), ("1010", 4), ("10\n1\n", 3)]:
        with pytest.raises(MaskParseError) as err:
            parse_mask(bad)
        assert err.value.offset == offset
    for _ in range(100):
        m = rng.integers(0, 2, int(rng.integers(1, 30))).astype(np.int8)
        mask_write(m, tmp_path / "m.txt")
        assert (tmp_path / "m.txt").read_bytes() == (mask_to_string(m) + "\n").encode()
        np.testing.assert_array_equal(mask_read(tmp_path / "m.txt"), m)
