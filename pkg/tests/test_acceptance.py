"""End-to-end acceptance checks, one test per criterion, each printing a PASS/FAIL line."""

import io
import itertools
import math
import time
from contextlib import redirect_stdout
from math import comb

import numpy as np
import pytest

from depthprune.cli import run_cli
from depthprune.gradcheck import TOLERANCE, run_suite
from depthprune.gumbel import gumbel_from_uniform, gumbel_softmax
from depthprune.learning import PruningDistribution, TrainConfig, sample_training_mask, train_mask
from depthprune.masks import (BlockPartition, OptionTable, build_corrosion_candidate, build_expansion_candidate,
                              compose_mask, marginal_profile, valid_subspace_stats)
from depthprune.net import (extract_subnetwork, forward, forward_gated, project_only, save_net,
                            strip_conditioning)
from depthprune.recovery import BenchmarkConfig, run_benchmark

from conftest import live_net


def test_01_search_space_numerics(acceptance):
    buf = io.StringIO()
    t0 = time.perf_counter()
    with redirect_stdout(buf):
        code = run_cli(["space", "--layers", "24", "--block", "4", "--keep", "2", "-q"])
    elapsed = time.perf_counter() - t0
    vals = dict(line.split(" ") for line in buf.getvalue().splitlines())
    total, valid = int(vals["total"]), int(vals["valid"])
    frac = float(vals["fraction"].rstrip("%"))
    ok = (code == 0 and total == 2_704_156 and valid == 46_656 and abs(frac - 1.7253) <= 1e-4
          and elapsed < 1.0)
    acceptance(1, ok, f"total={total} valid={valid} fraction={vals['fraction']} in {elapsed:.3f}s")


def test_02_exhaustive_enumeration(acceptance):
    t0 = time.perf_counter()
    checked, bad = 0, []
    for n in range(1, 13):
        for b in (2, 3, 4):
            if n % b:
                continue
            for s in range(b + 1):
                part = BlockPartition(n, b, s)
                valid = total = 0
                for kept in itertools.combinations(range(n), part.retained):
                    counts = np.bincount(np.array(kept, dtype=int) // b, minlength=n // b)
                    total += 1
                    valid += bool(np.all(counts == s))
                st = valid_subspace_stats(part)
                if (st.valid, st.total) != (valid, total) or st.fraction != valid / total:
                    bad.append((n, b, s))
                checked += 1
    elapsed = time.perf_counter() - t0
    acceptance(2, not bad and elapsed < 30, f"{checked} partitions enumerated, mismatches={bad} in {elapsed:.1f}s")


def _argmax_freqs(logits, tau, n, seed):
    z = np.tile(np.asarray(logits, dtype=np.float64), (n, 1))
    soft = gumbel_softmax(z, tau, np.random.default_rng(seed)).data
    return np.bincount(np.argmax(soft, axis=1), minlength=len(logits)) / n


def test_03_gumbel_fidelity(acceptance):
    t0 = time.perf_counter()
    r = np.random.default_rng(80)
    worst = 0.0
    for i in range(10):
        z = r.normal(0, 1.5, int(r.integers(2, 7)))
        p = np.exp(z - z.max())
        worst = max(worst, float(np.max(np.abs(_argmax_freqs(z, 1.0, 100_000, i) - p / p.sum()))))
    # Gap-5 cases whose exact Gumbel-max probability clears 0.99: [5, 0] (0.9933) and [6, 0, 0] (0.9951).
    dominant = min(_argmax_freqs([5.0, 0.0], 0.1, 100_000, 20)[0],
                   _argmax_freqs([6.0, 0.0, 0.0], 0.1, 100_000, 21)[0])
    elapsed = time.perf_counter() - t0
    ok = worst <= 0.02 and dominant >= 0.99 and elapsed < 10
    acceptance(3, ok, f"max |freq - softmax| = {worst:.4f}, dominant freq at tau=0.1 = {dominant:.4f}, "
                      f"{elapsed:.1f}s")


def test_04_extraction_equivalence(acceptance):
    t0 = time.perf_counter()
    r = np.random.default_rng(80)
    worst, zero_exact = 0.0, True
    for case in range(200):
        n = int(r.integers(1, 9))
        net = live_net(n, int(r.integers(2, 7)), int(r.integers(0, 4)), case, in_dim=5, out_dim=3)
        mask = r.integers(0, 2, n).astype(np.float64)
        x = r.normal(size=(4, 5))
        c = r.normal(size=(4, net.c)) if net.c else None
        gated = forward_gated(net, mask, x, c).data
        worst = max(worst, float(np.max(np.abs(gated - forward(extract_subnetwork(net, mask), x, c).data))))
        zero = forward_gated(net, np.zeros(n), x, c).data
        zero_exact &= zero.tobytes() == project_only(net, x).data.tobytes()
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-12 and zero_exact and elapsed < 30
    acceptance(4, ok, f"sup-norm gap {worst:.2e} over 200 pairs, all-zeros exact={zero_exact}, {elapsed:.1f}s")


def test_05_mask_algebra(acceptance):
    t0 = time.perf_counter()
    r = np.random.default_rng(80)
    parts = [BlockPartition(12, 4, 2), BlockPartition(16, 4, 2), BlockPartition(12, 6, 3), BlockPartition(15, 5, 2)]
    cases = failures = 0
    while cases < 1000:
        part = parts[int(r.integers(len(parts)))]
        table = OptionTable.for_partition(part)
        m = compose_mask(r.integers(0, len(table), part.n_blocks), table, part)
        pi = r.random(part.n_layers)
        block, k = int(r.integers(part.n_blocks)), int(r.integers(1, 3))
        if k > min(part.keep_per_block, part.block_size - part.keep_per_block):
            continue
        cases += 1
        exp = build_expansion_candidate(m, pi, block, k, part)
        cor = build_corrosion_candidate(m, pi, block, k, part)
        ok = (int(np.maximum(m, exp.m_hat).sum()) - int(m.sum()) == k
              and int(m.sum()) - int(np.minimum(m, cor.m_hat).sum()) == k
              and not part.is_valid(exp.m_plus.data) and not part.is_valid(cor.m_minus.data))
        failures += not ok
    elapsed = time.perf_counter() - t0
    acceptance(5, failures == 0 and elapsed < 5, f"{cases} feasible cases, {failures} violations, {elapsed:.2f}s")


def test_06_conservation_and_reachability(acceptance):
    t0 = time.perf_counter()
    part = BlockPartition(12, 4, 2)
    table = OptionTable.for_partition(part)
    dist = PruningDistribution.uniform(part)
    pi = marginal_profile(dist, table)
    r = np.random.default_rng(80)
    popcounts, first_escape = set(), None
    for draw in range(1000):
        m = sample_training_mask(dist, table, part, pi, r).mask.data
        popcounts.add(float(m.sum()))
        if first_escape is None and not part.is_valid(m):
            first_escape = draw
    for _ in range(200):
        popcounts.add(float(sample_training_mask(dist, table, part, pi, r, activation=False).mask.data.sum()))
    elapsed = time.perf_counter() - t0
    ok = popcounts == {6.0} and first_escape is not None and elapsed < 10
    acceptance(6, ok, f"popcounts {sorted(popcounts)}, first mask outside the valid set at draw {first_escape}, "
                      f"{elapsed:.1f}s")


def test_07_gradient_suite(acceptance):
    t0 = time.perf_counter()
    worst = run_suite(seed=80, n_inputs=20, step=1e-6)
    elapsed = time.perf_counter() - t0
    name = max(worst, key=worst.get)
    ok = worst[name] < TOLERANCE and "straight_through" in worst and elapsed < 60
    acceptance(7, ok, f"{len(worst)} checks x 20 inputs, worst {name} = {worst[name]:.2e}, {elapsed:.1f}s")


@pytest.mark.slow
def test_08_precache_bit_exact(acceptance, default_teacher):
    t0 = time.perf_counter()
    r = np.random.default_rng(80)
    nets = [default_teacher.net, live_net(4, 6, 3, 5, in_dim=8, out_dim=8)]
    exact = True
    for net in nets:
        cond = r.normal(size=net.c)
        stripped = strip_conditioning(net, cond)
        for _ in range(100):
            x = r.uniform(-1, 1, (1, 8))
            exact &= forward(stripped, x).data.tobytes() == forward(net, x, cond[None, :]).data.tobytes()
        x = r.uniform(-1, 1, (100, 8))
        exact &= forward(stripped, x).data.tobytes() == forward(net, x, np.tile(cond, (100, 1))).data.tobytes()
    elapsed = time.perf_counter() - t0
    acceptance(8, exact and elapsed < 5, f"bitwise equal on 100 inputs for {len(nets)} nets: {exact}, {elapsed:.2f}s")


@pytest.mark.slow
def test_09_recoverability_ordering(acceptance, default_teacher, splits):
    t0 = time.perf_counter()
    seeds = range(80, 85)
    records = run_benchmark(default_teacher.net, splits, seeds, ("learned", "uniform", "similarity", "random-min"),
                            BenchmarkConfig())
    per_seed = (time.perf_counter() - t0) / len(seeds)
    loss = {name: [r.loss_final for r in records if r.strategy == name]
            for name in ("learned", "uniform", "similarity", "random-min")}
    learned = float(np.median(loss["learned"]))
    med_uniform, med_similarity = np.median(loss["uniform"]), np.median(loss["similarity"])
    pooled = float(np.median(loss["uniform"] + loss["similarity"]))
    bound = 1.05 * min(loss["random-min"])
    part_a = learned <= med_uniform and learned <= med_similarity and learned <= pooled
    part_b = learned <= bound
    ok = part_a and part_b and per_seed < 15 * 60
    acceptance(9, ok, f"learned median {learned:.5f}; uniform {med_uniform:.5f}, similarity {med_similarity:.5f}, "
                      f"pooled {pooled:.5f}; 1.05 x random-min best {bound:.5f}; {per_seed:.0f}s per seed")


def _reference_blockwise(logits, n_layers, block, keep, rng):
    # Independent blockwise sampler: Gumbel-max per block over C(block, keep) local patterns.
    options = []
    for kept in itertools.combinations(range(block), keep):
        row = [0] * block
        for i in kept:
            row[i] = 1
        options.append(row)
    mask = []
    for z in logits:
        g = -np.log(-np.log(np.clip(rng.random(len(options)), 1e-12, 1 - 1e-12)))
        mask.extend(options[int(np.argmax(z + g))])
    return tuple(mask)


def test_10_ablation_reduction(acceptance, small_teacher, small_splits):
    t0 = time.perf_counter()
    identical = True
    for keep in (1, 2, 3):
        part = BlockPartition(12, 4, keep)
        table = OptionTable.for_partition(part)
        dist = PruningDistribution.uniform(part)
        r = np.random.default_rng(keep)
        for t in dist.parameters():
            t.data = r.normal(size=t.shape)
        pi = marginal_profile(dist, table)
        ours, ref = {}, {}
        r1, r2 = np.random.default_rng(80), np.random.default_rng(80)
        for _ in range(10_000):
            m = tuple(int(v) for v in sample_training_mask(dist, table, part, pi, r1, activation=False).mask.data)
            ours[m] = ours.get(m, 0) + 1
            m = _reference_blockwise([t.data for t in dist.block_logits], 12, 4, keep, r2)
            ref[m] = ref.get(m, 0) + 1
        identical &= ours == ref
    res = train_mask(small_teacher, small_splits.train,
                     TrainConfig(steps=5, batch=8, rank=2, activation_enabled=False))
    frozen_q = all(not q.data.any() for q in res.dist.transform_logits)
    elapsed = time.perf_counter() - t0
    ok = identical and frozen_q and elapsed < 60
    acceptance(10, ok, f"histograms identical for s=1,2,3 over 1e4 draws: {identical}; "
                       f"transform logits untouched when disabled: {frozen_q}; {elapsed:.1f}s")


def _cli_outputs(workdir, tag):
    cfg = workdir / "fast.cfg"
    teacher = workdir / "teacher.tpkt"
    out = workdir / tag
    out.mkdir()
    stdout = io.StringIO()
    codes = []
    calls = [
        ["space", "--layers", "24", "--block", "4", "--keep", "2"],
        ["train-teacher", "--config", cfg, "--layers", "4", "--d", "4", "--out", out / "teacher.tpkt"],
        ["learn-mask", "--config", cfg, "--teacher", teacher, "--out", out / "dist.tpkt",
         "--mask-out", out / "learned.mask", "--log", out / "decisions.log"],
        ["prune", "--teacher", teacher, "--mask", out / "learned.mask", "--out", out / "pruned.tpkt"],
        ["finetune", "--config", cfg, "--teacher", teacher, "--mask", out / "learned.mask",
         "--out", out / "student.tpkt", "--report", out / "finetune.csv"],
        *[["baseline", "--strategy", s, "--config", cfg, "--teacher", teacher, "--out", out / f"{s}.mask",
           "--scores", out / f"{s}.csv"] for s in ("random-min", "similarity", "sensitivity", "uniform", "block-local")],
        ["benchmark", "--config", cfg, "--teacher", teacher, "--seeds", "2", "--out", out / "bench.csv"],
        ["precache", "--net", teacher, "--cond", "0.5,-0.5,0.25,0", "--out", out / "cached.tpkt"],
        ["gradcheck", "--inputs", "1"],
    ]
    with redirect_stdout(stdout):
        for argv in calls:
            codes.append(run_cli([str(a) for a in argv] + ["-q"]))
    files = {p.name: p.read_bytes() for p in sorted(out.iterdir())}
    return codes, files, stdout.getvalue()


def test_11_cli_determinism(acceptance, tmp_path, small_teacher):
    save_net(small_teacher, tmp_path / "teacher.tpkt")
    (tmp_path / "fast.cfg").write_text("mask_steps = 20\nfinetune_steps = 20\nteacher_steps = 20\n"
                                       "batch = 16\nrank = 2\nrandom_trials = 4\n")
    codes_a, files_a, out_a = _cli_outputs(tmp_path, "a")
    codes_b, files_b, out_b = _cli_outputs(tmp_path, "b")
    same = files_a == files_b and out_a == out_b
    ok = set(codes_a) == {0} and codes_a == codes_b and same and len(files_a) == 17
    acceptance(11, ok, f"{len(codes_a)} commands, {len(files_a)} files byte-identical across reruns: {same}")
