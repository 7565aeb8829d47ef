"""Command-line entry point: ``depthprune <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 runtime error.  Messages go to
standard error; data goes to files or standard output.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from depthprune import baselines, checkpoint
from depthprune.config import Config, ConfigError, load_config
from depthprune.learning import TrainConfig, decide_mask, train_mask
from depthprune.masks import (BlockPartition, MaskParseError, OptionTable, count_search_space,
                              mask_read, mask_to_string, valid_subspace_stats)
from depthprune.net import extract_subnetwork, load_net, state_tensors, strip_conditioning, to_state
from depthprune.recovery import (STRATEGIES, BenchmarkConfig, FinetuneConfig, finetune_student,
                                 run_benchmark, strategy_mask, train_teacher, write_report)
from depthprune.task import make_splits
from depthprune.tensor import DomainError

log = logging.getLogger("depthprune")

BASELINES = ("random-min", "similarity", "sensitivity", "uniform", "block-local")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- output helpers -------------------------------------------------------------------

def _commit(path, data: bytes) -> None:
    """Write via a sibling temp file so a failed run never leaves a partial file."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _commit_text(path, text: str) -> None:
    _commit(path, text.encode("utf-8"))


def _commit_report(records, path) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    write_report(records, tmp)
    os.replace(tmp, path)


def _net_bytes(net) -> bytes:
    return checkpoint.dumps(to_state(net))


def _mask_bytes(mask) -> bytes:
    return (mask_to_string(mask) + "\n").encode("ascii")


# -- config resolution ----------------------------------------------------------------

_OVERRIDES = {  # argparse dest -> config key
    "seed": "seed", "layers": "layers", "d": "d", "block": "block", "keep": "keep", "k": "k",
    "steps": None, "jobs": "jobs", "seeds": "seeds", "rank": "rank", "phase": "phase",
    "trials": "random_trials",
}


def _resolve(args, steps_key: str | None = None) -> Config:
    cfg = load_config(args.config) if getattr(args, "config", None) else Config()
    for dest, key in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        key = key or steps_key
        if key is not None:
            cfg.set(key, value)
    if getattr(args, "no_activation", False):
        cfg.set("activation", False)
    log.info("resolved config:\n%s", cfg.resolved())
    return cfg


def _partition(cfg: Config) -> BlockPartition:
    try:
        return BlockPartition(cfg["layers"], cfg["block"], cfg["keep"])
    except DomainError as exc:
        raise UsageError(str(exc)) from None


def _train_config(cfg: Config, activation: bool | None = None) -> TrainConfig:
    return TrainConfig(lambda_task=cfg["lambda_task"], lambda_distill=cfg["lambda_distill"],
                       steps=cfg["mask_steps"], lr_params=cfg["lr_params"], lr_logits=cfg["lr_logits"],
                       batch=cfg["batch"], seed=cfg["seed"],
                       activation_enabled=cfg["activation"] if activation is None else activation,
                       tau=cfg["tau"], tau_final=cfg["tau_final"] if cfg["anneal"] else None,
                       k=cfg["k"], grad_clip=cfg["grad_clip"], block_size=cfg["block"], keep=cfg["keep"],
                       rank=cfg["rank"], pi_every=cfg["pi_every"])


def _finetune_config(cfg: Config) -> FinetuneConfig:
    return FinetuneConfig(steps=cfg["finetune_steps"], lr=cfg["finetune_lr"], batch=cfg["batch"],
                          rank=cfg["rank"], seed=cfg["seed"], grad_clip=cfg["grad_clip"])


def _benchmark_config(cfg: Config) -> BenchmarkConfig:
    return BenchmarkConfig(block_size=cfg["block"], keep=cfg["keep"], random_trials=cfg["random_trials"],
                           mask=_train_config(cfg), finetune=_finetune_config(cfg))


def _check_teacher(teacher, cfg: Config) -> None:
    if teacher.n_layers != cfg["layers"]:
        log.info("teacher has %d layers; using that instead of layers=%d", teacher.n_layers, cfg["layers"])
        cfg.set("layers", teacher.n_layers)


# -- commands -------------------------------------------------------------------------

def cmd_space(args) -> int:
    cfg = _resolve(args)
    part = _partition(cfg)
    stats = valid_subspace_stats(part)
    total = count_search_space(part.n_layers, part.retained)
    print(f"total {total}")
    print(f"valid {stats.valid}")
    print(f"fraction {100.0 * stats.valid / total:.4f}%")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = _resolve(args, "teacher_steps")
    fit = train_teacher(make_splits(cfg["seed"]), cfg["layers"], cfg["d"], cfg["seed"],
                        cfg["teacher_steps"], cfg["teacher_lr"], cfg["batch"])
    _commit(args.out, _net_bytes(fit.net))
    log.info("teacher held-out MSE %.6g (target reached: %s)", fit.heldout_loss, fit.reached_target)
    return 0


def cmd_learn_mask(args) -> int:
    cfg = _resolve(args, "mask_steps")
    teacher = load_net(args.teacher)
    _check_teacher(teacher, cfg)
    part = _partition(cfg)
    res = train_mask(teacher, make_splits(cfg["seed"]).train, _train_config(cfg))
    lines: list[str] = []
    mask = decide_mask(res.dist, OptionTable.for_partition(part), part, lines)
    state = dict(res.dist.to_state())
    state.update({k: t.data for k, t in state_tensors(res.student).items() if k.startswith("delta.")})
    _commit(args.out, checkpoint.dumps(state))
    _commit(args.mask_out, _mask_bytes(mask))
    _commit_text(args.log, "\n".join(lines) + "\n")
    log.info("final pruning loss %.6g; mask %s", res.history[-1] if res.history else float("nan"),
             mask_to_string(mask))
    return 0


def cmd_prune(args) -> int:
    _resolve(args)
    teacher = load_net(args.teacher)
    mask = mask_read(args.mask)
    _commit(args.out, _net_bytes(extract_subnetwork(teacher, mask)))
    return 0


def cmd_finetune(args) -> int:
    cfg = _resolve(args, "finetune_steps")
    teacher = load_net(args.teacher)
    mask = mask_read(args.mask)
    student, rec = finetune_student(teacher, mask, make_splits(cfg["seed"]), _finetune_config(cfg),
                                    args.label)
    _commit(args.out, _net_bytes(student))
    if args.report:
        _commit_report([rec], args.report)
    print(f"loss_init {rec.loss_init:.17g}")
    print(f"loss_final {rec.loss_final:.17g}")
    return 0


def cmd_baseline(args) -> int:
    cfg = _resolve(args, "mask_steps")
    teacher = load_net(args.teacher)
    _check_teacher(teacher, cfg)
    splits = make_splits(cfg["seed"])
    part = _partition(cfg)
    probe = splits.heldout.head(baselines.PROBE_SIZE)
    name = args.strategy
    scores = None
    if name == "random-min":
        res = baselines.random_min(teacher, probe, part.retained, cfg["random_trials"], cfg["seed"])
        mask, scores = res.mask, res.diagnostics
    elif name == "similarity":
        res = baselines.similarity_prune(teacher, probe, part.retained)
        mask, scores = res.mask, res.diagnostics
    elif name == "sensitivity":
        res = baselines.sensitivity_prune(teacher, probe, part.retained)
        mask, scores = res.mask, res.diagnostics
    elif name == "uniform":
        mask = baselines.uniform_prune(part.n_layers, part.retained, cfg["phase"]).mask
    else:
        mask = strategy_mask(name, teacher, splits, cfg["seed"], _benchmark_config(cfg))
    _commit(args.out, _mask_bytes(mask))
    if args.scores and scores is not None:
        tmp = Path(args.scores).with_name(f".{Path(args.scores).name}.tmp")
        baselines.write_scores(scores, tmp)
        os.replace(tmp, args.scores)
    print(mask_to_string(mask))
    return 0


def cmd_benchmark(args) -> int:
    cfg = _resolve(args)
    teacher = load_net(args.teacher)
    _check_teacher(teacher, cfg)
    seeds = range(cfg["seed"], cfg["seed"] + cfg["seeds"])
    records = run_benchmark(teacher, make_splits(cfg["seed"]), seeds, STRATEGIES,
                            _benchmark_config(cfg), cfg["jobs"])
    _commit_report(records, args.out)
    return 0


def _parse_cond(text: str | None, c: int) -> np.ndarray | None:
    if text is None:
        return None
    try:
        values = np.array([float(v) for v in text.split(",")], dtype=np.float64)
    except ValueError:
        raise UsageError(f"--cond: expected comma-separated numbers, got {text!r}") from None
    if values.shape != (c,):
        raise UsageError(f"--cond: expected {c} values, got {values.size}")
    return values


def cmd_precache(args) -> int:
    _resolve(args)
    net = load_net(args.net)
    cond = _parse_cond(args.cond, net.c)
    _commit(args.out, _net_bytes(strip_conditioning(net, cond)))
    return 0


def cmd_gradcheck(args) -> int:
    from depthprune.gradcheck import TOLERANCE, run_suite
    cfg = _resolve(args)
    worst = run_suite(cfg["seed"], args.inputs)
    for name, err in worst.items():
        print(f"{name} {err:.3e} {'ok' if err < TOLERANCE else 'FAIL'}")
    bad = [n for n, e in worst.items() if not e < TOLERANCE]
    if bad:
        log.error("gradient check failed for: %s", ", ".join(bad))
        return 2
    return 0


# -- parser ---------------------------------------------------------------------------

def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' config file")
    common.add_argument("--seed", type=int)
    common.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors")

    shape = _Parser(add_help=False)
    shape.add_argument("--layers", type=_positive)
    shape.add_argument("--block", type=_positive)
    shape.add_argument("--keep", type=int)

    p = _Parser(prog="depthprune", description="Learnable depth pruning on a toy gated-residual network.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("space", parents=[common, shape], help="search-space sizes")
    s.set_defaults(func=cmd_space)

    s = sub.add_parser("train-teacher", parents=[common], help="fit the full teacher network")
    s.add_argument("--layers", type=_positive)
    s.add_argument("--d", type=_positive)
    s.add_argument("--steps", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_teacher)

    s = sub.add_parser("learn-mask", parents=[common, shape], help="learn a mask distribution")
    s.add_argument("--teacher", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--k", type=int)
    s.add_argument("--rank", type=_positive)
    s.add_argument("--no-activation", action="store_true", help="block-local sampling only")
    s.add_argument("--out", required=True, help="distribution + delta checkpoint")
    s.add_argument("--mask-out", required=True)
    s.add_argument("--log", required=True, help="decision log")
    s.set_defaults(func=cmd_learn_mask)

    s = sub.add_parser("prune", parents=[common], help="extract the retained layers")
    s.add_argument("--teacher", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prune)

    s = sub.add_parser("finetune", parents=[common], help="distil a pruned student")
    s.add_argument("--teacher", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--rank", type=_positive)
    s.add_argument("--label", default="custom", help="strategy name for the report row")
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("baseline", parents=[common, shape], help="mask from a reference strategy")
    s.add_argument("--strategy", required=True, choices=BASELINES)
    s.add_argument("--teacher", required=True)
    s.add_argument("--trials", type=_positive)
    s.add_argument("--phase", type=int)
    s.add_argument("--steps", type=int, help="mask-learning steps for block-local")
    s.add_argument("--out", required=True)
    s.add_argument("--scores", help="per-layer diagnostics CSV")
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("benchmark", parents=[common, shape], help="strategy x seed recovery grid")
    s.add_argument("--teacher", required=True)
    s.add_argument("--seeds", type=_positive)
    s.add_argument("--jobs", type=_positive)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_benchmark)

    s = sub.add_parser("precache", parents=[common], help="cache modulation and drop conditioning")
    s.add_argument("--net", required=True)
    s.add_argument("--cond", help="comma-separated conditioning vector (default zeros)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_precache)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference suite")
    s.add_argument("--inputs", type=_positive, default=20)
    s.set_defaults(func=cmd_gradcheck)
    return p


def run_cli(argv=None) -> int:
    parser = build_parser()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    try:
        try:
            args = parser.parse_args(argv)
        except UsageError as exc:
            print(exc, file=sys.stderr)
            parser.print_usage(sys.stderr)
            return 1
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        root.setLevel(logging.WARNING if args.quiet else logging.INFO)
        try:
            return args.func(args)
        except (UsageError, ConfigError) as exc:
            print(f"usage error: {exc}", file=sys.stderr)
            return 1
        except (OSError, ValueError, RuntimeError, MaskParseError, checkpoint.CheckpointError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
    finally:
        root.removeHandler(handler)


def main() -> None:  # pragma: no cover
    sys.exit(run_cli())


if __name__ == "__main__":  # pragma: no cover
    main()
