"""Command-line entry point.

Subcommands:
  pretrain   train the reference architecture on the source dataset
  tailor     run the pruning search (or a baseline) against a checkpoint
  report     merge run directories into comparison CSVs and figures
  verify     run the built-in correctness checks

Runs are driven by a JSON config file; --seed/--out/--method/--budget/
--tau override the corresponding config entries. Relative dataset paths
are resolved against $FILTERTAILOR_DATA_ROOT when it is set.

Exit codes: 0 success, 2 configuration error, 3 data error,
4 verification failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from . import baselines, reporting, verify
from .data import (
    Dataset,
    TargetTaskSpec,
    load_cifar_binary,
    load_idx,
    normalize,
    random_crop_pad,
    sample_target,
    shift_channels,
    split_fraction,
    batch_iterator,
)
from .errors import ConfigError, DataFormatError
from .model import (
    ARCHITECTURES,
    ModelGraph,
    build_model,
    flops,
    forward,
    load_model,
    save_model,
    write_manifest,
)
from .synthetic import TASKS, pattern_dataset
from .tailor import (
    IterationRecord,
    TailorConfig,
    eval_accuracy,
    search_optimal,
)
from .tensor import SGD, Tensor, backward, softmax_cross_entropy

METHODS = ("tailor", "ft", "ft-full", "l1", "source-taylor")
DATA_ROOT_ENV = "FILTERTAILOR_DATA_ROOT"

_PRETRAIN_DEFAULTS = {
    "epochs": 8,
    "lr": 0.01,
    "batch_size": 32,
    "val_fraction": 0.1,
    "momentum": 0.9,
    "weight_decay": 0.0005,
    "augment_pad": 0,
}


@dataclasses.dataclass
class RunConfig:
    """Validated contents of one run's JSON config."""

    experiment: str
    architecture: str
    method: str
    seed: int
    out_dir: str
    data: dict
    tailor: TailorConfig
    target_sampling: TargetTaskSpec | None = None
    pretrain: dict = dataclasses.field(default_factory=dict)
    pretrained_checkpoint: str | None = None

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {
            "experiment", "architecture", "method", "seed", "out_dir", "data",
            "tailor", "target_sampling", "pretrain", "pretrained_checkpoint",
        }
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in ("experiment", "out_dir", "data"):
            if key not in raw:
                raise ConfigError(f"config is missing required key {key!r}")
        seed = int(raw.get("seed", 0))
        method = raw.get("method", "tailor")
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}; known: {METHODS}")
        arch = raw.get("architecture", "vgg-mini")
        if arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {arch!r}; known: {sorted(ARCHITECTURES)}")
        tailor_raw = dict(raw.get("tailor", {}))
        tailor_raw.setdefault("seed", seed)
        if "tau" in tailor_raw:
            tailor_raw["tau"] = float(tailor_raw["tau"])  # accepts "inf" strings via json floats
        try:
            tailor_cfg = TailorConfig(**tailor_raw)
        except TypeError as e:
            raise ConfigError(f"bad tailor section: {e}") from None
        sampling = None
        if "target_sampling" in raw:
            s = raw["target_sampling"]
            try:
                sampling = TargetTaskSpec(k=int(s["k"]),
                                          val_fraction=float(s["val_fraction"]),
                                          seed=int(s.get("seed", seed)))
            except KeyError as e:
                raise ConfigError(f"target_sampling is missing {e}") from None
        pretrain = {**_PRETRAIN_DEFAULTS, **raw.get("pretrain", {})}
        unknown_pt = set(pretrain) - set(_PRETRAIN_DEFAULTS)
        if unknown_pt:
            raise ConfigError(f"unknown pretrain keys: {sorted(unknown_pt)}")
        return cls(
            experiment=str(raw["experiment"]),
            architecture=arch,
            method=method,
            seed=seed,
            out_dir=str(raw["out_dir"]),
            data=dict(raw["data"]),
            tailor=tailor_cfg,
            target_sampling=sampling,
            pretrain=pretrain,
            pretrained_checkpoint=raw.get("pretrained_checkpoint"),
        )


def load_config(path: str) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file {path} does not exist")
    with open(path) as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from None
    return RunConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# dataset construction


def _resolve(path: str) -> str:
    root = os.environ.get(DATA_ROOT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _require(path: str, what: str) -> str:
    resolved = _resolve(path)
    if not os.path.exists(resolved):
        raise ConfigError(f"{what} path {resolved} does not exist")
    return resolved


def build_pool(data_cfg: dict, role: str) -> Dataset:
    """Materialize the source or target example pool named in the config."""
    if role not in data_cfg:
        raise ConfigError(f"data section has no {role!r} entry")
    section = data_cfg[role]
    kind = data_cfg.get("kind", "synthetic")
    if kind == "synthetic":
        task = section.get("task")
        if task not in TASKS:
            raise ConfigError(f"{role}: unknown synthetic task {task!r}; known: {TASKS}")
        n = int(section.get("n", 2000))
        seed = int(section.get("seed", 0))
        size = int(data_cfg.get("size", 16))
        return pattern_dataset(n, seed, task=task, size=size, name=f"{role}-{task}")
    if kind == "idx":
        images = _require(section["images"], f"{role} images")
        labels = _require(section["labels"], f"{role} labels")
        return load_idx(images, labels)
    if kind == "cifar":
        files = [_require(p, f"{role} batch") for p in section["files"]]
        return load_cifar_binary(files, name=f"{role}-cifar")
    raise ConfigError(f"unknown data kind {kind!r}")


# ---------------------------------------------------------------------------
# pretrain


def cmd_pretrain(cfg: RunConfig) -> int:
    pool = build_pool(cfg.data, "source")
    pool, means = normalize(pool)
    pt = cfg.pretrain
    train, val = split_fraction(pool, pt["val_fraction"], seed=(cfg.seed, 91))
    input_shape = tuple(train.images.data.shape[1:])
    model = build_model(cfg.architecture, pool.class_count, input_shape, seed=(cfg.seed, 92))
    for p in model.parameters():
        p.requires_grad = True
    opt = SGD.single_group(model.parameters(), lr=pt["lr"], momentum=pt["momentum"],
                           weight_decay=pt["weight_decay"])
    rng = np.random.default_rng((cfg.seed, 93))
    for epoch in range(pt["epochs"]):
        total, count = 0.0, 0
        for xb, yb in batch_iterator(train, pt["batch_size"], rng):
            if pt["augment_pad"] > 0:
                xb = Tensor(random_crop_pad(xb.data, pt["augment_pad"], rng))
            opt.zero_grad()
            loss = softmax_cross_entropy(forward(model, xb), yb)
            backward(loss)
            opt.step()
            total += float(loss.data) * len(yb)
            count += len(yb)
        print(f"epoch {epoch + 1}/{pt['epochs']}: train_loss={total / count:.4f}")
    train_acc = eval_accuracy(model, train, pt["batch_size"])
    val_acc = eval_accuracy(model, val, pt["batch_size"])
    print(f"source accuracy: train={train_acc:.2f}% val={val_acc:.2f}%")

    os.makedirs(cfg.out_dir, exist_ok=True)
    ckpt = os.path.join(cfg.out_dir, "model.ftm")
    save_model(model, ckpt)
    meta = {
        "experiment": cfg.experiment,
        "architecture": cfg.architecture,
        "class_count": pool.class_count,
        "input": list(input_shape),
        "channel_means": [float(m) for m in means],
        "train_top1": train_acc,
        "val_top1": val_acc,
        "epochs": pt["epochs"],
        "seed": cfg.seed,
    }
    with open(os.path.join(cfg.out_dir, "pretrain_meta.json"), "w") as f:
        json.dump(meta, f, indent=2)
        f.write("\n")
    print(f"checkpoint written to {ckpt}")
    return 0


# ---------------------------------------------------------------------------
# tailor


def _target_splits(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    pool = build_pool(cfg.data, "target")
    if cfg.target_sampling is None:
        raise ConfigError("tailor runs need a target_sampling section")
    train, val = sample_target(pool, cfg.target_sampling)
    train, means = normalize(train)
    val = shift_channels(val, means)
    return train, val


def _source_scoring_set(cfg: RunConfig, class_count: int) -> Dataset:
    pool = build_pool(cfg.data, "source")
    if pool.class_count != class_count:
        raise ConfigError(
            f"source pool has {pool.class_count} classes but the checkpoint "
            f"was trained on {class_count}"
        )
    pool, _ = normalize(pool)
    n_score = int(cfg.data.get("source_score_n", 240))
    n_score = min(n_score, pool.n)
    order = np.random.default_rng((cfg.seed, 94)).permutation(pool.n)[:n_score]
    return Dataset(Tensor(pool.images.data[order].copy()), pool.labels[order].copy(),
                   pool.class_count, f"{pool.name}/score")


def cmd_tailor(cfg: RunConfig) -> int:
    if cfg.pretrained_checkpoint is None:
        raise ConfigError("tailor runs need pretrained_checkpoint")
    ckpt_path = _require(cfg.pretrained_checkpoint, "pretrained checkpoint")
    pretrained = load_model(ckpt_path)
    meta_path = os.path.join(os.path.dirname(ckpt_path), "pretrain_meta.json")
    source_meta = None
    if os.path.exists(meta_path):
        with open(meta_path) as f:
            source_meta = json.load(f)

    train, val = _target_splits(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    ckpt_dir = os.path.join(cfg.out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "config.json"), "w") as f:
        json.dump(_config_snapshot(cfg), f, indent=2)
        f.write("\n")

    history_path = os.path.join(cfg.out_dir, "history.jsonl")
    started = time.perf_counter()
    base_flops_holder: list[int] = []

    def history_row(rec: IterationRecord) -> dict:
        if not base_flops_holder:
            base_flops_holder.append(rec.flops)
        base = base_flops_holder[0]
        return {
            "method": cfg.method,
            "iteration": rec.iteration,
            "flops": rec.flops,
            "flops_reduction": round(1.0 - rec.flops / base, 6),
            "val_top1": round(rec.accuracy, 6),
            "accepted": rec.accepted,
            "wall_clock_s": round(time.perf_counter() - started, 3),
            "checkpoint": rec.checkpoint,
        }

    with open(history_path, "w") as hist:
        def on_record(rec: IterationRecord) -> None:
            hist.write(json.dumps(history_row(rec)) + "\n")
            hist.flush()
            print(f"iteration {rec.iteration}: flops={rec.flops} "
                  f"val_top1={rec.accuracy:.2f}% accepted={rec.accepted}")

        target = (train, val)
        if cfg.method == "tailor":
            best, state = search_optimal(pretrained, source_meta, target, cfg.tailor,
                                         checkpoint_dir=ckpt_dir, on_record=on_record)
        elif cfg.method == "l1":
            best, state = baselines.l1_prune_pipeline(pretrained, target, cfg.tailor,
                                                      checkpoint_dir=ckpt_dir,
                                                      on_record=on_record)
        elif cfg.method == "source-taylor":
            source_val = _source_scoring_set(cfg, pretrained.class_count)
            best, state = baselines.source_taylor_prune_pipeline(
                pretrained, source_val, target, cfg.tailor,
                checkpoint_dir=ckpt_dir, on_record=on_record)
        else:
            fit = baselines.ft_head if cfg.method == "ft" else baselines.ft_full
            best = fit(pretrained, target, cfg.tailor)
            acc = eval_accuracy(best, val, cfg.tailor.batch_size)
            rec = IterationRecord(0, flops(best), acc, accepted=True,
                                  checkpoint="final_model.ftm")
            state = None
            on_record(rec)

    save_model(best, os.path.join(cfg.out_dir, "final_model.ftm"))
    if state is not None:
        initial = load_model(os.path.join(ckpt_dir, "iter_000.ftm"))
    else:
        initial = best
    write_manifest(initial, os.path.join(cfg.out_dir, "initial_model.ftm.json"))
    _write_summary(cfg, state, best, val)
    final_acc = eval_accuracy(best, val, cfg.tailor.batch_size)
    print(f"final model: flops={flops(best)} val_top1={final_acc:.2f}%")
    return 0


def _config_snapshot(cfg: RunConfig) -> dict:
    snap = dataclasses.asdict(cfg)
    snap["tailor"] = dataclasses.asdict(cfg.tailor)
    if cfg.target_sampling is not None:
        snap["target_sampling"] = dataclasses.asdict(cfg.target_sampling)
    # json has no inf literal; store as string and parse on the way back in
    if snap["tailor"]["tau"] == float("inf"):
        snap["tailor"]["tau"] = "inf"
    return snap


def _write_summary(cfg: RunConfig, state, best: ModelGraph, val: Dataset) -> None:
    import csv

    base = flops(best) if state is None else state.history[0].flops
    final = flops(best)
    acc = (eval_accuracy(best, val, cfg.tailor.batch_size)
           if state is None else state.best_accuracy)
    row = {
        "method": cfg.method,
        "iterations": 0 if state is None else state.iteration,
        "final_flops": final,
        "flops_reduction": round(1.0 - final / base, 6),
        "final_val_top1": round(acc, 6),
        "stop_reason": "" if state is None else state.stop_reason,
    }
    with open(os.path.join(cfg.out_dir, "summary.csv"), "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(row))
        writer.writeheader()
        writer.writerow(row)


# ---------------------------------------------------------------------------
# report / verify


def cmd_report(run_dirs: list[str], out_dir: str) -> int:
    for d in run_dirs:
        if not os.path.isdir(d):
            raise ConfigError(f"run directory {d} does not exist")
    written = reporting.write_report(run_dirs, out_dir)
    for key, path in written.items():
        print(f"{key}: {path}")
    return 0


def cmd_verify(seed: int, corrupt_op: str | None) -> int:
    results = verify.run_all(seed=seed, corrupt_op=corrupt_op)
    failures = 0
    for res in results:
        print(res.line())
        failures += 0 if res.passed else 1
    print(f"{len(results) - failures}/{len(results)} checks passed")
    return 0 if failures == 0 else 4


# ---------------------------------------------------------------------------
# argument wiring


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    tailor_cfg = cfg.tailor
    updates = {}
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
        updates["seed"] = args.seed
    if getattr(args, "budget", None) is not None:
        updates["budget_fraction"] = args.budget
    if getattr(args, "tau", None) is not None:
        updates["tau"] = args.tau
    if updates:
        tailor_cfg = dataclasses.replace(tailor_cfg, **updates)
        cfg = dataclasses.replace(cfg, tailor=tailor_cfg)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    if getattr(args, "method", None) is not None:
        if args.method not in METHODS:
            raise ConfigError(f"unknown method {args.method!r}; known: {METHODS}")
        cfg = dataclasses.replace(cfg, method=args.method)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="filtertailor",
        description="Target-aware filter pruning for small CNNs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, with_method=False):
        p.add_argument("--config", required=True, help="path to the run config JSON")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")
        if with_method:
            p.add_argument("--method", default=None, choices=METHODS,
                           help="override the pruning/baseline method")
            p.add_argument("--budget", type=float, default=None,
                           help="override per-iteration FLOPs budget fraction")
            p.add_argument("--tau", type=float, default=None,
                           help="override the stop threshold (accuracy points; inf allowed)")

    p_pre = sub.add_parser("pretrain", help="train the source model")
    add_common(p_pre)

    p_tail = sub.add_parser("tailor", help="run the pruning search or a baseline")
    add_common(p_tail, with_method=True)

    p_rep = sub.add_parser("report", help="merge run directories into reports")
    p_rep.add_argument("run_dirs", nargs="+", help="run directories to merge")
    p_rep.add_argument("--out", required=True, help="report output directory")

    p_ver = sub.add_parser("verify", help="run the built-in correctness checks")
    p_ver.add_argument("--seed", type=int, default=0)
    p_ver.add_argument("--corrupt-op", default=None, help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "pretrain":
            cfg = _apply_overrides(load_config(args.config), args)
            return cmd_pretrain(cfg)
        if args.command == "tailor":
            cfg = _apply_overrides(load_config(args.config), args)
            return cmd_tailor(cfg)
        if args.command == "report":
            return cmd_report(args.run_dirs, args.out)
        if args.command == "verify":
            return cmd_verify(args.seed, args.corrupt_op)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataFormatError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
