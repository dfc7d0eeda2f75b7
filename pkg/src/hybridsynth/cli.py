"""Command-line surface.

Subcommands: gen-data, train, sample, eval, ablate. Exit codes are a
stable contract: 0 success, 1 usage or configuration error, 2 data
error, 3 numerical abort, 4 I/O or checkpoint-integrity failure.

Config values come from an INI file (see config.py for the schema and
defaults); --set section.key=value flags override file values, and the
merged effective config is snapshotted into the run directory. The
HYBRIDSYNTH_OUT_ROOT environment variable, if set, prefixes relative
output directories; nothing else is read from the environment.
"""

from __future__ import annotations

import argparse
import contextlib
import os
import sys

import numpy as np
import torch

from . import checkpoint as ckpt_io
from . import data as data_mod
from . import metrics, pngio, training
from .config import RunConfig, apply_overrides, load_config, serialize_config
from .errors import (
    CheckpointIntegrityError,
    ConfigurationError,
    DataError,
    HybridSynthError,
    NumericalAbortError,
)


class _Parser(argparse.ArgumentParser):
    """argparse exits with code 2 on usage errors; we reserve 2 for data
    errors, so usage problems are rethrown as configuration errors."""

    def error(self, message):
        raise ConfigurationError(f"{message}\n{self.format_usage()}".rstrip())


def _out_path(path: str) -> str:
    root = os.environ.get("HYBRIDSYNTH_OUT_ROOT")
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    cfg.validate()
    return apply_overrides(cfg, getattr(args, "set", None) or [])


@contextlib.contextmanager
def _run_lock(run_dir: str):
    os.makedirs(run_dir, exist_ok=True)
    lock = os.path.join(run_dir, ".lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigurationError(
            f"run dir {run_dir!r} is in use (lock file {lock} exists; "
            f"remove it if the previous run is dead)"
        ) from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        if os.path.exists(lock):
            os.remove(lock)


def _load_ema_generator(path):
    """Build the EMA generator recorded in a checkpoint."""
    from .config import parse_config
    from .generator import Generator

    ck = ckpt_io.load_checkpoint(path)
    cfg = parse_config(ck.config_text)
    gen = Generator(cfg.model, cfg.data.shapes.num_classes,
                    cfg.data.shapes.resolution,
                    gumbel_tau=cfg.train.gumbel_tau)
    current = gen.state_dict()
    for k, v in ck.ema.items():
        if k not in current:
            raise ConfigurationError(
                f"checkpoint parameter ema.{k} unknown to this model"
            )
        if tuple(v.shape) != tuple(current[k].shape):
            raise ConfigurationError(
                f"checkpoint parameter ema.{k}: shape {tuple(v.shape)} "
                f"vs model {tuple(current[k].shape)}"
            )
    gen.load_state_dict(ck.ema)
    gen.eval()
    return gen, cfg


def _sync_cfg_with_dataset(cfg: RunConfig, dataset) -> RunConfig:
    # the dataset manifest is authoritative for data facts at train time
    cfg.data.shapes.num_classes = dataset.num_classes
    cfg.data.shapes.resolution = dataset.resolution
    cfg.data.regime = dataset.split.regime
    cfg.data.train_samples = len(dataset.train)
    cfg.data.val_samples = len(dataset.val)
    cfg.data.labeled_count = len(dataset.split.labeled_indices)
    cfg.validate()
    return cfg


# ----------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    if args.resolution:
        cfg.data.shapes.resolution = args.resolution
    if args.classes:
        cfg.data.shapes.num_classes = args.classes
    if args.train_samples is not None:
        cfg.data.train_samples = args.train_samples
    if args.val_samples is not None:
        cfg.data.val_samples = args.val_samples
    if args.seed is not None:
        cfg.data.seed = args.seed
    if args.regime:
        cfg.data.regime = args.regime
    if args.labeled_count is not None:
        cfg.data.labeled_count = args.labeled_count
    cfg.validate()

    out = _out_path(args.out)
    if os.path.isdir(out) and os.listdir(out) and not args.force:
        raise ConfigurationError(
            f"output dir {out!r} is not empty; pass --force to overwrite"
        )
    train, val = data_mod.generate_dataset(cfg.data)
    split = data_mod.make_split(train, cfg.data.regime,
                                cfg.data.labeled_count, cfg.data.seed)
    data_mod.save_dataset(out, cfg.data, train, val, split)
    with open(os.path.join(out, "config.snapshot"), "w", encoding="utf-8") as fh:
        fh.write(serialize_config(cfg))
    print(f"wrote {len(train)} train + {len(val)} val pairs to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    dataset = data_mod.load_dataset(args.data)
    cfg = _sync_cfg_with_dataset(cfg, dataset)
    run_dir = _out_path(args.out)
    with _run_lock(run_dir):
        trainer = training.Trainer(cfg, dataset, run_dir=run_dir)
        if args.resume:
            trainer.restore(ckpt_io.load_checkpoint(args.resume))
            print(f"resumed from {args.resume} at step {trainer.step}")
        artifacts = trainer.run(eval_at_end=args.eval_at_end)
    print(f"finished at step {artifacts.final_step}; "
          f"checkpoint {artifacts.final_checkpoint}")
    if artifacts.report is not None:
        print(artifacts.report.to_text())
    return 0


def cmd_sample(args) -> int:
    gen, cfg = _load_ema_generator(args.ckpt)
    if args.n < 1:
        raise ConfigurationError(f"--n must be >= 1, got {args.n}")
    g = torch.Generator()
    g.manual_seed(args.seed)
    out = _out_path(args.out)
    out_dir = os.path.dirname(os.path.abspath(out))
    os.makedirs(out_dir, exist_ok=True)

    with torch.no_grad():
        if args.mode == "uncond":
            z = torch.randn(args.n, cfg.model.latent_dim, generator=g)
            imgs = gen.generate_uncond(z).numpy()
        else:
            if not args.seg:
                raise ConfigurationError("--seg is required in cond mode")
            labels = pngio.load_labels(args.seg, cfg.data.shapes.resolution)
            onehot = data_mod.one_hot_encode(labels,
                                             cfg.data.shapes.num_classes)
            seg = torch.from_numpy(np.stack([onehot] * args.n))
            z64 = torch.randn(args.n, cfg.model.cond_noise_dim, generator=g)
            imgs = gen.generate_cond(z64, seg).numpy()
            palette = data_mod.class_palette(cfg.data.shapes.num_classes)
            base, ext = os.path.splitext(out)
            pngio.save_image(base + "_map" + ext,
                             pngio.labels_to_rgb(labels, palette))
    pngio.save_image(out, pngio.image_grid(list(imgs)))
    print(f"wrote {args.n}-image grid to {out}")
    return 0


def cmd_eval(args) -> int:
    gen, cfg = _load_ema_generator(args.ckpt)
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    dataset = data_mod.load_dataset(args.data)
    extractor = metrics.RandomConvExtractor(
        seed=cfg.model.extractor_seed, dim=cfg.model.extractor_dim,
        batch=cfg.eval.eval_batch,
    )
    sets = args.sets if args.sets is not None else cfg.eval.eval_sets
    n = cfg.eval.samples_per_set or len(dataset.val)
    report = metrics.evaluate(gen, dataset, extractor, n, sets=sets,
                              base_seed=cfg.eval.eval_seed,
                              batch=cfg.eval.eval_batch)
    out = _out_path(args.out)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "eval_report.json"), "w",
              encoding="utf-8") as fh:
        fh.write(report.to_json())
    with open(os.path.join(out, "eval_report.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(report.to_text())
    print(report.to_text())
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    dataset = data_mod.load_dataset(args.data)
    cfg = _sync_cfg_with_dataset(cfg, dataset)
    out = _out_path(args.out)
    with _run_lock(out):
        result = training.run_ablation(cfg, dataset, out, args.budget)
    print(result.table_text)
    return 0


# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hybridsynth",
                     description="hybrid conditional/unconditional "
                                 "semantic image synthesis")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, with_config=True):
        if with_config:
            p.add_argument("--config", help="INI config file")
        p.add_argument("--set", action="append", metavar="SEC.KEY=VAL",
                       help="override a config value (repeatable)")

    p = sub.add_parser("gen-data", parents=[], help="generate a shapes dataset")
    add_common(p)
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--force", action="store_true",
                   help="overwrite a non-empty directory")
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--train-samples", type=int, default=None)
    p.add_argument("--val-samples", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--regime", choices=("full", "limited", "partial"),
                   default=None)
    p.add_argument("--labeled-count", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--eval-at-end", action="store_true",
                   help="run full evaluation after the last step")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample a grid from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", required=True, choices=("cond", "uncond"))
    p.add_argument("--seg", help="label-map PNG (cond mode)")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output PNG path")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sets", type=int, default=None)
    p.add_argument("--out", default=".", help="report directory")
    p.add_argument("--set", action="append", metavar="SEC.KEY=VAL")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train all 5 modes and tabulate")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--budget", type=int, required=True,
                   help="training steps per mode")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalAbortError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        if exc.snapshot:
            print(f"snapshot: {exc.snapshot}", file=sys.stderr)
        return 3
    except (CheckpointIntegrityError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4
    except HybridSynthError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
