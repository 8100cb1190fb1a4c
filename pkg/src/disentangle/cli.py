"""Command-line front end.

    disentangle train     [--config FILE] [key=value ...]
    disentangle eval      --checkpoint FILE --mode swap|interp|retrieve|sample|metric [options]
    disentangle generate  --checkpoint FILE [--index I] [--count N] [--seed S]
    disentangle gradcheck [--tolerance T]

Exit status: 0 success, 1 numeric or runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import os
import sys
import time
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError
from .config import ConfigError, RunConfig, held_out_ids, parse_config
from .datasets import (
    IdxFormatError,
    LabeledImageSet,
    generate_synthetic,
    load_idx,
    load_or_generate_synthetic,
    split_by_identity,
    split_by_sample,
)
from .evaluation import (
    GridImage,
    conditional_samples,
    disentanglement_metric,
    interpolation_grid,
    retrieve,
    swap_grid,
)
from .png import encode_png
from .trainer import CheckpointError, ModelCheckpoint, Trainer, TrainingDiverged

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
CONFIG_ECHO = "config.txt"
CHECKPOINT_NAME = "checkpoint.dvc"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def thread_limit():
    """Honour ``DISENT_THREADS`` (0 or unset: library default)."""
    raw = os.environ.get("DISENT_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"DISENT_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError("DISENT_THREADS must be >= 0")
    if n == 0:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def load_splits(cfg: RunConfig) -> dict[str, LabeledImageSet]:
    """Load the configured dataset and split it into train / val / test."""
    if cfg.dataset == "mnist":
        for key in ("mnist.images", "mnist.labels"):
            if not Path(cfg[key]).exists():
                raise UsageError(f"{key}: file not found: {cfg[key]}")
        try:
            data = load_idx(cfg["mnist.images"], cfg["mnist.labels"])
        except IdxFormatError as exc:
            raise UsageError(str(exc)) from None
        if cfg["mnist.limit"]:
            data = data.subset(np.arange(min(cfg["mnist.limit"], len(data))))
    else:
        cache = cfg["synthetic.cache"] or None
        data = load_or_generate_synthetic(cfg.synthetic, cfg["data_seed"], cache)
    if cfg["split"] == "identity":
        return split_by_identity(data, held_out_ids(cfg), seed=cfg["split.seed"])
    return split_by_sample(data, seed=cfg["split.seed"])


def fit_arch_to_data(cfg: RunConfig, data: LabeledImageSet) -> RunConfig:
    """Image geometry and label count always follow the dataset."""
    c, h, w = data.image_shape
    if h != w:
        raise UsageError(f"images must be square, got {h}x{w}")
    arch = dataclasses.replace(cfg.train.arch, image_channels=c, image_side=h, num_labels=data.num_labels)
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, arch=arch))


def make_run_dir(out: str, seed: int) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(out) / f"{stamp}-{seed}"
    path, k = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}.{k}")
        k += 1
    path.mkdir(parents=True)
    return path


def _load_checkpoint(path) -> ModelCheckpoint:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return ModelCheckpoint.load(path)
    except CheckpointError as exc:
        raise UsageError(f"bad checkpoint: {exc}") from None


def _eval_config(args, ckpt_path: Path) -> RunConfig:
    cfg_path = args.config
    if cfg_path is None and (ckpt_path.parent / CONFIG_ECHO).exists():
        cfg_path = ckpt_path.parent / CONFIG_ECHO
    return parse_config(cfg_path, args.overrides)


def _check_compatible(ckpt: ModelCheckpoint, data: LabeledImageSet):
    a = ckpt.config.arch
    want = (a.image_channels, a.image_side, a.image_side)
    if data.image_shape != want:
        raise UsageError(f"dataset images are {data.image_shape} but the checkpoint expects {want}")
    if data.labels.max() >= a.num_labels:
        raise UsageError(f"dataset has label {data.labels.max()} but the checkpoint knows {a.num_labels} labels")


def _pick(data: LabeledImageSet, n: int) -> np.ndarray:
    if n > len(data):
        raise UsageError(f"requested {n} images but the split has {len(data)}")
    return data.images[:n]


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = parse_config(args.config, args.overrides)
    splits = load_splits(cfg)
    cfg = fit_arch_to_data(cfg, splits["train"])
    run_dir = make_run_dir(cfg["out"], cfg.seed)
    (run_dir / CONFIG_ECHO).write_text(cfg.echo())
    trainer = Trainer(cfg.train)
    print(f"run directory: {run_dir}")
    try:
        ckpt, history = trainer.train(splits["train"], run_dir=run_dir)
    except TrainingDiverged as exc:
        print(f"error: {exc}; last good checkpoint kept at {exc.path}", file=sys.stderr)
        return EXIT_FAILURE
    last = history[-1]
    print(f"finished {ckpt.iteration} iterations: rec={last.rec11:.4f} kl={last.kl:.4f} "
          f"adversary={last.adversary:.4f}")
    print(f"checkpoint: {run_dir / CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt_path = Path(args.checkpoint)
    ckpt = _load_checkpoint(ckpt_path)
    cfg = _eval_config(args, ckpt_path)
    splits = load_splits(cfg)
    test = splits[args.split]
    _check_compatible(ckpt, test)
    model = ckpt.build_model()
    out = Path(args.out) if args.out else ckpt_path.parent
    out.mkdir(parents=True, exist_ok=True)

    if args.mode == "swap":
        if args.n < 2:
            raise UsageError("--n must be at least 2")
        path = encode_png(swap_grid(model, _pick(test, args.n)), out / "swap.png")
    elif args.mode == "interp":
        imgs = _pick(test, max(args.a, args.b) + 1)
        if args.steps < 2:
            raise UsageError("--steps must be at least 2")
        path = encode_png(interpolation_grid(model, imgs[args.a], imgs[args.b], args.steps), out / "interp.png")
    elif args.mode == "retrieve":
        gallery = splits["train"]
        _check_compatible(ckpt, gallery)
        query = _pick(test, args.query + 1)[args.query]
        hits = retrieve(model, query, gallery.images, args.space, args.k)
        lines = [f"query={args.query} label={test.labels[args.query]} space={args.space}"]
        lines += [f"rank={r + 1} index={h.index} label={gallery.labels[h.index]} distance={h.distance:.6f}"
                  for r, h in enumerate(hits)]
        (out / "retrieve.txt").write_text("\n".join(lines) + "\n")
        print("\n".join(lines))
        cells = np.stack([query] + [gallery.images[h.index] for h in hits])[None]
        path = encode_png(GridImage(cells), out / "retrieve.png")
    elif args.mode == "sample":
        imgs = _pick(test, args.n)
        rows = [conditional_samples(model, x, args.count, seed=args.seed + i) for i, x in enumerate(imgs)]
        cells = np.stack([np.concatenate([x[None], r]) for x, r in zip(imgs, rows)])
        path = encode_png(GridImage(cells), out / "samples.png")
    else:
        report = disentanglement_metric(model, splits["train"], splits["val"], splits["test"], seed=args.seed)
        (out / "report.txt").write_text(report.to_text())
        (out / "report.kv").write_text(report.to_kv())
        print(report.to_text(), end="")
        path = out / "report.kv"
    print(f"wrote {path}")
    return EXIT_OK


def cmd_generate(args) -> int:
    ckpt_path = Path(args.checkpoint)
    ckpt = _load_checkpoint(ckpt_path)
    cfg = _eval_config(args, ckpt_path)
    test = load_splits(cfg)[args.split]
    _check_compatible(ckpt, test)
    x = _pick(test, args.index + 1)[args.index]
    samples = conditional_samples(ckpt.build_model(), x, args.count, seed=args.seed)
    target = Path(args.output) if args.output else ckpt_path.parent / f"generate-{args.index}.png"
    encode_png(GridImage(np.concatenate([x[None], samples])[None]), target)
    print(f"wrote {target}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    reports = run_all(seed=args.seed, tolerance=args.tolerance)
    failed = 0
    for name, rep in reports.items():
        status = "ok" if rep.ok else "FAIL"
        failed += not rep.ok
        print(f"{name}: max_rel_err={rep.worst:.3e} {status}")
        if not rep.ok or args.verbose:
            for line in rep.lines():
                print(f"    {line}")
    print(f"{len(reports) - failed}/{len(reports)} checks passed (tolerance {args.tolerance:g})")
    return EXIT_OK if failed == 0 else EXIT_FAILURE


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="disentangle", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", type=Path)
    t.add_argument("overrides", nargs="*", metavar="key=value")
    t.set_defaults(func=cmd_train)

    def with_checkpoint(sp):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--config", type=Path, help="run config (default: config.txt beside the checkpoint)")
        sp.add_argument("--split", choices=("train", "val", "test"), default="test")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("overrides", nargs="*", metavar="key=value")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    with_checkpoint(e)
    e.add_argument("--mode", required=True, choices=("swap", "interp", "retrieve", "sample", "metric"))
    e.add_argument("--n", type=int, default=8, help="images in the swap or sample grid")
    e.add_argument("--steps", type=int, default=7, help="interpolation steps")
    e.add_argument("--a", type=int, default=0)
    e.add_argument("--b", type=int, default=1)
    e.add_argument("--query", type=int, default=0)
    e.add_argument("--k", type=int, default=5)
    e.add_argument("--space", choices=("specified", "unspecified"), default="specified")
    e.add_argument("--count", type=int, default=8, help="samples per image")
    e.add_argument("--out", help="output directory (default: beside the checkpoint)")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("generate", help="conditional samples for one image")
    with_checkpoint(g)
    g.add_argument("--index", type=int, default=0)
    g.add_argument("--count", type=int, default=8)
    g.add_argument("--output")
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("gradcheck", help="finite-difference check of all primitives and losses")
    c.add_argument("--tolerance", type=float, default=1e-5)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--verbose", action="store_true")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        with thread_limit():
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, FloatingPointError, TrainingDiverged) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
