"""Command-line interface.

Exit codes: 0 success, 2 usage, 3 I/O failure, 4 malformed file or
configuration (including checkpoint/config mismatches), 5 numeric-check
failure.

The packed dataset format carries no class labels, so class-conditional
configurations are rejected here; the library API supports them.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import tensor as T
from .blocks import build_mask, plan_for_scheme
from .fileio import (ConfigError, FileFormatError, box_downsample,
                     load_checkpoint, load_dataset, parse_config, read_ppm,
                     save_checkpoint, write_pgm, write_ppm)
from .imagerep import Image
from .model import ModelConfig, build, forward_train, from_params
from .rng import Rng
from .sampling import SamplerConfig, complete, generate, superres
from .training import TrainConfig, evaluate, train

__all__ = ["main"]


def _read_text(path: str) -> str:
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


def _reject_class_conditional(config: ModelConfig) -> None:
    if config.n_classes is not None:
        raise FileFormatError(
            "class-conditional models are not supported by the CLI: the "
            "dataset format stores no labels")


def _check_superres_geometry(config: ModelConfig) -> None:
    if (config.h, config.w) != (4 * config.h_s, 4 * config.w_s):
        raise FileFormatError(
            f"encoder-decoder use requires 4x geometry, got source "
            f"{config.h_s}x{config.w_s} and target {config.h}x{config.w}")


def _load_model(path: str):
    config, params = load_checkpoint(path)
    _reject_class_conditional(config)
    return config, from_params(config, params)


def _derive_sources(config: ModelConfig, images):
    if config.mode != "encoder-decoder":
        return None
    _check_superres_geometry(config)
    return [box_downsample(img, 4) for img in images]


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_train(args) -> int:
    model_config, train_fields = parse_config(_read_text(args.config))
    _reject_class_conditional(model_config)
    if args.steps is not None:
        train_fields["steps"] = args.steps
    if args.seed is not None:
        train_fields["seed"] = args.seed
    if "steps" not in train_fields:
        raise ConfigError("training needs `steps` in the config or --steps")
    try:
        train_config = TrainConfig(**train_fields)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    images = load_dataset(args.data)
    sources = _derive_sources(model_config, images)
    model = build(model_config, Rng(train_config.seed))
    train(model, images, train_config, sources=sources, on_metrics=print)
    save_checkpoint(args.out, model_config, model.params)
    return 0


def _cmd_eval(args) -> int:
    config, model = _load_model(args.ckpt)
    images = load_dataset(args.data)
    sources = _derive_sources(config, images)
    print(f"{evaluate(model, images, sources=sources):.4f}")
    return 0


def _cmd_sample(args) -> int:
    config, model = _load_model(args.ckpt)
    if config.mode != "decoder-only":
        raise FileFormatError(
            "sampling from an encoder-decoder checkpoint needs `superres`")
    if args.n < 1:
        raise ValueError(f"--n must be >= 1, got {args.n}")
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.n):
        cfg = SamplerConfig(temperature=args.temperature, seed=args.seed + i)
        write_ppm(os.path.join(args.out, f"sample_{i:03d}.ppm"),
                  generate(model, cfg))
    return 0


def _cmd_complete(args) -> int:
    config, model = _load_model(args.ckpt)
    if config.mode != "decoder-only":
        raise FileFormatError(
            "completion from an encoder-decoder checkpoint is not supported")
    image = read_ppm(args.image)
    cfg = SamplerConfig(temperature=args.temperature, seed=args.seed)
    write_ppm(args.out, complete(model, image, args.prefix, cfg))
    return 0


def _cmd_superres(args) -> int:
    config, model = _load_model(args.ckpt)
    if config.mode != "encoder-decoder":
        raise FileFormatError(
            "super-resolution needs an encoder-decoder checkpoint")
    _check_superres_geometry(config)
    low = read_ppm(args.low)
    cfg = SamplerConfig(temperature=args.temperature, seed=args.seed)
    write_ppm(args.out, superres(model, low, cfg))
    return 0


def _cmd_inspect_mask(args) -> int:
    config, _ = parse_config(_read_text(args.config))
    plan = plan_for_scheme(config.scheme, config.h, config.w,
                           channels=config.channels)
    if not 0 <= args.block < plan.num_blocks:
        raise ValueError(
            f"--block must be in [0, {plan.num_blocks}), got {args.block}")
    # The decoder attends with self-inclusive masks over shifted inputs.
    mask = build_mask(plan, args.block, self_inclusive=True)
    write_pgm(args.out, np.where(mask, 255, 0).astype(np.uint8))
    return 0


def _cmd_gradcheck(args) -> int:
    config, _ = parse_config(_read_text(args.config))
    model = build(config, Rng(0))
    data_rng = Rng(1)
    images = [Image(data_rng.integers(0, 256, (config.h, config.w, 3)))]
    sources = None
    if config.mode == "encoder-decoder":
        sources = [Image(data_rng.integers(0, 256,
                                           (config.h_s, config.w_s, 3)))]
    class_ids = None if config.n_classes is None else [0]
    training = config.dropout > 0.0

    def loss_fn(params):
        total, _ = forward_train(model, images, class_ids=class_ids,
                                 sources=sources, rng=Rng(3),
                                 training=training, param_tensors=params)
        return total

    err = T.finite_diff_check(loss_fn, model.params, max_samples=60,
                              rng=Rng(2))
    print(f"max relative error: {err:.3e}")
    return 0 if err < 1e-4 else 5


# ---------------------------------------------------------------------------
# Parser


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pixattn",
        description="Autoregressive image generation with local "
                    "self-attention")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and save a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="print bits/dim of a checkpoint on a "
                                    "dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sample", help="sample images to a directory of PPMs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("complete", help="complete an image from a known "
                                        "prefix of generation steps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--prefix", type=int, required=True)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_complete)

    p = sub.add_parser("superres", help="4x super-resolve a low-res image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--low", required=True)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_superres)

    p = sub.add_parser("inspect-mask", help="render one block's attention "
                                            "mask as a PGM (white=permitted)")
    p.add_argument("--config", required=True)
    p.add_argument("--block", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_inspect_mask)

    p = sub.add_parser("gradcheck", help="finite-difference check of the "
                                         "training loss gradients")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2
    try:
        return args.func(args)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except FileFormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except T.NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 5
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
