"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Results go to stdout as ``key=value`` lines; diagnostics go to stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import gradcheck
from .dataio import (
    MODALITIES,
    DatasetManifest,
    Sample,
    SynthSpec,
    clean_and_normalize,
    load_manifest,
    read_tensor_file,
    resize_bilinear,
    synth_generate,
)
from .errors import ConfigError, DataError, NonFiniteError
from .model import ModelConfig, build, read_checkpoint, save_checkpoint
from .train import (
    TrainConfig,
    evaluate,
    fit,
    init_head_bias,
    predict,
    saliency,
    write_pgm,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _emit(key: str, value) -> None:
    print(f"{key}={value}", flush=True)


def _echo_config(resolved: dict, seed) -> None:
    _emit("config", json.dumps(resolved, sort_keys=True, separators=(",", ":")))
    _emit("seed", seed)


def _channels(text: Optional[str]) -> Optional[list[str]]:
    if text is None:
        return None
    mods = [c.strip().upper() for c in text.split(",") if c.strip()]
    bad = [m for m in mods if m not in MODALITIES]
    if bad or not mods or len(set(mods)) != len(mods):
        raise UsageError(f"--channels must be a comma list drawn from {', '.join(MODALITIES)}")
    return mods


def _read_config_file(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}") from None
    unknown = set(doc) - {"model", "train"}
    if unknown:
        raise UsageError(f"config file has unknown sections {sorted(unknown)}")
    return doc


# ---------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    mods = _channels(args.channels) or ["IR"]
    spec = SynthSpec(count=args.n, seed=args.seed, modalities=tuple(mods),
                     frames_per_storm=args.frames_per_storm)
    _echo_config({"out": args.out, "n": args.n, "channels": mods,
                  "frames_per_storm": args.frames_per_storm}, args.seed)
    manifest = synth_generate(spec, args.out)
    for split in ("train", "val", "test"):
        _emit(f"{split}_size", len(manifest.split(split)))
    return EXIT_OK


def _resolve_train(args, manifest: DatasetManifest) -> tuple[ModelConfig, TrainConfig]:
    doc = _read_config_file(args.config)
    try:
        model_cfg = ModelConfig.from_dict(doc.get("model", {}))
        train_cfg = TrainConfig.from_dict(doc.get("train", {}))
    except TypeError as e:
        raise UsageError(f"bad config value: {e}") from None
    if args.epochs is not None:
        train_cfg.epochs = args.epochs
    if args.batch_size is not None:
        train_cfg.batch_size = args.batch_size
    if args.lr is not None:
        train_cfg.base_lr = args.lr
    if args.seed is not None:
        train_cfg.seed = args.seed
        model_cfg.seed = args.seed
    if args.max_steps is not None:
        train_cfg.max_steps = args.max_steps
    if args.no_augment:
        train_cfg.augment = False
    if args.decay_epochs is not None:
        try:
            train_cfg.decay_epochs = tuple(int(e) for e in args.decay_epochs.split(",") if e.strip())
        except ValueError:
            raise UsageError(f"--decay-epochs must be a comma list of integers, got {args.decay_epochs!r}") from None
    elif args.epochs is not None and "decay_epochs" not in doc.get("train", {}):
        # Shortened runs keep only the default decay points that still fall inside them.
        train_cfg.decay_epochs = tuple(e for e in train_cfg.decay_epochs if e < train_cfg.epochs)
    model_cfg.in_channels = manifest.channels
    model_cfg.validate()
    train_cfg.validate()
    return model_cfg, train_cfg


def cmd_train(args) -> int:
    manifest = load_manifest(args.data)
    mods = _channels(args.channels)
    if mods is not None:
        manifest = manifest.with_modalities(mods)
    model_cfg, train_cfg = _resolve_train(args, manifest)
    _echo_config({"data": args.data, "out": args.out, "channels": manifest.modalities,
                  "model": model_cfg.to_dict(), "train": train_cfg.to_dict()}, train_cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = build(model_cfg)
    if args.resume is None:
        init_head_bias(model, manifest)
        save_checkpoint(model, out / "init.ckpt",
                        {"data": {"modalities": manifest.modalities, "mean": manifest.mean, "std": manifest.std}})
    result = fit(model, manifest, train_cfg, out, resume=args.resume,
                 echo=lambda line: print(line, file=sys.stderr))
    if result.records:
        last = result.records[-1]
        _emit("epochs_run", len(result.records))
        _emit("final_train_loss", repr(last.train_loss))
        _emit("final_val_rmse", repr(last.val_rmse))
    _emit("best_checkpoint", result.best_path)
    _emit("last_checkpoint", result.last_path)
    return EXIT_OK


def cmd_eval(args) -> int:
    _echo_config({"data": args.data, "ckpt": args.ckpt, "split": args.split}, None)
    model, meta, _ = read_checkpoint(args.ckpt)
    manifest = load_manifest(args.data)
    mods = meta.get("data", {}).get("modalities")
    if mods and mods != manifest.modalities:
        manifest = manifest.with_modalities(mods)
    if manifest.channels != model.config.in_channels:
        raise DataError(f"checkpoint expects {model.config.in_channels} channels, dataset has {manifest.channels}")
    result = evaluate(model, manifest, args.split)
    if args.residuals:
        Path(args.residuals).write_text("\n".join(result.residual_rows()) + "\n", encoding="utf-8")
    _emit("n", len(result.targets))
    _emit("rmse_knots", repr(result.rmse))
    return EXIT_OK


def _prepare_frames(path: str, model_cfg: ModelConfig, meta: dict) -> np.ndarray:
    raw = read_tensor_file(path)
    if raw.ndim == 3:
        raw = raw[None]
    if raw.ndim != 4:
        raise DataError(f"{path}: expected (C, H, W) or (N, C, H, W), got {raw.shape}")
    if raw.shape[1] != model_cfg.in_channels:
        raise DataError(f"{path}: {raw.shape[1]} channels, checkpoint expects {model_cfg.in_channels}")
    stats = meta.get("data")
    frames = []
    for frame in raw:
        if stats:
            norm = DatasetManifest(stats["modalities"], stats["mean"], stats["std"], {})
            frame = clean_and_normalize(Sample(frame, 0.0), norm).channels
        frames.append(resize_bilinear(frame, model_cfg.input_size))
    return np.stack(frames)


def cmd_predict(args) -> int:
    _echo_config({"ckpt": args.ckpt, "input": args.input}, None)
    model, meta, _ = read_checkpoint(args.ckpt)
    images = _prepare_frames(args.input, model.config, meta)
    for value in predict(model, images):
        _emit("intensity_knots", repr(float(value)))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    doc = _read_config_file(args.config)
    try:
        cfg = ModelConfig.test(**doc["model"]) if "model" in doc else ModelConfig.test()
    except TypeError as e:
        raise UsageError(f"bad config value: {e}") from None
    cfg.validate()
    coords = None if args.coords <= 0 else args.coords
    _echo_config({"model": cfg.to_dict(), "threshold": args.threshold,
                  "model_threshold": args.model_threshold, "coords": coords}, args.seed)
    results = gradcheck.run(cfg, args.seed, args.threshold, args.model_threshold, coords)
    failed = False
    for r in results:
        _emit(f"max_rel_error.{r.name}", f"{r.error:.3e}")
        if not r.ok:
            failed = True
            print(f"gradcheck: {r.name} error {r.error:.3e} exceeds {r.threshold:.1e}", file=sys.stderr)
    _emit("status", "fail" if failed else "pass")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_saliency(args) -> int:
    _echo_config({"ckpt": args.ckpt, "input": args.input, "out": args.out, "frame": args.frame}, None)
    model, meta, _ = read_checkpoint(args.ckpt)
    images = _prepare_frames(args.input, model.config, meta)
    if not 0 <= args.frame < len(images):
        raise UsageError(f"--frame {args.frame} out of range for {len(images)} frame(s)")
    smap, info = saliency(model, images[args.frame])
    write_pgm(args.out, smap, info)
    if info["degenerate"]:
        print("saliency: gradient is constant over the image; map is all zeros (degenerate)", file=sys.stderr)
    _emit("method", info["method"])
    _emit("degenerate", int(info["degenerate"]))
    _emit("prediction_knots", repr(info["prediction"]))
    _emit("out", args.out)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tint", description="Typhoon intensity transformer: data, training, evaluation.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="write a synthetic vortex dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=100, help="number of frames (default 100)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    p.add_argument("--channels", default="ir", help="comma list of ir,wv,pmw (default ir)")
    p.add_argument("--frames-per-storm", type=int, default=1, help="consecutive frames sharing a storm id")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True, help="dataset directory containing manifest.json")
    p.add_argument("--config", help="JSON file with optional 'model' and 'train' sections")
    p.add_argument("--out", required=True, help="output directory for log and checkpoints")
    p.add_argument("--epochs", type=int, help="number of epochs (default 100)")
    p.add_argument("--batch-size", type=int, help="batch size (default 32)")
    p.add_argument("--lr", type=float, help="initial learning rate (default 1e-5)")
    p.add_argument("--seed", type=int, help="seed for initialization, shuffling and augmentation")
    p.add_argument("--channels", help="train on a subset of the dataset modalities, e.g. ir,pmw")
    p.add_argument("--decay-epochs", help="comma list of epochs where the lr drops 10x (default 50,75)")
    p.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")
    p.add_argument("--no-augment", action="store_true", help="disable rotation/flip augmentation")
    p.add_argument("--resume", help="continue from a last.ckpt written by an earlier run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="report RMSE (knots) of a checkpoint on a split")
    p.add_argument("--data", required=True, help="dataset directory containing manifest.json")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--split", default="test", choices=("train", "val", "test"), help="split (default test)")
    p.add_argument("--residuals", help="also write per-sample residuals as TSV to this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict intensity for the frames of a TNSR file")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--input", required=True, help="TNSR file holding (C, H, W) or (N, C, H, W)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of every block and the full model")
    p.add_argument("--config", help="JSON file with a 'model' section (default: the small test config)")
    p.add_argument("--seed", type=int, default=0, help="seed for random inputs and parameters")
    p.add_argument("--threshold", type=float, default=gradcheck.BLOCK_THRESHOLD,
                   help="max relative error allowed per block (default 1e-4)")
    p.add_argument("--model-threshold", type=float, default=gradcheck.MODEL_THRESHOLD,
                   help="max relative error allowed for the full model (default 1e-3)")
    p.add_argument("--coords", type=int, default=24,
                   help="coordinates probed per tensor; 0 probes all (default 24)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("saliency", help="export an input-gradient saliency map as binary PGM")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--input", required=True, help="TNSR file holding (C, H, W) or (N, C, H, W)")
    p.add_argument("--out", required=True, help="output .pgm path")
    p.add_argument("--frame", type=int, default=0, help="frame index within the input (default 0)")
    p.set_defaults(func=cmd_saliency)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"tint {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as e:
        print(f"tint {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, IsADirectoryError) as e:
        print(f"tint {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
