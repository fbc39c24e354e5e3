"""Command-line entry point.

Subcommands: gen-data, pretrain, finetune, eval, selfcheck. Every flag has
a config-file equivalent; flags override file values, and the fully
resolved configuration is written to ``manifest.cfg`` in the output
directory before any work starts, so re-running with ``--config
manifest.cfg`` reproduces the run.

Config files are flat ``key=value`` lines; ``#`` starts a comment. The
default output root can be set with the CMAEV_OUT environment variable.
Exit codes: 0 success, 2 usage/config error, 3 aborted run.
"""

from __future__ import annotations

import argparse
import datetime
import os
import sys
from pathlib import Path

from . import __version__
from . import data as vd
from . import selfcheck, trainer
from .model import ModelConfig
from .trainer import TrainConfig, TrainingDiverged

OUT_ROOT_ENV = "CMAEV_OUT"

_MODEL_KEYS = {
    "d_model": 96,
    "depth": 4,
    "num_heads": 4,
    "mlp_ratio": 4,
    "proj_dim": 64,
    "decoder_width": 64,
    "decoder_depth": 2,
    "decoder_heads": 4,
    "feature_decoder_depth": 1,
    "use_feature_decoder": False,
    "tube_size": 2,
    "patch_size": 8,
}

_CLIP_KEYS = {
    "frames": 8,
    "rate": 2,
    "max_disturbance": 3,
}

_TRAIN_COMMON = {
    "seed": 0,
    "batch_size": 32,
    "beta1": 0.9,
    "weight_decay": 0.05,
    "mask_ratio": 0.9,
    "contrastive_weight": 1.0,
    "recon_weight": 1.0,
    "tau": 0.1,
    "ema_momentum": 0.98,
    "color_strength": 0.05,
    "repeated_samples": 2,
    "checkpoint_interval": 0,
}

DEFAULTS: dict[str, dict] = {
    "gen-data": {
        "out": "",
        "num_videos": 128,
        "num_classes": 4,
        "total_frames": 64,
        "height": 32,
        "width": 32,
        "channels": 1,
        "noise_level": 0.02,
        "seed": 0,
    },
    "pretrain": {
        "data": "",
        "out": "",
        "resume": "",
        "base_lr": 2.4e-2,
        "beta2": 0.95,
        "warmup_epochs": 10,
        "total_epochs": 100,
        **_TRAIN_COMMON,
        **_CLIP_KEYS,
        **_MODEL_KEYS,
    },
    "finetune": {
        "data": "",
        "out": "",
        "checkpoint": "",
        "freeze_encoder": False,
        "base_lr": 8e-3,
        "beta2": 0.999,
        "warmup_epochs": 5,
        "total_epochs": 30,
        **_TRAIN_COMMON,
        **_CLIP_KEYS,
        **_MODEL_KEYS,
    },
    "eval": {
        "data": "",
        "out": "",
        "checkpoint": "",
        "views": "2x1",
        **_CLIP_KEYS,
        **_MODEL_KEYS,
    },
}


class ConfigError(ValueError):
    pass


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Flat key=value lines with # comments; later keys win."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _coerce(key: str, raw: str, template) -> object:
    if isinstance(template, bool):
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc
    return raw


def resolve_options(command: str, config_path: str | None, overrides: dict) -> dict:
    """defaults <- config file <- command-line flags."""
    options = dict(DEFAULTS[command])
    if config_path:
        for key, raw in parse_config_file(config_path).items():
            if key not in options:
                raise ConfigError(f"unknown config key {key!r} for {command}")
            options[key] = _coerce(key, raw, options[key])
    for key, value in overrides.items():
        if value is not None:
            options[key] = value
    return options


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def write_manifest(out_dir: Path, command: str, options: dict) -> Path:
    """Record the fully resolved run configuration before the first step."""
    lines = [
        f"# run manifest: {command}",
        f"# tool: cmv {__version__}",
        f"# started: {datetime.datetime.now(datetime.timezone.utc).isoformat()}",
    ]
    lines += [f"{key}={_format_value(value)}" for key, value in options.items()]
    path = out_dir / "manifest.cfg"
    path.write_text("\n".join(lines) + "\n")
    return path


def _model_config(options: dict) -> ModelConfig:
    return ModelConfig(**{key: options[key] for key in _MODEL_KEYS})


def _shift_config(options: dict) -> vd.ShiftConfig:
    return vd.ShiftConfig(
        frames=options["frames"],
        rate=options["rate"],
        max_disturbance=options["max_disturbance"],
    )


def _train_config(options: dict, mode: str) -> TrainConfig:
    return TrainConfig(
        batch_size=options["batch_size"],
        base_lr=options["base_lr"],
        beta1=options["beta1"],
        beta2=options["beta2"],
        weight_decay=options["weight_decay"],
        warmup_epochs=options["warmup_epochs"],
        total_epochs=options["total_epochs"],
        mask_ratio=options["mask_ratio"],
        contrastive_weight=options["contrastive_weight"],
        recon_weight=options["recon_weight"],
        tau=options["tau"],
        ema_momentum=options["ema_momentum"],
        shift=_shift_config(options),
        color_strength=options["color_strength"],
        repeated_samples=options["repeated_samples"],
        seed=options["seed"],
        mode=mode,
        checkpoint_interval=options["checkpoint_interval"],
    )


def _resolve_out(options: dict, command: str) -> Path:
    if options["out"]:
        return Path(options["out"])
    root = os.environ.get(OUT_ROOT_ENV)
    if root:
        return Path(root) / command.replace("-", "_")
    raise ConfigError(f"--out is required (or set {OUT_ROOT_ENV})")


def _require(options: dict, key: str, flag: str) -> str:
    if not options[key]:
        raise ConfigError(f"{flag} is required")
    return options[key]


def _add_option_flags(parser: argparse.ArgumentParser, command: str) -> None:
    for key, template in DEFAULTS[command].items():
        flag = "--" + key.replace("_", "-")
        if isinstance(template, bool):
            parser.add_argument(flag, dest=key, action="store_true", default=None)
        else:
            kind = type(template) if not isinstance(template, str) else str
            parser.add_argument(flag, dest=key, type=kind, default=None, metavar=key.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmv",
        description="Self-supervised video pretraining on synthetic motion data.",
    )
    parser.add_argument("--version", action="version", version=f"cmv {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    descriptions = {
        "gen-data": "Generate a synthetic labeled video dataset file.",
        "pretrain": "Run self-supervised pretraining on a dataset file.",
        "finetune": "Train the classifier (optionally from a pretrained checkpoint).",
        "eval": "Multi-view evaluation of a finetuned checkpoint.",
    }
    for command, helptext in descriptions.items():
        p = sub.add_parser(command, help=helptext)
        p.add_argument("--config", type=str, default=None, help="key=value config file")
        _add_option_flags(p, command)

    sub.add_parser("selfcheck", help="Run gradient and invariant suites; exit 0 if all pass.")
    return parser


def _run_gen_data(options: dict) -> int:
    out_dir = _resolve_out(options, "gen-data")
    out_dir.mkdir(parents=True, exist_ok=True)
    marker = out_dir / ".incomplete"
    marker.touch()
    write_manifest(out_dir, "gen-data", options)
    path = vd.generate_dataset(
        out_dir / "dataset.cmvd",
        num_videos=options["num_videos"],
        num_classes=options["num_classes"],
        total_frames=options["total_frames"],
        height=options["height"],
        width=options["width"],
        channels=options["channels"],
        noise_level=options["noise_level"],
        seed=options["seed"],
    )
    marker.unlink()
    print(f"wrote {path}")
    return 0


def _run_pretrain(options: dict) -> int:
    dataset = vd.read_dataset(_require(options, "data", "--data"))
    out_dir = _resolve_out(options, "pretrain")
    out_dir.mkdir(parents=True, exist_ok=True)
    marker = out_dir / ".incomplete"
    marker.touch()
    write_manifest(out_dir, "pretrain", options)
    checkpoint = trainer.pretrain(
        dataset,
        _model_config(options),
        _train_config(options, "pretrain"),
        out_dir,
        resume_from=options["resume"] or None,
    )
    marker.unlink()
    print(f"wrote {checkpoint}")
    return 0


def _run_finetune(options: dict) -> int:
    dataset = vd.read_dataset(_require(options, "data", "--data"))
    out_dir = _resolve_out(options, "finetune")
    out_dir.mkdir(parents=True, exist_ok=True)
    marker = out_dir / ".incomplete"
    marker.touch()
    write_manifest(out_dir, "finetune", options)
    checkpoint = trainer.finetune(
        dataset,
        _model_config(options),
        _train_config(options, "finetune"),
        out_dir,
        init_from=options["checkpoint"] or None,
        freeze_encoder=options["freeze_encoder"],
    )
    marker.unlink()
    print(f"wrote {checkpoint}")
    return 0


def _run_eval(options: dict) -> int:
    import json

    dataset = vd.read_dataset(_require(options, "data", "--data"))
    checkpoint = _require(options, "checkpoint", "--checkpoint")
    out_dir = _resolve_out(options, "eval")
    out_dir.mkdir(parents=True, exist_ok=True)
    marker = out_dir / ".incomplete"
    marker.touch()
    write_manifest(out_dir, "eval", options)
    temporal, spatial = trainer.parse_views(options["views"])
    accuracy = trainer.evaluate_checkpoint(
        checkpoint,
        dataset,
        _model_config(options),
        _shift_config(options),
        temporal,
        spatial,
    )
    with open(out_dir / "eval.json", "w") as fh:
        json.dump({"views": options["views"], "top1": accuracy}, fh, indent=2)
    marker.unlink()
    print(f"top-1 accuracy {accuracy:.4f} over {temporal}x{spatial} views")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.command == "selfcheck":
        return 0 if selfcheck.run_all() else 1

    overrides = {
        key: getattr(args, key) for key in DEFAULTS[args.command] if hasattr(args, key)
    }
    try:
        options = resolve_options(args.command, args.config, overrides)
        handler = {
            "gen-data": _run_gen_data,
            "pretrain": _run_pretrain,
            "finetune": _run_finetune,
            "eval": _run_eval,
        }[args.command]
        return handler(options)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        print(f"run 'cmv {args.command} --help' for usage", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except TrainingDiverged as err:
        print(f"aborted: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
