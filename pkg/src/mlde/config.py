"""Flat key=value run configuration with a printable schema.

Config files hold one ``key = value`` pair per line (``#`` starts a comment
line); CLI flags override file values. Validation collects every violation
before failing so a bad file is reported in one pass.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Callable, Optional

from . import imaging
from .errors import ConfigError
from .training import LOSS_NAME, TrainConfig


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class ConfigField:
    name: str
    kind: str
    parse: Callable[[str], Any]
    default: Any
    help: str
    choices: Optional[tuple] = None


SCHEMA: tuple[ConfigField, ...] = (
    ConfigField("out_dir", "path", str, "runs/out",
                "directory receiving checkpoints, predictions, reports, figures"),
    ConfigField("train_manifest", "path", str, "",
                "labeled training manifest CSV (image_id,path,label)"),
    ConfigField("val_manifest", "path", str, "",
                "optional labeled manifest for per-epoch validation AUC"),
    ConfigField("predict_manifest", "path", str, "",
                "manifest to score with `predict` (labels optional)"),
    ConfigField("eval_manifest", "path", str, "",
                "labeled manifest scored by `evaluate` and `report`"),
    ConfigField("backbone", "choice", str, "tiny_test",
                "branch network family", choices=("tiny_test", "resnet50_pretrained")),
    ConfigField("weights_path", "path", str, "",
                "local pretrained weight file (required for resnet50_pretrained)"),
    ConfigField("weights_sha256", "str", str, "",
                "expected sha256 of weights_path (checked when set)"),
    ConfigField("learning_rate", "float", float, 0.03, "SGD learning rate"),
    ConfigField("momentum", "float", float, 0.9, "SGD momentum"),
    ConfigField("grad_clip_norm", "float", float, 5.0,
                "gradient norm clip per step (0 disables)"),
    ConfigField("batch_size", "int", int, 16, "training batch size"),
    ConfigField("epochs_per_stage", "ints", _parse_ints, (1, 1, 2, 10),
                "epochs per fine-tuning stage; the count sets the stage count"),
    ConfigField("seed", "int", int, 0,
                "base seed; task seeds are seed + class index"),
    ConfigField("scales", "floats", _parse_floats, imaging.DEFAULT_SCALES,
                "four ROI scales, starting at 1.0, strictly decreasing"),
    ConfigField("norm_mean", "floats", _parse_floats, imaging.IMAGENET_MEAN,
                "per-channel normalization mean"),
    ConfigField("norm_std", "floats", _parse_floats, imaging.IMAGENET_STD,
                "per-channel normalization std (positive)"),
    ConfigField("deterministic", "bool", _parse_bool, True,
                "single-threaded bit-reproducible mode"),
    ConfigField("branch_pretrain_epochs", "int", int, 0,
                "ablation: epochs of per-branch pretraining before joint training"),
    ConfigField("xavier_distribution", "choice", str, "uniform",
                "head init distribution", choices=("uniform", "normal")),
    ConfigField("pyramid_cache_mb", "int", int, 1024,
                "in-memory budget for decoded ROI pyramids"),
    ConfigField("workers", "int", int, os.cpu_count() or 1,
                "parallel image-loading workers (forced to 1 when deterministic)"),
)

_BY_NAME = {f.name: f for f in SCHEMA}


@dataclass(frozen=True)
class RunConfig:
    out_dir: str
    train_manifest: str
    val_manifest: str
    predict_manifest: str
    eval_manifest: str
    backbone: str
    weights_path: str
    weights_sha256: str
    learning_rate: float
    momentum: float
    grad_clip_norm: float
    batch_size: int
    epochs_per_stage: tuple[int, ...]
    seed: int
    scales: tuple[float, ...]
    norm_mean: tuple[float, ...]
    norm_std: tuple[float, ...]
    deterministic: bool
    branch_pretrain_epochs: int
    xavier_distribution: str
    pyramid_cache_mb: int
    workers: int

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            grad_clip_norm=self.grad_clip_norm,
            batch_size=self.batch_size,
            epochs_per_stage=self.epochs_per_stage,
            seed=self.seed,
            backbone=self.backbone,
            scales=self.scales,
            norm_mean=tuple(self.norm_mean),
            norm_std=tuple(self.norm_std),
            deterministic=self.deterministic,
            branch_pretrain_epochs=self.branch_pretrain_epochs,
            xavier_distribution=self.xavier_distribution,
            weights_path=self.weights_path,
            weights_sha256=self.weights_sha256,
            pyramid_cache_mb=self.pyramid_cache_mb,
            workers=self.workers,
            loss=LOSS_NAME,
        )

    def hash(self) -> str:
        canonical = "\n".join(f"{f.name}={_fmt(getattr(self, f.name))}"
                              for f in SCHEMA)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Raw key -> value text from a flat config file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"config file not found: {path}"])
    values: dict[str, str] = {}
    problems: list[str] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            problems.append(f"{path}:{lineno}: expected `key = value`, got {line!r}")
            continue
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.strip()
    if problems:
        raise ConfigError(problems)
    return values


def load_run_config(config_path: Optional[str] = None,
                    overrides: Optional[dict[str, str]] = None) -> RunConfig:
    """Defaults, then file values, then override flags; validates everything.

    Raises ConfigError listing every violation found.
    """
    problems: list[str] = []
    resolved: dict[str, Any] = {f.name: f.default for f in SCHEMA}

    def apply(source: str, raw: dict[str, str]):
        for key, text in raw.items():
            field = _BY_NAME.get(key)
            if field is None:
                problems.append(f"{source}: unknown config key {key!r}")
                continue
            try:
                value = field.parse(text)
            except ValueError as exc:
                problems.append(f"{source}: bad value for {key}: {exc}")
                continue
            if field.choices and value not in field.choices:
                problems.append(f"{source}: {key} must be one of "
                                f"{field.choices}, got {value!r}")
                continue
            resolved[key] = value

    if config_path:
        apply(str(config_path), parse_config_file(config_path))
    if overrides:
        apply("flags", {k: v for k, v in overrides.items() if v is not None})

    config = RunConfig(**resolved)
    problems.extend(config.to_train_config().violations())
    if problems:
        raise ConfigError(problems)
    return config


def render_schema() -> str:
    lines = ["Configuration keys (flat `key = value` file; # for comments):", ""]
    name_w = max(len(f.name) for f in SCHEMA)
    kind_w = max(len(f.kind) for f in SCHEMA)
    for f in SCHEMA:
        default = _fmt(f.default) or "(empty)"
        extra = f" choices={','.join(map(str, f.choices))}" if f.choices else ""
        lines.append(f"  {f.name.ljust(name_w)}  {f.kind.ljust(kind_w)}  "
                     f"default={default}{extra}")
        lines.append(f"  {' ' * name_w}  {' ' * kind_w}  {f.help}")
    return "\n".join(lines)
