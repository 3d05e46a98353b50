"""Experiment configuration: a flat ``key = value`` file with typed fields.

The file has no section header; ``#`` starts a comment. List values (only
``seeds``) are comma separated. Unknown keys are rejected.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

from .dataset import SyntheticSpec
from .errors import ValidationError
from .losses import LossWeights

ABLATION_SWITCHES = (
    "no_anchor_s1", "no_anchor_s2", "no_center_loss",
    "no_rot_score", "no_ent_score", "no_entropy_s2",
)
# fields that never change results and are therefore left out of the hash
_UNHASHED = ("seeds", "output_dir")


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    dataset: str = "synthetic"
    data_root: str = ""
    source_domain: str = ""
    target_domain: str = ""
    class_list_file: str = ""
    image_size: int = 32
    n_known: int = 6
    known_start: int = 0
    synth_n_classes: int = 12
    synth_samples_per_class: int = 200
    synth_color_shift: float = 0.35
    synth_noise: float = 0.05
    synth_seed: int = 0
    # network
    backbone: str = "small"
    backbone_weights: str = ""
    # losses
    lambda_1_1: float = 3.0
    lambda_1_2: float = 0.1
    lambda_2_1: float = 0.1
    lambda_2_2: float = 3.0
    center_alpha: float = 0.5
    reduction: str = "mean"
    # optimization
    epochs_stage1: int = 80
    epochs_stage2: int = 80
    batch_size: int = 32
    lr: float = 0.0003
    head_lr_mult: float = 10.0
    unknown_lr_mult: float = 2.0
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_gamma: float = 10.0
    lr_power: float = 0.75
    # ablations
    no_anchor_s1: bool = False
    no_anchor_s2: bool = False
    no_center_loss: bool = False
    no_rot_score: bool = False
    no_ent_score: bool = False
    no_entropy_s2: bool = False
    stage2_transfer: bool = True
    source_only: bool = False
    # bookkeeping
    seeds: tuple = (0, 1, 2)
    output_dir: str = "runs"

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        self.validate()

    def validate(self):
        if self.dataset not in ("synthetic", "folder"):
            raise ValidationError(f"dataset must be 'synthetic' or 'folder', got {self.dataset!r}")
        if self.dataset == "folder" and not (self.data_root and self.source_domain and self.target_domain):
            raise ValidationError("folder datasets need data_root, source_domain and target_domain")
        positive = ("image_size", "n_known", "synth_n_classes", "synth_samples_per_class",
                    "epochs_stage1", "epochs_stage2", "batch_size", "lr", "head_lr_mult",
                    "unknown_lr_mult", "center_alpha")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        nonneg = ("known_start", "synth_color_shift", "synth_noise", "lambda_1_1", "lambda_1_2",
                  "lambda_2_1", "lambda_2_2", "momentum", "weight_decay", "lr_gamma", "lr_power")
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be nonnegative")
        if self.center_alpha > 1:
            raise ValidationError("center_alpha must be in (0, 1]")
        if self.reduction not in ("mean", "sum"):
            raise ValidationError("reduction must be 'mean' or 'sum'")
        if self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2 (batch normalization)")
        if self.no_rot_score and self.no_ent_score:
            raise ValidationError("no_rot_score and no_ent_score together leave no normality score")
        if self.dataset == "synthetic":
            if self.known_start + self.n_known > self.synth_n_classes:
                raise ValidationError("known-class window exceeds synth_n_classes")
            if self.n_known < 2:
                raise ValidationError("synthetic datasets need n_known >= 2")
        if not self.seeds:
            raise ValidationError("at least one seed is required")

    # -- derived views -----------------------------------------------------

    @property
    def weights(self) -> LossWeights:
        """Loss weights after ablation switches are applied."""
        l12 = 0.0 if self.no_center_loss else self.lambda_1_2
        l21 = 0.0 if (self.no_entropy_s2 or self.source_only) else self.lambda_2_1
        l22 = 0.0 if self.source_only else self.lambda_2_2
        return LossWeights(self.lambda_1_1, l12, l21, l22)

    @property
    def score_mode(self) -> str:
        if self.no_rot_score:
            return "entropy"
        if self.no_ent_score:
            return "rotation"
        return "max"

    @property
    def ablation_label(self) -> str:
        active = [s for s in ABLATION_SWITCHES if getattr(self, s)]
        if self.source_only:
            active.append("source_only")
        if not self.stage2_transfer:
            active.append("no_stage2_transfer")
        return "+".join(active) if active else "full"

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            n_known=max(self.n_known, 2),
            n_unknown=self.synth_n_classes - max(self.n_known, 2),
            image_size=self.image_size,
            samples_per_class=self.synth_samples_per_class,
            color_shift=self.synth_color_shift,
            noise_level=self.synth_noise,
            seed=self.synth_seed,
        )

    # -- identity ----------------------------------------------------------

    def hashed_items(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name not in _UNHASHED}

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.hashed_items(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def stage1_hash(self) -> str:
        """Hash of the fields that influence Stage I training only."""
        skip = {"lambda_2_1", "lambda_2_2", "epochs_stage2", "unknown_lr_mult", "no_anchor_s2",
                "no_entropy_s2", "stage2_transfer", "source_only", "no_rot_score", "no_ent_score"}
        items = {k: v for k, v in self.hashed_items().items() if k not in skip}
        blob = json.dumps(items, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    # -- text format -------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def from_mapping(cls, values: dict, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        base = base or cls()
        types = {f.name: f for f in fields(cls)}
        parsed = {}
        for key, raw in values.items():
            if key not in types:
                raise ValidationError(f"unknown config key {key!r}")
            parsed[key] = _coerce(key, raw, type(getattr(base, key)))
        return dataclasses.replace(base, **parsed)

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "ExperimentConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
        parser.optionxform = str
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config {path}: {exc}") from exc
        try:
            parser.read_string("[config]\n" + text, source=str(path))
        except configparser.Error as exc:
            raise ValidationError(f"malformed config {path}: {exc}") from exc
        values = dict(parser["config"])
        values.update(overrides or {})
        return cls.from_mapping(values)


def _coerce(key, raw, kind):
    if not isinstance(raw, str):
        return tuple(raw) if kind is tuple else raw
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(int(s) for s in raw.split(",") if s.strip())
    except ValueError:
        raise ValidationError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_overrides(items) -> dict:
    """``["key=value", ...]`` from the command line into a dict."""
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ValidationError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out
