"""Flat experiment configuration with eager validation and a stable hash."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from .data import DatasetSpec
from .errors import ConfigError
from .recognizer import RecognizerConfig

ARMS = ("none", "mixup", "cutmix", "svmix-spatial", "svmix-temporal", "svmix-full")
TRAIN_MODES = ("disentangled", "entangled")

# fields that only steer output and never change the numbers
_OUTPUT_ONLY = ("dump_masks_every",)


@dataclass
class ExperimentConfig:
    # data
    num_classes: int = 4
    samples_per_class: int = 8
    val_per_class: int = 32
    frames: int = 8
    height: int = 32
    width: int = 32
    channels: int = 1
    lead_background: int = 1
    trail_background: int = 1
    noise_std: float = 0.15
    clutter: int = 3
    data_seed: Optional[int] = None      # None: follow `seed`
    # recognizer
    widths: Tuple[int, ...] = (16, 32)
    strides: Tuple[int, ...] = (2, 2)
    dropout: float = 0.0
    head_init: str = "he"
    norm: bool = True
    # selector
    d_k: int = 32
    upsample: str = "nearest"
    embed_lambda: bool = True
    share_params: bool = True
    # augmentation
    arm: str = "svmix-full"
    ensemble_mode: str = "probabilistic"
    switch_prob: float = 0.5
    alpha_spatial: float = 1.0
    alpha_temporal: float = 0.8
    alpha_baseline: float = 1.0
    omega: float = 1.0
    use_lm: bool = True
    momentum: float = 0.999
    train_mode: str = "disentangled"
    # optimisation
    epochs: int = 120
    eval_every: int = 1
    batch_size: int = 4
    lr_student: float = 0.05
    lr_selector: float = 0.05
    sgd_momentum: float = 0.9
    weight_decay: float = 0.0
    lr_decay_epoch: Optional[int] = None
    lr_decay_factor: float = 0.1
    seed: int = 0
    # output
    dump_masks_every: int = 0

    # -- construction ---------------------------------------------------
    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "ExperimentConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        for key in values:
            if key not in names:
                raise ConfigError("unknown configuration key", key)
        kwargs = {}
        for key, value in values.items():
            if key in ("widths", "strides") and value is not None:
                value = tuple(value)
            kwargs[key] = value
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        text = Path(path).read_text()
        try:
            values = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"not valid JSON: {exc}", str(path)) from None
        if not isinstance(values, dict):
            raise ConfigError("config file must hold a flat JSON object", str(path))
        return cls.from_dict(values)

    def replace(self, **changes) -> "ExperimentConfig":
        return ExperimentConfig.from_dict({**self.to_dict(), **changes})

    def to_dict(self) -> Dict[str, Any]:
        out = dataclasses.asdict(self)
        out["widths"] = list(self.widths)
        out["strides"] = list(self.strides)
        return out

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def config_hash(self) -> str:
        values = {k: v for k, v in self.to_dict().items() if k not in _OUTPUT_ONLY}
        return hashlib.sha256(json.dumps(values, sort_keys=True).encode()).hexdigest()[:16]

    # -- derived views --------------------------------------------------
    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(
            num_classes=self.num_classes, samples_per_class=self.samples_per_class,
            val_per_class=self.val_per_class, frames=self.frames, height=self.height,
            width=self.width, channels=self.channels, lead_background=self.lead_background,
            trail_background=self.trail_background, noise_std=self.noise_std, clutter=self.clutter,
            split_seed=self.seed if self.data_seed is None else self.data_seed,
        )

    def recognizer_config(self) -> RecognizerConfig:
        return RecognizerConfig(frames=self.frames, height=self.height, width=self.width,
                                channels=self.channels, num_classes=self.num_classes,
                                widths=tuple(self.widths), strides=tuple(self.strides),
                                dropout=self.dropout, head_init=self.head_init, norm=self.norm)

    @property
    def uses_selector(self) -> bool:
        return self.arm.startswith("svmix")

    # -- validation -----------------------------------------------------
    def validate(self):
        def need(cond, key, msg):
            if not cond:
                raise ConfigError(msg, key)

        def is_int(v):
            return isinstance(v, int) and not isinstance(v, bool)

        def is_num(v):
            return isinstance(v, (int, float)) and not isinstance(v, bool)

        for key in ("num_classes", "samples_per_class", "val_per_class", "frames", "height", "width",
                    "channels", "lead_background", "trail_background", "clutter", "d_k", "epochs", "batch_size",
                    "seed", "dump_masks_every", "eval_every"):
            need(is_int(getattr(self, key)), key, "must be an integer")
        for key in ("noise_std", "dropout", "switch_prob", "alpha_spatial", "alpha_temporal",
                    "alpha_baseline", "omega", "momentum", "lr_student", "lr_selector", "sgd_momentum",
                    "weight_decay", "lr_decay_factor"):
            need(is_num(getattr(self, key)), key, "must be a number")
        for key in ("embed_lambda", "share_params", "use_lm", "norm"):
            need(isinstance(getattr(self, key), bool), key, "must be true or false")
        need(self.data_seed is None or is_int(self.data_seed), "data_seed", "must be an integer or null")
        need(self.lr_decay_epoch is None or is_int(self.lr_decay_epoch), "lr_decay_epoch",
             "must be an integer or null")
        need(isinstance(self.widths, tuple) and all(is_int(w) and w > 0 for w in self.widths), "widths",
             "must be a list of positive integers")
        need(isinstance(self.strides, tuple) and all(is_int(s) and s > 0 for s in self.strides), "strides",
             "must be a list of positive integers")

        need(self.arm in ARMS, "arm", f"must be one of {', '.join(ARMS)}")
        need(self.train_mode in TRAIN_MODES, "train_mode", f"must be one of {', '.join(TRAIN_MODES)}")
        need(self.ensemble_mode in ("probabilistic", "average"), "ensemble_mode",
             "must be 'probabilistic' or 'average'")
        need(self.upsample in ("nearest", "trilinear"), "upsample", "must be 'nearest' or 'trilinear'")
        need(0.0 <= self.switch_prob <= 1.0, "switch_prob", "must be in [0, 1]")
        for key in ("alpha_spatial", "alpha_temporal", "alpha_baseline"):
            need(getattr(self, key) > 0, key, "must be positive")
        need(self.omega >= 0, "omega", "must be >= 0")
        need(0.0 <= self.momentum < 1.0, "momentum", "must be in [0, 1)")
        need(self.d_k >= 1, "d_k", "must be >= 1")
        need(self.epochs >= 0, "epochs", "must be >= 0")
        need(self.eval_every >= 1, "eval_every", "must be >= 1")
        need(self.batch_size >= 2, "batch_size", "must be >= 2 (pairs are drawn within a batch)")
        need(self.lr_student >= 0 and self.lr_selector >= 0, "lr_student", "learning rates must be >= 0")
        need(0.0 <= self.sgd_momentum < 1.0, "sgd_momentum", "must be in [0, 1)")
        need(self.weight_decay >= 0, "weight_decay", "must be >= 0")
        need(self.dump_masks_every >= 0, "dump_masks_every", "must be >= 0")
        self.dataset_spec().validate()
        self.recognizer_config().validate()
        need(self.batch_size <= self.num_classes * self.samples_per_class, "batch_size",
             "larger than the training set")
