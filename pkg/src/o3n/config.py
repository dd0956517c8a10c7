"""Flat ``key = value`` run configuration shared by every CLI command."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .o3nmodel import O3NConfig, TrunkConfig
from .transfer import DESK_LR_RANGE, FinetuneConfig
from .videodata import SynthConfig

# keys that locate artifacts or control execution; excluded from every hash
_NON_HASHED = {"seed", "deterministic", "out_dir", "corpus_dir", "checkpoint", "model"}
# fine-tuning keys only name the finetune sub-directory, so random and o3n init share one pretrained trunk
_FINETUNE_KEYS = {"init", "head_widths", "finetune_epochs", "batch_samples", "finetune_lr_start", "finetune_lr_end",
                  "fc_lr_multiplier", "dropout", "samples_per_video"}
_SHARED_OPT_KEYS = {"momentum", "weight_decay", "clip_norm"}


@dataclass
class RunConfig:
    seed: int = 0
    deterministic: bool = False
    out_dir: str = "runs"
    corpus_dir: str = ""
    checkpoint: str = ""
    model: str = ""

    # synthetic corpus
    num_videos_per_class: int = 40
    num_classes: int = 6
    h: int = 32
    w: int = 32
    frames_per_video: int = 24
    sprite_size: int = 6
    noise_std: float = 8.0
    val_fraction: float = 0.1
    test_fraction: float = 0.3

    # shared by pretraining and fine-tuning
    W: int = 6
    encoder: str = "stack_of_diff"
    trunk_convs: str = TrunkConfig().describe()
    fc_dim: int = 128

    # odd-one-out pretraining
    N: int = 5
    strategy: str = "random"
    fusion: str = "sum_of_diff"
    head_dim: int = 128
    pretrain_epochs: int = 200
    batch_questions: int = 64
    pretrain_lr_start: float = 0.01
    pretrain_lr_end: float = 0.0001
    questions_per_video: int = 1
    holdout_fraction: float = 0.1
    val_questions_per_video: int = 4
    spatial_augment: bool = True

    # fine-tuning
    init: str = "random"
    head_widths: str = "256,256"
    finetune_epochs: int = 40
    batch_samples: int = 128
    finetune_lr_start: float = DESK_LR_RANGE[0]
    finetune_lr_end: float = DESK_LR_RANGE[1]
    fc_lr_multiplier: float = 10.0
    dropout: float = 0.8
    samples_per_video: int = 1

    # optimiser
    momentum: float = 0.9
    weight_decay: float = 5e-4
    clip_norm: float = 5.0

    def _hash(self, keep) -> str:
        items = sorted((f.name, repr(getattr(self, f.name))) for f in fields(self) if keep(f.name))
        return hashlib.sha256(repr(items).encode()).hexdigest()[:10]

    def config_hash(self) -> str:
        return self._hash(lambda k: k not in _NON_HASHED)

    def pretrain_hash(self) -> str:
        return self._hash(lambda k: k not in _NON_HASHED and k not in _FINETUNE_KEYS)

    def finetune_hash(self) -> str:
        return self._hash(lambda k: k in _FINETUNE_KEYS or k in _SHARED_OPT_KEYS)

    def run_dir(self) -> Path:
        return Path(self.out_dir) / f"run-{self.pretrain_hash()}-seed{self.seed}"

    def finetune_dir(self) -> Path:
        return self.run_dir() / f"finetune-{self.finetune_hash()}"

    def corpus_path(self) -> Path:
        return Path(self.corpus_dir) if self.corpus_dir else self.run_dir() / "corpus"

    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else self.run_dir() / "pretrain" / "o3n.ckpt"

    def model_path(self) -> Path:
        return Path(self.model) if self.model else self.finetune_dir() / "model.ckpt"

    def trunk(self) -> TrunkConfig:
        return TrunkConfig(TrunkConfig.parse_convs(self.trunk_convs), self.fc_dim, input_hw=(self.h, self.w))

    def synth(self) -> SynthConfig:
        return SynthConfig(self.num_videos_per_class, self.num_classes, self.h, self.w, self.frames_per_video,
                           self.sprite_size, self.noise_std, self.seed, self.val_fraction, self.test_fraction)

    def o3n(self) -> O3NConfig:
        return O3NConfig(
            N=self.N, W=self.W, strategy=self.strategy, encoder=self.encoder, fusion=self.fusion,
            trunk=self.trunk(), head_dim=self.head_dim, epochs=self.pretrain_epochs,
            batch_questions=self.batch_questions, lr_start=self.pretrain_lr_start, lr_end=self.pretrain_lr_end,
            momentum=self.momentum, weight_decay=self.weight_decay, clip_norm=self.clip_norm, seed=self.seed,
            questions_per_video=self.questions_per_video, val_fraction=self.holdout_fraction,
            val_questions_per_video=self.val_questions_per_video, spatial_augment=self.spatial_augment,
        )

    def finetune(self) -> FinetuneConfig:
        try:
            widths = tuple(int(x) for x in self.head_widths.split(",") if x.strip())
        except ValueError:
            raise ConfigError(f"head_widths must be comma-separated integers, got {self.head_widths!r}") from None
        return FinetuneConfig(
            head_widths=widths, epochs=self.finetune_epochs, batch_samples=self.batch_samples,
            lr_start=self.finetune_lr_start, lr_end=self.finetune_lr_end, fc_lr_multiplier=self.fc_lr_multiplier,
            dropout=self.dropout, W=self.W, encoder=self.encoder, init=self.init,
            checkpoint=str(self.checkpoint_path()), seed=self.seed, momentum=self.momentum,
            weight_decay=self.weight_decay, clip_norm=self.clip_norm, samples_per_video=self.samples_per_video,
            trunk=self.trunk(),
        )

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(name: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool or kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"invalid value for {name}: {raw!r}") from None
    return raw


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if key not in _TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, raw, _TYPES[key])
    return values


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the config file, then explicit overrides."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_config_text(p.read_text(), str(p)))
    for key, value in (overrides or {}).items():
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, value, _TYPES[key]) if isinstance(value, str) else value
    return dataclasses.replace(RunConfig(), **values)
