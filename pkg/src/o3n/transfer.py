"""Supervised fine-tuning from a pretrained trunk, video-level inference and evaluation."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Checkpoint, ParamSet
from .clipenc import ENCODERS, channel_input_count, encode_array
from .errors import ConfigError, ShapeMismatch, VideoTooShort
from .o3nmodel import TrunkConfig, conv_features, init_fc, init_trunk, lr_at, trunk_from_metadata
from .sampling import extract

log = logging.getLogger(__name__)

# conv learning-rate range for full-size networks; the desk trunk defaults to a 10x lower range
FULL_SCALE_LR_RANGE = (1e-2, 1e-4)
DESK_LR_RANGE = (1e-3, 1e-5)


@dataclass
class FinetuneConfig:
    head_widths: tuple = (256, 256)
    epochs: int = 40
    batch_samples: int = 128
    lr_start: float = DESK_LR_RANGE[0]
    lr_end: float = DESK_LR_RANGE[1]
    fc_lr_multiplier: float = 10.0
    dropout: float = 0.8
    W: int = 6
    encoder: str = "stack_of_diff"
    init: str = "random"
    checkpoint: str | None = None
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    clip_norm: float = 5.0
    samples_per_video: int = 1
    trunk: TrunkConfig = field(default_factory=TrunkConfig)

    def __post_init__(self):
        if self.encoder in ENCODERS:
            self.trunk.c_in = channel_input_count(self.encoder, self.W)

    def validate(self):
        if self.encoder not in ENCODERS:
            raise ConfigError(f"unknown encoder {self.encoder!r}")
        if self.fc_lr_multiplier <= 0:
            raise ConfigError("fc_lr_multiplier must be > 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.init not in ("random", "o3n"):
            raise ConfigError(f"init must be 'random' or 'o3n', got {self.init!r}")
        if self.W < 2:
            raise ConfigError("W must be >= 2")
        if self.epochs < 2:
            raise ConfigError("epochs must be >= 2")
        if self.batch_samples < 1 or self.samples_per_video < 1:
            raise ConfigError("batch_samples and samples_per_video must be >= 1")
        if any(w < 1 for w in self.head_widths):
            raise ConfigError("head widths must be >= 1")
        self.trunk.validate()

    def fc_lr(self, epoch: int) -> float:
        return self.fc_lr_multiplier * lr_at(epoch, self.epochs, self.lr_start, self.lr_end)


class Classifier:
    """Convolutional trunk followed by dropout-regularised fully connected layers."""

    def __init__(self, trunk: TrunkConfig, params: ParamSet, num_classes: int, head_widths, dropout: float,
                 encoder: str, W: int):
        self.trunk = trunk
        self.params = params
        self.num_classes = num_classes
        self.head_widths = tuple(head_widths)
        self.dropout = dropout
        self.encoder = encoder
        self.W = W

    @property
    def fc_names(self) -> list:
        return [k for k in self.params if k.startswith("cls.")]

    def logits(self, x, train: bool = False, rng=None):
        h = conv_features(x, self.params, self.trunk)
        n_fc = len(self.head_widths) + 1
        for i in range(1, n_fc + 1):
            h = ad.affine(h, self.params[f"cls.fc{i}.weight"], self.params[f"cls.fc{i}.bias"])
            if i < n_fc:
                h = ad.dropout(ad.relu(h), self.dropout, rng, train)
        return h

    def log_probs(self, x, chunk: int = 256) -> np.ndarray:
        out = [ad.log_softmax(self.logits(x[s:s + chunk]).data) for s in range(0, len(x), chunk)]
        return np.concatenate(out)


def init_head(trunk: TrunkConfig, num_classes: int, widths, rng: np.random.Generator) -> ParamSet:
    h, w, c = trunk.feature_shape()
    params = ParamSet()
    fan_in = h * w * c
    for i, width in enumerate(list(widths) + [num_classes], 1):
        params.update(init_fc(f"cls.fc{i}", fan_in, width, rng))
        fan_in = width
    return params


def conv_names(trunk: TrunkConfig, prefix="trunk") -> list:
    names = []
    for i in range(1, len(trunk.convs) + 1):
        names += [f"{prefix}.conv{i}.weight", f"{prefix}.conv{i}.bias"]
    return names


def init_from_checkpoint(ckpt: Checkpoint, cfg: FinetuneConfig, num_classes: int, rng=None) -> ParamSet:
    """Conv layers copied from ``ckpt``; fully connected layers drawn afresh from ``rng``."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    fresh = init_trunk(cfg.trunk, rng, with_fc=False)
    params = ParamSet()
    for name, t in fresh.items():
        if name not in ckpt.tensors:
            raise ShapeMismatch(f"checkpoint has no tensor {name!r}")
        src = np.asarray(ckpt.tensors[name], dtype=np.float32)
        if src.shape != t.shape:
            raise ShapeMismatch(f"{name}: checkpoint shape {src.shape} vs trunk {t.shape}")
        params[name] = ad.parameter(src.copy())
    params.update(init_head(cfg.trunk, num_classes, cfg.head_widths, rng))
    return params


def build_classifier(cfg: FinetuneConfig, num_classes: int, ckpt: Checkpoint | None = None, rng=None) -> Classifier:
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    if cfg.init == "o3n":
        if ckpt is None:
            raise ConfigError("init=o3n needs a checkpoint")
        meta = ckpt.metadata
        if "trunk_convs" in meta:
            trunk = trunk_from_metadata(meta)
            if trunk.c_in != cfg.trunk.c_in:
                raise ShapeMismatch(f"checkpoint trunk takes {trunk.c_in} channels, encoder {cfg.encoder} gives {cfg.trunk.c_in}")
            cfg.trunk = trunk
        params = init_from_checkpoint(ckpt, cfg, num_classes, rng)
    else:
        params = init_trunk(cfg.trunk, rng, with_fc=False)
        params.update(init_head(cfg.trunk, num_classes, cfg.head_widths, rng))
    return Classifier(cfg.trunk, params, num_classes, cfg.head_widths, cfg.dropout, cfg.encoder, cfg.W)


def make_optimizer(model: Classifier, cfg: FinetuneConfig) -> ad.SGD:
    """SGD where every fully connected tensor runs at ``fc_lr_multiplier`` times the conv rate."""
    mult = {name: cfg.fc_lr_multiplier for name in model.fc_names}
    return ad.SGD(model.params, cfg.momentum, cfg.weight_decay, lr_mult=mult, clip_norm=cfg.clip_norm)


def random_clip_batch(videos, labels, W: int, encoder: str, rng: np.random.Generator, per_video: int):
    frames, ys = [], []
    for v, y in zip(videos, labels):
        if v.n < W:
            raise VideoTooShort(f"video with {v.n} frames is shorter than W={W}")
        for _ in range(per_video):
            s = int(rng.integers(1, v.n - W + 2))
            frames.append(extract(v, range(s, s + W)))
            ys.append(y)
    return encode_array(np.stack(frames), encoder), np.asarray(ys, dtype=np.int64)


def finetune(corpus, cfg: FinetuneConfig, ckpt: Checkpoint | None = None, progress=None):
    """Train a classifier on the corpus ``train`` split; returns ``(classifier, metrics)``.

    Each epoch draws a fresh random W-frame window per video (temporal
    jittering). FC layers use ``fc_lr_multiplier`` times the conv learning rate.
    """
    cfg.validate()
    train = corpus.subset("train")
    if len(train) == 0:
        raise ConfigError("fine-tuning needs a non-empty train split")
    if (train.videos[0].h, train.videos[0].w) != tuple(cfg.trunk.input_hw):
        raise ConfigError(f"trunk expects {cfg.trunk.input_hw} frames, videos are {(train.videos[0].h, train.videos[0].w)}")
    rng = np.random.default_rng(cfg.seed)
    model = build_classifier(cfg, corpus.num_classes, ckpt, rng)
    opt = make_optimizer(model, cfg)
    val = corpus.subset("val")
    metrics = []
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg.epochs, cfg.lr_start, cfg.lr_end)
        x, y = random_clip_batch(train.videos, train.labels, cfg.W, cfg.encoder, rng, cfg.samples_per_video)
        order = rng.permutation(len(y))
        bs = min(cfg.batch_samples, len(y))
        seen = correct = 0
        loss_sum = 0.0
        for s in range(0, len(y) - bs + 1, bs):
            idx = order[s:s + bs]
            opt.zero_grad()
            loss, probs = ad.softmax_xent(model.logits(x[idx], train=True, rng=rng), y[idx])
            loss.backward()
            opt.step(lr)
            loss_sum += float(loss.data) * bs
            correct += int(np.sum(probs.argmax(axis=1) == y[idx]))
            seen += bs
        metrics.append((epoch, "train", loss_sum / seen, correct / seen, lr))
        if len(val):
            vx, vy = random_clip_batch(val.videos, val.labels, cfg.W, cfg.encoder,
                                       np.random.default_rng(np.random.SeedSequence([cfg.seed, 2])), 1)
            lp = model.log_probs(vx)
            vloss = float(-lp[np.arange(len(vy)), vy].mean())
            metrics.append((epoch, "val", vloss, float(np.mean(lp.argmax(axis=1) == vy)), lr))
        if progress is not None:
            progress(metrics[-1])
        log.info("finetune epoch %d lr %.6f %s", epoch, lr, metrics[-1])
    return model, metrics


def predict_video(model: Classifier, v, W: int | None = None) -> tuple:
    """Sum per-clip log-probabilities over all non-overlapping W-frame clips from frame 1."""
    W = model.W if W is None else W
    m = v.n // W
    if m < 1:
        raise VideoTooShort(f"video with {v.n} frames is shorter than W={W}")
    frames = np.stack([extract(v, range(i * W + 1, (i + 1) * W + 1)) for i in range(m)])
    scores = model.log_probs(encode_array(frames, model.encoder)).sum(axis=0)
    return aggregate_argmax(scores), scores


def aggregate_argmax(scores) -> int:
    """Argmax with ties going to the lowest class index."""
    return int(np.argmax(np.asarray(scores)))


def sum_log_probs(prob_rows) -> np.ndarray:
    return np.log(np.asarray(prob_rows, dtype=np.float64)).sum(axis=0)


@dataclass
class EvalReport:
    confusion: np.ndarray
    class_names: list
    metadata: dict = field(default_factory=dict)

    @property
    def per_class_accuracy(self) -> np.ndarray:
        rows = self.confusion.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, np.diag(self.confusion) / np.maximum(rows, 1), np.nan)

    @property
    def accuracy(self) -> float:
        total = self.confusion.sum()
        return float(np.trace(self.confusion) / total) if total else float("nan")

    def confusion_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred"] + list(self.class_names))
        for name, row in zip(self.class_names, self.confusion):
            w.writerow([name] + [int(c) for c in row])
        return buf.getvalue()

    def summary_text(self) -> str:
        lines = [f"accuracy={self.accuracy:.6f}", f"videos={int(self.confusion.sum())}"]
        for name, acc in zip(self.class_names, self.per_class_accuracy):
            lines.append(f"accuracy.{name}={acc:.6f}")
        lines += [f"{k}={v}" for k, v in self.metadata.items()]
        return "\n".join(lines) + "\n"


def report_from_predictions(y_true, y_pred, class_names, metadata=None) -> EvalReport:
    k = len(class_names)
    conf = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        conf[int(t), int(p)] += 1
    return EvalReport(conf, list(class_names), dict(metadata or {}))


def evaluate(model, corpus, split: str = "test", metadata=None) -> EvalReport:
    """Video-level evaluation on ``split``. ``model`` is a Classifier or any callable video -> class."""
    sub = corpus.subset(split)
    if len(sub) == 0:
        raise ConfigError(f"split {split!r} is empty")
    predict = model if callable(model) and not isinstance(model, Classifier) else (lambda v: predict_video(model, v)[0])
    preds = [predict(v) for v in sub.videos]
    return report_from_predictions(sub.labels, preds, sub.class_names, metadata)
