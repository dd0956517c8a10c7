"""Multi-branch odd-one-out network and its self-supervised training loop."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Checkpoint, ParamSet, Tensor
from .clipenc import ENCODERS, channel_input_count, encode_array, sumdiff_weights
from .errors import ConfigError, ShapeError, VideoTooShort
from .sampling import SamplerConfig, build_question, min_video_length

log = logging.getLogger(__name__)

FUSIONS = ("concat", "sum_of_diff")
METRICS_HEADER = ("epoch", "phase", "loss", "accuracy", "lr")


@dataclass(frozen=True)
class ConvSpec:
    out: int
    kernel: int
    stride: int = 1
    pool: int = 2
    pad: int | None = None

    @property
    def padding(self) -> int:
        return self.kernel // 2 if self.pad is None else self.pad


DESK_CONVS = (ConvSpec(16, 5, 2), ConvSpec(32, 3, 1), ConvSpec(64, 3, 1))


@dataclass
class TrunkConfig:
    convs: tuple = DESK_CONVS
    fc_dim: int = 128
    c_in: int = 15
    input_hw: tuple = (32, 32)

    def validate(self):
        if self.fc_dim < 1:
            raise ConfigError("fc_dim must be >= 1")
        if not self.convs:
            raise ConfigError("trunk needs at least one convolution")
        self.feature_shape()

    def feature_shape(self) -> tuple:
        """(h, w, c) of the last convolutional block's output."""
        h, w = self.input_hw
        c = self.c_in
        for spec in self.convs:
            h = ad.functional.conv_output_size(h, spec.kernel, spec.stride, spec.padding)
            w = ad.functional.conv_output_size(w, spec.kernel, spec.stride, spec.padding)
            if spec.pool > 1:
                h, w = (h - spec.pool) // spec.pool + 1, (w - spec.pool) // spec.pool + 1
            c = spec.out
            if h < 1 or w < 1:
                raise ConfigError(f"trunk collapses the {self.input_hw} input to nothing")
        return h, w, c

    def describe(self) -> str:
        return ",".join(f"{s.out}:{s.kernel}:{s.stride}:{s.pool}:{s.padding}" for s in self.convs)

    @staticmethod
    def parse_convs(text: str) -> tuple:
        specs = []
        for item in text.split(","):
            parts = [int(p) for p in item.strip().split(":")]
            if len(parts) not in (4, 5):
                raise ConfigError(f"conv spec {item!r} must be out:kernel:stride:pool[:pad]")
            specs.append(ConvSpec(*parts))
        return tuple(specs)


@dataclass
class O3NConfig:
    N: int = 5
    W: int = 6
    strategy: str = "random"
    encoder: str = "dynamic_image"
    fusion: str = "sum_of_diff"
    trunk: TrunkConfig = field(default_factory=TrunkConfig)
    head_dim: int = 128
    epochs: int = 200
    batch_questions: int = 64
    lr_start: float = 0.01
    lr_end: float = 0.0001
    momentum: float = 0.9
    weight_decay: float = 5e-4
    clip_norm: float = 5.0
    seed: int = 0
    questions_per_video: int = 1
    val_fraction: float = 0.1
    val_questions_per_video: int = 4
    spatial_augment: bool = True

    def __post_init__(self):
        self.trunk.c_in = channel_input_count(self.encoder, self.W) if self.encoder in ENCODERS else self.trunk.c_in

    def validate(self):
        self.sampler().validate()
        if self.encoder not in ENCODERS:
            raise ConfigError(f"unknown encoder {self.encoder!r}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        if self.trunk.c_in != channel_input_count(self.encoder, self.W):
            raise ConfigError("trunk input channels do not match the encoder")
        if self.epochs < 2:
            raise ConfigError("epochs must be >= 2 for the logarithmic schedule")
        if self.batch_questions < 1 or self.questions_per_video < 1 or self.head_dim < 1:
            raise ConfigError("batch_questions, questions_per_video and head_dim must be >= 1")
        if not (self.lr_start > 0 and self.lr_end > 0):
            raise ConfigError("learning rates must be positive")
        self.trunk.validate()

    def sampler(self, seed=None) -> SamplerConfig:
        return SamplerConfig(self.N, self.W, self.strategy, self.seed if seed is None else seed)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["trunk"] = {"convs": self.trunk.describe(), "fc_dim": self.trunk.fc_dim,
                      "c_in": self.trunk.c_in, "input_hw": list(self.trunk.input_hw)}
        return d


def config_hash(d: dict) -> str:
    text = repr(sorted((k, repr(v)) for k, v in d.items()))
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def lr_at(epoch: int, epochs: int, lr_start: float, lr_end: float) -> float:
    """Learning rate decaying geometrically from ``lr_start`` to ``lr_end``."""
    if epochs < 2:
        raise ConfigError("a logarithmic schedule needs at least 2 epochs")
    if not 0 <= epoch < epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {epochs})")
    if lr_start <= 0 or lr_end <= 0:
        raise ConfigError("learning rates must be positive")
    return float(lr_start * (lr_end / lr_start) ** (epoch / (epochs - 1)))


# --------------------------------------------------------------------------
# parameters


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


def init_trunk(cfg: TrunkConfig, rng: np.random.Generator, prefix="trunk", with_fc=True, dtype=np.float32) -> ParamSet:
    cfg.validate()
    params = ParamSet()
    c = cfg.c_in
    for i, spec in enumerate(cfg.convs, 1):
        fan_in = spec.kernel * spec.kernel * c
        params[f"{prefix}.conv{i}.weight"] = ad.parameter(he_normal(rng, (spec.kernel, spec.kernel, c, spec.out), fan_in), dtype)
        params[f"{prefix}.conv{i}.bias"] = ad.parameter(np.zeros(spec.out), dtype)
        c = spec.out
    if with_fc:
        h, w, c = cfg.feature_shape()
        params.update(init_fc(f"{prefix}.fc", h * w * c, cfg.fc_dim, rng, dtype))
    return params


def init_fc(name: str, fan_in: int, fan_out: int, rng: np.random.Generator, dtype=np.float32) -> ParamSet:
    return ParamSet({
        f"{name}.weight": ad.parameter(he_normal(rng, (fan_in, fan_out), fan_in), dtype),
        f"{name}.bias": ad.parameter(np.zeros(fan_out), dtype),
    })


def conv_features(x, params: ParamSet, cfg: TrunkConfig, prefix="trunk") -> Tensor:
    """Flattened output of the convolutional blocks for a batch ``(B, h, w, c_in)``."""
    h = ad.as_tensor(x)
    if h.data.ndim != 4 or h.shape[-1] != cfg.c_in:
        raise ShapeError(f"trunk expects (B, h, w, {cfg.c_in}) input, got {h.shape}")
    for i, spec in enumerate(cfg.convs, 1):
        h = ad.conv2d(h, params[f"{prefix}.conv{i}.weight"], params[f"{prefix}.conv{i}.bias"], spec.stride, spec.padding)
        h = ad.relu(h)
        if spec.pool > 1:
            h = ad.maxpool(h, spec.pool)
    return ad.flatten(h)


def forward_branch(x, params: ParamSet, cfg: TrunkConfig, prefix="trunk") -> Tensor:
    """Shared-trunk activation ``v`` of width ``fc_dim``; accepts one clip or a batch."""
    arr = x.data if isinstance(x, ad.Tensor) else np.asarray(x)
    single = np.ndim(arr) == 3
    if single:
        x = ad.as_tensor(np.asarray(arr)[None])
    feats = conv_features(x, params, cfg, prefix)
    v = ad.relu(ad.affine(feats, params[f"{prefix}.fc.weight"], params[f"{prefix}.fc.bias"]))
    return ad.reshape(v, (cfg.fc_dim,)) if single else v


def sod_coefficients(k: int) -> np.ndarray:
    return sumdiff_weights(k)


def _branch_stack(vs) -> Tensor:
    ts = [ad.as_tensor(v) for v in vs]
    if not ts:
        raise ShapeError("fusion needs at least one branch")
    d = ts[0].shape[-1]
    for t in ts:
        if t.shape != ts[0].shape:
            raise ShapeError(f"branch activations differ in shape: {t.shape} vs {ts[0].shape}")
    lead = ts[0].shape[:-1]
    b = int(np.prod(lead)) if lead else 1
    return ad.concat([ad.reshape(t, (b, 1, d)) for t in ts], axis=1), lead


def fuse_concat(vs) -> Tensor:
    """Concatenate branch activations in presentation order: width (N+1) d."""
    stacked, lead = _branch_stack(vs)
    b, k, d = stacked.shape
    return ad.reshape(stacked, lead + (k * d,))


def fuse_sod(vs) -> Tensor:
    """Sum over pairs j > i of (v_j - v_i): width d."""
    stacked, lead = _branch_stack(vs)
    b, k, d = stacked.shape
    out = ad.combine_branches(stacked, sod_coefficients(k))
    return ad.reshape(out, lead + (d,))


class O3NNetwork:
    """Shared trunk, fusion layer and two-layer classifier over N+1 positions."""

    def __init__(self, cfg: O3NConfig, params: ParamSet | None = None, rng=None, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        if params is None:
            rng = np.random.default_rng(cfg.seed) if rng is None else rng
            params = init_trunk(cfg.trunk, rng, dtype=dtype)
            fused = cfg.trunk.fc_dim * (cfg.N + 1 if cfg.fusion == "concat" else 1)
            params.update(init_fc("head.fc1", fused, cfg.head_dim, rng, dtype))
            params.update(init_fc("head.fc2", cfg.head_dim, cfg.N + 1, rng, dtype))
        self.params = params

    @property
    def branches(self) -> int:
        return self.cfg.N + 1

    def fused(self, x) -> Tensor:
        """Fusion output for encoded questions ``(B, N+1, h, w, c_in)``."""
        arr = x.data if isinstance(x, ad.Tensor) else np.asarray(x)
        if np.ndim(arr) != 5 or arr.shape[1] != self.branches:
            raise ShapeError(f"expected (B, {self.branches}, h, w, c) questions, got {np.shape(arr)}")
        b, k = arr.shape[:2]
        flat = ad.reshape(ad.as_tensor(x), (b * k,) + tuple(arr.shape[2:]))
        v = forward_branch(flat, self.params, self.cfg.trunk)
        v = ad.reshape(v, (b, k, self.cfg.trunk.fc_dim))
        if self.cfg.fusion == "concat":
            out = ad.reshape(v, (b, k * self.cfg.trunk.fc_dim))
            expected = k * self.cfg.trunk.fc_dim
        else:
            out = ad.combine_branches(v, sod_coefficients(k))
            expected = self.cfg.trunk.fc_dim
        if out.shape[1] != expected:
            raise ShapeError(f"fusion width {out.shape[1]} != {expected}")
        return out

    def logits(self, x) -> Tensor:
        p = self.params
        h = ad.relu(ad.affine(self.fused(x), p["head.fc1.weight"], p["head.fc1.bias"]))
        return ad.affine(h, p["head.fc2.weight"], p["head.fc2.bias"])

    def loss(self, x, answers) -> tuple:
        """Mean NLL for 1-based ``answers``; returns ``(loss, probs)``."""
        return ad.softmax_xent(self.logits(x), np.asarray(answers) - 1)

    def checkpoint(self, metadata=None) -> Checkpoint:
        meta = {
            "kind": "o3n",
            "N": self.cfg.N,
            "W": self.cfg.W,
            "encoder": self.cfg.encoder,
            "fusion": self.cfg.fusion,
            "strategy": self.cfg.strategy,
            "trunk_convs": self.cfg.trunk.describe(),
            "fc_dim": self.cfg.trunk.fc_dim,
            "c_in": self.cfg.trunk.c_in,
            "input_hw": "x".join(str(s) for s in self.cfg.trunk.input_hw),
            "head_dim": self.cfg.head_dim,
            "seed": self.cfg.seed,
            "config_hash": config_hash(self.cfg.as_dict()),
        }
        meta.update(metadata or {})
        return Checkpoint({k: v.data.copy() for k, v in self.params.items()}, meta)


def trunk_from_metadata(meta: dict) -> TrunkConfig:
    try:
        h, w = (int(s) for s in meta["input_hw"].split("x"))
        return TrunkConfig(TrunkConfig.parse_convs(meta["trunk_convs"]), int(meta["fc_dim"]), int(meta["c_in"]), (h, w))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"checkpoint metadata lacks a trunk description: {exc}") from None


def network_from_checkpoint(ckpt: Checkpoint, **overrides) -> O3NNetwork:
    meta = ckpt.metadata
    trunk = trunk_from_metadata(meta)
    cfg = O3NConfig(N=int(meta["N"]), W=int(meta["W"]), encoder=meta["encoder"], fusion=meta["fusion"],
                    strategy=meta.get("strategy", "random"), trunk=trunk, head_dim=int(meta["head_dim"]), **overrides)
    return O3NNetwork(cfg, params=ckpt.params())


# --------------------------------------------------------------------------
# questions -> arrays


def encode_question(q, encoder: str) -> np.ndarray:
    """Encoded elements of one question stacked to ``(N+1, h, w, c_out)``."""
    frames = np.stack([c.frames for c in q.elements])
    return encode_array(frames, encoder)


def o3n_forward(q, net: O3NNetwork) -> np.ndarray:
    return net.logits(encode_question(q, net.cfg.encoder)[None]).data[0]


def make_questions(videos, cfg: O3NConfig, rng: np.random.Generator, per_video: int, ids=None):
    sampler = cfg.sampler()
    ids = range(len(videos)) if ids is None else ids
    return [build_question(v, sampler, rng, vid) for v, vid in zip(videos, ids) for _ in range(per_video)]


def dihedral(frames: np.ndarray, code: int) -> np.ndarray:
    """One of the 8 flips/transposes of the (h, w) axes of a ``(..., h, w, c)`` array."""
    out = frames
    if code & 1:
        out = out[..., :, ::-1, :]
    if code & 2:
        out = out[..., ::-1, :, :]
    if code & 4:
        out = np.swapaxes(out, -3, -2)
    return out


def batch_arrays(questions, encoder: str, rng: np.random.Generator | None = None):
    """Encoded ``(B, N+1, h, w, c)`` questions and 1-based answers.

    With ``rng``, each question gets a random flip/transpose shared by all of its clips.
    """
    frames = np.stack([np.stack([c.frames for c in q.elements]) for q in questions])
    if rng is not None:
        square = frames.shape[-3] == frames.shape[-2]
        codes = rng.integers(0, 8 if square else 4, size=len(questions))
        frames = np.stack([dihedral(f, int(code)) for f, code in zip(frames, codes)])
    answers = np.array([q.answer for q in questions], dtype=np.int64)
    return encode_array(frames, encoder), answers


def evaluate_questions(net: O3NNetwork, x: np.ndarray, answers: np.ndarray, chunk: int = 128):
    """Mean loss, accuracy and the (B, N+1) probability matrix."""
    losses, probs = [], []
    for s in range(0, len(answers), chunk):
        loss, p = net.loss(x[s:s + chunk], answers[s:s + chunk])
        losses.append(float(loss.data) * len(p))
        probs.append(p)
    probs = np.concatenate(probs)
    acc = float(np.mean(probs.argmax(axis=1) + 1 == answers))
    return sum(losses) / len(answers), acc, probs


def position_profile(probs: np.ndarray, answers: np.ndarray) -> tuple:
    """Mean probability on the odd position, and the largest mean on any even position."""
    rows = np.arange(len(answers))
    odd = probs[rows, answers - 1].mean()
    mask = np.ones_like(probs, dtype=bool)
    mask[rows, answers - 1] = False
    even_means = [probs[:, k][mask[:, k]].mean() for k in range(probs.shape[1]) if mask[:, k].any()]
    return float(odd), float(max(even_means))


def split_holdout(n: int, fraction: float, rng: np.random.Generator):
    perm = rng.permutation(n)
    n_val = int(round(fraction * n)) if n > 1 else 0
    if fraction > 0 and n > 1:
        n_val = max(1, n_val)
    return sorted(perm[n_val:].tolist()), sorted(perm[:n_val].tolist())


def pretrain(videos, cfg: O3NConfig, progress=None):
    """Self-supervised odd-one-out training.

    Questions are regenerated from every training video at each epoch, so clip
    positions are re-drawn (temporal jittering). Returns ``(checkpoint, metrics)``
    where metrics is a list of ``(epoch, phase, loss, accuracy, lr)`` rows.
    """
    cfg.validate()
    videos = list(videos)
    if not videos:
        raise ConfigError("pretraining needs at least one video")
    need = min_video_length(cfg.W, cfg.strategy)
    for i, v in enumerate(videos):
        if v.n < need:
            raise VideoTooShort(f"video {i} has {v.n} frames, {cfg.strategy} sampling needs {need}")
    if (videos[0].h, videos[0].w) != tuple(cfg.trunk.input_hw):
        raise ConfigError(f"trunk expects {cfg.trunk.input_hw} frames, videos are {(videos[0].h, videos[0].w)}")
    rng = np.random.default_rng(cfg.seed)
    train_ids, val_ids = split_holdout(len(videos), cfg.val_fraction, rng)
    net = O3NNetwork(cfg, rng=rng)
    opt = ad.SGD(net.params, cfg.momentum, cfg.weight_decay, clip_norm=cfg.clip_norm)

    val_x = val_a = None
    if val_ids:
        val_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        val_q = make_questions([videos[i] for i in val_ids], cfg, val_rng, cfg.val_questions_per_video, val_ids)
        val_x, val_a = batch_arrays(val_q, cfg.encoder)

    metrics = []
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg.epochs, cfg.lr_start, cfg.lr_end)
        qs = make_questions([videos[i] for i in train_ids], cfg, rng, cfg.questions_per_video, train_ids)
        order = rng.permutation(len(qs))
        bs = min(cfg.batch_questions, len(qs))
        seen = correct = 0
        loss_sum = 0.0
        for s in range(0, len(qs) - bs + 1, bs):
            x, answers = batch_arrays([qs[i] for i in order[s:s + bs]], cfg.encoder,
                                      rng if cfg.spatial_augment else None)
            opt.zero_grad()
            loss, probs = net.loss(x, answers)
            loss.backward()
            opt.step(lr)
            loss_sum += float(loss.data) * bs
            correct += int(np.sum(probs.argmax(axis=1) + 1 == answers))
            seen += bs
        metrics.append((epoch, "train", loss_sum / seen, correct / seen, lr))
        if val_x is not None:
            vloss, vacc, _ = evaluate_questions(net, val_x, val_a)
            metrics.append((epoch, "val", vloss, vacc, lr))
        if progress is not None:
            progress(metrics[-2:] if val_x is not None else metrics[-1:])
        log.info("epoch %d lr %.5f %s", epoch, lr, metrics[-1])
    ckpt = net.checkpoint({"epoch": cfg.epochs, "val_videos": ",".join(map(str, val_ids))})
    return ckpt, metrics


def metrics_csv(rows, header=METRICS_HEADER) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for epoch, phase, loss, acc, lr in rows:
        w.writerow([epoch, phase, f"{loss:.6f}", f"{acc:.6f}", f"{lr:.8g}"])
    return buf.getvalue()
