"""Command-line entry point: ``o3n <command> [--config PATH] [--seed N] [--deterministic] [--out DIR]``."""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import plotting
from .autodiff import Checkpoint, ParamSet, load_checkpoint, parameter, save_checkpoint
from .clipenc import ENCODERS, encode_array
from .config import RunConfig, load_config
from .errors import ConfigError, IoError, O3NError, VideoTooShort
from .o3nmodel import metrics_csv, pretrain, trunk_from_metadata
from .sampling import extract
from .transfer import Classifier, evaluate, finetune
from .videodata import load_corpus, load_video, save_corpus, synth_corpus

log = logging.getLogger("o3n")

COMMANDS = ("gen-data", "pretrain", "finetune", "eval", "encode", "inspect-filters")


@contextlib.contextmanager
def _single_thread(enabled: bool):
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def _mkdir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create directory {path}: {exc}") from exc
    return path


def _write(path: Path, text: str) -> Path:
    try:
        path.write_text(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


def cmd_gen_data(cfg: RunConfig) -> Path:
    corpus = synth_corpus(cfg.synth())
    root = save_corpus(corpus, cfg.corpus_path())
    _write(_mkdir(cfg.run_dir()) / "config.txt", cfg.to_text())
    log.info("wrote %d videos to %s", len(corpus), root)
    return root


def _load_corpus(cfg: RunConfig):
    path = cfg.corpus_path()
    if not (path / "index.tsv").is_file():
        raise IoError(f"corpus not found at {path}; run gen-data first")
    return load_corpus(path)


def cmd_pretrain(cfg: RunConfig, splits=("train", "val")) -> Path:
    corpus = _load_corpus(cfg)
    videos = corpus.subset(*splits).videos
    ckpt, rows = pretrain(videos, cfg.o3n())
    ckpt.metadata["run_config_hash"] = cfg.config_hash()
    out = cfg.checkpoint_path()
    _mkdir(out.parent)
    save_checkpoint(ckpt, out)
    _write(out.parent / "config.txt", cfg.to_text())
    _write(out.parent / "metrics.csv", metrics_csv(rows))
    plotting.save_training_curves(rows, out.parent / "curves.png", "odd-one-out pretraining")
    return out


def classifier_checkpoint(model: Classifier, class_names, cfg: RunConfig) -> Checkpoint:
    meta = {
        "kind": "classifier",
        "encoder": model.encoder,
        "W": model.W,
        "num_classes": model.num_classes,
        "class_names": ",".join(class_names),
        "head_widths": ",".join(str(w) for w in model.head_widths),
        "dropout": model.dropout,
        "trunk_convs": model.trunk.describe(),
        "fc_dim": model.trunk.fc_dim,
        "c_in": model.trunk.c_in,
        "input_hw": "x".join(str(s) for s in model.trunk.input_hw),
        "init": cfg.init,
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
    }
    return Checkpoint({k: v.data.copy() for k, v in model.params.items()}, meta)


def classifier_from_checkpoint(ckpt: Checkpoint) -> Classifier:
    meta = ckpt.metadata
    if meta.get("kind") != "classifier":
        raise ConfigError("checkpoint does not hold a fine-tuned classifier")
    params = ParamSet((k, parameter(v)) for k, v in ckpt.tensors.items())
    widths = tuple(int(w) for w in meta["head_widths"].split(",") if w)
    return Classifier(trunk_from_metadata(meta), params, int(meta["num_classes"]), widths,
                      float(meta["dropout"]), meta["encoder"], int(meta["W"]))


def cmd_finetune(cfg: RunConfig) -> Path:
    corpus = _load_corpus(cfg)
    fcfg = cfg.finetune()
    ckpt = None
    if fcfg.init == "o3n":
        path = cfg.checkpoint_path()
        if not path.is_file():
            raise IoError(f"pretrained checkpoint not found: {path}")
        ckpt = load_checkpoint(path)
    model, rows = finetune(corpus, fcfg, ckpt)
    out = cfg.model_path()
    _mkdir(out.parent)
    save_checkpoint(classifier_checkpoint(model, corpus.class_names, cfg), out)
    _write(out.parent / "config.txt", cfg.to_text())
    _write(out.parent / "metrics.csv", metrics_csv(rows))
    plotting.save_training_curves(rows, out.parent / "curves.png", f"fine-tuning ({fcfg.init} init)")
    return out


def cmd_eval(cfg: RunConfig) -> Path:
    corpus = _load_corpus(cfg)
    path = cfg.model_path()
    if not path.is_file():
        raise IoError(f"fine-tuned model not found: {path}")
    model = classifier_from_checkpoint(load_checkpoint(path))
    report = evaluate(model, corpus, "test", {"model": path.name, "seed": cfg.seed, "config_hash": cfg.config_hash()})
    out = _mkdir(path.parent / "eval")
    _write(out / "confusion.csv", report.confusion_csv())
    _write(out / "summary.txt", report.summary_text())
    plotting.save_confusion_figure(report.confusion, report.class_names, out / "confusion.png",
                                   f"test accuracy {report.accuracy:.3f}")
    return out


def cmd_encode(video_path, encoder: str, W: int, t_start: int, out_dir: Path) -> list:
    """Write one 8-bit PPM per 3-channel block of the encoded clip starting at frame ``t_start``."""
    if encoder not in ENCODERS:
        raise ConfigError(f"unknown encoder {encoder!r}")
    v = load_video(video_path)
    if t_start < 1 or t_start + W - 1 > v.n:
        raise VideoTooShort(f"clip [{t_start}, {t_start + W - 1}] does not fit in a {v.n}-frame video")
    raw = encode_array(extract(v, range(t_start, t_start + W)), encoder, standardized=False)
    blocks = plotting.channel_blocks(raw)
    _mkdir(out_dir)
    stem = Path(video_path).stem
    paths = [plotting.write_pnm(plotting.rescale_u8(b), out_dir / f"{stem}_{encoder}_t{t_start}_{i + 1}.ppm")
             for i, b in enumerate(blocks)]
    plotting.save_encoding_figure(blocks, out_dir / f"{stem}_{encoder}_t{t_start}.png", f"{encoder}, W={W}")
    return paths


def cmd_inspect_filters(ckpt_path, out_dir: Path) -> Path:
    path = Path(ckpt_path)
    ckpt = load_checkpoint(path)
    if "trunk.conv1.weight" not in ckpt.tensors:
        raise ConfigError(f"{path} has no first-layer convolution")
    kernel = ckpt.tensors["trunk.conv1.weight"]
    _mkdir(out_dir)
    out = plotting.write_pnm(plotting.filter_grid(kernel), out_dir / f"{path.stem}_filters.ppm")
    plotting.save_filter_figure(kernel, out_dir / f"{path.stem}_filters.png")
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="overrides the config-file seed")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, bitwise-reproducible run")
    common.add_argument("--out", help="output root directory (config key out_dir)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="o3n", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic sprite corpus")
    sub.add_parser("pretrain", parents=[common], help="odd-one-out self-supervised pretraining")
    sub.add_parser("finetune", parents=[common], help="supervised fine-tuning")
    sub.add_parser("eval", parents=[common], help="video-level evaluation on the test split")
    enc = sub.add_parser("encode", parents=[common], help="dump an encoded clip as images")
    enc.add_argument("video")
    enc.add_argument("--encoder", choices=ENCODERS, default=None)
    enc.add_argument("--W", type=int, default=None)
    enc.add_argument("--t-start", type=int, default=1)
    filt = sub.add_parser("inspect-filters", parents=[common], help="tile first-layer filters into an image")
    filt.add_argument("checkpoint", nargs="?")
    return parser


def resolve_config(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.deterministic:
        overrides["deterministic"] = True
    if args.out is not None:
        overrides["out_dir"] = args.out
    return load_config(args.config, overrides)


def run(argv=None) -> Path | list:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    cfg = resolve_config(args)
    np.random.seed(cfg.seed)
    with _single_thread(cfg.deterministic):
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "pretrain":
            return cmd_pretrain(cfg)
        if args.command == "finetune":
            return cmd_finetune(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "encode":
            return cmd_encode(args.video, args.encoder or cfg.encoder, args.W or cfg.W, args.t_start,
                              cfg.run_dir() / "encode")
        return cmd_inspect_filters(args.checkpoint or cfg.checkpoint_path(), cfg.run_dir() / "filters")


def main(argv=None) -> int:
    try:
        result = run(argv)
    except (O3NError, OSError) as exc:
        print(f"o3n: error: {exc}", file=sys.stderr)
        return 1
    if isinstance(result, list):
        for p in result:
            print(p)
    else:
        print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
