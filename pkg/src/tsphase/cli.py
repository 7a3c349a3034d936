"""Command-line experiment runner.

Every subcommand reads a flat ``key = value`` config file (``--config``),
applies flag overrides, echoes the effective config to stderr and writes
``report.json`` into ``--out``. Datasets are directories laid out as
``<root>/<split>/<id>.fseq`` plus ``<root>/<split>/<id>.ann.json``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch

from . import io
from .core import ConfigError, DiffusionConfig, LabelSequence, PreconditionError, TrainConfig
from .diffusion import (
    POLICIES,
    clean_gt_with_uatd,
    mask_fixed_width,
    naive_baseline,
    temporal_diffusion,
    uniform_baseline,
)
from .experiments import ModelSizes, evaluate, run_method
from .metrics import POSITION_BINS, annotation_position_stats, phase_metrics, similarity_matrix
from .synthetic import SynthSpec, generate_split, reannotate
from .training import uatd
from .uncertainty import estimate

log = logging.getLogger("tsphase")


class UsageError(Exception):
    pass


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text

    return parse


# key -> (parser, default, help); flags use the same names with dashes
KEYS: dict[str, tuple[Callable[[str], Any], Any, str]] = {
    "seed": (int, 0, "random seed for data, initialization, dropout and sampling"),
    "tau": (float, 0.1, "uncertainty threshold; frames diffuse only when u < tau"),
    "mode": (_choice("contiguous", "filter"), "contiguous", "diffusion mode"),
    "k_passes": (int, 5, "Monte Carlo dropout passes per uncertainty estimate"),
    "lambda": (float, 0.015, "weight of the truncated smoothing loss"),
    "gamma": (float, 4.0, "truncation value of the smoothing loss"),
    "loop_iters": (int, 2, "outer loop iterations m"),
    "diffusion_iters": (int, 4, "temporal diffusion rounds n per loop"),
    "spatial_iters": (int, 2, "diffusion rounds in the spatial warm-up"),
    "policy": (_choice(*POLICIES), "random", "timestamp placement within each phase"),
    "width": (int, 0, "half-width of the fixed boundary mask"),
    "profile": (_choice("desk", "finetune"), "desk", "optimizer preset: desk (from scratch) or finetune"),
    "ce_normalization": (_choice("sequence_length", "labeled_count"), "sequence_length", ""),
    "spatial_epochs": (int, None, "override the preset's spatial epochs"),
    "temporal_epochs": (int, None, "override the preset's temporal epochs"),
    "spatial_lr": (float, None, ""),
    "temporal_lr": (float, None, ""),
    "spatial_batch_size": (int, None, ""),
    "temporal_batch_size": (int, None, ""),
    "hidden": (int, 64, "spatial embedding width"),
    "layers": (int, 10, "dilated residual layers in the temporal model"),
    "channels": (int, 64, "temporal model channels"),
    "causal": (_bool, False, "causal temporal convolutions"),
    "dropout": (float, 0.5, "dropout rate of both models"),
    "averaging": (_choice("pooled", "per_video"), "pooled", "metric averaging"),
    "num_videos": (int, 30, "synthetic videos in total"),
    "num_test": (int, 10, "synthetic videos held out for testing"),
    "num_classes": (int, 5, ""),
    "dim": (int, 16, "synthetic feature dimension"),
    "t_min": (int, 150, ""),
    "t_max": (int, 250, ""),
    "phase_min": (int, 25, ""),
    "phase_max": (int, 60, ""),
    "separation": (float, 4.0, "distance between class centroids"),
    "ambiguity": (int, 5, "blended frames on each side of a boundary"),
    "noise": (float, 1.0, "feature noise standard deviation"),
}

FLAG_KEYS = (
    "seed", "tau", "mode", "k_passes", "lambda", "gamma",
    "loop_iters", "diffusion_iters", "policy", "width",
)


def read_config_file(path) -> dict[str, str]:
    out = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in KEYS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def effective_config(args) -> dict[str, Any]:
    raw: dict[str, Any] = {}
    if args.config:
        try:
            raw.update(read_config_file(args.config))
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
    for key in FLAG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = value
    cfg = {}
    for key, (parse, default, _) in KEYS.items():
        if key not in raw:
            cfg[key] = default
            continue
        try:
            cfg[key] = parse(raw[key]) if isinstance(raw[key], str) else raw[key]
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {exc}") from None
    return cfg


def train_config(cfg) -> TrainConfig:
    base = TrainConfig.desk_scale() if cfg["profile"] == "desk" else TrainConfig()
    changes = dict(
        seed=cfg["seed"],
        lambda_smooth=cfg["lambda"],
        gamma=cfg["gamma"],
        loop_iterations=cfg["loop_iters"],
        diffusion_rounds_temporal=cfg["diffusion_iters"],
        diffusion_rounds_spatial=cfg["spatial_iters"],
        ce_normalization=cfg["ce_normalization"],
    )
    for key in (
        "spatial_epochs", "temporal_epochs", "spatial_lr", "temporal_lr",
        "spatial_batch_size", "temporal_batch_size",
    ):
        if cfg[key] is not None:
            changes[key] = cfg[key]
    return replace(base, **changes)


def diffusion_config(cfg) -> DiffusionConfig:
    return DiffusionConfig(cfg["tau"], cfg["mode"], cfg["k_passes"], cfg["dropout"])


def synth_spec(cfg) -> SynthSpec:
    return SynthSpec(
        num_videos=cfg["num_videos"],
        num_classes=cfg["num_classes"],
        t_range=(cfg["t_min"], cfg["t_max"]),
        dim=cfg["dim"],
        phase_len_range=(cfg["phase_min"], cfg["phase_max"]),
        separation=cfg["separation"],
        ambiguity=cfg["ambiguity"],
        noise=cfg["noise"],
    )


def model_sizes(cfg) -> ModelSizes:
    return ModelSizes(cfg["hidden"], cfg["layers"], cfg["channels"], cfg["causal"])


# dataset directories


def save_split(root: Path, split: str, videos) -> None:
    folder = root / split
    folder.mkdir(parents=True, exist_ok=True)
    for feats, ann in videos:
        io.write_features(folder / f"{feats.sequence_id}.fseq", feats)
        io.write_annotation(folder / f"{ann.sequence_id}.ann.json", ann)


def load_split(root, split: str):
    folder = Path(root) / split
    if not folder.is_dir():
        raise FileNotFoundError(f"no split directory {folder}")
    videos = []
    for path in sorted(folder.glob("*.ann.json")):
        ann = io.read_annotation(path)
        feats = io.read_features(folder / f"{ann.sequence_id}.fseq", ann.sequence_id)
        videos.append((feats, ann))
    if not videos:
        raise FileNotFoundError(f"no annotations in {folder}")
    return videos


def load_labels(folder) -> dict[str, LabelSequence]:
    out = {}
    for path in sorted(Path(folder).glob("*.labels.json")):
        labels = io.read_labels(path)
        out[labels.sequence_id or path.name.split(".")[0]] = labels
    if not out:
        raise FileNotFoundError(f"no label files in {folder}")
    return out


def save_labels(folder: Path, labels: dict[str, LabelSequence]) -> None:
    folder.mkdir(parents=True, exist_ok=True)
    for sid in sorted(labels):
        io.write_labels(folder / f"{sid}.labels.json", LabelSequence(labels[sid].labels, sid))


def _rate(labels: dict[str, LabelSequence]) -> float:
    total = sum(len(v) for v in labels.values())
    return 100.0 * sum(v.num_labeled for v in labels.values()) / total


# subcommands


def cmd_synth(args, cfg, out: Path) -> dict:
    train, test = generate_split(cfg["seed"], synth_spec(cfg), cfg["num_test"], cfg["policy"])
    save_split(out, "train", train)
    save_split(out, "test", test)
    return {"train": [f.sequence_id for f, _ in train], "test": [f.sequence_id for f, _ in test]}


def cmd_annotate(args, cfg, out: Path) -> dict:
    if out.resolve() == Path(args.data).resolve():
        raise UsageError("--out must differ from --data; inputs are never rewritten")
    results = {}
    for n, split in enumerate(args.splits):
        videos = reannotate(load_split(args.data, split), cfg["policy"], cfg["seed"] + n)
        save_split(out, split, videos)
        results[split] = {a.sequence_id: [list(ts) for ts in a.timestamps] for _, a in videos}
    return {"timestamps": results}


def cmd_train(args, cfg, out: Path) -> dict:
    train = load_split(args.data, "train")
    test = load_split(args.data, "test") if (Path(args.data) / "test").is_dir() else []
    fixed = load_labels(args.labels) if args.labels else None
    method = "fixed" if fixed is not None else args.method
    outcome = run_method(
        train, test, method, train_config(cfg), diffusion_config(cfg), model_sizes(cfg), fixed
    )
    res = outcome.result
    io.write_checkpoint(out / "model.npz", {"spatial": res.spatial, "temporal": res.temporal})
    save_labels(out / "pseudo", res.final_labels)
    if outcome.predictions:
        save_labels(out / "pred", outcome.predictions)
    results = {"method": method, "history": outcome.history_quality([a for _, a in train])}
    if outcome.test_metrics is not None:
        results["test"] = outcome.test_metrics.to_dict()
    results["losses"] = res.losses
    return results


def _annotations(args):
    if args.annotation:
        return [io.read_annotation(args.annotation)]
    if not args.data:
        raise UsageError("need --annotation or --data")
    return [a for _, a in load_split(args.data, args.split)]


def cmd_diffuse(args, cfg, out: Path) -> dict:
    dcfg = diffusion_config(cfg)
    labels = {}
    if args.stack:
        if not args.annotation:
            raise UsageError("--stack needs --annotation")
        ann = io.read_annotation(args.annotation)
        stack = io.read_stack(args.stack)
        labels[ann.sequence_id] = temporal_diffusion(estimate(stack), ann, dcfg.tau, dcfg.mode)
    else:
        if not (args.checkpoint and args.data):
            raise UsageError("diffuse needs --stack/--annotation or --checkpoint/--data")
        models = io.read_checkpoint(args.checkpoint)
        spatial, temporal = models["spatial"], models["temporal"]
        for n, (feats, ann) in enumerate(load_split(args.data, args.split)):
            if args.model == "spatial":
                model, inputs = spatial, feats.frames
            else:
                model, inputs = temporal, spatial.embed(feats.frames)
            labels[ann.sequence_id] = uatd(model, inputs, ann, dcfg, seed=cfg["seed"] + n)
    save_labels(out / "labels", labels)
    return {"labelling_rate": _rate(labels), "sequences": sorted(labels)}


def cmd_baseline(args, cfg, out: Path) -> dict:
    make = naive_baseline if args.kind == "naive" else uniform_baseline
    labels = {a.sequence_id: make(a) for a in _annotations(args)}
    save_labels(out / "labels", labels)
    return {"kind": args.kind, "labelling_rate": _rate(labels), "sequences": sorted(labels)}


def cmd_eval(args, cfg, out: Path) -> dict:
    videos = load_split(args.data, args.split)
    if args.pred:
        preds = load_labels(args.pred)
        missing = [f.sequence_id for f, _ in videos if f.sequence_id not in preds]
        if missing:
            raise PreconditionError(f"no predictions for {', '.join(missing)}")
        metrics = phase_metrics(
            [preds[f.sequence_id] for f, _ in videos],
            [a.full_labels for _, a in videos],
            cfg["averaging"],
        )
    elif args.checkpoint:
        models = io.read_checkpoint(args.checkpoint)
        metrics, preds = evaluate(models["spatial"], models["temporal"], videos, cfg["averaging"])
        save_labels(out / "pred", preds)
    else:
        raise UsageError("eval needs --pred or --checkpoint")
    return {"metrics": metrics.to_dict()}


def cmd_clean(args, cfg, out: Path) -> dict:
    videos = load_split(args.data, args.split)
    if args.kind == "uatd":
        if not args.pseudo:
            raise UsageError("clean --kind uatd needs --pseudo")
        pseudo = load_labels(args.pseudo)
        labels = {a.sequence_id: clean_gt_with_uatd(a.full_labels, pseudo[a.sequence_id]) for _, a in videos}
    else:
        labels = {a.sequence_id: mask_fixed_width(a.full_labels, cfg["width"]) for _, a in videos}
    save_labels(out / "labels", labels)
    return {"kind": args.kind, "labelling_rate": _rate(labels)}


def cmd_simmat(args, cfg, out: Path) -> dict:
    models = io.read_checkpoint(args.checkpoint)
    written = []
    for feats, _ in load_split(args.data, args.split):
        if args.id and feats.sequence_id not in args.id:
            continue
        emb = models["spatial"].embed(feats.frames)
        sim = similarity_matrix(emb)
        np.savetxt(out / f"{feats.sequence_id}.simmat.csv", sim, delimiter=",", fmt="%.6f")
        written.append(feats.sequence_id)
    if not written:
        raise PreconditionError("no sequences matched --id")
    return {"sequences": written}


def cmd_annstats(args, cfg, out: Path) -> dict:
    anns = [a for _, a in load_split(args.data, args.split)]
    hist = annotation_position_stats(anns)
    rows = ["bin,percent"] + [f"\"{b}\",{v:.6f}" for b, v in zip(POSITION_BINS, hist)]
    (out / "annstats.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return {"bins": POSITION_BINS, "percent": hist.tolist()}


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic train/test dataset"),
    "annotate": (cmd_annotate, "redraw timestamps with a placement policy"),
    "train": (cmd_train, "loop training with pseudo-label refresh"),
    "diffuse": (cmd_diffuse, "uncertainty-aware temporal diffusion of timestamps"),
    "baseline": (cmd_baseline, "naive or uniform pseudo labels"),
    "eval": (cmd_eval, "frame metrics against ground truth"),
    "clean": (cmd_clean, "mask ground truth by diffusion output or fixed width"),
    "simmat": (cmd_simmat, "cosine similarity of spatial embeddings"),
    "annstats": (cmd_annstats, "timestamp positions within their phases"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--out", required=True, help="output directory (created if missing)")
    for key in FLAG_KEYS:
        parse, default, text = KEYS[key]
        flag = "--" + key.replace("_", "-")
        dest = {"dest": key}
        common.add_argument(flag, type=str, metavar=key.upper(), help=f"{text} (default {default})", **dest)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(
        prog="tsphase", description="Timestamp-supervised phase recognition experiments."
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    epilog = "config file keys: " + ", ".join(KEYS)
    parsers = {
        name: sub.add_parser(name, parents=[common], help=text, description=text, epilog=epilog)
        for name, (_, text) in COMMANDS.items()
    }

    def data(p, split="train"):
        p.add_argument("--data", help="dataset root containing <split>/ directories")
        p.add_argument("--split", default=split, help=f"split to read (default {split})")

    p = parsers["annotate"]
    p.add_argument("--data", required=True, help="dataset root to reannotate")
    p.add_argument("--splits", nargs="+", default=["train"], help="splits to reannotate")
    p = parsers["train"]
    p.add_argument("--data", required=True, help="dataset root with train/ and optional test/")
    p.add_argument("--method", choices=["uatd", "naive", "uniform"], default="uatd",
                   help="pseudo-labeling method")
    p.add_argument("--labels", help="directory of fixed training labels (overrides --method)")
    p = parsers["diffuse"]
    data(p)
    p.add_argument("--annotation", help="annotation file (with --stack)")
    p.add_argument("--stack", help="probability stack file (K x T x C)")
    p.add_argument("--checkpoint", help="checkpoint whose dropout drives the uncertainty")
    p.add_argument("--model", choices=["spatial", "temporal"], default="temporal",
                   help="which model of the checkpoint to sample")
    p = parsers["baseline"]
    data(p)
    p.add_argument("--kind", choices=["naive", "uniform"], required=True, help="baseline kind")
    p.add_argument("--annotation", help="single annotation file instead of --data")
    p = parsers["eval"]
    data(p, "test")
    p.add_argument("--pred", help="directory of predicted label files")
    p.add_argument("--checkpoint", help="checkpoint to predict with")
    p = parsers["clean"]
    data(p)
    p.add_argument("--kind", choices=["uatd", "fixed-width"], required=True, help="masking kind")
    p.add_argument("--pseudo", help="directory of diffusion label files (for --kind uatd)")
    p = parsers["simmat"]
    data(p, "test")
    p.add_argument("--checkpoint", required=True, help="checkpoint with a spatial model")
    p.add_argument("--id", nargs="*", help="sequence ids to include (default all)")
    data(parsers["annstats"])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = effective_config(args)
        train_config(cfg), diffusion_config(cfg), synth_spec(cfg).check()
        for key, value in cfg.items():
            print(f"{key} = {value}", file=sys.stderr)
        torch.set_num_threads(1)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        handler = COMMANDS[args.command][0]
        results = handler(args, cfg, out)
        io.write_report(out / "report.json", {"command": args.command, **results}, cfg, cfg["seed"])
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"tsphase: error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"tsphase: error: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except (io.FormatError, PreconditionError, OSError, KeyError, ValueError) as exc:
        print(f"tsphase: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
