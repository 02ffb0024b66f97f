"""Command-line surface: generate, curate, train, eval, knn, track, export.

Every command takes its settings from built-in defaults, then an
optional JSON config file, then explicit flags, in that order. The
fully resolved mapping is echoed into the output directory as
config.json so a run can be replayed from its artifacts alone.

VINCE_THREADS caps the BLAS thread pools. It must take effect before
numpy first loads, which is why the cap is applied at the top of this
module, ahead of every numeric import.
"""

from __future__ import annotations

import os


def _apply_thread_cap() -> None:
    raw = os.environ.get("VINCE_THREADS", "").strip()
    if not raw:
        return
    try:
        cap = int(raw)
    except ValueError:
        return
    if cap < 1:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, str(cap))


_apply_thread_cap()

import argparse
import hashlib
import json
import sys

import numpy as np

from .data import (
    CurationConfig,
    ManifestError,
    curate_videos,
    load_manifest,
    read_ppm,
    write_manifest,
)
from .encoder import EncoderConfig
from .evaluate import (
    Box,
    ProbeConfig,
    TrackConfig,
    embed_frames,
    export_embeddings,
    knn_retrieve,
    otb_metrics,
    probe_accuracy,
    siamfc_track,
    split_by_video,
    train_linear_probe,
    video_mean_embeddings,
)
from .synthetic import SyntheticConfig, generate_corpus
from .train import TrainConfig, load_checkpoint, train_loop


# -- argument helpers --------------------------------------------------


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {value}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {value}")
    return value


def _box_arg(text: str) -> list[float]:
    parts = text.split(",")
    if len(parts) != 4:
        raise argparse.ArgumentTypeError("box must be cx,cy,w,h")
    values = [float(p) for p in parts]
    if values[2] <= 0 or values[3] <= 0:
        raise argparse.ArgumentTypeError("box width and height must be positive")
    return values


def _scales_arg(text: str) -> list[float]:
    values = [float(p) for p in text.split(",") if p.strip()]
    if not values or any(v <= 0 for v in values):
        raise argparse.ArgumentTypeError("scales must be a comma list of positive numbers")
    return values


def _trunk_arg(text: str) -> list[list[int]]:
    layers = []
    for part in text.split(","):
        fields = part.split(":")
        if len(fields) != 3:
            raise argparse.ArgumentTypeError("trunk layers look like channels:kernel:stride")
        layers.append([int(f) for f in fields])
        if any(v < 1 for v in layers[-1]):
            raise argparse.ArgumentTypeError("trunk layer values must be positive")
    return layers


# -- config resolution -------------------------------------------------

_DEFAULTS: dict[str, dict] = {
    "generate": {
        "classes": 8,
        "videos_per_class": 50,
        "frames": 4,
        "image_size": 64,
        "static_classes": 0,
        "seed": 0,
    },
    "curate": {
        "frames": 4,
        "gap": 5,
        "static_threshold": 0.05,
        "change_epsilon": 10.0,
        "seed": 0,
    },
    "train": {
        "regime": "multi_pair",
        "num_videos": None,
        "pairs_per_video": None,
        "iterations": 20000,
        "lr": 0.03,
        "lr_schedule": "constant",
        "sgd_momentum": 0.9,
        "weight_decay": 1e-4,
        "encoder_momentum": 0.999,
        "temperature": 1.0 / 0.07,
        "memory_size": 4096,
        "checkpoint_every": 1000,
        "exclude_same_video": "auto",
        "input_size": 64,
        "trunk": [[16, 3, 2], [32, 3, 2], [64, 3, 2]],
        "hidden_dim": 128,
        "embed_dim": 32,
        "seed": 0,
        "log_every": 0,
    },
    "eval": {
        "holdout": 0.2,
        "probe_epochs": 120,
        "probe_lr": 1e-3,
        "probe_batch_size": 256,
        "seed": 0,
    },
    "knn": {"k": 5},
    "track": {
        "template_size": 32,
        "search_size": 64,
        "scales": [0.96, 1.0, 1.04],
    },
    "export": {},
}


def _resolve_config(command: str, args: argparse.Namespace) -> dict:
    """defaults < json file < explicit flags."""
    resolved = dict(_DEFAULTS[command])
    config_path = getattr(args, "config", None)
    if config_path:
        with open(config_path, "r", encoding="utf-8") as fh:
            loaded = json.load(fh)
        if not isinstance(loaded, dict):
            raise ValueError("config file must hold a JSON object")
        section = loaded.get(command, loaded)
        if not isinstance(section, dict):
            raise ValueError(f"config section {command!r} must be a JSON object")
        unknown = set(section) - set(resolved) - set(_DEFAULTS)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        resolved.update({k: v for k, v in section.items() if k in _DEFAULTS[command]})
    for key in _DEFAULTS[command]:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _echo_config(out_dir: str, command: str, resolved: dict, extra: dict | None = None) -> None:
    payload = {"command": command, **resolved}
    if extra:
        payload.update(extra)
    _write_json(os.path.join(out_dir, "config.json"), payload)


def _load_encoder(checkpoint: str):
    state = load_checkpoint(checkpoint)
    return state, state.f_params, state.config.encoder, _sha256(checkpoint)


# -- commands ----------------------------------------------------------


def cmd_generate(args: argparse.Namespace) -> int:
    cfg = _resolve_config("generate", args)
    os.makedirs(args.out, exist_ok=True)
    synth = SyntheticConfig(
        num_classes=cfg["classes"],
        videos_per_class=cfg["videos_per_class"],
        frames_per_video=cfg["frames"],
        image_size=cfg["image_size"],
        seed=cfg["seed"],
        static_classes=cfg["static_classes"],
    )
    records = generate_corpus(args.out, synth)
    _echo_config(args.out, "generate", cfg)
    print(f"wrote {len(records)} videos ({len(records) * cfg['frames']} frames) under {args.out}")
    return 0


def cmd_curate(args: argparse.Namespace) -> int:
    cfg = _resolve_config("curate", args)
    records = load_manifest(args.manifest)
    if not records:
        raise ManifestError(f"no videos listed in {args.manifest}")
    curation = CurationConfig(
        frames_per_video=cfg["frames"],
        frame_gap=cfg["gap"],
        static_threshold=cfg["static_threshold"],
        change_epsilon=cfg["change_epsilon"],
    )
    result = curate_videos(records, curation, cfg["seed"])
    os.makedirs(args.out, exist_ok=True)
    write_manifest(result.kept, os.path.join(args.out, "manifest.jsonl"))
    reasons: dict[str, int] = {}
    for _, reason in result.dropped:
        reasons[reason] = reasons.get(reason, 0) + 1
    _write_json(
        os.path.join(args.out, "curation.json"),
        {
            "kept": len(result.kept),
            "dropped": len(result.dropped),
            "total": result.total,
            "reasons": reasons,
            "dropped_videos": [list(item) for item in result.dropped],
        },
    )
    _echo_config(args.out, "curate", cfg)
    print(f"kept {len(result.kept)} dropped {len(result.dropped)} of {result.total}")
    if not result.kept:
        print("warning: curation dropped every video", file=sys.stderr)
    return 0


def _train_config_from(cfg: dict) -> TrainConfig:
    exclusion = {"auto": None, "on": True, "off": False}[cfg["exclude_same_video"]]
    encoder = EncoderConfig(
        input_size=cfg["input_size"],
        trunk=tuple(tuple(layer) for layer in cfg["trunk"]),
        hidden_dim=cfg["hidden_dim"],
        embed_dim=cfg["embed_dim"],
    )
    return TrainConfig(
        regime=cfg["regime"],
        num_videos=cfg["num_videos"],
        pairs_per_video=cfg["pairs_per_video"],
        total_iterations=cfg["iterations"],
        lr=cfg["lr"],
        sgd_momentum=cfg["sgd_momentum"],
        weight_decay=cfg["weight_decay"],
        encoder_momentum=cfg["encoder_momentum"],
        temperature=cfg["temperature"],
        memory_size=cfg["memory_size"],
        lr_schedule=cfg["lr_schedule"],
        seed=cfg["seed"],
        checkpoint_every=cfg["checkpoint_every"],
        exclude_same_video=exclusion,
        encoder=encoder,
    )


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve_config("train", args)
    records = load_manifest(args.manifest)
    if not records:
        raise ManifestError(f"no videos listed in {args.manifest}")
    if args.resume:
        config = load_checkpoint(args.resume).config
    else:
        config = _train_config_from(cfg)
    os.makedirs(args.out, exist_ok=True)
    state = train_loop(config, records, args.out, resume_from=args.resume, log_every=cfg["log_every"])
    final = os.path.join(args.out, "checkpoint_final.ckpt")
    _echo_config(args.out, "train", cfg, {"manifest": args.manifest, "resume": args.resume})
    print(f"finished at iteration {state.iteration}; final checkpoint sha256 {_sha256(final)}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _resolve_config("eval", args)
    state, params, encoder, ckpt_hash = _load_encoder(args.checkpoint)
    records = load_manifest(args.manifest)
    if any(rec.label is None for rec in records):
        raise ManifestError("probe evaluation needs labels on every video")
    emb = embed_frames(params, encoder, records)
    train_mask, held_mask = split_by_video(emb, cfg["holdout"], cfg["seed"])
    probe_cfg = ProbeConfig(
        lr=cfg["probe_lr"],
        epochs=cfg["probe_epochs"],
        batch_size=cfg["probe_batch_size"],
        seed=cfg["seed"],
    )
    num_classes = int(emb.labels.max()) + 1

    frame_head = train_linear_probe(emb.vectors[train_mask], emb.labels[train_mask], num_classes, probe_cfg)
    frame_top1 = probe_accuracy(frame_head, emb.vectors[held_mask], emb.labels[held_mask])

    vid_vectors, vid_ids, vid_labels = video_mean_embeddings(emb)
    held_videos = set(np.array(emb.video_ids)[held_mask])
    vid_held = np.asarray([vid in held_videos for vid in vid_ids])
    video_head = train_linear_probe(vid_vectors[~vid_held], vid_labels[~vid_held], num_classes, probe_cfg)
    video_top1 = probe_accuracy(video_head, vid_vectors[vid_held], vid_labels[vid_held])

    os.makedirs(args.out, exist_ok=True)
    _write_json(
        os.path.join(args.out, "metrics.json"),
        {
            "frame_top1": frame_top1,
            "video_top1": video_top1,
            "num_classes": num_classes,
            "num_frames_train": int(train_mask.sum()),
            "num_frames_heldout": int(held_mask.sum()),
            "num_videos_heldout": int(vid_held.sum()),
            "checkpoint_sha256": ckpt_hash,
            "checkpoint_iteration": state.iteration,
        },
    )
    _echo_config(args.out, "eval", cfg, {"checkpoint": args.checkpoint, "manifest": args.manifest})
    print(f"frame top-1 {frame_top1:.4f}  video top-1 {video_top1:.4f}  classes {num_classes}")
    return 0


def cmd_knn(args: argparse.Namespace) -> int:
    cfg = _resolve_config("knn", args)
    state, params, encoder, ckpt_hash = _load_encoder(args.checkpoint)
    records = load_manifest(args.manifest)
    emb = embed_frames(params, encoder, records)
    row = None
    for i, (vid, fi) in enumerate(zip(emb.video_ids, emb.frame_indices)):
        if vid == args.query_video and int(fi) == args.query_frame:
            row = i
            break
    if row is None:
        raise ValueError(f"frame {args.query_frame} of video {args.query_video!r} is not in the manifest")
    result = knn_retrieve(emb.vectors[row], emb, cfg["k"])
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "neighbors.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("rank,video_id,frame_index,similarity\n")
        for rank, (vid, fi, sim) in enumerate(result.neighbors, start=1):
            fh.write(f"{rank},{vid},{fi},{sim:.9g}\n")
    _write_json(
        os.path.join(args.out, "knn.json"),
        {
            "query_video": args.query_video,
            "query_frame": args.query_frame,
            "k": cfg["k"],
            "returned": len(result.neighbors),
            "truncated": result.truncated,
            "checkpoint_sha256": ckpt_hash,
            "checkpoint_iteration": state.iteration,
        },
    )
    _echo_config(args.out, "knn", cfg, {"checkpoint": args.checkpoint, "manifest": args.manifest})
    print(f"returned {len(result.neighbors)} neighbors (truncated: {result.truncated})")
    return 0


def _load_boxes_csv(path: str) -> list[Box]:
    boxes = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        try:
            cx, cy, w, h = (header.index(k) for k in ("cx", "cy", "w", "h"))
        except ValueError:
            raise ValueError(f"{path} needs a header with cx,cy,w,h columns") from None
        for line in fh:
            if not line.strip():
                continue
            parts = line.strip().split(",")
            boxes.append(Box(float(parts[cx]), float(parts[cy]), float(parts[w]), float(parts[h])))
    return boxes


def cmd_track(args: argparse.Namespace) -> int:
    cfg = _resolve_config("track", args)
    state, params, encoder, ckpt_hash = _load_encoder(args.checkpoint)
    names = sorted(n for n in os.listdir(args.frames_dir) if n.endswith(".ppm"))
    if not names:
        raise ValueError(f"no .ppm frames under {args.frames_dir}")
    frames = [read_ppm(os.path.join(args.frames_dir, n)) for n in names]
    init = Box(*args.init_box)
    track_cfg = TrackConfig(
        template_size=cfg["template_size"],
        search_size=cfg["search_size"],
        scale_candidates=tuple(cfg["scales"]),
    )
    boxes = siamfc_track(params, encoder, frames, init, track_cfg)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "boxes.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("frame,cx,cy,w,h\n")
        for i, b in enumerate(boxes):
            fh.write(f"{i},{b.cx:.9g},{b.cy:.9g},{b.w:.9g},{b.h:.9g}\n")
    payload = {
        "frames": len(frames),
        "checkpoint_sha256": ckpt_hash,
        "checkpoint_iteration": state.iteration,
    }
    if args.gt_boxes:
        gt = _load_boxes_csv(args.gt_boxes)
        metrics = otb_metrics(boxes, gt)
        payload.update(
            {
                "precision_auc": metrics.precision_auc,
                "success_auc": metrics.success_auc,
                "precision_curve": metrics.precision_curve,
                "success_curve": metrics.success_curve,
            }
        )
        print(f"precision_auc {metrics.precision_auc:.4f}  success_auc {metrics.success_auc:.4f}")
    else:
        print(f"tracked {len(frames)} frames")
    _write_json(os.path.join(args.out, "metrics.json"), payload)
    _echo_config(args.out, "track", cfg, {"checkpoint": args.checkpoint, "frames_dir": args.frames_dir})
    return 0


def cmd_export(args: argparse.Namespace) -> int:
    cfg = _resolve_config("export", args)
    state, params, encoder, ckpt_hash = _load_encoder(args.checkpoint)
    records = load_manifest(args.manifest)
    emb = embed_frames(params, encoder, records)
    os.makedirs(args.out, exist_ok=True)
    export_embeddings(emb, os.path.join(args.out, "embeddings.csv"))
    _write_json(
        os.path.join(args.out, "export.json"),
        {
            "rows": int(emb.vectors.shape[0]),
            "dim": int(emb.vectors.shape[1]),
            "checkpoint_sha256": ckpt_hash,
            "checkpoint_iteration": state.iteration,
        },
    )
    _echo_config(args.out, "export", cfg, {"checkpoint": args.checkpoint, "manifest": args.manifest})
    print(f"exported {emb.vectors.shape[0]} rows of dim {emb.vectors.shape[1]}")
    return 0


# -- parser ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vidnce", description="Video contrastive learning pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, *, out_required: bool = True) -> None:
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("generate", help="render a synthetic labeled video corpus")
    common(p)
    p.add_argument("--classes", type=_positive_int)
    p.add_argument("--videos-per-class", type=_positive_int)
    p.add_argument("--frames", type=_positive_int)
    p.add_argument("--image-size", type=_positive_int)
    p.add_argument("--static-classes", type=_nonneg_int)
    p.add_argument("--seed", type=_nonneg_int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("curate", help="drop short or static videos, pick spaced frames")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--frames", type=_positive_int, help="frames to keep per video")
    p.add_argument("--gap", type=_positive_int, help="spacing between kept frames")
    p.add_argument("--static-threshold", type=float)
    p.add_argument("--change-epsilon", type=float)
    p.add_argument("--seed", type=_nonneg_int)
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("train", help="run the contrastive training loop")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--resume", help="checkpoint to continue from (its config wins)")
    p.add_argument("--regime", choices=("same_frame", "multi_frame", "multi_pair"))
    p.add_argument("--num-videos", type=_positive_int)
    p.add_argument("--pairs-per-video", type=_positive_int)
    p.add_argument("--iterations", type=_nonneg_int)
    p.add_argument("--lr", type=_positive_float)
    p.add_argument("--lr-schedule", choices=("constant", "cosine"))
    p.add_argument("--sgd-momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--encoder-momentum", type=float)
    p.add_argument("--temperature", type=_positive_float)
    p.add_argument("--memory-size", type=_nonneg_int)
    p.add_argument("--checkpoint-every", type=_nonneg_int)
    p.add_argument("--exclude-same-video", choices=("auto", "on", "off"))
    p.add_argument("--input-size", type=_positive_int)
    p.add_argument("--trunk", type=_trunk_arg, help="layers as channels:kernel:stride, comma separated")
    p.add_argument("--hidden-dim", type=_positive_int)
    p.add_argument("--embed-dim", type=_positive_int)
    p.add_argument("--seed", type=_nonneg_int)
    p.add_argument("--log-every", type=_nonneg_int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="linear probes on frozen embeddings")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--holdout", type=float)
    p.add_argument("--probe-epochs", type=_positive_int)
    p.add_argument("--probe-lr", type=_positive_float)
    p.add_argument("--probe-batch-size", type=_positive_int)
    p.add_argument("--seed", type=_nonneg_int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("knn", help="nearest-neighbor frame retrieval")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--query-video", required=True)
    p.add_argument("--query-frame", type=_nonneg_int, default=0)
    p.add_argument("--k", type=_positive_int)
    p.set_defaults(func=cmd_knn)

    p = sub.add_parser("track", help="correlation tracking over a frame directory")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames-dir", required=True)
    p.add_argument("--init-box", type=_box_arg, required=True, help="cx,cy,w,h on the first frame")
    p.add_argument("--gt-boxes", help="CSV of ground-truth boxes to score against")
    p.add_argument("--template-size", type=_positive_int)
    p.add_argument("--search-size", type=_positive_int)
    p.add_argument("--scales", type=_scales_arg)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("export", help="write all frame embeddings to CSV")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_export)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, ArithmeticError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
