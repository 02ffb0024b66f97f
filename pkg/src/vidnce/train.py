"""Contrastive training loop, schedule, and checkpoint serialization.

One step: encode anchors with the trained encoder f, encode positives
with the momentum encoder g (no graph), normalize both, compute the
regime's loss against the memory bank, update f with SGD-momentum plus
weight decay, let g trail f, then enqueue the positives' g embeddings.
The bank is enqueued after the loss on purpose: a batch never competes
against its own rows.

All per-step randomness comes from counter-based substreams keyed by
(seed, stream, iteration), so training state is fully described by the
parameters, optimizer momenta, bank, and iteration counter. That is
exactly what the checkpoint stores, which makes resume bit-exact.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import AugmentConfig, BatchConfig, FrameStore, VideoRecord, sample_batch
from .encoder import EncoderConfig, EncoderParams, encode, init_params, param_shapes
from .moco import MemoryBank, init_momentum_encoder, momentum_update
from .nce import BatchLayout, NceConfig, build_pair_mask, memory_nce_loss, multi_pair_nce_loss
from .optim import SgdMomentum
from .tensor import NumericError, Tensor

CHECKPOINT_MAGIC = b"VINCECKP"
CHECKPOINT_VERSION = 1

REGIMES = ("same_frame", "multi_frame", "multi_pair")


class CheckpointFormatError(ValueError):
    """Checkpoint bytes that do not follow the container format."""


@dataclass(frozen=True)
class TrainConfig:
    regime: str = "multi_pair"
    num_videos: int | None = None  # default: 16 for multi_pair, 64 otherwise
    pairs_per_video: int | None = None  # default: 4 for multi_pair, 1 otherwise
    total_iterations: int = 20000
    lr: float = 0.03
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    encoder_momentum: float = 0.999
    temperature: float = 1.0 / 0.07
    memory_size: int = 4096
    lr_schedule: str = "constant"  # constant | cosine
    seed: int = 0
    checkpoint_every: int = 1000
    # None: drop same-video bank rows from the negatives only for the
    # same_frame baseline; True/False forces the behavior.
    exclude_same_video: bool | None = None
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    augment: AugmentConfig | None = None

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be constant or cosine, got {self.lr_schedule!r}")
        if self.total_iterations < 0:
            raise ValueError("total_iterations must be >= 0")
        if self.regime == "multi_pair" and self.resolved_pairs_per_video() < 2:
            raise ValueError("multi_pair needs pairs_per_video >= 2")
        if self.regime == "same_frame" and self.resolved_pairs_per_video() != 1:
            raise ValueError("same_frame pairs each frame with itself; pairs_per_video must be 1")
        if self.memory_size < 0:
            raise ValueError("memory_size must be >= 0")

    def resolved_num_videos(self) -> int:
        if self.num_videos is not None:
            return self.num_videos
        return 16 if self.regime == "multi_pair" else 64

    def resolved_pairs_per_video(self) -> int:
        if self.pairs_per_video is not None:
            return self.pairs_per_video
        return 4 if self.regime == "multi_pair" else 1

    def resolved_augment(self) -> AugmentConfig:
        if self.augment is not None:
            return self.augment
        return AugmentConfig(output_size=self.encoder.input_size)

    def resolved_exclusion(self) -> bool:
        if self.exclude_same_video is None:
            return self.regime == "same_frame"
        return self.exclude_same_video

    def batch_size(self) -> int:
        return self.resolved_num_videos() * self.resolved_pairs_per_video()


def lr_at(config: TrainConfig, iteration: int) -> float:
    """Learning rate for a 0-based iteration index."""
    if not 0 <= iteration < config.total_iterations:
        raise ValueError(f"iteration {iteration} outside [0, {config.total_iterations})")
    if config.lr_schedule == "constant":
        return config.lr
    return config.lr * 0.5 * (1.0 + float(np.cos(np.pi * iteration / config.total_iterations)))


@dataclass
class TrainState:
    config: TrainConfig
    f_params: EncoderParams
    g_params: EncoderParams
    optimizer: SgdMomentum
    bank: MemoryBank
    iteration: int = 0  # number of completed steps


def init_state(config: TrainConfig) -> TrainState:
    f_params = init_params(config.encoder, config.seed)
    g_params = init_momentum_encoder(f_params)
    optimizer = SgdMomentum(f_params.tensors, momentum=config.sgd_momentum, weight_decay=config.weight_decay)
    bank = MemoryBank(config.memory_size, config.encoder.embed_dim)
    return TrainState(config, f_params, g_params, optimizer, bank)


@dataclass
class StepMetrics:
    iteration: int
    lr: float
    loss: float
    wall_ms: float
    positive_scores: int


def train_step(state: TrainState, records: list[VideoRecord], store: FrameStore | None = None) -> StepMetrics:
    """Run one optimization step at state.iteration; advances the counter."""
    cfg = state.config
    step = state.iteration
    started = time.perf_counter()

    batch_cfg = BatchConfig(
        num_videos=cfg.resolved_num_videos(),
        pairs_per_video=cfg.resolved_pairs_per_video(),
        regime=cfg.regime,
        augment=cfg.resolved_augment(),
    )
    batch = sample_batch(records, batch_cfg, cfg.seed, step, store=store)
    nce_cfg = NceConfig(temperature=cfg.temperature)

    f_emb = T.l2_normalize_rows(encode(state.f_params, cfg.encoder, Tensor(batch.anchors)))
    with T.no_grad():
        g_emb = T.l2_normalize_rows(encode(state.g_params, cfg.encoder, Tensor(batch.positives)))

    exclude = batch.video_indices if cfg.resolved_exclusion() else None
    negatives = state.bank.negatives_view(exclude_video_ids=exclude)

    stats: dict = {}
    if cfg.regime == "multi_pair":
        layout = BatchLayout(
            num_videos=batch_cfg.num_videos,
            pairs_per_video=batch_cfg.pairs_per_video,
            memory_size=negatives.shape[0],
        )
        loss = multi_pair_nce_loss(f_emb, g_emb, negatives, build_pair_mask(layout), nce_cfg, stats=stats)
    else:
        loss = memory_nce_loss(f_emb, g_emb, negatives, nce_cfg)
        stats["positive_scores"] = f_emb.shape[0]

    loss_value = loss.item()
    if not np.isfinite(loss_value):
        raise NumericError(f"loss became non-finite at iteration {step}")

    state.optimizer.zero_grad()
    loss.backward()
    lr = lr_at(cfg, step)
    state.optimizer.step(lr)
    momentum_update(state.g_params, state.f_params, cfg.encoder_momentum)
    state.bank.enqueue(g_emb.data, batch.video_indices)

    state.iteration = step + 1
    wall_ms = (time.perf_counter() - started) * 1000.0
    return StepMetrics(step, lr, loss_value, wall_ms, stats["positive_scores"])


# -- checkpoint container ----------------------------------------------
#
# magic (8 bytes) | version u32 LE | header length u64 LE | header JSON
# (UTF-8, sorted keys) | concatenated float32 LE blobs in header order.


def _config_to_jsonable(config: TrainConfig) -> dict:
    out = dataclasses.asdict(config)
    out["encoder"]["trunk"] = [list(layer) for layer in config.encoder.trunk]
    if config.augment is not None:
        out["augment"]["crop_scale_range"] = list(config.augment.crop_scale_range)
    return out


def _config_from_jsonable(obj: dict) -> TrainConfig:
    obj = dict(obj)
    enc = dict(obj["encoder"])
    enc["trunk"] = tuple(tuple(layer) for layer in enc["trunk"])
    obj["encoder"] = EncoderConfig(**enc)
    if obj.get("augment") is not None:
        aug = dict(obj["augment"])
        aug["crop_scale_range"] = tuple(aug["crop_scale_range"])
        obj["augment"] = AugmentConfig(**aug)
    return TrainConfig(**obj)


def save_checkpoint(state: TrainState, path: str | os.PathLike) -> None:
    tensors: list[tuple[str, np.ndarray]] = []
    for name, t in state.f_params:
        tensors.append((f"f.{name}", t.data))
    for name, t in state.g_params:
        tensors.append((f"g.{name}", t.data))
    for name, buf in zip(state.f_params.names, state.optimizer.state_arrays()):
        tensors.append((f"opt.{name}", buf))
    tensors.append(("bank.buffer", state.bank.buffer))

    header = {
        "format_version": CHECKPOINT_VERSION,
        "iteration": state.iteration,
        "config": _config_to_jsonable(state.config),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
        "bank": {
            "capacity": state.bank.capacity,
            "dim": state.bank.dim,
            "write_cursor": state.bank.write_cursor,
            "filled": state.bank.filled,
            "video_tags": [int(x) for x in state.bank.video_tags],
        },
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    blob = fh.read(n)
    if len(blob) != n:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return blob


def load_checkpoint(path: str | os.PathLike) -> TrainState:
    """Parse a checkpoint; raises CheckpointFormatError before touching any state."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 8, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointFormatError("bad magic; not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<Q", _read_exact(fh, 8, "header length"))
        try:
            header = json.loads(_read_exact(fh, header_len, "header").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointFormatError(f"unreadable header: {e}") from None
        blobs: dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            shape = tuple(int(s) for s in entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, count * 4, f"tensor {entry['name']}")
            blobs[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        if fh.read(1):
            raise CheckpointFormatError("trailing bytes after declared tensors")

    config = _config_from_jsonable(header["config"])
    expected = [name for name, _ in param_shapes(config.encoder)]
    state = init_state(config)
    for prefix, params in (("f", state.f_params), ("g", state.g_params)):
        for name, t in params:
            key = f"{prefix}.{name}"
            if key not in blobs:
                raise CheckpointFormatError(f"missing tensor {key}")
            if blobs[key].shape != t.data.shape:
                raise CheckpointFormatError(f"tensor {key} has shape {blobs[key].shape}, expected {t.data.shape}")
            t.data[...] = blobs[key]
    state.optimizer.load_state_arrays([blobs[f"opt.{name}"] for name in expected])

    bank_info = header["bank"]
    bank = MemoryBank(int(bank_info["capacity"]), int(bank_info["dim"]))
    if blobs["bank.buffer"].shape != bank.buffer.shape:
        raise CheckpointFormatError("bank buffer shape mismatch")
    bank.buffer[...] = blobs["bank.buffer"]
    bank.video_tags[...] = np.asarray(bank_info["video_tags"], dtype=np.int64)
    bank.write_cursor = int(bank_info["write_cursor"])
    bank.filled = int(bank_info["filled"])
    state.bank = bank
    state.iteration = int(header["iteration"])
    return state


# -- loop --------------------------------------------------------------

# wall_ms stays out of the file on purpose: the CSV must come out
# byte-identical when a run is repeated or resumed, and timing never does.
METRICS_HEADER = "iteration,lr,loss"


def format_metrics_row(m: StepMetrics) -> str:
    return f"{m.iteration},{m.lr:.9g},{m.loss:.9g}"


def train_loop(
    config: TrainConfig,
    records: list[VideoRecord],
    out_dir: str | os.PathLike,
    resume_from: str | os.PathLike | None = None,
    log_every: int = 0,
) -> TrainState:
    """Train to config.total_iterations, writing metrics.csv and checkpoints."""
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    if resume_from is not None:
        state = load_checkpoint(resume_from)
        if state.config != config:
            raise ValueError("resume checkpoint was written under a different config")
    else:
        state = init_state(config)

    store = FrameStore()
    metrics_path = os.path.join(out_dir, "metrics.csv")
    fresh = state.iteration == 0 or not os.path.exists(metrics_path)
    if not fresh:
        # Steps from the resume point on are replayed, so drop their rows
        # first; the finished file then matches an uninterrupted run byte
        # for byte no matter where the previous run stopped.
        with open(metrics_path, "r", encoding="utf-8") as fh:
            lines = [ln for ln in fh.read().splitlines() if ln]
        rows = [ln for ln in lines if ln[0].isdigit() and int(ln.split(",", 1)[0]) < state.iteration]
        with open(metrics_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(METRICS_HEADER + "\n")
            for ln in rows:
                fh.write(ln + "\n")
    with open(metrics_path, "w" if fresh else "a", encoding="utf-8", newline="\n") as metrics:
        if fresh:
            metrics.write(METRICS_HEADER + "\n")
        while state.iteration < config.total_iterations:
            m = train_step(state, records, store=store)
            metrics.write(format_metrics_row(m) + "\n")
            if log_every and (m.iteration + 1) % log_every == 0:
                print(f"iter {m.iteration + 1}/{config.total_iterations} loss {m.loss:.4f}", flush=True)
            if config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
                save_checkpoint(state, os.path.join(out_dir, f"checkpoint_{state.iteration:07d}.ckpt"))
    save_checkpoint(state, os.path.join(out_dir, "checkpoint_final.ckpt"))
    return state
