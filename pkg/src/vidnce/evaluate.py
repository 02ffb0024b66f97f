"""Frozen-encoder evaluation: linear probes, retrieval, tracking, export."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import FrameStore, VideoRecord, resize_only
from .encoder import EncoderConfig, EncoderParams, encode, spatial_features
from .optim import Adam
from .rng import substream
from .tensor import DegenerateInputError, DimensionError, Tensor


# -- embeddings --------------------------------------------------------


@dataclass
class FrameEmbeddings:
    vectors: np.ndarray  # float32 [N, d], unit rows
    video_ids: list[str]  # length N
    frame_indices: np.ndarray  # int64 [N]
    labels: np.ndarray  # int64 [N], -1 where unlabeled


def embed_frames(
    params: EncoderParams,
    config: EncoderConfig,
    records: list[VideoRecord],
    batch_size: int = 64,
    store: FrameStore | None = None,
) -> FrameEmbeddings:
    """L2-normalized embeddings for every frame, resize-only preprocessing."""
    store = store or FrameStore()
    images: list[np.ndarray] = []
    video_ids: list[str] = []
    frame_indices: list[int] = []
    labels: list[int] = []
    for rec in records:
        for idx, path in enumerate(rec.frame_paths):
            images.append(resize_only(store.get(path), config.input_size).transpose(2, 0, 1))
            video_ids.append(rec.video_id)
            frame_indices.append(idx)
            labels.append(-1 if rec.label is None else rec.label)
    vectors = np.empty((len(images), config.embed_dim), dtype=np.float32)
    with T.no_grad():
        for ofs in range(0, len(images), batch_size):
            chunk = np.stack(images[ofs : ofs + batch_size])
            emb = T.l2_normalize_rows(encode(params, config, Tensor(chunk)))
            vectors[ofs : ofs + len(chunk)] = emb.data
    return FrameEmbeddings(vectors, video_ids, np.asarray(frame_indices, dtype=np.int64), np.asarray(labels, dtype=np.int64))


# -- linear probe ------------------------------------------------------


@dataclass(frozen=True)
class ProbeConfig:
    lr: float = 1e-3
    epochs: int = 120
    batch_size: int = 256
    seed: int = 0


@dataclass
class ProbeHead:
    weight: Tensor  # [d, classes]
    bias: Tensor  # [classes]

    def logits(self, vectors: np.ndarray) -> np.ndarray:
        return vectors @ self.weight.data + self.bias.data

    def predict(self, vectors: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(vectors), axis=1)


def _softmax_ce(head: ProbeHead, x: np.ndarray, onehot: np.ndarray) -> Tensor:
    n = x.shape[0]
    xt = Tensor(x)
    logits = T.add(
        T.matmul(xt, head.weight),
        T.matmul(Tensor(np.ones((n, 1), dtype=np.float32)), T.reshape(head.bias, (1, head.bias.shape[0]))),
    )
    row_max = np.max(logits.data, axis=1, keepdims=True)
    shifted = T.sub(logits, Tensor(np.broadcast_to(row_max, logits.shape).copy()))
    lse = T.add(T.log(T.reduce_sum(T.exp(shifted), axis=1)), Tensor(row_max.reshape(n)))
    target = T.reduce_sum(T.mul(logits, Tensor(onehot)), axis=1)
    return T.reduce_mean(T.sub(lse, target))


def train_linear_probe(
    vectors: np.ndarray,
    labels: np.ndarray,
    num_classes: int | None = None,
    config: ProbeConfig = ProbeConfig(),
) -> ProbeHead:
    """Fit a softmax linear classifier on frozen embeddings with Adam.

    Needs at least two distinct labels; a single class has no decision
    boundary to fit.
    """
    vectors = np.asarray(vectors, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if vectors.ndim != 2 or vectors.shape[0] != labels.shape[0]:
        raise DimensionError(f"vectors {vectors.shape} and labels {labels.shape} do not line up")
    distinct = np.unique(labels)
    if distinct.size < 2:
        raise DegenerateInputError("probe needs at least two distinct labels")
    if np.any(distinct < 0):
        raise ValueError("labels must be non-negative")
    classes = int(num_classes if num_classes is not None else distinct.max() + 1)
    d = vectors.shape[1]

    gen = substream(config.seed, "probe")
    head = ProbeHead(
        weight=Tensor(gen.uniform(-0.01, 0.01, size=(d, classes)).astype(np.float32), requires_grad=True),
        bias=Tensor(np.zeros(classes, dtype=np.float32), requires_grad=True),
    )
    onehot_all = np.zeros((labels.shape[0], classes), dtype=np.float32)
    onehot_all[np.arange(labels.shape[0]), labels] = 1.0

    optimizer = Adam([head.weight, head.bias], lr=config.lr)
    n = vectors.shape[0]
    for _ in range(config.epochs):
        order = gen.permutation(n)
        for ofs in range(0, n, config.batch_size):
            idx = order[ofs : ofs + config.batch_size]
            optimizer.zero_grad()
            loss = _softmax_ce(head, vectors[idx], onehot_all[idx])
            loss.backward()
            optimizer.step()
    return head


def probe_accuracy(head: ProbeHead, vectors: np.ndarray, labels: np.ndarray) -> float:
    pred = head.predict(np.asarray(vectors, dtype=np.float32))
    return float(np.mean(pred == np.asarray(labels)))


def split_by_video(
    emb: FrameEmbeddings, holdout_fraction: float = 0.2, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Row masks (train, heldout) that never split a video across sides."""
    if not 0.0 < holdout_fraction < 1.0:
        raise ValueError("holdout_fraction must be in (0, 1)")
    ids = sorted(set(emb.video_ids))
    gen = substream(seed, "split")
    perm = gen.permutation(len(ids))
    n_held = max(1, int(round(holdout_fraction * len(ids))))
    held = {ids[i] for i in perm[:n_held]}
    held_mask = np.asarray([vid in held for vid in emb.video_ids])
    return ~held_mask, held_mask


def video_mean_embeddings(emb: FrameEmbeddings) -> tuple[np.ndarray, list[str], np.ndarray]:
    """Mean-pooled frame embedding per video: (vectors, video_ids, labels)."""
    order: list[str] = []
    seen: set[str] = set()
    for vid in emb.video_ids:
        if vid not in seen:
            seen.add(vid)
            order.append(vid)
    idx = {vid: i for i, vid in enumerate(order)}
    sums = np.zeros((len(order), emb.vectors.shape[1]), dtype=np.float64)
    counts = np.zeros(len(order), dtype=np.int64)
    labels = np.full(len(order), -1, dtype=np.int64)
    for row, vid in enumerate(emb.video_ids):
        i = idx[vid]
        sums[i] += emb.vectors[row]
        counts[i] += 1
        labels[i] = emb.labels[row]
    vectors = (sums / counts[:, None]).astype(np.float32)
    return vectors, order, labels


# -- retrieval ---------------------------------------------------------


@dataclass
class RetrievalResult:
    neighbors: list[tuple[str, int, float]]  # (video_id, frame_index, similarity)
    truncated: bool


def knn_retrieve(query: np.ndarray, emb: FrameEmbeddings, k: int) -> RetrievalResult:
    """Top-k cosine neighbors, at most one frame per video.

    Within a video the best frame wins; ties anywhere break toward the
    lower video id, then the lower frame index. Asking for more
    neighbors than there are distinct videos returns a truncated,
    flagged list.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    query = np.asarray(query, dtype=np.float32).reshape(-1)
    if query.shape[0] != emb.vectors.shape[1]:
        raise DimensionError(f"query dim {query.shape[0]} != corpus dim {emb.vectors.shape[1]}")
    sims = emb.vectors @ query

    best: dict[str, tuple[float, int, float]] = {}
    for row, vid in enumerate(emb.video_ids):
        s = float(sims[row])
        fi = int(emb.frame_indices[row])
        cur = best.get(vid)
        if cur is None or s > cur[0] or (s == cur[0] and fi < cur[1]):
            best[vid] = (s, fi, s)
    ranked = sorted(best.items(), key=lambda kv: (-kv[1][0], kv[0], kv[1][1]))
    neighbors = [(vid, fi, s) for vid, (s, fi, _) in ranked[:k]]
    return RetrievalResult(neighbors, truncated=len(neighbors) < k)


# -- tracking ----------------------------------------------------------


@dataclass
class Box:
    """Axis-aligned box, center-based, in pixel units."""

    cx: float
    cy: float
    w: float
    h: float

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)


def box_iou(a: Box, b: Box) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def center_error(a: Box, b: Box) -> float:
    return float(np.hypot(a.cx - b.cx, a.cy - b.cy))


@dataclass(frozen=True)
class TrackConfig:
    template_size: int = 32
    search_size: int = 64
    # Context multiples of the box side: the template crop doubles the
    # box, the search region quadruples it, so the object renders at the
    # same pixels-per-box scale in both (32/2 == 64/4).
    template_context: float = 2.0
    search_context: float = 4.0
    scale_candidates: tuple[float, ...] = (0.96, 1.0, 1.04)

    def __post_init__(self):
        if self.template_size < 1 or self.search_size < self.template_size:
            raise ValueError("need search_size >= template_size >= 1")
        if not self.scale_candidates:
            raise ValueError("need at least one scale candidate")


def _crop_resized(frame: np.ndarray, cx: float, cy: float, side: float, out_size: int) -> np.ndarray:
    """Square crop centered at (cx, cy), edge-replicated out of bounds, resized."""
    h, w = frame.shape[:2]
    half = side / 2.0
    x0, x1 = int(round(cx - half)), int(round(cx + half))
    y0, y1 = int(round(cy - half)), int(round(cy + half))
    x1, y1 = max(x1, x0 + 1), max(y1, y0 + 1)
    pad_l, pad_t = max(0, -x0), max(0, -y0)
    pad_r, pad_b = max(0, x1 - w), max(0, y1 - h)
    region = frame[max(0, y0) : min(h, y1), max(0, x0) : min(w, x1)]
    if pad_l or pad_t or pad_r or pad_b:
        region = np.pad(region, ((pad_t, pad_b), (pad_l, pad_r), (0, 0)), mode="edge")
    return resize_only(region.astype(np.uint8), out_size)


def _features(params: EncoderParams, config: EncoderConfig, image: np.ndarray) -> np.ndarray:
    # Tracking reuses the trunk at crop resolution, so build a matching view of the config.
    cfg = EncoderConfig(
        input_channels=config.input_channels,
        input_size=image.shape[0],
        trunk=config.trunk,
        hidden_dim=config.hidden_dim,
        embed_dim=config.embed_dim,
        leaky_slope=config.leaky_slope,
    )
    with T.no_grad():
        feats = spatial_features(params, cfg, Tensor(image.transpose(2, 0, 1)[None]))
    return feats.data[0]


def siamfc_track(
    params: EncoderParams,
    enc_config: EncoderConfig,
    frames: list[np.ndarray],
    init_box: Box,
    config: TrackConfig = TrackConfig(),
) -> list[Box]:
    """Track init_box through frames by cross-correlating trunk features.

    The first output box is the init box itself. Each subsequent frame
    scores a few scale candidates of the search region; the argmax of
    the correlation response (upsampled by the trunk stride) moves the
    center, and the winning candidate rescales the box.
    """
    if not frames:
        raise ValueError("need at least one frame")
    if init_box.w <= 0 or init_box.h <= 0:
        raise ValueError("init box must have positive size")
    stride = enc_config.total_stride()

    first = frames[0]
    side_t = max(init_box.w, init_box.h) * config.template_context
    template = _crop_resized(first, init_box.cx, init_box.cy, side_t, config.template_size)
    t_feat = _features(params, enc_config, template)  # [c, th, tw]
    kernel = Tensor(t_feat[None])  # [1, c, th, tw]

    boxes = [Box(init_box.cx, init_box.cy, init_box.w, init_box.h)]
    for frame in frames[1:]:
        prev = boxes[-1]
        h, w = frame.shape[:2]
        best = None  # (score, cand, dx, dy)
        for cand in config.scale_candidates:
            side_s = max(prev.w, prev.h) * config.search_context * cand
            search = _crop_resized(frame, prev.cx, prev.cy, side_s, config.search_size)
            s_feat = _features(params, enc_config, search)
            with T.no_grad():
                resp = T.conv2d(Tensor(s_feat[None]), kernel).data[0, 0]
            flat = int(np.argmax(resp))
            score = float(resp.reshape(-1)[flat])
            ry, rx = np.unravel_index(flat, resp.shape)
            center_y = (resp.shape[0] - 1) / 2.0
            center_x = (resp.shape[1] - 1) / 2.0
            px_per_cell = stride * side_s / config.search_size
            dx = (rx - center_x) * px_per_cell
            dy = (ry - center_y) * px_per_cell
            if best is None or score > best[0]:
                best = (score, cand, dx, dy)
        _, cand, dx, dy = best
        bw = min(prev.w * cand, float(w))
        bh = min(prev.h * cand, float(h))
        cx = float(np.clip(prev.cx + dx, bw / 2, w - bw / 2))
        cy = float(np.clip(prev.cy + dy, bh / 2, h - bh / 2))
        boxes.append(Box(cx, cy, bw, bh))
    return boxes


# -- tracking metrics --------------------------------------------------

PRECISION_THRESHOLDS = 51  # 0..50 reference pixels
SUCCESS_THRESHOLDS = 101  # IoU 0..1


@dataclass
class TrackMetrics:
    precision_curve: list[float]  # length 51
    success_curve: list[float]  # length 101
    precision_auc: float
    success_auc: float


def otb_metrics(predicted: list[Box], ground_truth: list[Box]) -> TrackMetrics:
    """Precision and success curves in the usual one-pass-evaluation style.

    Center errors are normalized by the ground-truth diagonal and
    expressed in pixels of a 100-pixel-diagonal reference, so thresholds
    0..50 mean the same thing for every sequence. Success counts frames
    with IoU >= threshold, except at threshold 0 where only strictly
    positive overlap counts. AUC is the plain mean of the curve.
    """
    if len(predicted) != len(ground_truth):
        raise DimensionError(f"{len(predicted)} predictions vs {len(ground_truth)} ground-truth boxes")
    if not predicted:
        raise DegenerateInputError("cannot score an empty sequence")
    errors = []
    ious = []
    for p, g in zip(predicted, ground_truth):
        diag = float(np.hypot(g.w, g.h))
        if diag <= 0:
            raise DegenerateInputError("ground-truth box has no extent")
        errors.append(center_error(p, g) / diag * 100.0)
        ious.append(box_iou(p, g))
    n = len(errors)

    precision_curve = []
    for t in range(PRECISION_THRESHOLDS):
        precision_curve.append(sum(1 for e in errors if e <= t) / n)
    success_curve = []
    for i in range(SUCCESS_THRESHOLDS):
        t = i / (SUCCESS_THRESHOLDS - 1)
        if i == 0:
            success_curve.append(sum(1 for v in ious if v > 0.0) / n)
        else:
            success_curve.append(sum(1 for v in ious if v >= t) / n)
    return TrackMetrics(
        precision_curve=precision_curve,
        success_curve=success_curve,
        precision_auc=sum(precision_curve) / len(precision_curve),
        success_auc=sum(success_curve) / len(success_curve),
    )


# -- export ------------------------------------------------------------


def export_embeddings(emb: FrameEmbeddings, path: str | os.PathLike) -> None:
    """CSV with one row per frame: video_id, frame_index, embedding columns.

    Floats are written with %.9g, enough to round-trip float32, so equal
    embeddings always serialize to identical bytes.
    """
    d = emb.vectors.shape[1]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["video_id", "frame_index"] + [f"e{i}" for i in range(d)])
        for row in range(emb.vectors.shape[0]):
            writer.writerow(
                [emb.video_ids[row], int(emb.frame_indices[row])]
                + [f"{x:.9g}" for x in emb.vectors[row]]
            )
