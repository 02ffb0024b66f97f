"""Video corpora on disk: PPM frames, JSON-lines manifests, curation,
augmentation, and batch assembly for the contrastive trainer."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .rng import stable_id, substream
from .tensor import DimensionError


class ManifestError(ValueError):
    """Manifest file that violates the record schema."""


class FrameFormatError(ValueError):
    """Frame file that is not 8-bit binary RGB PPM."""


class InsufficientFramesError(ValueError):
    """Video too short for the requested extraction pattern."""


# -- PPM (P6) ----------------------------------------------------------


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Load an 8-bit binary PPM as uint8 [h, w, 3]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P6"):
        raise FrameFormatError(f"{path}: not a P6 PPM file")

    # Header tokens may be separated by arbitrary whitespace and comments.
    tokens: list[int] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FrameFormatError(f"{path}: truncated PPM header")
        try:
            tokens.append(int(blob[start:pos]))
        except ValueError:
            raise FrameFormatError(f"{path}: malformed PPM header token {blob[start:pos]!r}") from None
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = tokens
    if width < 1 or height < 1:
        raise FrameFormatError(f"{path}: non-positive dimensions {width}x{height}")
    if maxval != 255:
        raise FrameFormatError(f"{path}: only maxval 255 supported, got {maxval}")
    expected = width * height * 3
    raster = blob[pos : pos + expected]
    if len(raster) != expected:
        raise FrameFormatError(f"{path}: raster has {len(raster)} bytes, expected {expected}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise FrameFormatError(f"write_ppm needs uint8 [h, w, 3], got {image.dtype} {image.shape}")
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


# -- manifest ----------------------------------------------------------


@dataclass
class VideoRecord:
    video_id: str
    frame_paths: list[str]
    label: int | None = None


def load_manifest(path: str | os.PathLike, check_files: bool = True) -> list[VideoRecord]:
    """Parse a JSON-lines manifest; frame paths are relative to the manifest."""
    base = os.path.dirname(os.path.abspath(path))
    records: list[VideoRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({e})") from None
            if not isinstance(obj, dict) or not {"video_id", "frames"} <= obj.keys():
                raise ManifestError(f"{path}:{lineno}: record needs video_id and frames")
            vid = obj["video_id"]
            frames = obj["frames"]
            label = obj.get("label")
            if not isinstance(vid, str) or not vid:
                raise ManifestError(f"{path}:{lineno}: video_id must be a non-empty string")
            if vid in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate video_id {vid!r}")
            seen.add(vid)
            if not isinstance(frames, list) or not frames or not all(isinstance(f, str) for f in frames):
                raise ManifestError(f"{path}:{lineno}: frames must be a non-empty list of paths")
            if label is not None and not isinstance(label, int):
                raise ManifestError(f"{path}:{lineno}: label must be an integer or null")
            paths = [os.path.join(base, f) for f in frames]
            if check_files:
                for p in paths:
                    if not os.path.isfile(p):
                        raise ManifestError(f"{path}:{lineno}: missing frame file {p}")
            records.append(VideoRecord(vid, paths, label))
    return records


def write_manifest(records: list[VideoRecord], path: str | os.PathLike) -> None:
    """Write records as JSON lines with frame paths relative to the manifest."""
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            rel = [os.path.relpath(p, base) for p in rec.frame_paths]
            fh.write(json.dumps({"video_id": rec.video_id, "frames": rel, "label": rec.label}))
            fh.write("\n")


class FrameStore:
    """Decoded-frame cache; desk-scale corpora fit in memory comfortably."""

    def __init__(self):
        self._cache: dict[str, np.ndarray] = {}

    def get(self, path: str) -> np.ndarray:
        img = self._cache.get(path)
        if img is None:
            img = read_ppm(path)
            self._cache[path] = img
        return img


# -- curation ----------------------------------------------------------


@dataclass(frozen=True)
class CurationConfig:
    frames_per_video: int = 4
    frame_gap: int = 5
    static_threshold: float = 0.05
    change_epsilon: float = 10.0

    def __post_init__(self):
        if self.frames_per_video < 1 or self.frame_gap < 1:
            raise ValueError("frames_per_video and frame_gap must be >= 1")
        if not 0.0 <= self.static_threshold <= 1.0:
            raise ValueError("static_threshold must be in [0, 1]")
        if self.change_epsilon < 0:
            raise ValueError("change_epsilon must be >= 0")


def filter_static(frame_a: np.ndarray, frame_b: np.ndarray, config: CurationConfig) -> bool:
    """True (keep) iff enough pixels changed between the two frames.

    A pixel counts as changed when its largest per-channel absolute
    difference exceeds change_epsilon; the video is kept iff the changed
    fraction is >= static_threshold (boundary kept).
    """
    if frame_a.shape != frame_b.shape:
        raise DimensionError(f"frames must share a shape, got {frame_a.shape} vs {frame_b.shape}")
    diff = np.abs(frame_a.astype(np.int16) - frame_b.astype(np.int16)).max(axis=-1)
    changed = float(np.mean(diff > config.change_epsilon))
    return changed >= config.static_threshold


def extract_gap_frames(num_frames: int, config: CurationConfig, seed) -> list[int]:
    """Indices start, start + G, ... start + (T-1)*G with a uniform random start."""
    t, g = config.frames_per_video, config.frame_gap
    span = (t - 1) * g
    if num_frames < span + 1:
        raise InsufficientFramesError(f"need at least {span + 1} frames for T={t}, G={g}, have {num_frames}")
    gen = seed if isinstance(seed, np.random.Generator) else np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    start = int(gen.integers(0, num_frames - span))
    return [start + i * g for i in range(t)]


@dataclass
class CurationResult:
    kept: list[VideoRecord]
    dropped: list[tuple[str, str]]  # (video_id, reason)

    @property
    def total(self) -> int:
        return len(self.kept) + len(self.dropped)


def curate_videos(
    records: list[VideoRecord],
    config: CurationConfig,
    seed: int,
    store: FrameStore | None = None,
) -> CurationResult:
    """Gap-extract and static-filter a corpus.

    A video that already has exactly frames_per_video frames is taken
    as-is (no start index is drawn), which makes curation idempotent on
    its own output. The static filter compares the first and last of the
    extracted frames.
    """
    store = store or FrameStore()
    kept: list[VideoRecord] = []
    dropped: list[tuple[str, str]] = []
    for rec in records:
        n = len(rec.frame_paths)
        t = config.frames_per_video
        if n == t:
            indices = list(range(t))
        else:
            try:
                indices = extract_gap_frames(
                    n, config, substream(seed, "curation", stable_id(rec.video_id))
                )
            except InsufficientFramesError:
                dropped.append((rec.video_id, "too_short"))
                continue
        paths = [rec.frame_paths[i] for i in indices]
        first = store.get(paths[0])
        last = store.get(paths[-1])
        if not filter_static(first, last, config):
            dropped.append((rec.video_id, "static"))
            continue
        kept.append(VideoRecord(rec.video_id, paths, rec.label))
    return CurationResult(kept, dropped)


# -- augmentation ------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    output_size: int = 64
    crop_scale_range: tuple[float, float] = (0.6, 1.0)
    flip_prob: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError("crop_scale_range must satisfy 0 < lo <= hi <= 1")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must be in [0, 1]")
        if self.output_size < 1:
            raise ValueError("output_size must be >= 1")
        for name in ("brightness", "contrast", "saturation"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} jitter must be in [0, 1)")


# Sampling grids depend only on the size pair, and batches reuse a
# handful of crop sizes thousands of times, so the grids are cached.
_RESIZE_GRIDS: dict[tuple[int, int, int, int], tuple] = {}


def _resize_grid(h: int, w: int, out_h: int, out_w: int) -> tuple:
    key = (h, w, out_h, out_w)
    grid = _RESIZE_GRIDS.get(key)
    if grid is None:
        ys = (np.arange(out_h, dtype=np.float32) + 0.5) * (h / out_h) - 0.5
        xs = (np.arange(out_w, dtype=np.float32) + 0.5) * (w / out_w) - 0.5
        ys = np.clip(ys, 0.0, h - 1.0)
        xs = np.clip(xs, 0.0, w - 1.0)
        y0 = np.floor(ys).astype(np.int64)
        x0 = np.floor(xs).astype(np.int64)
        y1 = np.minimum(y0 + 1, h - 1)
        x1 = np.minimum(x0 + 1, w - 1)
        wy = (ys - y0).astype(np.float32)[:, None, None]
        wx = (xs - x0).astype(np.float32)[None, :, None]
        grid = (y0[:, None], y1[:, None], x0[None, :], x1[None, :], wy, wx)
        if len(_RESIZE_GRIDS) >= 512:
            _RESIZE_GRIDS.clear()
        _RESIZE_GRIDS[key] = grid
    return grid


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize float32 [h, w, c] with half-pixel-centered bilinear sampling."""
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return image.astype(np.float32, copy=True)
    y0, y1, x0, x1, wy, wx = _resize_grid(h, w, out_h, out_w)
    img = image.astype(np.float32, copy=False)
    top = img[y0, x0] * (1 - wx) + img[y0, x1] * wx
    bot = img[y1, x0] * (1 - wx) + img[y1, x1] * wx
    return top * (1 - wy) + bot * wy


def flip_horizontal(image: np.ndarray) -> np.ndarray:
    """Mirror width-wise; applying it twice restores the input."""
    return image[:, ::-1].copy()


def augment(image: np.ndarray, config: AugmentConfig, rng) -> np.ndarray:
    """Random resized crop, maybe flip, then photometric jitter.

    Takes uint8 [h, w, 3], returns float32 [out, out, 3] in [0, 1]. The
    rng argument is either an integer seed or a numpy Generator; all
    randomness comes from it, so equal seeds give equal outputs.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(f"augment needs [h, w, 3] images, got {image.shape}")
    gen = rng if isinstance(rng, np.random.Generator) else np.random.Generator(np.random.Philox(np.random.SeedSequence(int(rng))))
    h, w = image.shape[:2]

    # Square crop whose area is a uniform fraction of the source area.
    scale = float(gen.uniform(config.crop_scale_range[0], config.crop_scale_range[1]))
    side = int(round(np.sqrt(scale) * min(h, w)))
    side = max(1, min(side, h, w))
    if side < 1:
        raise DimensionError("crop collapsed below one pixel")
    top = int(gen.integers(0, h - side + 1))
    left = int(gen.integers(0, w - side + 1))
    crop = image[top : top + side, left : left + side].astype(np.float32) / 255.0

    out = bilinear_resize(crop, config.output_size, config.output_size)

    if float(gen.random()) < config.flip_prob:
        out = flip_horizontal(out)

    if config.brightness:
        out = out * float(gen.uniform(1.0 - config.brightness, 1.0 + config.brightness))
    if config.contrast:
        factor = float(gen.uniform(1.0 - config.contrast, 1.0 + config.contrast))
        mean = out.mean(dtype=np.float32)
        out = (out - mean) * factor + mean
    if config.saturation:
        factor = float(gen.uniform(1.0 - config.saturation, 1.0 + config.saturation))
        gray = out.mean(axis=2, keepdims=True, dtype=np.float32)
        out = gray + (out - gray) * factor

    return np.clip(out, 0.0, 1.0, out=out)


# -- batch sampling ----------------------------------------------------


@dataclass(frozen=True)
class BatchConfig:
    num_videos: int
    pairs_per_video: int
    regime: str  # same_frame | multi_frame | multi_pair
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.regime not in ("same_frame", "multi_frame", "multi_pair"):
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.num_videos < 1 or self.pairs_per_video < 1:
            raise ValueError("num_videos and pairs_per_video must be >= 1")


@dataclass
class Batch:
    anchors: np.ndarray  # float32 [n, 3, s, s]
    positives: np.ndarray  # float32 [n, 3, s, s]
    video_ids: list[str]  # length n, video-major
    video_indices: np.ndarray  # int64 [n], indices into the record list
    anchor_frames: np.ndarray  # int64 [n]
    positive_frames: np.ndarray  # int64 [n]


def sample_batch(
    records: list[VideoRecord],
    config: BatchConfig,
    seed: int,
    step: int,
    store: FrameStore | None = None,
) -> Batch:
    """Assemble one video-major contrastive batch for the given step.

    Videos are drawn without replacement; frame indices within a video
    are drawn with replacement. In same_frame mode each anchor frame is
    paired with itself; otherwise the positive frame is an independent
    draw from the same video. Video selection, frame selection, and the
    two augmentation sides each use their own seed substream, so regimes
    that share a seed visit the same videos.
    """
    v, k = config.num_videos, config.pairs_per_video
    if v > len(records):
        raise ValueError(f"batch wants {v} videos but the corpus has {len(records)}")
    store = store or FrameStore()

    video_rng = substream(seed, "videos", step)
    frame_rng = substream(seed, "frames", step)
    aug_anchor_rng = substream(seed, "aug_anchor", step)
    aug_positive_rng = substream(seed, "aug_positive", step)
    chosen = video_rng.choice(len(records), size=v, replace=False)

    n = v * k
    size = config.augment.output_size
    anchors = np.empty((n, 3, size, size), dtype=np.float32)
    positives = np.empty((n, 3, size, size), dtype=np.float32)
    video_ids: list[str] = []
    video_indices = np.empty(n, dtype=np.int64)
    anchor_frames = np.empty(n, dtype=np.int64)
    positive_frames = np.empty(n, dtype=np.int64)

    row = 0
    for vid_idx in chosen:
        rec = records[int(vid_idx)]
        t = len(rec.frame_paths)
        a_idx = frame_rng.integers(0, t, size=k)
        if config.regime == "same_frame":
            p_idx = a_idx.copy()
        else:
            p_idx = frame_rng.integers(0, t, size=k)
        for j in range(k):
            a_img = store.get(rec.frame_paths[int(a_idx[j])])
            p_img = store.get(rec.frame_paths[int(p_idx[j])])
            a_aug = augment(a_img, config.augment, aug_anchor_rng)
            p_aug = augment(p_img, config.augment, aug_positive_rng)
            anchors[row] = a_aug.transpose(2, 0, 1)
            positives[row] = p_aug.transpose(2, 0, 1)
            video_ids.append(rec.video_id)
            video_indices[row] = int(vid_idx)
            anchor_frames[row] = int(a_idx[j])
            positive_frames[row] = int(p_idx[j])
            row += 1

    return Batch(anchors, positives, video_ids, video_indices, anchor_frames, positive_frames)


def resize_only(image: np.ndarray, output_size: int) -> np.ndarray:
    """Deterministic eval-time preprocessing: scale to [0,1] and resize."""
    img = image.astype(np.float32) / 255.0
    return bilinear_resize(img, output_size, output_size)
