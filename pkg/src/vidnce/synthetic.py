"""Procedural video corpus with class-coded objects and per-video nuisances.

Each class owns a shape and one of four base hues, with two classes per
hue; background texture, object size, trajectory, spin, saturation and
brightness are per-video nuisances. Frames animate the object with
bounded per-frame motion, so frames of one video are near each other in
pose while videos of one class share only hue and silhouette.

Quantizing the hue wheel this hard is deliberate. Color narrows a frame
to a pair of classes at best, so a classifier reading nothing but the
palette stalls at half accuracy, and dozens of videos share each hue
exactly, so color cannot tell instances apart either; both the probe
and the contrastive objective are pushed onto geometry. Everything is
drawn from named substreams of one seed, and frames are written as
binary PPM, so a corpus is byte-reproducible.
"""

from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass

import numpy as np

from .data import VideoRecord, write_manifest, write_ppm
from .rng import substream


@dataclass(frozen=True)
class SyntheticConfig:
    num_classes: int = 8
    videos_per_class: int = 50
    frames_per_video: int = 4
    image_size: int = 64
    seed: int = 0
    # The first static_classes classes repeat their initial frame verbatim.
    static_classes: int = 0

    def __post_init__(self):
        if self.num_classes < 1 or self.videos_per_class < 1 or self.frames_per_video < 1:
            raise ValueError("num_classes, videos_per_class, frames_per_video must be >= 1")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        if not 0 <= self.static_classes <= self.num_classes:
            raise ValueError("static_classes must be in [0, num_classes]")


_SHAPE_NAMES = ("disk", "square", "crescent", "ring", "cross", "triangle", "bar", "twin_bars")

_HUE_LEVELS = 4


def class_hue(class_index: int) -> float:
    """Base hue of a class: one of four wheel quarters, reused every four classes."""
    return (class_index % _HUE_LEVELS) / _HUE_LEVELS

# Speed range in pixels per frame keeps inter-frame motion bounded but
# large enough that frames of one video differ clearly in object pose.
_SPEED_RANGE = (2.5, 5.5)
_SPIN_RANGE = (-0.2, 0.2)  # radians per frame
_SCALE_DRIFT_RANGE = (-0.04, 0.04)  # relative radius change per frame
# Shapes start near a canonical orientation; no pair of classes is a
# rotated copy of another, so the accumulated spin never makes two
# silhouettes ambiguous.
_TILT_RANGE = (-0.15, 0.15)


def _shape_distance(name: str, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    """Signed-distance-like field: negative inside the shape."""
    if name == "disk":
        return np.hypot(dx, dy) - r
    if name == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) - r
    if name == "crescent":
        # full disk minus an offset cut disk, opening to the right
        body = np.hypot(dx, dy) - 1.05 * r
        cut = np.hypot(dx - 0.55 * r, dy) - 0.85 * r
        return np.maximum(body, -cut)
    if name == "ring":
        return np.abs(np.hypot(dx, dy) - 0.8 * r) - 0.32 * r
    if name == "cross":
        arm = 0.38 * r
        horiz = np.maximum(np.abs(dx) - r, np.abs(dy) - arm)
        vert = np.maximum(np.abs(dx) - arm, np.abs(dy) - r)
        return np.minimum(horiz, vert)
    if name == "triangle":
        # Equilateral, apex up: intersection of three half planes.
        top = -dy - r
        left = 0.866 * dx + 0.5 * dy - 0.5 * r
        right = -0.866 * dx + 0.5 * dy - 0.5 * r
        return np.maximum(np.maximum(left, right), top)
    if name == "bar":
        return np.maximum(np.abs(dx) - 1.1 * r, np.abs(dy) - 0.38 * r)
    if name == "twin_bars":
        a = np.maximum(np.abs(dx - 0.55 * r) - 0.26 * r, np.abs(dy) - r)
        b = np.maximum(np.abs(dx + 0.55 * r) - 0.26 * r, np.abs(dy) - r)
        return np.minimum(a, b)
    raise ValueError(f"unknown shape {name!r}")


def _background(gen: np.random.Generator, size: int) -> np.ndarray:
    """Per-video smooth texture: low-resolution noise blown up bilinearly."""
    base = float(gen.uniform(0.18, 0.42))
    coarse = gen.uniform(-0.09, 0.09, size=(5, 5, 3)).astype(np.float32)
    ys = np.linspace(0, 4, size, dtype=np.float32)
    xs = np.linspace(0, 4, size, dtype=np.float32)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, 4)
    x1 = np.minimum(x0 + 1, 4)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = coarse[y0][:, x0] * (1 - wx) + coarse[y0][:, x1] * wx
    bot = coarse[y1][:, x0] * (1 - wx) + coarse[y1][:, x1] * wx
    return np.clip(base + top * (1 - wy) + bot * wy, 0.0, 1.0)


def _render(
    size: int,
    bg: np.ndarray,
    color: np.ndarray,
    cx: float,
    cy: float,
    radius: float,
    angle: float,
    shape: str,
) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    dx = xx - cx
    dy = yy - cy
    ca, sa = np.cos(angle), np.sin(angle)
    rx = ca * dx + sa * dy
    ry = -sa * dx + ca * dy
    dist = _shape_distance(shape, rx, ry, radius)
    mask = np.clip(0.5 - dist / 1.5, 0.0, 1.0)[:, :, None]
    img = bg * (1.0 - mask) + color[None, None, :] * mask
    return (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def render_video(config: SyntheticConfig, class_index: int, video_index: int) -> list[np.ndarray]:
    """All frames of one video as uint8 arrays."""
    gen = substream(config.seed, "synthetic", class_index, video_index)
    size = config.image_size
    shape = _SHAPE_NAMES[class_index % len(_SHAPE_NAMES)]

    bg = _background(gen, size)
    sat = float(gen.uniform(0.72, 0.95))
    val = float(gen.uniform(0.75, 0.95))
    color = np.asarray(colorsys.hsv_to_rgb(class_hue(class_index), sat, val), dtype=np.float32)

    radius = size * float(gen.uniform(0.14, 0.20))
    margin = radius + 2.0
    cx = float(gen.uniform(margin, size - margin))
    cy = float(gen.uniform(margin, size - margin))
    theta = float(gen.uniform(0.0, 2.0 * np.pi))
    speed = float(gen.uniform(*_SPEED_RANGE))
    vx, vy = speed * np.cos(theta), speed * np.sin(theta)
    angle = float(gen.uniform(*_TILT_RANGE))
    spin = float(gen.uniform(*_SPIN_RANGE))
    drift = float(gen.uniform(*_SCALE_DRIFT_RANGE))

    static = class_index < config.static_classes
    frames = []
    r = radius
    for t in range(config.frames_per_video):
        frames.append(_render(size, bg, color, cx, cy, r, angle, shape))
        if static:
            continue
        cx += vx
        cy += vy
        # bounce off the walls to keep the object in frame
        if cx < margin or cx > size - margin:
            vx = -vx
            cx = float(np.clip(cx, margin, size - margin))
        if cy < margin or cy > size - margin:
            vy = -vy
            cy = float(np.clip(cy, margin, size - margin))
        angle += spin
        r = float(np.clip(r * (1.0 + drift), size * 0.10, size * 0.24))
    if static:
        frames = [frames[0].copy() for _ in range(config.frames_per_video)]
    return frames


def generate_corpus(out_dir: str | os.PathLike, config: SyntheticConfig) -> list[VideoRecord]:
    """Write frames and a labeled manifest; returns the records."""
    out_dir = os.fspath(out_dir)
    frames_root = os.path.join(out_dir, "videos")
    os.makedirs(frames_root, exist_ok=True)
    records: list[VideoRecord] = []
    for c in range(config.num_classes):
        for v in range(config.videos_per_class):
            video_id = f"c{c:02d}_v{v:03d}"
            vdir = os.path.join(frames_root, video_id)
            os.makedirs(vdir, exist_ok=True)
            paths = []
            for t, frame in enumerate(render_video(config, c, v)):
                path = os.path.join(vdir, f"frame_{t:03d}.ppm")
                write_ppm(path, frame)
                paths.append(path)
            records.append(VideoRecord(video_id, paths, label=c))
    write_manifest(records, os.path.join(out_dir, "manifest.jsonl"))
    return records
