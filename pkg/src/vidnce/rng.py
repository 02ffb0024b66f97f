"""Named random substreams derived from one master seed.

Every stochastic choice in the pipeline draws from its own Philox
counter-based generator keyed by (master seed, stream tag, extra
indices). Streams are therefore independent of each other and of how
many values any other stream consumed, which is what makes runs
resumable and regimes comparable under a shared seed.
"""

from __future__ import annotations

import zlib

import numpy as np

_STREAM_TAGS = {
    "init": 1,
    "videos": 2,
    "frames": 3,
    "aug_anchor": 4,
    "aug_positive": 5,
    "synthetic": 6,
    "curation": 7,
    "probe": 8,
    "split": 9,
}


def substream(seed: int, name: str, *indices: int) -> np.random.Generator:
    """Generator for the given stream name and optional position indices."""
    if name not in _STREAM_TAGS:
        raise KeyError(f"unknown stream name {name!r}")
    entropy = (int(seed), _STREAM_TAGS[name], *(int(i) for i in indices))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def stable_id(text: str) -> int:
    """Deterministic 32-bit integer for a string, stable across runs."""
    return zlib.crc32(text.encode("utf-8"))
