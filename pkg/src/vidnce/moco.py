"""Momentum twin encoder state and a FIFO ring buffer of negatives.

The comparison encoder g trails the trained encoder f through an
exponential moving average and is never part of any gradient graph. Its
outputs feed a fixed-capacity ring buffer; readers only ever see the
filled prefix, so a warming-up bank never leaks zero rows into a loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import EncoderParams
from .nce import _require_unit_rows, STRICT_NORM_TOL


class CapacityError(ValueError):
    """More rows offered than the bank can hold in one call."""


@dataclass
class MocoState:
    f_params: EncoderParams
    g_params: EncoderParams
    momentum: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")


def init_momentum_encoder(f_params: EncoderParams) -> EncoderParams:
    """Start g as an exact copy of f, detached from all gradients."""
    return f_params.clone(requires_grad=False)


def momentum_update(g_params: EncoderParams, f_params: EncoderParams, momentum: float) -> None:
    """g <- momentum * g + (1 - momentum) * f, in place, parameter by parameter."""
    if g_params.names != f_params.names:
        raise ValueError("encoder parameter sets do not line up")
    mom = np.float32(momentum)
    one_minus = np.float32(1.0 - momentum)
    for g, f in zip(g_params.tensors, f_params.tensors):
        if g.data.shape != f.data.shape:
            raise ValueError(f"parameter shape mismatch {g.data.shape} vs {f.data.shape}")
        g.data *= mom
        g.data += one_minus * f.data


class MemoryBank:
    """Fixed-capacity FIFO of unit-norm embedding rows with video tags.

    Writes wrap around; reads snapshot the filled prefix so later
    enqueues cannot mutate what a caller already holds.
    """

    def __init__(self, capacity: int, dim: int, dtype=np.float32):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.buffer = np.zeros((self.capacity, self.dim), dtype=dtype)
        self.video_tags = np.full(self.capacity, -1, dtype=np.int64)
        self.write_cursor = 0
        self.filled = 0

    def enqueue(self, rows: np.ndarray, video_ids: np.ndarray | None = None) -> None:
        rows = np.asarray(rows, dtype=self.buffer.dtype)
        if rows.ndim != 2 or rows.shape[1] != self.dim:
            raise ValueError(f"rows must be [b, {self.dim}], got {rows.shape}")
        b = rows.shape[0]
        if b > self.capacity:
            raise CapacityError(f"cannot enqueue {b} rows into a bank of capacity {self.capacity}")
        if b == 0:
            return
        _require_unit_rows(rows, STRICT_NORM_TOL, "bank rows")
        if video_ids is None:
            tags = np.full(b, -1, dtype=np.int64)
        else:
            tags = np.asarray(video_ids, dtype=np.int64)
            if tags.shape != (b,):
                raise ValueError(f"video_ids must have shape ({b},), got {tags.shape}")

        end = self.write_cursor + b
        if end <= self.capacity:
            self.buffer[self.write_cursor : end] = rows
            self.video_tags[self.write_cursor : end] = tags
        else:
            first = self.capacity - self.write_cursor
            self.buffer[self.write_cursor :] = rows[:first]
            self.video_tags[self.write_cursor :] = tags[:first]
            self.buffer[: b - first] = rows[first:]
            self.video_tags[: b - first] = tags[first:]
        self.write_cursor = end % self.capacity
        self.filled = min(self.filled + b, self.capacity)

    def negatives_view(self, exclude_video_ids=None) -> np.ndarray:
        """Detached copy of the filled rows, optionally dropping tagged videos.

        During warm-up only the filled prefix is returned; unwritten
        slots never appear.
        """
        rows = self.buffer[: self.filled].copy()
        if exclude_video_ids is None:
            return rows
        excl = np.asarray(list(exclude_video_ids), dtype=np.int64)
        keep = ~np.isin(self.video_tags[: self.filled], excl)
        return rows[keep]

    def state(self) -> dict:
        return {
            "capacity": self.capacity,
            "dim": self.dim,
            "write_cursor": self.write_cursor,
            "filled": self.filled,
        }
