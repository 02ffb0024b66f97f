"""Noise-contrastive losses over embedding batches.

Three variants, all built on temperature-scaled cosine logits
s[i, j] = temperature * <a_i, b_j> for unit-norm rows:

* batch_nce_loss: softmax cross-entropy of each anchor against the whole
  positive batch (the matching column sits on the diagonal).
* memory_nce_loss: each anchor competes only against its own positive
  plus an external bank of negatives.
* multi_pair_nce_loss: video-major batches where each anchor scores
  every positive of its own video separately; the competing set per row
  is everything outside the row's video block (other videos' columns
  plus the bank), so each of the n rows sees exactly n + m - k
  negatives.

All three are numerically stabilized by subtracting the per-row max
logit before exponentiation (the max is taken over positives and
negatives jointly and treated as a constant). The bank never receives
gradient; multi_pair additionally detaches the positive side, matching
a momentum-encoded comparison branch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DegenerateInputError, DimensionError, Tensor

DEFAULT_TEMPERATURE = 1.0 / 0.07

# Preconditions want unit rows. The strict tolerance guards the public
# similarity op; losses use a looser sanity bound so that finite-difference
# probes (which nudge raw coordinates) remain inside the contract.
STRICT_NORM_TOL = 1e-4
LOOSE_NORM_TOL = 5e-2


class NormalizationError(ValueError):
    """Rows were supposed to be unit length and are not."""


@dataclass(frozen=True)
class NceConfig:
    # Multiplier applied to cosine similarities (not a divisor).
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if not np.isfinite(self.temperature) or self.temperature <= 0:
            raise ValueError("temperature must be a positive finite multiplier")


@dataclass(frozen=True)
class BatchLayout:
    """Video-major batch geometry: v videos, k anchor/positive pairs each."""

    num_videos: int
    pairs_per_video: int
    memory_size: int = 0

    def __post_init__(self):
        if self.num_videos < 1:
            raise ValueError("num_videos must be >= 1")
        if self.pairs_per_video < 1:
            raise ValueError("pairs_per_video must be >= 1")
        if self.memory_size < 0:
            raise ValueError("memory_size must be >= 0")

    @property
    def batch_size(self) -> int:
        return self.num_videos * self.pairs_per_video


def _row_norms(data: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.square(data, dtype=np.float64), axis=1))


def _require_unit_rows(data: np.ndarray, tol: float, what: str) -> None:
    if data.ndim != 2:
        raise DimensionError(f"{what} must be 2-d, got shape {data.shape}")
    if data.shape[0] == 0:
        return
    err = np.max(np.abs(_row_norms(data) - 1.0))
    if err > tol:
        raise NormalizationError(f"{what} rows must be unit length (max deviation {err:.2e} > {tol:g})")


def similarity_matrix(a: Tensor, b: Tensor, config: NceConfig = NceConfig()) -> Tensor:
    """Temperature-scaled cosine similarities [len(a), len(b)].

    Both inputs must already be row-normalized (checked to 1e-4); this op
    scales dot products, it does not normalize for the caller.
    """
    _require_unit_rows(a.data, STRICT_NORM_TOL, "anchor")
    _require_unit_rows(b.data, STRICT_NORM_TOL, "comparison")
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"embedding dims differ: {a.shape} vs {b.shape}")
    return T.mul(T.matmul(a, T.transpose(b)), config.temperature)


def _paired_logits(anchors: Tensor, positives: Tensor, temperature: float) -> Tensor:
    # Diagonal of the full similarity matrix, computed directly: [n]
    return T.mul(T.reduce_sum(T.mul(anchors, positives), axis=1), temperature)


def _check_pair_batch(anchors: Tensor, positives: Tensor) -> int:
    if anchors.ndim != 2 or positives.ndim != 2:
        raise DimensionError("anchors and positives must be 2-d")
    if anchors.shape != positives.shape:
        raise DimensionError(f"anchors {anchors.shape} and positives {positives.shape} must match")
    n = anchors.shape[0]
    if n < 2:
        raise DegenerateInputError("contrastive batches need at least 2 rows")
    _require_unit_rows(anchors.data, LOOSE_NORM_TOL, "anchor")
    _require_unit_rows(positives.data, LOOSE_NORM_TOL, "positive")
    return n


def batch_nce_loss(anchors: Tensor, positives: Tensor, config: NceConfig = NceConfig()) -> Tensor:
    """Batch-softmax NCE: -mean_i log(exp(s_ii) / sum_j exp(s_ij)).

    The denominator runs over every positive column, the matching one
    included. Gradients flow to both anchors and positives.
    """
    n = _check_pair_batch(anchors, positives)
    logits = T.mul(T.matmul(anchors, T.transpose(positives)), config.temperature)  # [n, n]

    row_max = np.max(logits.data, axis=1, keepdims=True)  # constant for stabilization
    shifted = T.sub(logits, Tensor(np.broadcast_to(row_max, logits.shape).copy(), dtype=logits.dtype))
    lse = T.add(
        T.log(T.reduce_sum(T.exp(shifted), axis=1)),
        Tensor(row_max.reshape(n), dtype=logits.dtype),
    )
    eye = Tensor(np.eye(n, dtype=logits.data.dtype))
    matching = T.reduce_sum(T.mul(logits, eye), axis=1)
    loss = T.reduce_mean(T.sub(lse, matching))
    return T.check_finite(loss, "batch NCE loss")


def memory_nce_loss(
    anchors: Tensor,
    positives: Tensor,
    bank: Tensor | np.ndarray,
    config: NceConfig = NceConfig(),
) -> Tensor:
    """Bank NCE: -mean_i log(exp(s_i+) / (exp(s_i+) + sum_j exp(s(a_i, bank_j)))).

    Only the anchor's own positive and the bank enter the denominator;
    other in-batch rows do not compete. An empty bank makes every score 1
    and the loss exactly 0. Bank rows never receive gradient.
    """
    n = _check_pair_batch(anchors, positives)
    bank_data = bank.data if isinstance(bank, Tensor) else np.asarray(bank, dtype=anchors.data.dtype)
    if bank_data.ndim != 2 or (bank_data.shape[0] > 0 and bank_data.shape[1] != anchors.shape[1]):
        raise DimensionError(f"bank shape {bank_data.shape} incompatible with embeddings {anchors.shape}")
    if bank_data.shape[0] > 0:
        _require_unit_rows(bank_data, LOOSE_NORM_TOL, "bank")
    m = bank_data.shape[0]

    pos = _paired_logits(anchors, positives, config.temperature)  # [n]
    bank_const = Tensor(np.ascontiguousarray(bank_data.T), dtype=anchors.dtype)
    neg = T.mul(T.matmul(anchors, bank_const), config.temperature)  # [n, m]

    bank_max = np.max(neg.data, axis=1, initial=-np.inf)
    row_max = np.maximum(pos.data, bank_max)  # constant [n]
    max_vec = Tensor(row_max, dtype=pos.dtype)
    pos_shift = T.exp(T.sub(pos, max_vec))
    if m > 0:
        max_full = Tensor(np.repeat(row_max[:, None], m, axis=1), dtype=pos.dtype)
        neg_sum = T.reduce_sum(T.exp(T.sub(neg, max_full)), axis=1)
        denom = T.add(pos_shift, neg_sum)
    else:
        denom = pos_shift
    per_row = T.sub(T.add(T.log(denom), max_vec), pos)
    loss = T.reduce_mean(per_row)
    return T.check_finite(loss, "memory NCE loss")


def build_pair_mask(layout: BatchLayout) -> np.ndarray:
    """Boolean [n, n + m] marking anchor-positive matches, video-major.

    Row i belongs to video block i // k and matches exactly the k
    positive columns of that block; memory columns are never matches.
    """
    v, k, m = layout.num_videos, layout.pairs_per_video, layout.memory_size
    n = layout.batch_size
    mask = np.zeros((n, n + m), dtype=bool)
    block = np.kron(np.eye(v, dtype=bool), np.ones((k, k), dtype=bool))
    mask[:, :n] = block
    return mask


def _validate_mask(mask: np.ndarray, n: int, total: int) -> int:
    if mask.dtype != np.bool_ or mask.shape != (n, total):
        raise DimensionError(f"mask must be bool [{n}, {total}], got {mask.dtype} {mask.shape}")
    row_sums = mask.sum(axis=1)
    k = int(row_sums[0])
    if k < 1 or not np.all(row_sums == k):
        raise DimensionError("mask rows must mark the same positive count k >= 1")
    return k


def multi_pair_nce_loss(
    f_out: Tensor,
    g_out: Tensor | np.ndarray,
    bank: Tensor | np.ndarray,
    mask: np.ndarray,
    config: NceConfig = NceConfig(),
    stats: dict | None = None,
):
    """Multi-pair NCE over a video-major batch.

    Each masked (anchor, positive) cell is scored against the row's
    unmasked cells: score = exp(pos) / (exp(pos) + sum_row_negatives),
    loss = -mean(log score) over all n*k masked cells. The other k - 1
    positives of the same video never appear in the denominator.

    Gradient flows through f_out only; g_out and the bank are treated as
    constants. Pass a dict as ``stats`` to receive instrumentation
    (positive-score and per-row negative counts).
    """
    if f_out.ndim != 2:
        raise DimensionError(f"f_out must be 2-d, got {f_out.shape}")
    n, d = f_out.shape
    g_data = g_out.data if isinstance(g_out, Tensor) else np.asarray(g_out, dtype=f_out.data.dtype)
    bank_data = bank.data if isinstance(bank, Tensor) else np.asarray(bank, dtype=f_out.data.dtype)
    if bank_data.size == 0:
        bank_data = bank_data.reshape(0, d)
    if g_data.shape != (n, d):
        raise DimensionError(f"g_out shape {g_data.shape} must match f_out {f_out.shape}")
    if bank_data.ndim != 2 or (bank_data.shape[0] > 0 and bank_data.shape[1] != d):
        raise DimensionError(f"bank shape {bank_data.shape} incompatible with embeddings [{n}, {d}]")
    _require_unit_rows(f_out.data, LOOSE_NORM_TOL, "f_out")
    _require_unit_rows(g_data, LOOSE_NORM_TOL, "g_out")
    if bank_data.shape[0] > 0:
        _require_unit_rows(bank_data, LOOSE_NORM_TOL, "bank")

    m = bank_data.shape[0]
    total = n + m
    k = _validate_mask(mask, n, total)
    if np.any(mask[:, n:]):
        raise DimensionError("memory columns cannot be marked as positives")

    compare = Tensor(np.ascontiguousarray(np.concatenate([g_data, bank_data], axis=0).T), dtype=f_out.dtype)
    logits = T.mul(T.matmul(f_out, compare), config.temperature)  # [n, total]

    # Stabilize against the per-row max over positives and negatives jointly.
    row_max = np.max(logits.data, axis=1, keepdims=True)
    shifted = T.sub(logits, Tensor(np.broadcast_to(row_max, logits.shape).copy(), dtype=logits.dtype))
    expd = T.exp(shifted)

    neg_flags = Tensor((~mask).astype(logits.data.dtype))
    neg_sum = T.reduce_sum(T.mul(expd, neg_flags), axis=1)  # [n]
    ones_row = Tensor(np.ones((1, total), dtype=logits.data.dtype))
    neg_sum_full = T.matmul(T.reshape(neg_sum, (n, 1)), ones_row)  # [n, total]

    log_score = T.sub(shifted, T.log(T.add(expd, neg_sum_full)))
    pos_flags = Tensor(mask.astype(logits.data.dtype))
    total_log_score = T.reduce_sum(T.mul(log_score, pos_flags))
    loss = T.mul(total_log_score, -1.0 / (n * k))

    if stats is not None:
        stats["positive_scores"] = n * k
        stats["negatives_per_row"] = total - k
        stats["batch_rows"] = n
        stats["memory_rows"] = m
    return T.check_finite(loss, "multi-pair NCE loss")
