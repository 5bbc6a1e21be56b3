"""Permutation-invariant BCE and the intermediate-label aggregate."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from eend import nncore as nn
from eend.nncore import Tensor

BCE_EPS = 1e-7
MAX_SPEAKERS = 8


@dataclass
class PitResult:
    loss: Tensor
    # best_permutation[c] is the reference row matched to output row c
    best_permutation: tuple[int, ...]

    @property
    def value(self) -> float:
        return self.loss.item()


def bce(y_true, y_pred) -> np.ndarray:
    """Elementwise binary cross-entropy on clamped probabilities (no graph)."""
    p = np.clip(np.asarray(y_pred, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)
    y = np.asarray(y_true, dtype=np.float64)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def bce_tensor(y_true: np.ndarray, y_pred) -> Tensor:
    """Differentiable elementwise BCE; the gradient is zero where clamping bites."""
    y_pred = nn.as_tensor(y_pred)
    raw = y_pred.data
    p = np.clip(raw, BCE_EPS, 1.0 - BCE_EPS)
    y = np.asarray(y_true, dtype=raw.dtype)
    out = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    inside = (raw > BCE_EPS) & (raw < 1.0 - BCE_EPS)

    def backward(g):
        y_pred._accumulate(g * inside * (p - y) / (p * (1.0 - p)))

    return nn._result(out, (y_pred,), backward)


@lru_cache(maxsize=None)
def permutations(c: int) -> np.ndarray:
    """All permutations of range(c) in lexicographic order, shape (c!, c)."""
    return np.array(list(itertools.permutations(range(c))), dtype=np.intp).reshape(-1, c)


def best_permutations(y_true: np.ndarray, y_pred: np.ndarray) -> np.ndarray:
    """Per-sequence PIT assignment for (..., C, T) arrays; returns (..., C).

    Uses the pairwise cost matrix cost[c, r] = sum_t BCE(ref r, output c), so
    each permutation's total is a sum of C entries. Ties go to the
    lexicographically smallest permutation.
    """
    c = y_true.shape[-2]
    if c > MAX_SPEAKERS:
        raise ValueError(f"exhaustive PIT supports at most {MAX_SPEAKERS} speakers, got {c}")
    p = np.clip(np.asarray(y_pred, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)
    y = np.asarray(y_true, dtype=np.float64)
    log_p, log_q = np.log(p), np.log1p(-p)
    # cost[..., out, ref]
    cost = -(log_p @ np.swapaxes(y, -1, -2) + log_q @ np.swapaxes(1.0 - y, -1, -2))
    perms = permutations(c)
    totals = cost[..., np.arange(c)[None, :], perms].sum(axis=-1)  # (..., c!)
    return perms[np.argmin(totals, axis=-1)]


def pit_loss(y_true, y_pred) -> PitResult:
    """Mean BCE under the best speaker permutation for one C x T sequence."""
    y_true = np.asarray(y_true)
    y_pred = nn.as_tensor(y_pred)
    if y_true.shape != y_pred.shape or y_true.ndim != 2:
        raise ValueError(f"shape mismatch: labels {y_true.shape} vs posteriors {y_pred.shape}")
    loss, perms = batch_pit_loss(y_true[None], nn.reshape(y_pred, (1,) + y_pred.shape))
    return PitResult(loss, tuple(int(i) for i in perms[0]))


def batch_pit_loss(y_true: np.ndarray, y_pred) -> tuple[Tensor, np.ndarray]:
    """PIT loss averaged over a (B, C, T) batch; each sequence picks its own permutation."""
    y_pred = nn.as_tensor(y_pred)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"shape mismatch: labels {y_true.shape} vs posteriors {y_pred.shape}")
    perms = best_permutations(y_true, y_pred.data)
    aligned = np.take_along_axis(y_true, perms[..., None], axis=-2)
    return nn.mean_all(bce_tensor(aligned, y_pred)), perms


def intermediate_loss(y_true, final, inters, mixing_ratio: float = 1.0) -> Tensor:
    """Final PIT loss plus the mean of the intermediate PIT losses.

    Every intermediate output is matched to ``y_true`` with its own
    permutation. Batched (B, C, T) inputs are accepted.
    """
    if not inters:
        raise ValueError("intermediate_loss needs at least one intermediate output; use pit_loss")
    return intermediate_terms(y_true, final, inters, mixing_ratio)[0]


def intermediate_terms(y_true, final, inters, mixing_ratio: float = 1.0):
    """Return (total loss, mean intermediate loss) as tensors."""
    y_true = np.asarray(y_true)
    if y_true.ndim == 2:
        y_true = y_true[None]
        final = nn.reshape(nn.as_tensor(final), y_true.shape)
        inters = [nn.reshape(nn.as_tensor(y), y_true.shape) for y in inters]
    final_loss, _ = batch_pit_loss(y_true, final)
    terms = [batch_pit_loss(y_true, y)[0] for y in inters]
    inter_mean = terms[0]
    for t in terms[1:]:
        inter_mean = nn.add(inter_mean, t)
    inter_mean = nn.scale(inter_mean, 1.0 / len(terms))
    return nn.add(final_loss, nn.scale(inter_mean, mixing_ratio)), inter_mean
