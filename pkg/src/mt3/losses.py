"""BYOL-style similarity loss, cross-entropy and the weighted outer loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class LossWeights:
    gamma: float = 0.1

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")


def _check_nonzero(name: str, v: Tensor):
    norms = np.sqrt(np.sum(np.asarray(v.data, dtype=np.float64) ** 2, axis=-1))
    if np.any(norms == 0):
        raise ValueError(f"{name}: zero-norm vector, direction undefined")


def pair_distance(a, b) -> Tensor:
    """``2 - 2 cos(a, b)`` along the last axis, i.e. the squared distance of
    the l2-normalized vectors. Batched over leading axes."""
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.shape != b.shape:
        raise ad.ShapeError("pair_distance", a.shape, b.shape)
    _check_nonzero("pair_distance", a)
    _check_nonzero("pair_distance", b)
    cos = ad.reduce_sum(ad.l2_normalize(a, -1) * ad.l2_normalize(b, -1), axis=-1)
    return ad.affine(cos, -2.0, 2.0)


def byol_loss(r, r_tilde, z, z_tilde) -> Tensor:
    """Symmetric BYOL-like loss per sample.

    ``r``/``r_tilde`` are predictions of the two views under the adapted
    model, ``z``/``z_tilde`` projections of the same views under the meta
    model. Each prediction is matched to the projection of the other view.
    """
    return pair_distance(r, z_tilde) + pair_distance(r_tilde, z)


def cross_entropy(logits, labels) -> Tensor:
    """Per-sample ``-log softmax(logits)[label]``."""
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim == 1:
        logits = ad.reshape(logits, (1, -1))
        labels = labels.reshape(1)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ad.ShapeError("cross_entropy", logits.shape, labels.shape)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    onehot = np.zeros((n, c), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1
    return ad.neg(ad.reduce_sum(ad.log_softmax(logits, -1) * onehot, axis=-1))


def total_loss(ce, byol, weights: LossWeights = LossWeights()) -> Tensor:
    return ad.as_tensor(ce) + ad.affine(ad.as_tensor(byol), weights.gamma)
