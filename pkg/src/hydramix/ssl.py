"""Label machinery for unlabelled data: augmentation, pseudo labels, sharpening, mixup.

Centroids live in normalised patch coordinates: pixel column ``j`` of a
width-``W`` patch spans ``[j/W, (j+1)/W)``, so every grid symmetry maps
centroids by an affine formula with no interpolation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError

AUGMENTATIONS = ("identity", "horizontal_flip", "vertical_flip", "rotate90", "rotate180", "rotate270")
INVERSE = {
    "identity": "identity",
    "horizontal_flip": "horizontal_flip",
    "vertical_flip": "vertical_flip",
    "rotate90": "rotate270",
    "rotate180": "rotate180",
    "rotate270": "rotate90",
}


def apply_op(image, op):
    """Apply a grid symmetry to an (H, W, C) image or an (n, H, W, C) batch."""
    image = np.asarray(image)
    rows, cols = (1, 2) if image.ndim == 4 else (0, 1)
    if op == "identity":
        return image.copy()
    if op == "horizontal_flip":
        return np.flip(image, axis=cols).copy()
    if op == "vertical_flip":
        return np.flip(image, axis=rows).copy()
    if op == "rotate90":  # counter-clockwise
        return np.rot90(image, 1, axes=(rows, cols)).copy()
    if op == "rotate180":
        return np.rot90(image, 2, axes=(rows, cols)).copy()
    if op == "rotate270":
        return np.rot90(image, 3, axes=(rows, cols)).copy()
    raise ArgumentError(f"unknown augmentation {op!r}")


def transform_centroid(cx, cy, op):
    if op == "identity":
        return cx, cy
    if op == "horizontal_flip":
        return 1.0 - cx, cy
    if op == "vertical_flip":
        return cx, 1.0 - cy
    if op == "rotate90":
        return cy, 1.0 - cx
    if op == "rotate180":
        return 1.0 - cx, 1.0 - cy
    if op == "rotate270":
        return 1.0 - cy, cx
    raise ArgumentError(f"unknown augmentation {op!r}")


@dataclass
class AugmentedPatch:
    image: np.ndarray
    op: str
    cx: float | None = None
    cy: float | None = None


def augment_one(image, op, centroid=None):
    cx, cy = transform_centroid(*centroid, op) if centroid is not None else (None, None)
    return AugmentedPatch(apply_op(image, op), op, cx, cy)


def sample_ops(rng, size):
    return np.asarray(AUGMENTATIONS)[rng.integers(len(AUGMENTATIONS), size=size)]


def augment_k(image, k, rng, centroid=None):
    """k independently sampled symmetries of one patch, each tagged with its op."""
    if k < 1:
        raise ArgumentError(f"k must be >= 1, got {k}")
    return [augment_one(image, str(op), centroid) for op in sample_ops(rng, k)]


def transform_centroids(cx, cy, ops):
    """Vectorised ``transform_centroid`` with one op per row."""
    ops = np.asarray(ops)
    cx, cy = np.asarray(cx, dtype=np.float64), np.asarray(cy, dtype=np.float64)
    new_cx, new_cy = np.empty_like(cx), np.empty_like(cy)
    for op in set(ops.tolist()):
        sel = ops == op
        new_cx[sel], new_cy[sel] = transform_centroid(cx[sel], cy[sel], op)
    return new_cx, new_cy


def augment_batch(images, ops, cx=None, cy=None):
    """Apply ``ops[i]`` to ``images[i]``; returns (images, cx, cy) with centroids mapped alongside."""
    ops = np.asarray(ops)
    out = np.empty_like(images)
    for op in set(ops.tolist()):
        sel = np.flatnonzero(ops == op)
        out[sel] = apply_op(images[sel], op)
    if cx is None:
        return out, None, None
    return (out, *transform_centroids(cx, cy, ops))


def _predictor(model):
    if callable(getattr(model, "predict", None)):
        return model.predict
    if callable(model) and not hasattr(model, "params"):
        return model
    from .model import predict

    return lambda images: predict(model, images)


@dataclass
class PseudoLabels:
    probs: np.ndarray  # (n, C), mean over the k views
    cx: np.ndarray  # (n,), predicted on the unaugmented images
    cy: np.ndarray
    views: np.ndarray  # (k, n, H, W, C)
    ops: np.ndarray  # (k, n)


def pseudo_label(model, images, k, rng, ops=None):
    """Guess labels for unlabelled images.

    The class distribution is averaged over ``k`` augmented views; the
    centroid comes from the original image alone, since views move it.
    ``model`` is a HydraMixNet (run in eval mode) or any callable mapping an
    image batch to ``(probs, cx, cy)`` arrays. A single (H, W, C) image gives
    unbatched outputs.
    """
    if k < 1:
        raise ArgumentError(f"k must be >= 1, got {k}")
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    n = len(images)
    ops = sample_ops(rng, (k, n)) if ops is None else np.asarray(ops).reshape(k, n)
    views = np.stack([augment_batch(images, ops[i])[0] for i in range(k)])
    probs, cx, cy = _predictor(model)(np.concatenate([*views, images]))
    probs = np.asarray(probs, dtype=np.float64)
    avg = probs[: k * n].reshape(k, n, -1).mean(axis=0)
    result = PseudoLabels(avg, np.asarray(cx)[k * n:], np.asarray(cy)[k * n:], views, ops)
    if single:
        return PseudoLabels(avg[0], result.cx[0], result.cy[0], views[:, 0], ops[:, 0])
    return result


def sharpen(d, T):
    """Temperature sharpening d_i^(1/T) / sum_j d_j^(1/T), evaluated in log space."""
    if T <= 0:
        raise ArgumentError(f"temperature must be positive, got {T}")
    d = np.asarray(d, dtype=np.float64)
    with np.errstate(divide="ignore"):
        logits = np.log(d) / T
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=-1, keepdims=True)


def sample_gamma(alpha, beta, rng, size=None):
    """max(b, 1 - b) with b ~ Beta(alpha, beta), so the first mixup argument dominates."""
    if alpha <= 0 or beta <= 0:
        raise ArgumentError(f"Beta shape parameters must be positive, got alpha={alpha}, beta={beta}")
    b = rng.beta(alpha, beta, size=size)
    return np.maximum(b, 1.0 - b)


@dataclass
class MixPair:
    image: np.ndarray
    label: np.ndarray
    cx: float
    cy: float
    gamma: float


def mixup(a, b, gamma):
    """Convex mix of ``a = (image, label, cx, cy)`` with ``b = (image, label[, ...])``.

    The centroid of ``a`` passes through unmixed.
    """
    if not 0.5 <= gamma <= 1.0:
        raise ArgumentError(f"gamma must lie in [0.5, 1], got {gamma}")
    img_a, lab_a, cx, cy = a
    img_b, lab_b = b[0], b[1]
    img_a, img_b = np.asarray(img_a), np.asarray(img_b)
    lab_a, lab_b = np.asarray(lab_a, dtype=np.float64), np.asarray(lab_b, dtype=np.float64)
    if img_a.shape != img_b.shape:
        raise ArgumentError(f"image shapes differ: {img_a.shape} vs {img_b.shape}")
    if lab_a.shape != lab_b.shape:
        raise ArgumentError(f"label lengths differ: {lab_a.shape} vs {lab_b.shape}")
    if gamma == 1.0:
        return MixPair(img_a.copy(), lab_a.copy(), cx, cy, 1.0)
    image = gamma * img_a + (1.0 - gamma) * img_b
    label = gamma * lab_a + (1.0 - gamma) * lab_b
    return MixPair(image.astype(img_a.dtype), label, cx, cy, float(gamma))


@dataclass
class Batch:
    images: np.ndarray  # (n, H, W, C)
    labels: np.ndarray  # (n, C) distributions
    cx: np.ndarray
    cy: np.ndarray
    gamma: np.ndarray | None = None  # mixing weight per row, after mixing
    partner: np.ndarray | None = None  # index into concat(labelled, unlabelled) of the partner row

    def __len__(self):
        return len(self.images)


def concat_batches(a, b):
    return Batch(
        np.concatenate([a.images, b.images]),
        np.concatenate([a.labels, b.labels]),
        np.concatenate([a.cx, b.cx]),
        np.concatenate([a.cy, b.cy]),
    )


def _mix_rows(batch, pool, partner, gamma):
    g_img = gamma.reshape(-1, *([1] * (batch.images.ndim - 1))).astype(batch.images.dtype)
    images = g_img * batch.images + (1 - g_img) * pool.images[partner]
    labels = gamma[:, None] * batch.labels + (1 - gamma[:, None]) * pool.labels[partner]
    return Batch(images, labels, batch.cx.copy(), batch.cy.copy(), gamma, partner)


def mix_batches(xb, ub, rng, alpha=0.75, beta=0.75):
    """Mix labelled and pseudo-labelled batches against a shared shuffled pool.

    W = shuffle(concat(xb, ub)); xb is mixed row-wise with W[:len(xb)] and ub
    with W[len(xb):]. Each row keeps its own centroid.
    """
    if len(ub) == 0:
        raise ArgumentError("unlabelled batch is empty")
    if len(xb) and xb.labels.shape[1] != ub.labels.shape[1]:
        raise ArgumentError(f"class counts differ: {xb.labels.shape[1]} vs {ub.labels.shape[1]}")
    pool = concat_batches(xb, ub) if len(xb) else ub
    perm = rng.permutation(len(pool))
    gamma = sample_gamma(alpha, beta, rng, size=len(pool))
    nx = len(xb)
    mixed_x = _mix_rows(xb, pool, perm[:nx], gamma[:nx])
    mixed_u = _mix_rows(ub, pool, perm[nx:], gamma[nx:])
    return mixed_x, mixed_u
