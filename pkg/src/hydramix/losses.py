"""Classification and centroid losses.

Targets are plain arrays; predictions may be tensors (differentiable) or
arrays. Batched inputs of shape (n, C) are averaged over samples; a single
(C,) distribution is treated as a batch of one.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ArgumentError, ConfigError

PRED_FLOOR = 1e-7


@dataclass
class SceConfig:
    delta: float = 1.0  # weight on CE (trust in the targets)
    rho: float = 0.1  # weight on RCE (trust in the predictions)
    log_zero_clamp: float = -4.0

    def validate(self):
        if self.delta < 0 or self.rho < 0:
            raise ConfigError(f"SCE weights must be non-negative, got delta={self.delta}, rho={self.rho}", "delta/rho")
        if self.log_zero_clamp >= 0:
            raise ConfigError(f"log_zero_clamp must be negative, got {self.log_zero_clamp}", "log_zero_clamp")
        return self


@dataclass
class JointLossConfig:
    mu: float = 0.8
    sce_labelled: SceConfig = field(default_factory=lambda: SceConfig(1.0, 0.1))
    sce_unlabelled: SceConfig = field(default_factory=lambda: SceConfig(0.1, 1.0))
    # class whose predicted probability switches the regression loss off; None disables gating
    background_index: int | None = -1

    def validate(self):
        if not 0.0 <= self.mu <= 1.0:
            raise ConfigError(f"mu must lie in [0, 1], got {self.mu}", "mu")
        self.sce_labelled.validate()
        self.sce_unlabelled.validate()
        return self


def _as_batch(target, pred):
    target = np.asarray(target, dtype=np.float64)
    pred = ad.as_tensor(pred)
    if target.shape != pred.shape:
        raise ArgumentError(f"target shape {target.shape} does not match prediction shape {pred.shape}")
    if target.ndim == 1:
        target = target[None, :]
        pred = ad.reshape(pred, (1, -1))
    if target.ndim != 2:
        raise ArgumentError(f"expected (C,) or (n, C) distributions, got shape {target.shape}")
    return target, pred


def cross_entropy(target, pred, floor=PRED_FLOOR):
    """Mean over samples of -sum_c target_c * log(max(pred_c, floor))."""
    target, pred = _as_batch(target, pred)
    logp = ad.log_clamped(pred, floor)
    per_sample = ad.sum(logp * target.astype(pred.data.dtype), axis=1)
    return -ad.mean(per_sample)


def clamped_log_target(target, clamp):
    """log(target) floored at ``clamp``; zero entries map exactly to ``clamp``."""
    target = np.asarray(target, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.maximum(np.log(target), clamp)


def reverse_cross_entropy(target, pred, clamp=-4.0):
    """Mean over samples of -sum_c pred_c * log(target_c), with log 0 replaced by ``clamp``."""
    target, pred = _as_batch(target, pred)
    logt = clamped_log_target(target, clamp).astype(pred.data.dtype)
    return -ad.mean(ad.sum(pred * logt, axis=1))


def sce(target, pred, cfg=None):
    cfg = cfg or SceConfig()
    loss = cross_entropy(target, pred) * cfg.delta
    if cfg.rho:
        loss = loss + reverse_cross_entropy(target, pred, cfg.log_zero_clamp) * cfg.rho
    return loss


def mse(pred, target, weights=None):
    """Mean of ``weights * (pred - target) ** 2``; weights are constants (no gradient)."""
    pred = ad.as_tensor(pred)
    target = np.asarray(target, dtype=pred.data.dtype)
    if pred.shape != target.shape:
        raise ArgumentError(f"mse length mismatch: pred {pred.shape} vs target {target.shape}")
    err = ad.square(pred - target)
    if weights is not None:
        weights = np.asarray(weights, dtype=pred.data.dtype)
        if weights.shape != pred.shape:
            raise ArgumentError(f"weights shape {weights.shape} does not match {pred.shape}")
        err = err * weights
    return ad.mean(err)


@dataclass
class Targets:
    """What a head is trained towards: class distribution and normalised centroid."""

    labels: np.ndarray  # (n, C)
    cx: np.ndarray  # (n,)
    cy: np.ndarray


@dataclass
class JointLoss:
    total: ad.Tensor
    components: dict


def foreground_gate(class_probs, background_index):
    probs = class_probs.data if isinstance(class_probs, ad.Tensor) else np.asarray(class_probs)
    if background_index is None:
        return np.ones(probs.shape[0], dtype=probs.dtype)
    return 1.0 - probs[:, background_index]


def _branch(targets, output, sce_cfg, background_index):
    cls = sce(targets.labels, output.class_probs, sce_cfg)
    gate = foreground_gate(output.class_probs, background_index)
    rx = mse(output.cx, targets.cx, gate)
    ry = mse(output.cy, targets.cy, gate)
    return cls, rx, ry


def joint_loss(labelled, unlabelled, cfg=None, unlabelled_weight=1.0):
    """mu * (SCE_l + SCE_u) + (1 - mu) * (MSE_lx + MSE_ly + MSE_ux + MSE_uy).

    ``labelled`` and ``unlabelled`` are ``(Targets, ModelOutput)`` pairs;
    ``unlabelled`` may be None (supervised baselines). Each per-sample squared
    centroid error is scaled by the predicted foreground probability, taken as
    a constant so the regression loss does not push on the class head.
    ``unlabelled_weight`` scales SCE_u and both unlabelled MSE terms (ramp-up).
    """
    cfg = (cfg or JointLossConfig()).validate()
    if labelled is None and unlabelled is None:
        raise ArgumentError("joint_loss needs at least one non-empty branch")
    zero = ad.Tensor(0.0)
    parts = {"sce_labelled": zero, "sce_unlabelled": zero, "mse_lx": zero, "mse_ly": zero, "mse_ux": zero, "mse_uy": zero}
    if labelled is not None:
        parts["sce_labelled"], parts["mse_lx"], parts["mse_ly"] = _branch(*labelled, cfg.sce_labelled, cfg.background_index)
    if unlabelled is not None:
        parts["sce_unlabelled"], parts["mse_ux"], parts["mse_uy"] = _branch(*unlabelled, cfg.sce_unlabelled, cfg.background_index)
    w = float(unlabelled_weight)
    cls = parts["sce_labelled"] + parts["sce_unlabelled"] * w
    reg = parts["mse_lx"] + parts["mse_ly"] + (parts["mse_ux"] + parts["mse_uy"]) * w
    total = cls * cfg.mu + reg * (1.0 - cfg.mu)
    components = {
        "total": total.item(),
        "sce_labelled": parts["sce_labelled"].item(),
        "sce_unlabelled": parts["sce_unlabelled"].item(),
        "reg_labelled": parts["mse_lx"].item() + parts["mse_ly"].item(),
        "reg_unlabelled": parts["mse_ux"].item() + parts["mse_uy"].item(),
    }
    return JointLoss(total, components)
