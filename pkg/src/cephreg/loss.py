"""Combined cross-entropy + focal objective for heatmap regression.

    loss = -(1/N) * sum( 1/2 * H * log(P) + 1/2 * alpha * (1 - P_t)**gamma * log(P_t) )

with ``P_t = P`` where the target exceeds ``target_gate`` and ``1 - P``
elsewhere.  The sum runs over batch items, channels and pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import NumericError, ShapeError, Tensor


@dataclass(frozen=True)
class LossConfig:
    alpha_t: float = 0.25
    gamma: float = 2.0
    target_gate: float = 0.01
    bce_weight: float = 0.5
    focal_weight: float = 0.5
    clamp_eps: float = 1e-7
    # add the (1 - H) * log(1 - P) half of binary cross-entropy
    full_bce: bool = False
    # focal term switched off before this epoch when set
    focal_start_epoch: int | None = None

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not 0 < self.alpha_t <= 1:
            raise ValueError(f"alpha_t must be in (0, 1], got {self.alpha_t}")
        if not 0 < self.target_gate < 1:
            raise ValueError(f"target_gate must be in (0, 1), got {self.target_gate}")


def heatmap_loss(predicted: Tensor, target, config: LossConfig = LossConfig(),
                 batch_size: int | None = None, epoch: int | None = None) -> Tensor:
    target = np.asarray(getattr(target, "channels", target), dtype=predicted.dtype)
    if predicted.shape != target.shape:
        raise ShapeError(f"predicted shape {predicted.shape} does not match target shape {target.shape}")
    if batch_size is None:
        batch_size = predicted.shape[0] if predicted.ndim == 4 else 1
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")

    eps = config.clamp_eps
    p = T.clip(predicted, eps, 1.0 - eps)
    log_p = T.log(p)
    total = T.tsum(T.mul(log_p, target)) * config.bce_weight
    if config.full_bce:
        total = total + T.tsum(T.mul(T.log(1.0 - p), 1.0 - target)) * config.bce_weight

    focal_weight = config.focal_weight
    if config.focal_start_epoch is not None and (epoch is None or epoch < config.focal_start_epoch):
        focal_weight = 0.0
    if focal_weight:
        gate = (target > config.target_gate).astype(predicted.dtype)
        # p where the target is on, 1 - p elsewhere
        p_t = T.add(T.mul(p, 2.0 * gate - 1.0), 1.0 - gate)
        modulator = T.power(1.0 - p_t, config.gamma)
        focal = T.tsum(T.mul(modulator, T.log(p_t))) * (config.alpha_t * focal_weight)
        total = total + focal

    loss = total * (-1.0 / batch_size)
    if not np.isfinite(loss.data):
        raise NumericError("heatmap loss is not finite")
    return loss


def heatmap_loss_logits(logits: Tensor, target, config: LossConfig = LossConfig(),
                        batch_size: int | None = None, epoch: int | None = None) -> Tensor:
    """Same objective evaluated from pre-softmax logits.

    Log-probabilities come from a fused log-softmax, so confidently wrong
    channels keep a gradient instead of sitting on the probability clamp.
    Only ``log(1 - P)`` is floored, at ``log(clamp_eps)``.
    """
    target = np.asarray(getattr(target, "channels", target), dtype=logits.dtype)
    if logits.shape != target.shape:
        raise ShapeError(f"logits shape {logits.shape} does not match target shape {target.shape}")
    if batch_size is None:
        batch_size = logits.shape[0] if logits.ndim == 4 else 1
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")

    floor = float(np.log(config.clamp_eps))
    log_p = T.channel_log_softmax(logits)
    log_q = T.log1mexp(log_p, floor)
    total = T.tsum(T.mul(log_p, target)) * config.bce_weight
    if config.full_bce:
        total = total + T.tsum(T.mul(log_q, 1.0 - target)) * config.bce_weight

    focal_weight = config.focal_weight
    if config.focal_start_epoch is not None and (epoch is None or epoch < config.focal_start_epoch):
        focal_weight = 0.0
    if focal_weight:
        gate = (target > config.target_gate).astype(logits.dtype)
        p = T.exp(log_p)
        log_p_t = T.add(T.mul(log_p, gate), T.mul(log_q, 1.0 - gate))
        # 1 - p_t written without cancellation
        miss = T.add(T.mul(p, 1.0 - 2.0 * gate), gate)
        focal = T.tsum(T.mul(T.power(miss, config.gamma), log_p_t)) * (config.alpha_t * focal_weight)
        total = total + focal

    loss = total * (-1.0 / batch_size)
    if not np.isfinite(loss.data):
        raise NumericError("heatmap loss is not finite")
    return loss
