"""Training losses and their gradients with respect to network outputs."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .boxes import CORNER_SIGNS, ConfigError, base_diagonal, classification_target, corners, decode, denormalize, normalization_scale


@dataclass(frozen=True)
class LossConfig:
    theta_reg: float = 0.55
    theta_h: float = 0.75
    theta_l: float = 0.25
    smooth_l1_beta: float = 1.0
    corner_weight: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.theta_l < self.theta_h <= 1.0:
            raise ConfigError("loss.theta_l/theta_h must satisfy 0 <= theta_l < theta_h <= 1")
        if self.smooth_l1_beta <= 0:
            raise ConfigError("loss.smooth_l1_beta must be > 0")
        if self.focal_gamma < 0:
            raise ConfigError("loss.focal_gamma must be >= 0")


def smooth_l1(pred, target, beta: float = 1.0):
    e = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    a = np.abs(e)
    return np.where(a < beta, 0.5 * e * e / beta, a - 0.5 * beta)


def smooth_l1_grad(pred, target, beta: float = 1.0):
    e = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return np.where(np.abs(e) < beta, e / beta, np.sign(e))


def _corner_jacobian(boxes: np.ndarray) -> np.ndarray:
    """d corner / d (x, y, z, w, h, l, theta), shape (B, 8, 3, 7)."""
    b = boxes.reshape(-1, 7)
    n = b.shape[0]
    sx, sy, sz = CORNER_SIGNS[:, 0], CORNER_SIGNS[:, 1], CORNER_SIGNS[:, 2]
    c = np.cos(b[:, 6])[:, None]
    s = np.sin(b[:, 6])[:, None]
    lx = 0.5 * sx[None, :] * b[:, 3:4]
    ly = 0.5 * sy[None, :] * b[:, 4:5]
    jac = np.zeros((n, 8, 3, 7))
    jac[:, :, 0, 0] = 1.0
    jac[:, :, 1, 1] = 1.0
    jac[:, :, 2, 2] = 1.0
    jac[:, :, 0, 3] = c * 0.5 * sx
    jac[:, :, 1, 3] = s * 0.5 * sx
    jac[:, :, 0, 4] = -s * 0.5 * sy
    jac[:, :, 1, 4] = c * 0.5 * sy
    jac[:, :, 2, 5] = 0.5 * sz
    jac[:, :, 0, 6] = -s * lx - c * ly
    jac[:, :, 1, 6] = c * lx - s * ly
    return jac


def regression_loss(preds, targets, proposals, target_boxes, ious, cfg: LossConfig):
    """IoU-gated smooth-L1 on normalized residuals plus a corner term.

    Predicted boxes are decoded from ``preds`` against ``proposals``. Returns
    ``(loss, d_loss/d_preds)``; the mean runs over all proposals, gated ones
    contributing zero.
    """
    preds = np.asarray(preds, dtype=np.float64).reshape(-1, 7)
    n = preds.shape[0]
    if n == 0:
        warnings.warn("regression_loss called on an empty batch", RuntimeWarning, stacklevel=2)
        return 0.0, np.zeros((0, 7))
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 7)
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 7)
    target_boxes = np.asarray(target_boxes, dtype=np.float64).reshape(-1, 7)
    mask = (np.asarray(ious, dtype=np.float64).reshape(-1) >= cfg.theta_reg).astype(np.float64)
    beta = cfg.smooth_l1_beta
    grad = np.zeros_like(preds)
    if not mask.any():
        return 0.0, grad

    sel = mask > 0
    p, tg, prop, tbox = preds[sel], targets[sel], proposals[sel], target_boxes[sel]
    res_term = smooth_l1(p, tg, beta).sum(axis=1)
    d_res = smooth_l1_grad(p, tg, beta)

    pred_boxes = decode(prop, denormalize(p, prop))
    c_pred = corners(pred_boxes)
    c_tgt = corners(tbox)
    corner_term = smooth_l1(c_pred, c_tgt, beta).sum(axis=(1, 2))
    d_corner = smooth_l1_grad(c_pred, c_tgt, beta)  # (k, 8, 3)
    d_box = np.einsum("kjc,kjcp->kp", d_corner, _corner_jacobian(pred_boxes))
    # box parameter w.r.t. raw residual, then raw residual w.r.t. normalized
    dbox_dres = np.stack(
        [
            base_diagonal(prop),
            base_diagonal(prop),
            prop[:, 4],
            pred_boxes[:, 3],
            pred_boxes[:, 4],
            pred_boxes[:, 5],
            np.ones(len(prop)),
        ],
        axis=-1,
    )
    d_norm = d_box * dbox_dres * normalization_scale(prop)

    loss = float(np.sum(res_term + cfg.corner_weight * corner_term) / n)
    grad[sel] = (d_res + cfg.corner_weight * d_norm) / n
    return loss, grad


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy on logits; returns (loss, d_loss/d_logits)."""
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if z.size == 0:
        return 0.0, np.zeros(0)
    per = np.maximum(z, 0.0) - y * z + np.log1p(np.exp(-np.abs(z)))
    prob = 0.5 * (1.0 + np.tanh(0.5 * z))
    return float(per.mean()), (prob - y) / z.size


def classification_loss_logits(logits, ious, cfg: LossConfig):
    return bce_with_logits(logits, classification_target(ious, cfg.theta_l, cfg.theta_h))


def classification_loss(c_hats, ious, cfg: LossConfig) -> float:
    """Mean BCE of confidences ``c_hats`` against IoU-ramp targets."""
    p = np.asarray(c_hats, dtype=np.float64)
    logits = np.log(p) - np.log1p(-p)
    loss, _ = classification_loss_logits(logits, ious, cfg)
    return loss


def focal_loss(s_hats, labels, cfg: LossConfig):
    """Mean binary focal loss; returns (loss, d_loss/d_s_hats)."""
    s = np.asarray(s_hats, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if s.size == 0:
        return 0.0, np.zeros(0)
    a, g = cfg.focal_alpha, cfg.focal_gamma
    pt = np.where(y > 0.5, s, 1.0 - s)
    per = -a * (1.0 - pt) ** g * np.log(pt)
    decay = g * (1.0 - pt) ** (g - 1.0) * np.log(pt) if g > 0 else 0.0
    dpt = -a * ((1.0 - pt) ** g / pt - decay)
    ds = np.where(y > 0.5, dpt, -dpt)
    return float(per.mean()), ds / s.size
