"""7-DoF box arithmetic.

Boxes are float arrays with trailing dimension 7 laid out as
``(x, y, z, w, h, l, theta)``: ``w`` and ``h`` span the ground plane, ``l`` is
the vertical extent and ``theta`` is the yaw about the vertical axis. Every
function accepts a single box of shape (7,) or a stack of shape (..., 7).
"""

from __future__ import annotations

import numpy as np

from . import _accel

# sign patterns of (w/2, h/2, l/2) in corner order
CORNER_SIGNS = np.array(
    [
        [-1, -1, -1],
        [1, -1, -1],
        [1, 1, -1],
        [-1, 1, -1],
        [-1, -1, 1],
        [1, -1, 1],
        [1, 1, 1],
        [-1, 1, 1],
    ],
    dtype=np.float64,
)


class InvalidBoxError(ValueError):
    """Raised for boxes with non-positive extents or non-finite fields."""


class ConfigError(ValueError):
    """Raised when thresholds or schedule parameters are inconsistent."""


def wrap_angle(theta):
    """Wrap angles to [-pi, pi)."""
    return (np.asarray(theta, dtype=np.float64) + np.pi) % (2.0 * np.pi) - np.pi


def as_boxes(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.shape[-1:] != (7,):
        raise InvalidBoxError(f"expected trailing dimension 7, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidBoxError("box fields must be finite")
    if np.any(arr[..., 3:6] <= 0):
        raise InvalidBoxError("box extents must be positive")
    return arr


def make_box(x, y, z, w, h, l, theta) -> np.ndarray:
    box = as_boxes([x, y, z, w, h, l, theta]).copy()
    box[6] = wrap_angle(box[6])
    return box


def base_diagonal(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    return np.sqrt(b[..., 3] ** 2 + b[..., 4] ** 2)


def aspect_ratio(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    return np.maximum(b[..., 3] / b[..., 4], b[..., 4] / b[..., 3])


def encode(proposal, target) -> np.ndarray:
    """Residual of ``target`` expressed in the frame of ``proposal``."""
    p = as_boxes(proposal)
    t = as_boxes(target)
    d = base_diagonal(p)
    return np.stack(
        [
            (t[..., 0] - p[..., 0]) / d,
            (t[..., 1] - p[..., 1]) / d,
            (t[..., 2] - p[..., 2]) / p[..., 4],
            np.log(t[..., 3] / p[..., 3]),
            np.log(t[..., 4] / p[..., 4]),
            np.log(t[..., 5] / p[..., 5]),
            wrap_angle(t[..., 6] - p[..., 6]),
        ],
        axis=-1,
    )


def decode(proposal, residual) -> np.ndarray:
    """Apply ``residual`` to ``proposal``; inverse of :func:`encode`."""
    p = as_boxes(proposal)
    r = np.asarray(residual, dtype=np.float64)
    d = base_diagonal(p)
    return np.stack(
        [
            p[..., 0] + r[..., 0] * d,
            p[..., 1] + r[..., 1] * d,
            p[..., 2] + r[..., 2] * p[..., 4],
            p[..., 3] * np.exp(r[..., 3]),
            p[..., 4] * np.exp(r[..., 4]),
            p[..., 5] * np.exp(r[..., 5]),
            wrap_angle(p[..., 6] + r[..., 6]),
        ],
        axis=-1,
    )


def normalization_scale(proposal) -> np.ndarray:
    """Per-component divisors (d, d, l, d, d, l, r) of a proposal."""
    p = np.asarray(proposal, dtype=np.float64)
    d = base_diagonal(p)
    l = p[..., 5]
    r = aspect_ratio(p)
    return np.stack([d, d, l, d, d, l, r], axis=-1)


def normalize(residual, proposal) -> np.ndarray:
    return np.asarray(residual, dtype=np.float64) / normalization_scale(proposal)


def denormalize(normalized, proposal) -> np.ndarray:
    return np.asarray(normalized, dtype=np.float64) * normalization_scale(proposal)


def corners(boxes) -> np.ndarray:
    """Eight corners per box, shape (..., 8, 3), in the canonical sign order."""
    b = as_boxes(boxes)
    local = CORNER_SIGNS * (0.5 * b[..., None, 3:6])
    c = np.cos(b[..., 6])[..., None]
    s = np.sin(b[..., 6])[..., None]
    x = b[..., 0, None] + c * local[..., 0] - s * local[..., 1]
    y = b[..., 1, None] + s * local[..., 0] + c * local[..., 1]
    z = b[..., 2, None] + local[..., 2]
    return np.stack([x, y, z], axis=-1)


def _vertical_overlap(a, b):
    lo = np.maximum(a[..., 2] - 0.5 * a[..., 5], b[..., 2] - 0.5 * b[..., 5])
    hi = np.minimum(a[..., 2] + 0.5 * a[..., 5], b[..., 2] + 0.5 * b[..., 5])
    return np.clip(hi - lo, 0.0, None)


def iou_3d(a, b) -> np.ndarray:
    """Rotated 3D IoU of ``a[i]`` with ``b[i]`` (broadcast over leading dims)."""
    a = as_boxes(a)
    b = as_boxes(b)
    a, b = np.broadcast_arrays(a, b)
    shape = a.shape[:-1]
    fa = a.reshape(-1, 7)
    fb = b.reshape(-1, 7)
    dz = _vertical_overlap(fa, fb)
    inter = np.zeros(fa.shape[0])
    touch = dz > 0
    if np.any(touch):
        inter[touch] = _accel.bev_overlap(fa[touch], fb[touch]) * dz[touch]
    vol_a = fa[:, 3] * fa[:, 4] * fa[:, 5]
    vol_b = fb[:, 3] * fb[:, 4] * fb[:, 5]
    union = vol_a + vol_b - inter
    iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return np.clip(iou, 0.0, 1.0).reshape(shape)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU, shape (len(a), len(b))."""
    a = as_boxes(a).reshape(-1, 7)
    b = as_boxes(b).reshape(-1, 7)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    return iou_3d(a[:, None, :], b[None, :, :])


def classification_target(iou, theta_l: float, theta_h: float):
    """Soft confidence target: 0 below ``theta_l``, 1 from ``theta_h``, linear between."""
    if not 0.0 <= theta_l < theta_h <= 1.0:
        raise ConfigError(f"need 0 <= theta_L < theta_H <= 1, got ({theta_l}, {theta_h})")
    iou = np.asarray(iou, dtype=np.float64)
    return np.clip((iou - theta_l) / (theta_h - theta_l), 0.0, 1.0)
