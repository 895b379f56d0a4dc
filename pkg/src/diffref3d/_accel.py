"""Hot loops: point binning for RoI grids and rotated-rectangle intersection.

Each kernel has a numba ``@njit`` version and a pure-numpy version. The numba
path is used when numba imports cleanly and ``DIFFREF3D_DISABLE_NUMBA`` is not
set to a truthy value. Both paths are importable directly for cross-checks
and benchmarking.
"""

from __future__ import annotations

import os

import numpy as np

GRID = 3
N_CELLS = GRID**3
RAW_CELL_FEATURES = 4
CLIP_EPS = 1e-12

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("DIFFREF3D_DISABLE_NUMBA", "").lower() not in (
    "1",
    "true",
    "yes",
)


# ---------------------------------------------------------------------------
# RoI grid binning
# ---------------------------------------------------------------------------


def roi_grid_numpy(points: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Per-cell (log1p count, mean offset xyz) for each box, shape (B, 27, 4)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    n_box = boxes.shape[0]
    out = np.zeros((n_box, N_CELLS, RAW_CELL_FEATURES))
    if n_box == 0 or points.shape[0] == 0:
        return out

    # (B, N, 3) local coordinates
    rel = points[None, :, :] - boxes[:, None, 0:3]
    c = np.cos(boxes[:, 6])[:, None]
    s = np.sin(boxes[:, 6])[:, None]
    lx = c * rel[..., 0] + s * rel[..., 1]
    ly = -s * rel[..., 0] + c * rel[..., 1]
    lz = rel[..., 2]
    local = np.stack([lx, ly, lz], axis=-1)
    half = 0.5 * boxes[:, None, 3:6]
    inside = np.all(np.abs(local) <= half, axis=-1)

    cell = boxes[:, None, 3:6] / GRID
    idx = np.floor((local + half) / cell).astype(np.int64)
    idx = np.clip(idx, 0, GRID - 1)
    centers = -half + (idx + 0.5) * cell
    offsets = local - centers
    flat = idx[..., 0] * GRID * GRID + idx[..., 1] * GRID + idx[..., 2]

    b_idx, p_idx = np.nonzero(inside)
    cells = flat[b_idx, p_idx]
    counts = np.zeros((n_box, N_CELLS))
    sums = np.zeros((n_box, N_CELLS, 3))
    np.add.at(counts, (b_idx, cells), 1.0)
    np.add.at(sums, (b_idx, cells), offsets[b_idx, p_idx])

    occupied = counts > 0
    out[..., 0] = np.log1p(counts)
    out[..., 1:][occupied] = sums[occupied] / counts[occupied][:, None]
    return out


def _roi_grid_loop(points, boxes, out):
    n_box = boxes.shape[0]
    n_pts = points.shape[0]
    counts = np.zeros(N_CELLS)
    sums = np.zeros((N_CELLS, 3))
    for b in range(n_box):
        cx, cy, cz = boxes[b, 0], boxes[b, 1], boxes[b, 2]
        hw, hh, hl = 0.5 * boxes[b, 3], 0.5 * boxes[b, 4], 0.5 * boxes[b, 5]
        sw, sh, sl = boxes[b, 3] / GRID, boxes[b, 4] / GRID, boxes[b, 5] / GRID
        c = np.cos(boxes[b, 6])
        s = np.sin(boxes[b, 6])
        counts[:] = 0.0
        sums[:, :] = 0.0
        for p in range(n_pts):
            dx = points[p, 0] - cx
            dy = points[p, 1] - cy
            lz = points[p, 2] - cz
            if abs(lz) > hl:
                continue
            lx = c * dx + s * dy
            if abs(lx) > hw:
                continue
            ly = -s * dx + c * dy
            if abs(ly) > hh:
                continue
            ix = min(max(int(np.floor((lx + hw) / sw)), 0), GRID - 1)
            iy = min(max(int(np.floor((ly + hh) / sh)), 0), GRID - 1)
            iz = min(max(int(np.floor((lz + hl) / sl)), 0), GRID - 1)
            k = ix * GRID * GRID + iy * GRID + iz
            counts[k] += 1.0
            sums[k, 0] += lx - (-hw + (ix + 0.5) * sw)
            sums[k, 1] += ly - (-hh + (iy + 0.5) * sh)
            sums[k, 2] += lz - (-hl + (iz + 0.5) * sl)
        for k in range(N_CELLS):
            out[b, k, 0] = np.log1p(counts[k])
            if counts[k] > 0:
                for j in range(3):
                    out[b, k, 1 + j] = sums[k, j] / counts[k]
            else:
                for j in range(3):
                    out[b, k, 1 + j] = 0.0


# ---------------------------------------------------------------------------
# Rotated rectangle intersection area (bird's-eye view)
# ---------------------------------------------------------------------------


def bev_corners(boxes: np.ndarray) -> np.ndarray:
    """Counter-clockwise base-plane corners, shape (N, 4, 2)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    sx = np.array([-0.5, 0.5, 0.5, -0.5])
    sy = np.array([-0.5, -0.5, 0.5, 0.5])
    lx = sx[None, :] * boxes[:, 3:4]
    ly = sy[None, :] * boxes[:, 4:5]
    c = np.cos(boxes[:, 6:7])
    s = np.sin(boxes[:, 6:7])
    x = boxes[:, 0:1] + c * lx - s * ly
    y = boxes[:, 1:2] + s * lx + c * ly
    return np.stack([x, y], axis=-1)


def bev_overlap_numpy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise intersection area of rotated rectangles a[i], b[i].

    Collects every corner of one rectangle lying inside the other plus all
    edge-edge crossings, orders them by angle around their centroid and takes
    the shoelace area.
    """
    pa = bev_corners(a)
    pb = bev_corners(b)
    n = pa.shape[0]
    if n == 0:
        return np.zeros(0)

    def inside(pts, poly):
        # pts (n, k, 2), poly (n, 4, 2) counter-clockwise
        e0 = poly
        e1 = np.roll(poly, -1, axis=1)
        edge = (e1 - e0)[:, None, :, :]
        rel = pts[:, :, None, :] - e0[:, None, :, :]
        cross = edge[..., 0] * rel[..., 1] - edge[..., 1] * rel[..., 0]
        return np.all(cross >= -1e-9, axis=-1)

    a0, a1 = pa, np.roll(pa, -1, axis=1)
    b0, b1 = pb, np.roll(pb, -1, axis=1)
    da = (a1 - a0)[:, :, None, :]
    db = (b1 - b0)[:, None, :, :]
    diff = b0[:, None, :, :] - a0[:, :, None, :]
    den = da[..., 0] * db[..., 1] - da[..., 1] * db[..., 0]
    safe = np.where(np.abs(den) > CLIP_EPS, den, 1.0)
    ta = (diff[..., 0] * db[..., 1] - diff[..., 1] * db[..., 0]) / safe
    tb = (diff[..., 0] * da[..., 1] - diff[..., 1] * da[..., 0]) / safe
    hit = (np.abs(den) > CLIP_EPS) & (ta >= 0) & (ta <= 1) & (tb >= 0) & (tb <= 1)
    cross_pts = (a0[:, :, None, :] + ta[..., None] * da).reshape(n, 16, 2)

    cand = np.concatenate([pa, pb, cross_pts], axis=1)  # (n, 24, 2)
    valid = np.concatenate([inside(pa, pb), inside(pb, pa), hit.reshape(n, 16)], axis=1)

    n_valid = valid.sum(axis=1)
    centroid = np.where(
        n_valid[:, None] > 0,
        (cand * valid[..., None]).sum(axis=1) / np.maximum(n_valid, 1)[:, None],
        0.0,
    )
    ang = np.arctan2(cand[..., 1] - centroid[:, None, 1], cand[..., 0] - centroid[:, None, 0])
    ang = np.where(valid, ang, np.inf)
    order = np.argsort(ang, axis=1, kind="stable")
    pts = np.take_along_axis(cand, order[..., None], axis=1)
    ok = np.take_along_axis(valid, order, axis=1)
    # invalid slots collapse onto the first valid vertex and add no area
    pts = np.where(ok[..., None], pts, pts[:, :1, :])
    nxt = np.roll(pts, -1, axis=1)
    area = 0.5 * np.abs(np.sum(pts[..., 0] * nxt[..., 1] - pts[..., 1] * nxt[..., 0], axis=1))
    return np.where(n_valid >= 3, area, 0.0)


def _clip_area(pa, pb):
    # Sutherland-Hodgman: clip polygon pa by each edge of counter-clockwise pb.
    buf_in = np.zeros((16, 2))
    buf_out = np.zeros((16, 2))
    for i in range(4):
        buf_in[i, 0] = pa[i, 0]
        buf_in[i, 1] = pa[i, 1]
    n_in = 4
    for e in range(4):
        ex0, ey0 = pb[e, 0], pb[e, 1]
        ex1, ey1 = pb[(e + 1) % 4, 0], pb[(e + 1) % 4, 1]
        n_out = 0
        for i in range(n_in):
            px, py = buf_in[i, 0], buf_in[i, 1]
            qx, qy = buf_in[(i + 1) % n_in, 0], buf_in[(i + 1) % n_in, 1]
            sp = (ex1 - ex0) * (py - ey0) - (ey1 - ey0) * (px - ex0)
            sq = (ex1 - ex0) * (qy - ey0) - (ey1 - ey0) * (qx - ex0)
            p_in = sp >= -CLIP_EPS
            q_in = sq >= -CLIP_EPS
            if p_in:
                buf_out[n_out, 0] = px
                buf_out[n_out, 1] = py
                n_out += 1
            if p_in != q_in:
                den = sp - sq
                if abs(den) > CLIP_EPS:
                    r = sp / den
                    buf_out[n_out, 0] = px + r * (qx - px)
                    buf_out[n_out, 1] = py + r * (qy - py)
                    n_out += 1
        for i in range(n_out):
            buf_in[i, 0] = buf_out[i, 0]
            buf_in[i, 1] = buf_out[i, 1]
        n_in = n_out
        if n_in < 3:
            return 0.0
    area = 0.0
    for i in range(n_in):
        j = (i + 1) % n_in
        area += buf_in[i, 0] * buf_in[j, 1] - buf_in[j, 0] * buf_in[i, 1]
    return 0.5 * abs(area)


def _bev_overlap_loop(pa, pb, out):
    for i in range(pa.shape[0]):
        out[i] = _clip_area(pa[i], pb[i])


if HAVE_NUMBA:
    _roi_grid_jit = njit(cache=True)(_roi_grid_loop)
    _clip_area_jit = njit(cache=True)(_clip_area)

    @njit(cache=True)
    def _bev_overlap_jit(pa, pb, out):
        for i in range(pa.shape[0]):
            out[i] = _clip_area_jit(pa[i], pb[i])


def roi_grid_numba(points: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 7)
    out = np.zeros((boxes.shape[0], N_CELLS, RAW_CELL_FEATURES))
    if HAVE_NUMBA:
        _roi_grid_jit(points, boxes, out)
    else:  # pragma: no cover
        _roi_grid_loop(points, boxes, out)
    return out


def bev_overlap_numba(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    pa = np.ascontiguousarray(bev_corners(a))
    pb = np.ascontiguousarray(bev_corners(b))
    out = np.zeros(pa.shape[0])
    if HAVE_NUMBA:
        _bev_overlap_jit(pa, pb, out)
    else:  # pragma: no cover
        _bev_overlap_loop(pa, pb, out)
    return out


def roi_grid(points: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    if USE_NUMBA:
        return roi_grid_numba(points, boxes)
    return roi_grid_numpy(points, boxes)


def bev_overlap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if USE_NUMBA:
        return bev_overlap_numba(a, b)
    return bev_overlap_numpy(a, b)
