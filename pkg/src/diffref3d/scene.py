"""Synthetic point-cloud scenes, jittered proposals and RoI grid pooling.

Scenes stand in for LiDAR sweeps: non-overlapping boxes resting on the ground
with points sampled on their faces plus uniform clutter. Proposals stand in
for a first-stage detector and are ground-truth boxes with Gaussian jitter.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .boxes import ConfigError, InvalidBoxError, iou_matrix, wrap_angle

MAX_PLACEMENT_TRIES = 100


@dataclass(frozen=True)
class SceneSpec:
    n_objects: tuple[int, int] = (1, 5)
    base_extent: tuple[float, float] = (0.5, 4.5)
    height: tuple[float, float] = (0.5, 2.0)
    half_size: float = 20.0
    points_per_m2: float = 6.0
    min_points: int = 24
    max_points: int = 400
    sigma_pts: float = 0.02
    clutter: int = 100
    clutter_height: float = 2.5

    def __post_init__(self):
        lo, hi = self.n_objects
        if lo < 0 or hi < lo:
            raise ConfigError(f"invalid object count range {self.n_objects}")
        for name in ("base_extent", "height"):
            a, b = getattr(self, name)
            if a <= 0 or b < a:
                raise ConfigError(f"invalid {name} range {(a, b)}")
        if self.sigma_pts < 0 or self.clutter < 0 or self.points_per_m2 < 0:
            raise ConfigError("point sampling parameters must be non-negative")


@dataclass(frozen=True)
class ProposalSpec:
    copies: int = 4
    center: float = 0.1
    log_size: float = 0.1
    yaw: float = 0.1
    negatives: int = 2

    def __post_init__(self):
        if self.copies < 0 or self.negatives < 0:
            raise ConfigError("proposal counts must be non-negative")
        if min(self.center, self.log_size, self.yaw) < 0:
            raise ConfigError("proposal jitter must be non-negative")


@dataclass
class Scene:
    scene_id: int
    points: np.ndarray
    gt_boxes: np.ndarray
    exhausted: bool = False

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.gt_boxes, other.gt_boxes)
        )


@dataclass
class ProposalBatch:
    proposals: np.ndarray
    matched_gt_index: np.ndarray  # -1 where nothing overlaps
    ious: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self):
        return len(self.proposals)

    @property
    def positive(self) -> np.ndarray:
        return self.matched_gt_index >= 0


def derive_rng(seed: int, scene_id: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(scene_id), int(stream)]))


def _sample_box(rng: np.random.Generator, spec: SceneSpec) -> np.ndarray:
    lim = spec.half_size - 0.5 * spec.base_extent[1]
    w, h = rng.uniform(*spec.base_extent, size=2)
    l = rng.uniform(*spec.height)
    x, y = rng.uniform(-lim, lim, size=2)
    theta = wrap_angle(rng.uniform(-np.pi, np.pi))
    return np.array([x, y, 0.5 * l, w, h, l, theta])


def sample_surface_points(rng: np.random.Generator, box: np.ndarray, spec: SceneSpec) -> np.ndarray:
    w, h, l = box[3:6]
    # faces: +-x (h*l), +-y (w*l), +-z (w*h)
    areas = np.array([h * l, h * l, w * l, w * l, w * h, w * h])
    n = int(np.clip(round(spec.points_per_m2 * areas.sum()), spec.min_points, spec.max_points))
    face = rng.choice(6, size=n, p=areas / areas.sum())
    uv = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.array([w, h, l])
    axis = face // 2
    sign = np.where(face % 2 == 0, -0.5, 0.5)
    uv[np.arange(n), axis] = sign * np.array([w, h, l])[axis]
    if spec.sigma_pts > 0:
        # truncated at 3 sigma so every point stays within a known margin of its box
        uv += np.clip(rng.normal(0.0, spec.sigma_pts, size=uv.shape), -3 * spec.sigma_pts, 3 * spec.sigma_pts)
    c, s = np.cos(box[6]), np.sin(box[6])
    x = box[0] + c * uv[:, 0] - s * uv[:, 1]
    y = box[1] + s * uv[:, 0] + c * uv[:, 1]
    z = box[2] + uv[:, 2]
    return np.stack([x, y, z], axis=1)


def generate_scene(seed: int, spec: SceneSpec | None = None, scene_id: int = 0) -> Scene:
    """Procedural scene; a pure function of ``(seed, scene_id, spec)``."""
    spec = spec or SceneSpec()
    rng = derive_rng(seed, scene_id, 0)
    target = int(rng.integers(spec.n_objects[0], spec.n_objects[1] + 1))
    boxes: list[np.ndarray] = []
    exhausted = False
    for _ in range(target):
        for _ in range(MAX_PLACEMENT_TRIES):
            cand = _sample_box(rng, spec)
            if not boxes or iou_matrix(cand[None], np.array(boxes)).max() <= 0.0:
                boxes.append(cand)
                break
        else:
            exhausted = True
    gt = np.array(boxes).reshape(-1, 7)
    parts = [sample_surface_points(rng, b, spec) for b in gt]
    if spec.clutter:
        xy = rng.uniform(-spec.half_size, spec.half_size, size=(spec.clutter, 2))
        z = rng.uniform(0.0, spec.clutter_height, size=(spec.clutter, 1))
        parts.append(np.hstack([xy, z]))
    points = np.vstack(parts) if parts else np.zeros((0, 3))
    return Scene(scene_id=scene_id, points=points, gt_boxes=gt, exhausted=exhausted)


def generate_corpus(seed: int, n_scenes: int, spec: SceneSpec | None = None, start: int = 0) -> list[Scene]:
    return [generate_scene(seed, spec, scene_id=i) for i in range(start, start + n_scenes)]


def assign_targets(proposals: np.ndarray, gt_boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Argmax-IoU assignment; index -1 and IoU 0 where nothing overlaps."""
    if len(proposals) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    if len(gt_boxes) == 0:
        return np.full(len(proposals), -1, dtype=np.int64), np.zeros(len(proposals))
    ious = iou_matrix(proposals, gt_boxes)
    idx = ious.argmax(axis=1)
    best = ious[np.arange(len(proposals)), idx]
    return np.where(best > 0, idx, -1).astype(np.int64), best


def jitter_boxes(rng: np.random.Generator, boxes: np.ndarray, spec: ProposalSpec) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    n = len(boxes)
    local = rng.normal(0.0, spec.center, size=(n, 3)) * boxes[:, 3:6]
    c, s = np.cos(boxes[:, 6]), np.sin(boxes[:, 6])
    out = boxes.copy()
    out[:, 0] += c * local[:, 0] - s * local[:, 1]
    out[:, 1] += s * local[:, 0] + c * local[:, 1]
    out[:, 2] += local[:, 2]
    out[:, 3:6] *= np.exp(rng.normal(0.0, spec.log_size, size=(n, 3)))
    out[:, 6] = wrap_angle(out[:, 6] + rng.normal(0.0, spec.yaw, size=n))
    return out


def generate_proposals(scene: Scene, seed: int, spec: ProposalSpec | None = None, scene_spec: SceneSpec | None = None) -> ProposalBatch:
    spec = spec or ProposalSpec()
    scene_spec = scene_spec or SceneSpec()
    rng = derive_rng(seed, scene.scene_id, 1)
    parts = [jitter_boxes(rng, np.repeat(scene.gt_boxes, spec.copies, axis=0), spec)]
    negatives = []
    for _ in range(spec.negatives):
        for _ in range(MAX_PLACEMENT_TRIES):
            cand = _sample_box(rng, scene_spec)
            if len(scene.gt_boxes) == 0 or iou_matrix(cand[None], scene.gt_boxes).max() <= 0.0:
                negatives.append(cand)
                break
    parts.append(np.array(negatives).reshape(-1, 7))
    proposals = np.vstack(parts)
    idx, ious = assign_targets(proposals, scene.gt_boxes)
    return ProposalBatch(proposals=proposals, matched_gt_index=idx, ious=ious)


def roi_raw_features(points: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Raw grid features per box, shape (B, 27, 7).

    Columns: log(1 + count), mean point offset from the cell center in the
    box frame (3), and the box's log extents (3, identical for every cell).
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    grid = _accel.roi_grid(points, boxes)
    geom = np.broadcast_to(np.log(boxes[:, None, 3:6]), (len(boxes), _accel.N_CELLS, 3))
    return np.concatenate([grid, geom], axis=-1)


def roi_pool(scene: Scene, box: np.ndarray, params) -> np.ndarray:
    """RoI tokens (27, d) for one box through the learned per-cell embedding."""
    from .network import token_embed_forward

    raw = roi_raw_features(scene.points, np.asarray(box)[None])
    tokens, _ = token_embed_forward(params, raw)
    return tokens[0]


# ---------------------------------------------------------------------------
# JSON-lines corpus
# ---------------------------------------------------------------------------


def scene_to_json(scene: Scene) -> str:
    return json.dumps(
        {
            "scene_id": int(scene.scene_id),
            "points": scene.points.tolist(),
            "boxes": scene.gt_boxes.tolist(),
        },
        separators=(",", ":"),
    )


def scene_from_json(line: str) -> Scene:
    rec = json.loads(line)
    points = np.asarray(rec["points"], dtype=np.float64).reshape(-1, 3)
    boxes = np.asarray(rec["boxes"], dtype=np.float64).reshape(-1, 7)
    if np.any(boxes[:, 3:6] <= 0):
        raise InvalidBoxError(f"scene {rec['scene_id']}: non-positive box extent")
    return Scene(scene_id=int(rec["scene_id"]), points=points, gt_boxes=boxes)


def write_corpus(path: str | os.PathLike, scenes) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for scene in scenes:
            fh.write(scene_to_json(scene))
            fh.write("\n")


def read_corpus(path: str | os.PathLike) -> list[Scene]:
    with open(path, encoding="utf-8") as fh:
        return [scene_from_json(line) for line in fh if line.strip()]
