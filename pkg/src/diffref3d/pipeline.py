"""Training (noisy hypotheses around proposals) and iterative DDIM inference."""

from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .boxes import decode, denormalize, encode, iou_3d, iou_matrix, normalize, wrap_angle
from .config import InferConfig, TrainConfig
from .diffusion import NoiseSchedule, build_cosine_schedule, ddim_step, make_timestep_sequence, q_sample
from .losses import classification_loss_logits, regression_loss
from .network import Adam, RefinementNet, sigmoid
from .scene import ProposalBatch, Scene, derive_rng, generate_proposals, roi_raw_features

RECALL_THRESHOLDS = (0.3, 0.5, 0.7)
AP_RECALL_POINTS = 40


class DiffRef3D:
    """Refinement network bundled with its diffusion schedule and config."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.net = RefinementNet(cfg.ham, seed=cfg.seed, enable_ham=cfg.enable_ham, enable_tt=cfg.enable_tt)
        self.schedule: NoiseSchedule = build_cosine_schedule(cfg.diffusion.T, cfg.diffusion.s)

    @property
    def params(self):
        return self.net.params

    def predict(self, points: np.ndarray, proposals: np.ndarray, x_t: np.ndarray, t):
        """(x0_hat, confidence) for hypotheses ``x_t`` around ``proposals``."""
        raw_p = roi_raw_features(points, proposals)
        raw_h = None
        if self.cfg.enable_ham:
            hyp = decode(proposals, denormalize(x_t, proposals))
            raw_h = roi_raw_features(points, hyp)
        x0_hat, logit, _ = self.net.forward(raw_p, raw_h, x_t, t)
        return x0_hat, sigmoid(logit)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainingSet:
    """Per-proposal tensors flattened across scenes."""

    scenes: list[Scene]
    proposals: np.ndarray
    scene_index: np.ndarray
    x0: np.ndarray
    target_boxes: np.ndarray
    ious: np.ndarray
    raw_p: np.ndarray
    offsets: np.ndarray  # first proposal row of each scene

    @classmethod
    def build(cls, scenes: list[Scene], cfg: TrainConfig) -> "TrainingSet":
        props, sidx, x0s, tboxes, ious, raws = [], [], [], [], [], []
        offsets = [0]
        for i, scene in enumerate(scenes):
            batch = generate_proposals(scene, cfg.seed, cfg.proposals)
            p = batch.proposals
            tb = p.copy()
            pos = batch.positive
            tb[pos] = scene.gt_boxes[batch.matched_gt_index[pos]]
            x0 = np.zeros_like(p)
            if pos.any():
                x0[pos] = normalize(encode(p[pos], tb[pos]), p[pos])
            props.append(p)
            sidx.append(np.full(len(p), i))
            x0s.append(x0)
            tboxes.append(tb)
            ious.append(batch.ious)
            raws.append(roi_raw_features(scene.points, p))
            offsets.append(offsets[-1] + len(p))
        def cat(xs, shape):
            return np.concatenate(xs) if xs else np.zeros(shape)

        return cls(
            scenes=scenes,
            proposals=cat(props, (0, 7)),
            scene_index=cat(sidx, (0,)).astype(np.int64),
            x0=cat(x0s, (0, 7)),
            target_boxes=cat(tboxes, (0, 7)),
            ious=cat(ious, (0,)),
            raw_p=cat(raws, (0, 27, 7)),
            offsets=np.array(offsets),
        )

    def rows_for(self, scene_ids: np.ndarray) -> np.ndarray:
        return np.concatenate([np.arange(self.offsets[i], self.offsets[i + 1]) for i in scene_ids])


@dataclass
class StepInputs:
    rows: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    raw_h: np.ndarray | None


def sample_step_inputs(model: DiffRef3D, data: TrainingSet, rows: np.ndarray, rng: np.random.Generator) -> StepInputs:
    cfg = model.cfg
    n = len(rows)
    t = rng.integers(1, cfg.diffusion.T + 1, size=n)
    eps = rng.standard_normal((n, 7))
    if cfg.enable_diffusion:
        x_t = q_sample(data.x0[rows], t, eps, model.schedule, cfg.diffusion)
    else:
        x_t = np.clip(eps / cfg.diffusion.snr, -cfg.diffusion.clamp_bound, cfg.diffusion.clamp_bound)
    raw_h = None
    if cfg.enable_ham:
        props = data.proposals[rows]
        hyp = decode(props, denormalize(x_t, props))
        raw_h = np.empty((n, 27, data.raw_p.shape[-1]))
        sidx = data.scene_index[rows]
        for s in np.unique(sidx):
            sel = sidx == s
            raw_h[sel] = roi_raw_features(data.scenes[s].points, hyp[sel])
    return StepInputs(rows=rows, t=t, x_t=x_t, raw_h=raw_h)


def loss_and_grads(model: DiffRef3D, data: TrainingSet, inputs: StepInputs):
    """Forward, both losses and backward into the parameter store; returns (reg, cls)."""
    rows = inputs.rows
    model.params.zero_grad()
    x0_hat, logit, cache = model.net.forward(data.raw_p[rows], inputs.raw_h, inputs.x_t, inputs.t)
    reg, d_x0 = regression_loss(
        x0_hat, data.x0[rows], data.proposals[rows], data.target_boxes[rows], data.ious[rows], model.cfg.loss
    )
    cls, d_logit = classification_loss_logits(logit, data.ious[rows], model.cfg.loss)
    model.net.backward(d_x0, d_logit, cache)
    return reg, cls


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    counters: Counter = field(default_factory=Counter)


def train_step(model: DiffRef3D, data: TrainingSet, rows: np.ndarray, rng: np.random.Generator, optimizer: Adam, log: TrainLog | None = None):
    inputs = sample_step_inputs(model, data, rows, rng)
    if log is not None and not np.any(data.ious[rows] >= model.cfg.loss.theta_reg):
        log.counters["classification_only_steps"] += 1
    reg, cls = loss_and_grads(model, data, inputs)
    optimizer.step(model.params)
    return reg, cls


def train(model: DiffRef3D, scenes: list[Scene], log: TrainLog | None = None, progress=None) -> TrainLog:
    cfg = model.cfg
    log = log if log is not None else TrainLog()
    data = TrainingSet.build(scenes, cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7EA1]))
    optimizer = Adam(lr=cfg.lr)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(scenes))
        for start in range(0, len(order), cfg.batch_scenes):
            rows = data.rows_for(order[start : start + cfg.batch_scenes])
            if len(rows) == 0:
                continue
            reg, cls = train_step(model, data, rows, rng, optimizer, log)
            log.rows.append({"step": step, "epoch": epoch, "reg_loss": reg, "cls_loss": cls})
            step += 1
        if progress is not None:
            progress(epoch, log)
    return log


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


@dataclass
class InferenceResult:
    scene_id: int
    proposals: np.ndarray
    boxes: np.ndarray
    confidences: np.ndarray
    timesteps: list[int]
    step_boxes: np.ndarray  # (steps, K, 7) raw per-step predictions
    step_confidences: np.ndarray  # (steps, K)
    ensembled: np.ndarray  # (steps, K, 7) ensemble over the first k+1 steps


def ensemble_boxes(step_boxes: np.ndarray, step_conf: np.ndarray, mode: str) -> np.ndarray:
    """Combine per-step predictions (S, K, 7) into (K, 7)."""
    if len(step_boxes) == 1 or mode == "none":
        return step_boxes[-1].copy()
    if mode == "mean":
        out = step_boxes.mean(axis=0)
        out[:, 6] = np.arctan2(np.sin(step_boxes[..., 6]).mean(axis=0), np.cos(step_boxes[..., 6]).mean(axis=0))
        out[:, 6] = wrap_angle(out[:, 6])
        return out
    if mode == "nms":
        best = step_conf.argmax(axis=0)
        return step_boxes[best, np.arange(step_boxes.shape[1])].copy()
    raise ValueError(f"unknown ensemble mode {mode!r}")


def infer(model: DiffRef3D, scene: Scene, proposals: np.ndarray, cfg: InferConfig) -> InferenceResult:
    """Iterative refinement with proposal renewal after every sampling step."""
    dcfg = model.cfg.diffusion
    ts = make_timestep_sequence(dcfg.T, cfg.steps)
    rng = derive_rng(cfg.seed, scene.scene_id, 2)
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 7)
    k = len(proposals)
    x = np.clip(rng.standard_normal((k, 7)) / dcfg.snr, -dcfg.clamp_bound, dcfg.clamp_bound)
    current = proposals.copy()
    preds, confs = [], []
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        eps_new = rng.standard_normal((k, 7))
        if k == 0:
            preds.append(np.zeros((0, 7)))
            confs.append(np.zeros(0))
            continue
        x0_hat, conf = model.predict(scene.points, current, x, t)
        pred = decode(current, denormalize(x0_hat, current))
        preds.append(pred)
        confs.append(conf)
        if t_prev == 0:
            break
        x_prev = ddim_step(x, x0_hat, t, t_prev, eps_new, model.schedule)
        # carry the next hypothesis box over to the renewed proposal's frame
        hyp_next = decode(current, denormalize(x_prev, current))
        current = pred
        x = normalize(encode(current, hyp_next), current)
    step_boxes = np.stack(preds)
    step_conf = np.stack(confs)
    ensembled = np.stack([ensemble_boxes(step_boxes[: j + 1], step_conf[: j + 1], cfg.ensemble) for j in range(len(ts))])
    return InferenceResult(
        scene_id=scene.scene_id,
        proposals=proposals,
        boxes=ensembled[-1],
        confidences=step_conf[-1],
        timesteps=ts,
        step_boxes=step_boxes,
        step_confidences=step_conf,
        ensembled=ensembled,
    )


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    mean_iou_proposals: float
    mean_iou_predictions: float
    recall_at: dict[float, float]
    ap_r40: float | None
    per_step_mean_iou: list[float]
    latency_ms_per_scene: float = float("nan")
    n_scenes: int = 0
    n_gt: int = 0
    n_predictions: int = 0


def greedy_match(pred_boxes, confidences, gt_boxes, threshold: float):
    """Confidence-ordered matching; returns (order, is_tp) over predictions."""
    order = np.argsort(-np.asarray(confidences), kind="stable")
    tp = np.zeros(len(order), dtype=bool)
    if len(gt_boxes) == 0 or len(order) == 0:
        return order, tp
    ious = iou_matrix(np.asarray(pred_boxes)[order], gt_boxes)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for i in range(len(order)):
        cand = np.where(taken, -1.0, ious[i])
        j = int(cand.argmax())
        if cand[j] >= threshold:
            taken[j] = True
            tp[i] = True
    return order, tp


def average_precision_r40(confidences, is_tp, n_gt: int) -> float | None:
    """AP with precision interpolated at recall 1/40, 2/40, ..., 1."""
    if n_gt == 0:
        return None
    conf = np.asarray(confidences, dtype=np.float64)
    is_tp = np.asarray(is_tp, dtype=bool)
    if conf.size == 0:
        return 0.0
    order = np.argsort(-conf, kind="stable")
    tp = np.cumsum(is_tp[order])
    fp = np.cumsum(~is_tp[order])
    recall = tp / n_gt
    precision = tp / (tp + fp)
    total = 0.0
    for r in np.arange(1, AP_RECALL_POINTS + 1) / AP_RECALL_POINTS:
        ok = recall >= r - 1e-12
        total += precision[ok].max() if ok.any() else 0.0
    return total / AP_RECALL_POINTS


def _mean_of(chunks) -> float:
    return float(np.concatenate(chunks).mean()) if chunks else float("nan")


def evaluate(results: list[InferenceResult], scenes: list[Scene], batches: list[ProposalBatch], iou_threshold: float = 0.5) -> EvalReport:
    """Detection metrics plus proposal-vs-prediction IoU on matched proposals."""
    by_id = {s.scene_id: s for s in scenes}
    all_conf, all_tp = [], []
    recall_hits = {thr: 0 for thr in RECALL_THRESHOLDS}
    n_gt = 0
    iou_prop, iou_pred = [], []
    n_steps = max((len(r.timesteps) for r in results), default=0)
    per_step: list[list[np.ndarray]] = [[] for _ in range(n_steps)]
    for res, batch in zip(results, batches):
        scene = by_id[res.scene_id]
        gt = scene.gt_boxes
        n_gt += len(gt)
        order, tp = greedy_match(res.boxes, res.confidences, gt, iou_threshold)
        all_conf.append(res.confidences[order])
        all_tp.append(tp)
        for thr in RECALL_THRESHOLDS:
            recall_hits[thr] += int(greedy_match(res.boxes, res.confidences, gt, thr)[1].sum())
        pos = batch.matched_gt_index >= 0
        if pos.any():
            target = gt[batch.matched_gt_index[pos]]
            iou_prop.append(iou_3d(res.proposals[pos], target))
            iou_pred.append(iou_3d(res.boxes[pos], target))
            for j in range(len(res.ensembled)):
                per_step[j].append(iou_3d(res.ensembled[j][pos], target))
    conf = np.concatenate(all_conf) if all_conf else np.zeros(0)
    tps = np.concatenate(all_tp) if all_tp else np.zeros(0, dtype=bool)
    return EvalReport(
        mean_iou_proposals=_mean_of(iou_prop),
        mean_iou_predictions=_mean_of(iou_pred),
        recall_at={thr: (recall_hits[thr] / n_gt if n_gt else 0.0) for thr in RECALL_THRESHOLDS},
        ap_r40=average_precision_r40(conf, tps, n_gt),
        per_step_mean_iou=[_mean_of(xs) for xs in per_step],
        n_scenes=len(results),
        n_gt=n_gt,
        n_predictions=int(conf.size),
    )


def run_inference(model: DiffRef3D, scenes: list[Scene], cfg: InferConfig, proposal_seed: int | None = None):
    """Proposals, inference and timing over a scene list; returns (results, batches, ms per scene)."""
    seed = model.cfg.seed if proposal_seed is None else proposal_seed
    batches = [generate_proposals(s, seed, model.cfg.proposals) for s in scenes]
    results = []
    start = time.perf_counter()
    for scene, batch in zip(scenes, batches):
        results.append(infer(model, scene, batch.proposals, cfg))
    elapsed = time.perf_counter() - start
    ms = 1000.0 * elapsed / max(len(scenes), 1)
    return results, batches, ms


def run_evaluation(model: DiffRef3D, scenes: list[Scene], cfg: InferConfig, proposal_seed: int | None = None) -> EvalReport:
    results, batches, ms = run_inference(model, scenes, cfg, proposal_seed)
    report = evaluate(results, scenes, batches)
    report.latency_ms_per_scene = ms
    return report


def export_tt_norms(model: DiffRef3D, timesteps=None) -> np.ndarray:
    """(t, ||W_t||) rows; defaults to every t in 1..T."""
    if timesteps is None:
        timesteps = np.arange(1, model.cfg.diffusion.T + 1)
    timesteps = np.asarray(timesteps, dtype=np.int64)
    return np.column_stack([timesteps.astype(np.float64), model.net.scale_norms(timesteps)])
