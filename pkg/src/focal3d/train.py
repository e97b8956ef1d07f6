"""Target assignment, the two-phase BCE -> focal schedule, and prediction."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from focal3d.errors import ConfigError, DomainError, NumericError, StructuralError
from focal3d.geometry import Box3D, Detection, bev_iou, decode24, decode7_batch, encode24, encode7_batch, nms
from focal3d.losses import LossConfig, composite_loss
from focal3d.network import tensor as T
from focal3d.network.checkpoint import load_model, save_model
from focal3d.network.models import SparseBatch, build_model, head_grid, make_anchors, to_anchor_layout
from focal3d.voxel import voxelize_occupancy, voxelize_sparse

log = logging.getLogger(__name__)

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1
METRIC_COLUMNS = ("step", "epoch", "loss", "cls_pos", "cls_neg", "reg", "val_map")


# targets --------------------------------------------------------------------

@dataclass(frozen=True)
class TargetAssignment:
    """Per-anchor labels (1 positive, 0 negative, -1 ignore) and residuals."""

    labels: np.ndarray
    residuals: np.ndarray

    def __post_init__(self):
        if self.residuals.shape[:-1] != self.labels.shape:
            raise StructuralError(f"residuals {self.residuals.shape} do not extend labels {self.labels.shape}")

    @property
    def n_pos(self):
        return int((self.labels == POSITIVE).sum())

    @property
    def n_neg(self):
        return int((self.labels == NEGATIVE).sum())

    @property
    def n_ignore(self):
        return int((self.labels == IGNORE).sum())

    @property
    def n_total(self):
        return int(self.labels.size)

    @staticmethod
    def stack(items):
        return TargetAssignment(np.stack([t.labels for t in items]), np.stack([t.residuals for t in items]))


def _box_and_support(item):
    if isinstance(item, Box3D):
        return item, 0
    return item.box, getattr(item, "support", 0)


def canonical_yaw(yaw, reference=0.0):
    """``yaw`` shifted by a multiple of pi into [reference - pi/2, reference + pi/2).

    A box and its half-turn have the same extent, so targets use the
    representative closest to the anchor orientation.
    """
    return reference + ((yaw - reference + math.pi / 2) % math.pi) - math.pi / 2


def assign_targets_3dfcn(grid, labels, diagonal):
    """Positive at the head voxel containing each object center.

    Residuals are the 8 corners relative to that voxel's center divided by
    the anchor diagonal. When two centers share a voxel the object with the
    larger support wins (first one on ties).
    """
    if diagonal <= 0:
        raise DomainError("anchor diagonal must be positive")
    lab = np.zeros(grid.dims + (1,), dtype=np.int8)
    res = np.zeros(grid.dims + (1, 24))
    owner = {}
    for i, item in enumerate(labels):
        box, support = _box_and_support(item)
        idx, inside = grid.voxel_indices(np.array([box.center]))
        if not inside[0]:
            log.warning("object center %s outside the head grid; skipped", box.center)
            continue
        key = tuple(int(v) for v in idx[0])
        if key in owner:
            prev = owner[key]
            log.info("objects %d and %d share head voxel %s; keeping the larger support", prev[0], i, key)
            if support <= prev[1]:
                continue
        owner[key] = (i, support)
        box = replace(box, yaw=canonical_yaw(box.yaw))
        lab[key] = POSITIVE
        res[key] = encode24(box, grid.voxel_center(np.array(key)), diagonal)
    return TargetAssignment(lab, res)


def _reach(size):
    return 0.5 * np.hypot(size[..., 0], size[..., 1])


def assign_targets_voxelnet(anchors, labels, pos_iou=0.6, neg_iou=0.45):
    """IoU matching of (H, W, A, 7) anchors against labels in bird's-eye view."""
    if not 0.0 <= neg_iou <= pos_iou <= 1.0:
        raise DomainError(f"need 0 <= neg_iou <= pos_iou <= 1, got {neg_iou}, {pos_iou}")
    shape = anchors.shape[:-1]
    flat = anchors.reshape(-1, 7)
    n = len(flat)
    boxes = [_box_and_support(item)[0] for item in labels]
    lab = np.zeros(n, dtype=np.int8)
    res = np.zeros((n, 7))
    if not boxes:
        return TargetAssignment(lab.reshape(shape), res.reshape(shape + (7,)))
    ious = np.zeros((n, len(boxes)))
    a_reach = _reach(flat[:, 3:5])
    for j, b in enumerate(boxes):
        dist = np.hypot(flat[:, 0] - b.center[0], flat[:, 1] - b.center[1])
        for i in np.flatnonzero(dist < a_reach + _reach(np.asarray(b.size))):
            ious[i, j] = bev_iou(Box3D.from_array(flat[i]), b)
    best = ious.argmax(axis=1)
    max_iou = ious[np.arange(n), best]
    pos = max_iou >= pos_iou
    for j in range(len(boxes)):
        i = int(ious[:, j].argmax())
        if ious[i, j] > 0:
            pos[i] = True
            best[i] = j
    neg = (max_iou < neg_iou) & ~pos
    lab[:] = IGNORE
    lab[neg] = NEGATIVE
    lab[pos] = POSITIVE
    pi = np.flatnonzero(pos)
    if len(pi):
        gt = np.array([boxes[j].to_array() for j in best[pi]])
        gt[:, 6] = canonical_yaw(gt[:, 6], flat[pi, 6])
        res[pi] = encode7_batch(gt, flat[pi])
    return TargetAssignment(lab.reshape(shape), res.reshape(shape + (7,)))


# prepared inputs ------------------------------------------------------------

@dataclass(frozen=True)
class Prepared:
    """A frame voxelized for one detector plus its targets."""

    frame_id: str
    inputs: object
    targets: TargetAssignment
    labels: tuple


def prepare_frame(frame, config, seed=0, pos_iou=0.6, neg_iou=0.45):
    if config.family == "3dfcn":
        inputs = voxelize_occupancy(frame.cloud, config.grid)
        targets = assign_targets_3dfcn(head_grid(config), frame.labels, config.anchor.diagonal)
    else:
        inputs = voxelize_sparse(frame.cloud, config.grid, config.max_points, seed)
        targets = assign_targets_voxelnet(make_anchors(config), frame.labels, pos_iou, neg_iou)
    return Prepared(frame.id, inputs, targets, tuple(frame.labels))


def make_batch(config, prepared):
    if config.family == "3dfcn":
        return np.stack([p.inputs.grid for p in prepared]).astype(np.float64)[:, None]
    return SparseBatch.from_sets([p.inputs for p in prepared])


def anchor_outputs(model, config, batch):
    pmap, rmap = model(batch)
    return to_anchor_layout(pmap, rmap, config.n_anchors, config.residual_size)


def batch_loss(model, config, prepared, loss_cfg):
    p, r = anchor_outputs(model, config, make_batch(config, prepared))
    return composite_loss(p, r, TargetAssignment.stack([x.targets for x in prepared]), loss_cfg)


# prediction -----------------------------------------------------------------

def decode_frame(config, scores, residuals, score_threshold=0.5, nms_threshold=0.8, top_k=100, metric="bev"):
    """Detections from one frame's anchor-layout scores (*S, A) and residuals (*S, A, R)."""
    flat_s = scores.reshape(-1)
    cand = np.flatnonzero(flat_s > score_threshold)
    if len(cand) > top_k:
        cand = cand[np.argsort(-flat_s[cand], kind="stable")[:top_k]]
    if not len(cand):
        return []
    res = residuals.reshape(-1, residuals.shape[-1])[cand]
    if config.family == "3dfcn":
        g = head_grid(config)
        centers = g.voxel_center(g.unflatten(cand))
        boxes = [decode24(r, c, config.anchor.diagonal) for r, c in zip(res, centers)]
    else:
        anchors = make_anchors(config).reshape(-1, 7)[cand]
        boxes = [Box3D.from_array(b) for b in decode7_batch(res, anchors)]
    dets = [Detection(b, float(min(max(s, 0.0), 1.0))) for b, s in zip(boxes, flat_s[cand])]
    return [dets[i] for i in nms(dets, nms_threshold, metric=metric)]


def predict_prepared(model, config, prepared, score_threshold=0.5, nms_threshold=0.8, top_k=100,
                     batch_size=8, return_scores=False):
    """Per-frame detection lists (and optionally the raw anchor scores)."""
    was_training = model.training
    model.eval()
    out, raw = [], []
    try:
        with T.no_grad():
            for s in range(0, len(prepared), batch_size):
                chunk = prepared[s:s + batch_size]
                p, r = anchor_outputs(model, config, make_batch(config, chunk))
                probs = 1.0 / (1.0 + np.exp(-p.data))
                for i in range(len(chunk)):
                    out.append(decode_frame(config, probs[i], r.data[i], score_threshold, nms_threshold, top_k))
                    raw.append(probs[i])
    finally:
        model.train(was_training)
    return (out, raw) if return_scores else out


def predict(model, config, frame, score_threshold=0.5, nms_threshold=0.8, top_k=100, seed=0):
    """Detections for one frame, sorted by descending score."""
    return predict_prepared(model, config, [prepare_frame(frame, config, seed)], score_threshold,
                            nms_threshold, top_k)[0]


# training -------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """Two-phase schedule: ``epochs_phase1`` at ``lr`` with gamma = 0, then
    ``epochs_phase2`` at ``phase2_factor * lr`` with the configured loss."""

    epochs_phase1: int = 30
    epochs_phase2: int = 30
    lr: float = 0.01
    phase2_factor: float = 0.1
    batch_size: int = 2
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 0.0
    grad_clip: float = 10.0
    loss: LossConfig = field(default_factory=lambda: LossConfig(gamma=2.0, alpha=1.0, beta=10.0, eta=0.5))
    seed: int = 0
    checkpoint_every: int = 1
    max_steps: int = 0
    pos_iou: float = 0.6
    neg_iou: float = 0.45
    eval_score_threshold: float = 0.05
    nms_threshold: float = 0.8
    eval_every: int = 1

    def __post_init__(self):
        bad = []
        for name in ("lr", "phase2_factor"):
            if not getattr(self, name) > 0:
                bad.append(name)
        for name in ("epochs_phase1", "epochs_phase2", "checkpoint_every", "max_steps", "eval_every"):
            if getattr(self, name) < 0:
                bad.append(name)
        if self.batch_size < 1:
            bad.append("batch_size")
        if self.optimizer != "sgd":
            bad.append("optimizer")
        if not 0 <= self.momentum < 1:
            bad.append("momentum")
        if self.weight_decay < 0 or self.grad_clip < 0:
            bad.append("weight_decay" if self.weight_decay < 0 else "grad_clip")
        if bad:
            raise ConfigError(f"invalid training settings: {', '.join(bad)}", [f"train.{b}" for b in bad])

    @property
    def phase2_lr(self):
        return self.lr * self.phase2_factor

    def phase_loss(self, phase):
        return self.loss.replace(gamma=0.0) if phase == 1 else self.loss

    def to_dict(self):
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "loss" in d:
            d["loss"] = LossConfig.from_dict(d["loss"])
        return cls(**d)


class SGD:
    """Stochastic gradient descent with heavy-ball momentum."""

    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        self.params = params
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, clip=0.0):
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
        scale = clip / norm if clip and norm > clip else 1.0
        for k, p in self.params.items():
            g = grads[k] * scale
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[k]
            v *= self.momentum
            v += g
            p.data = p.data - self.lr * v
        return norm


@dataclass
class RunResult:
    run_dir: Path
    model: object
    rows: list
    best: dict
    step: int


def _fmt(v):
    if v is None or v == "":
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def evaluate_map(model, config, prepared, cfg):
    """Mean of the easy/moderate/hard 3D APs over ``prepared`` frames."""
    from focal3d.analysis import evaluate

    dets = predict_prepared(model, config, prepared, cfg.eval_score_threshold, cfg.nms_threshold)
    return evaluate(dets, [p.labels for p in prepared]).map3d


def train(cfg, config, train_frames, val_frames, run_dir, init_checkpoint=None, prepared=None,
          progress=None):
    """Run the two-phase schedule and write the run directory.

    ``init_checkpoint`` resumes from a saved model (its manifest meta holds
    the step counter); a run with ``epochs_phase1 = 0`` then continues with
    the second phase only, which lets several focal branches share one BCE
    phase. ``prepared`` may pass pre-voxelized (train, val) lists.
    """
    if not train_frames:
        raise DomainError("training set is empty")
    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    if prepared is None:
        prep_train = [prepare_frame(f, config, cfg.seed, cfg.pos_iou, cfg.neg_iou) for f in train_frames]
        prep_val = [prepare_frame(f, config, cfg.seed, cfg.pos_iou, cfg.neg_iou) for f in val_frames]
    else:
        prep_train, prep_val = prepared
    model = build_model(config, cfg.seed)
    step = 0
    if init_checkpoint is not None:
        manifest = load_model(init_checkpoint, model)
        step = int(manifest["meta"].get("step", 0))
    phases = [(1, cfg.epochs_phase1, cfg.lr), (2, cfg.epochs_phase2, cfg.phase2_lr)]
    resolved = {"train": cfg.to_dict(), "network": config.name, "grid": config.grid.to_dict(),
                "max_points": config.max_points,
                "phases": [{"phase": p, "epochs": e, "lr": lr, "loss": cfg.phase_loss(p).to_dict()}
                           for p, e, lr in phases],
                "init_checkpoint": str(init_checkpoint) if init_checkpoint else None,
                "train_ids": [p.frame_id for p in prep_train], "val_ids": [p.frame_id for p in prep_val]}
    (run_dir / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")

    rows = []
    best = {"val_map": -1.0}
    metrics_path = run_dir / "metrics.csv"
    fh = open(metrics_path, "w", newline="")
    writer = csv.writer(fh)
    writer.writerow(METRIC_COLUMNS)
    epoch = 0
    stop = False
    try:
        for phase, n_epochs, lr in phases:
            if n_epochs == 0 or stop:
                continue
            opt = SGD(model.parameters(), lr, cfg.momentum, cfg.weight_decay)
            loss_cfg = cfg.phase_loss(phase)
            model.train()
            for _ in range(n_epochs):
                epoch += 1
                order = np.random.default_rng([cfg.seed, phase, epoch]).permutation(len(prep_train))
                epoch_rows = []
                for s in range(0, len(order), cfg.batch_size):
                    chunk = [prep_train[i] for i in order[s:s + cfg.batch_size]]
                    model.zero_grad()
                    br = batch_loss(model, config, chunk, loss_cfg)
                    vals = br.values()
                    if not all(math.isfinite(vals[k]) for k in ("loss", "cls_pos", "cls_neg", "reg")):
                        batch_id = f"phase{phase}/epoch{epoch}/step{step + 1}:" + ",".join(p.frame_id for p in chunk)
                        safe = {k: v if math.isfinite(v) else repr(v) for k, v in vals.items()}
                        (run_dir / "error.json").write_text(json.dumps({"batch_id": batch_id, **safe}) + "\n")
                        raise NumericError("non-finite loss", batch_id=batch_id)
                    br.total.backward()
                    opt.step(cfg.grad_clip)
                    step += 1
                    row = [step, epoch, vals["loss"], vals["cls_pos"], vals["cls_neg"], vals["reg"], ""]
                    epoch_rows.append(row)
                    if progress:
                        progress(row)
                    if cfg.max_steps and step >= cfg.max_steps:
                        stop = True
                        break
                val_map = None
                if prep_val and cfg.eval_every and (epoch % cfg.eval_every == 0 or stop):
                    val_map = evaluate_map(model, config, prep_val, cfg)
                    epoch_rows[-1][-1] = val_map
                for row in epoch_rows:
                    writer.writerow([_fmt(v) for v in row])
                fh.flush()
                rows.extend(epoch_rows)
                name = f"epoch_{epoch:04d}"
                improved = val_map is not None and val_map > best["val_map"]
                if (cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0) or improved or stop:
                    save_model(run_dir / "checkpoints" / name, model,
                               {"step": step, "epoch": epoch, "phase": phase, "val_map": val_map,
                                "network": config.name, "max_points": config.max_points})
                if improved:
                    best = {"val_map": val_map, "epoch": epoch, "checkpoint": f"checkpoints/{name}"}
                    (run_dir / "best.json").write_text(json.dumps(best, indent=2, sort_keys=True) + "\n")
                if stop:
                    break
        final = run_dir / "checkpoints" / "final"
        save_model(final, model, {"step": step, "epoch": epoch, "network": config.name,
                                  "max_points": config.max_points})
    finally:
        fh.close()
    return RunResult(run_dir, model, rows, best, step)


def read_metrics(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
