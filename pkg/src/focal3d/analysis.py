"""Evaluation and loss-distribution analysis.

KITTI-style average precision, cumulative loss distributions of focal loss
over sampled predictions, posterior histograms and imbalance reports.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from focal3d.errors import DomainError, ParseError
from focal3d.geometry import IOU_FUNCS
from focal3d.losses import PROB_EPS, focal_from_pt

DEFAULT_OVERLAPS = {"bev": 0.5, "3d": 0.5}
DIFFICULTY_NAMES = ("easy", "moderate", "hard")


# average precision ----------------------------------------------------------

def _frame_matches(dets, labels, metric, overlap, difficulty):
    """(score, is_tp) per counted detection in one frame and the number of
    labels in the difficulty bucket.

    Buckets are cumulative: level ``difficulty`` counts labels whose level is
    between 0 and ``difficulty``. Detections matching a label outside the
    bucket are neither true nor false positives.
    """
    fn = IOU_FUNCS[metric]
    in_bucket = [0 <= getattr(lab, "difficulty", 0) <= difficulty for lab in labels]
    boxes = [getattr(lab, "box", lab) for lab in labels]
    matched = [False] * len(labels)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    out = []
    for i in order:
        d = dets[i]
        ious = [fn(d.box, b) if not matched[j] else -1.0 for j, b in enumerate(boxes)]
        best_in, best_in_iou = -1, -1.0
        best_out, best_out_iou = -1, -1.0
        for j, v in enumerate(ious):
            if in_bucket[j] and v > best_in_iou:
                best_in, best_in_iou = j, v
            elif not in_bucket[j] and v > best_out_iou:
                best_out, best_out_iou = j, v
        if best_in >= 0 and best_in_iou >= overlap:
            matched[best_in] = True
            out.append((d.score, True))
        elif best_out >= 0 and best_out_iou >= overlap:
            matched[best_out] = True
        else:
            out.append((d.score, False))
    return out, sum(in_bucket)


def precision_recall(dets_per_frame, labels_per_frame, metric="3d", overlap=0.5, difficulty=2):
    """Precision and recall at every distinct score threshold (descending).

    Returns (precision, recall, n_labels). Tied scores enter together so the
    curve depends only on score ranks, not on frame order.
    """
    if not 0.0 < overlap <= 1.0:
        raise DomainError(f"overlap must lie in (0, 1], got {overlap}")
    if len(dets_per_frame) != len(labels_per_frame):
        raise DomainError("detections and labels must cover the same frames")
    scores, tps, n_labels = [], [], 0
    for dets, labels in zip(dets_per_frame, labels_per_frame):
        m, n = _frame_matches(dets, labels, metric, overlap, difficulty)
        n_labels += n
        for s, tp in m:
            scores.append(s)
            tps.append(tp)
    if not scores:
        return np.zeros(0), np.zeros(0), n_labels
    scores = np.asarray(scores)
    tps = np.asarray(tps, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    scores, tps = scores[order], tps[order]
    ctp = np.cumsum(tps)
    cfp = np.cumsum(1 - tps)
    ends = np.r_[np.flatnonzero(np.diff(scores) != 0), len(scores) - 1]
    ctp, cfp = ctp[ends], cfp[ends]
    precision = ctp / (ctp + cfp)
    recall = ctp / n_labels if n_labels else np.zeros_like(precision, dtype=float)
    return precision, recall, n_labels


def interpolated_ap(precision, recall, points=11):
    """Mean of max precision at recall >= r over the sample recalls, in percent."""
    if points == 11:
        levels = np.linspace(0.0, 1.0, 11)
    elif points == 40:
        levels = np.linspace(1.0 / 40, 1.0, 40)
    else:
        raise DomainError(f"interpolation uses 11 or 40 points, got {points}")
    total = 0.0
    for r in levels:
        mask = recall >= r - 1e-12
        total += float(precision[mask].max()) if mask.any() else 0.0
    return 100.0 * total / len(levels)


def average_precision(dets_per_frame, labels_per_frame, metric="3d", overlap=0.5, difficulty=2, points=11):
    """Interpolated AP in percent, or None when the bucket holds no labels."""
    if metric not in ("bev", "3d"):
        raise DomainError(f"AP metric must be 'bev' or '3d', got {metric!r}")
    p, r, n = precision_recall(dets_per_frame, labels_per_frame, metric, overlap, difficulty)
    if n == 0:
        return None
    return interpolated_ap(p, r, points)


@dataclass(frozen=True)
class APResult:
    """AP (%) per metric and difficulty; None marks an empty bucket."""

    bev: tuple
    ap3d: tuple

    @property
    def map3d(self):
        vals = [v for v in self.ap3d if v is not None]
        return float(np.mean(vals)) if vals else 0.0

    def to_dict(self):
        return {
            "bev": dict(zip(DIFFICULTY_NAMES, self.bev)),
            "3d": dict(zip(DIFFICULTY_NAMES, self.ap3d)),
            "map3d": self.map3d,
        }


def evaluate(dets_per_frame, labels_per_frame, overlaps=None, points=11):
    overlaps = {**DEFAULT_OVERLAPS, **(overlaps or {})}
    out = {}
    for metric in ("bev", "3d"):
        out[metric] = tuple(
            average_precision(dets_per_frame, labels_per_frame, metric, overlaps[metric], level, points)
            for level in range(3)
        )
    return APResult(out["bev"], out["3d"])


def write_ap_report(path, result):
    Path(path).write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")


# loss distributions ---------------------------------------------------------

@dataclass(frozen=True)
class PredictionDump:
    """Sampled (y, p_t) pairs; y is +1 for positives and -1 for negatives."""

    y: np.ndarray
    p_t: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        p = np.asarray(self.p_t, dtype=np.float64).reshape(-1)
        if y.shape != p.shape:
            raise DomainError("y and p_t must have the same length")
        if not np.all((y == 1) | (y == -1)):
            raise DomainError("labels must be +1 or -1")
        if not np.all(np.isfinite(p)) or np.any((p < 0) | (p > 1)):
            raise DomainError("p_t must lie in [0, 1]")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "p_t", np.clip(p, PROB_EPS, 1.0 - PROB_EPS))

    def __len__(self):
        return len(self.y)

    def select(self, class_filter=None):
        if class_filter is None or class_filter == "all":
            return self.p_t
        if class_filter in ("positive", "pos"):
            return self.p_t[self.y == 1]
        if class_filter in ("negative", "neg"):
            return self.p_t[self.y == -1]
        raise DomainError(f"unknown class filter {class_filter!r}")


def synthetic_dump(n_neg=100_000, n_pos=1_000, seed=0, neg_shape=(20.0, 1.0), pos_shape=(5.0, 2.0)):
    """Dump with Beta-distributed p_t: negatives skewed easy, positives harder."""
    rng = np.random.default_rng(seed)
    p = np.r_[rng.beta(*neg_shape, size=n_neg), rng.beta(*pos_shape, size=n_pos)]
    y = np.r_[-np.ones(n_neg, dtype=np.int64), np.ones(n_pos, dtype=np.int64)]
    return PredictionDump(y, p)


def write_dump(path, dump):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("y", "p_t"))
        for y, p in zip(dump.y, dump.p_t):
            w.writerow((int(y), repr(float(p))))


def read_dump(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["y", "p_t"]:
            raise ParseError(f"dump header must be 'y,p_t', got {header}", path=path, line=1)
        ys, ps = [], []
        for lineno, row in enumerate(reader, 2):
            try:
                y, p = row
                ys.append(int(y))
                ps.append(float(p))
            except ValueError as exc:
                raise ParseError(str(exc), path=path, line=lineno) from None
    return PredictionDump(np.array(ys, dtype=np.int64), np.array(ps))


@dataclass(frozen=True)
class CDFCurve:
    """Cumulative normalized loss; ``x`` is the sample fraction (easy to hard)."""

    x: np.ndarray
    y: np.ndarray


def _sorted_losses(p_t, gamma):
    # high p_t means low loss; sort by p_t so the order is the same for every gamma
    order = np.argsort(-p_t, kind="stable")
    return focal_from_pt(p_t[order], gamma)


def loss_cdf(dump, gamma, class_filter="negative"):
    p = dump.select(class_filter)
    if len(p) == 0:
        raise DomainError(f"no samples match class filter {class_filter!r}")
    losses = _sorted_losses(p, gamma)
    total = losses.sum()
    n = len(p)
    x = np.arange(1, n + 1) / n
    if total > 0:
        y = np.cumsum(losses) / total
    else:
        y = x.copy()
    y[-1] = 1.0
    return CDFCurve(x, np.minimum(y, 1.0))


def hardest_share(p_t, gamma, fraction):
    """Share of the total focal loss carried by the hardest ``fraction`` of samples."""
    if not 0 < fraction <= 1:
        raise DomainError(f"fraction must lie in (0, 1], got {fraction}")
    losses = _sorted_losses(np.asarray(p_t, dtype=np.float64), gamma)
    n = len(losses)
    k = max(1, int(round(fraction * n)))
    total = losses.sum()
    if total <= 0:
        return k / n
    return float(losses[n - k:].sum() / total)


def gamma_sweep(dump, gammas, ks=(1, 10, 20), class_filter="negative"):
    """Rows of (gamma, k, share) for the hardest k% of the filtered dump."""
    p = dump.select(class_filter)
    if len(p) == 0:
        raise DomainError("gamma sweep needs a nonempty dump")
    return [(float(g), int(k), hardest_share(p, g, k / 100.0)) for g in gammas for k in ks]


def write_curve(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("x", "y"))
        for x, y in zip(curve.x, curve.y):
            w.writerow((repr(float(x)), repr(float(y))))


def write_sweep(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("gamma", "k_percent", "share"))
        for g, k, s in rows:
            w.writerow((repr(g), k, repr(s)))


# histograms and imbalance ---------------------------------------------------

@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    @property
    def peak_bin(self):
        return int(np.argmax(self.counts))

    @property
    def peak_center(self):
        i = self.peak_bin
        return float(0.5 * (self.edges[i] + self.edges[i + 1]))


def posterior_histogram(scores, bins=20):
    if bins < 2:
        raise DomainError(f"need at least 2 bins, got {bins}")
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts, _ = np.histogram(np.clip(s, 0.0, 1.0), bins=edges)
    return Histogram(edges, counts.astype(np.int64))


def write_histogram(path, hist):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("bin_lo", "bin_hi", "count"))
        for lo, hi, c in zip(hist.edges[:-1], hist.edges[1:], hist.counts):
            w.writerow((repr(float(lo)), repr(float(hi)), int(c)))


@dataclass(frozen=True)
class ImbalanceReport:
    n_pos: int
    n_neg: int
    ratio: float
    per_z_pos: np.ndarray
    per_z_neg: np.ndarray
    n_anchors: int = 0

    def to_dict(self):
        return {"n_pos": self.n_pos, "n_neg": self.n_neg, "n_anchors": self.n_anchors, "ratio": self.ratio,
                "per_z_pos": self.per_z_pos.tolist(), "per_z_neg": self.per_z_neg.tolist()}


def imbalance_report(targets, z_axis=0):
    """Positive/negative counts, their ratio and per-z-slice breakdown.

    ``targets.labels`` must have the height axis at ``z_axis``; bird's-eye
    assignments have a single slice.
    """
    lab = np.asarray(targets.labels)
    if lab.ndim <= 3:
        lab = lab[None]
    moved = np.moveaxis(lab, z_axis, 0).reshape(lab.shape[z_axis], -1)
    per_pos = (moved == 1).sum(axis=1).astype(np.int64)
    per_neg = (moved == 0).sum(axis=1).astype(np.int64)
    n_pos, n_neg = int(per_pos.sum()), int(per_neg.sum())
    return ImbalanceReport(n_pos, n_neg, n_neg / max(n_pos, 1), per_pos, per_neg, int(lab.size))


# dumps from models ----------------------------------------------------------

def dump_from_scores(score_maps, target_maps, n_neg=100_000, n_pos=1_000, seed=0):
    """Sample (y, p_t) pairs from anchor scores and their assigned labels."""
    probs = np.concatenate([np.asarray(s).reshape(-1) for s in score_maps])
    labels = np.concatenate([np.asarray(t.labels).reshape(-1) for t in target_maps])
    rng = np.random.default_rng(seed)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    pos = np.sort(rng.choice(pos, size=min(n_pos, len(pos)), replace=False)) if len(pos) else pos
    neg = np.sort(rng.choice(neg, size=min(n_neg, len(neg)), replace=False)) if len(neg) else neg
    y = np.r_[np.ones(len(pos), dtype=np.int64), -np.ones(len(neg), dtype=np.int64)]
    p_t = np.r_[probs[pos], 1.0 - probs[neg]]
    return PredictionDump(y, p_t)


def true_positive_scores(dets_per_frame, labels_per_frame, metric="3d", overlap=0.5):
    """Scores of detections matched to a label (the positive estimations)."""
    out = []
    for dets, labels in zip(dets_per_frame, labels_per_frame):
        m, _ = _frame_matches(dets, [getattr(lab, "box", lab) for lab in labels], metric, overlap, 2)
        out.extend(s for s, tp in m if tp)
    return np.asarray(out, dtype=np.float64)
