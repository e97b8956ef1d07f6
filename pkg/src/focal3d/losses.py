"""Binary cross entropy, focal loss and the composite detection loss.

The scalar functions (:func:`bce`, :func:`focal` and their gradients) use
closed forms and serve as the reference the autodiff path is checked
against. :func:`composite_loss` builds the same quantities out of
differentiable :mod:`focal3d.network.tensor` operations so training can
backpropagate through it.

Labels use ``y = +1`` for objects and ``y = -1`` for background.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from focal3d.errors import DomainError, StructuralError
from focal3d.network import tensor as T

PROB_EPS = 1e-7
MODES = ("original", "enhanced")
CLS_KINDS = ("bce", "focal")
REG_KINDS = ("square", "smooth_l1")


def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@dataclass(frozen=True)
class LossSample:
    """One classification sample: label, logit, probability and posterior."""

    y: int
    x: float
    p: float
    p_t: float

    @classmethod
    def from_logit(cls, y, x):
        if y not in (1, -1):
            raise DomainError(f"label must be +1 or -1, got {y!r}")
        x = float(x)
        if not math.isfinite(x):
            raise DomainError(f"non-finite logit {x!r}")
        p = _sigmoid(x)
        # 1 - p computed as sigmoid(-x) keeps precision for large positive x
        return cls(y, x, p, p if y == 1 else _sigmoid(-x))

    @classmethod
    def from_probability(cls, y, p):
        if y not in (1, -1):
            raise DomainError(f"label must be +1 or -1, got {y!r}")
        p = float(p)
        if not 0.0 <= p <= 1.0:
            raise DomainError(f"probability {p!r} outside [0, 1]")
        with np.errstate(divide="ignore"):
            x = float(np.log(p) - np.log1p(-p))
        return cls(y, x, p, p if y == 1 else 1.0 - p)

    @property
    def clamped_p_t(self):
        return min(max(self.p_t, PROB_EPS), 1.0 - PROB_EPS)


@dataclass(frozen=True)
class LossConfig:
    """Classification/regression loss settings.

    ``alpha`` and ``beta`` weight the positive and negative classification
    terms, ``eta`` scales the whole classification loss and ``lam`` is the
    class weight used by the single-sample :func:`focal`.
    """

    gamma: float = 0.0
    alpha: float = 1.0
    beta: float = 1.0
    eta: float = 1.0
    mode: str = "enhanced"
    cls_kind: str = "focal"
    reg_kind: str = "smooth_l1"
    lam: float = 1.0

    def __post_init__(self):
        if not math.isfinite(self.gamma) or self.gamma < 0:
            raise DomainError(f"gamma must be >= 0, got {self.gamma}")
        for name in ("alpha", "beta", "eta", "lam"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise DomainError(f"{name} must be > 0, got {v}")
        if self.mode not in MODES:
            raise DomainError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.cls_kind not in CLS_KINDS:
            raise DomainError(f"cls_kind must be one of {CLS_KINDS}, got {self.cls_kind!r}")
        if self.reg_kind not in REG_KINDS:
            raise DomainError(f"reg_kind must be one of {REG_KINDS}, got {self.reg_kind!r}")

    @property
    def effective_gamma(self):
        """Focusing exponent actually applied (BCE ignores ``gamma``)."""
        return self.gamma if self.cls_kind == "focal" else 0.0

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)

    def replace(self, **changes):
        d = asdict(self)
        d.update(changes)
        return LossConfig(**d)


def bce(sample):
    """-log(p_t) with p_t clamped away from 0 and 1."""
    return -math.log(sample.clamped_p_t)


def bce_grad(sample):
    """d bce / d x = y (p_t - 1)."""
    return sample.y * (sample.p_t - 1.0)


def focal(sample, cfg=None, gamma=None):
    """-lam (1 - p_t)^gamma log(p_t)."""
    gamma, lam = _focal_params(cfg, gamma)
    pt = sample.clamped_p_t
    return -lam * (1.0 - pt) ** gamma * math.log(pt)


def focal_grad(sample, cfg=None, gamma=None):
    """d focal / d x = lam y (1 - p_t)^gamma (gamma p_t log(p_t) + p_t - 1)."""
    gamma, lam = _focal_params(cfg, gamma)
    pt = sample.p_t
    log_pt = math.log(sample.clamped_p_t)
    return lam * sample.y * (1.0 - pt) ** gamma * (gamma * pt * log_pt + pt - 1.0)


def _focal_params(cfg, gamma):
    if gamma is None:
        gamma = cfg.gamma if cfg is not None else 0.0
    lam = cfg.lam if cfg is not None else 1.0
    if not math.isfinite(gamma) or gamma < 0:
        raise DomainError(f"gamma must be >= 0, got {gamma}")
    return float(gamma), float(lam)


def focal_from_pt(p_t, gamma):
    """Vectorized focal loss of posterior probabilities (unit class weight)."""
    if gamma < 0:
        raise DomainError(f"gamma must be >= 0, got {gamma}")
    pt = np.clip(np.asarray(p_t, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    loss = -np.log(pt)
    if gamma:
        loss = (1.0 - pt) ** gamma * loss
    return loss


def square_loss(u, u_star):
    u, u_star = _residual_pair(u, u_star)
    return float(np.sum((u - u_star) ** 2))


def smooth_l1(u, u_star):
    """Sum of per-component Huber penalties, transition at 1."""
    u, u_star = _residual_pair(u, u_star)
    d = np.abs(u - u_star)
    return float(np.sum(np.where(d < 1.0, 0.5 * d * d, d - 0.5)))


def _residual_pair(u, u_star):
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    u_star = np.atleast_1d(np.asarray(u_star, dtype=np.float64))
    if u.shape != u_star.shape:
        raise StructuralError(f"residual shapes differ: {u.shape} vs {u_star.shape}")
    return u, u_star


@dataclass
class LossBreakdown:
    """Composite loss terms; tensor fields keep the autodiff graph alive."""

    total: T.Tensor
    cls: T.Tensor
    reg: T.Tensor
    cls_pos: T.Tensor
    cls_neg: T.Tensor
    n_pos: int
    n_neg: int
    extras: dict = field(default_factory=dict)

    def values(self):
        return {
            "loss": float(self.total),
            "cls": float(self.cls),
            "reg": float(self.reg),
            "cls_pos": float(self.cls_pos),
            "cls_neg": float(self.cls_neg),
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
        }


def classification_terms(logits, y, gamma):
    """Per-element focal loss (BCE at ``gamma == 0``) as a tensor.

    ``y`` is a constant array of +1/-1 labels broadcastable to ``logits``.
    """
    y = np.asarray(y)
    p = T.sigmoid(logits)
    p_t = T.where(y > 0, p, 1.0 - p)
    loss = -T.log(T.clip(p_t, PROB_EPS, 1.0 - PROB_EPS))
    if gamma:
        loss = loss * T.power(1.0 - p_t, gamma)
    return loss


def composite_loss(pmap_logits, rmap, targets, cfg, mode=None, cls_kind=None, reg_kind=None):
    """Detection loss over anchor-aligned maps.

    Args:
        pmap_logits: objectness logits, shape ``targets.labels.shape``.
        rmap: regression outputs, shape ``targets.labels.shape + (R,)``.
        targets: object with ``labels`` (1 positive, 0 negative, -1 ignore)
            and ``residuals`` (same shape as ``rmap``, meaningful at positives).
        cfg: :class:`LossConfig`; ``mode``/``cls_kind``/``reg_kind`` override it.

    In original mode the class terms are plain sums; enhanced mode divides
    each by its anchor count and applies ``alpha``/``beta``. Regression is
    taken over positive anchors only.
    """
    mode = mode or cfg.mode
    cls_kind = cls_kind or cfg.cls_kind
    reg_kind = reg_kind or cfg.reg_kind
    if mode not in MODES or cls_kind not in CLS_KINDS or reg_kind not in REG_KINDS:
        raise DomainError(f"bad loss selection {mode}/{cls_kind}/{reg_kind}")
    pmap_logits = T.as_tensor(pmap_logits)
    rmap = T.as_tensor(rmap)
    labels = np.asarray(targets.labels)
    residuals = np.asarray(targets.residuals)
    if pmap_logits.shape != labels.shape:
        raise StructuralError(f"probability map {pmap_logits.shape} vs targets {labels.shape}")
    if rmap.shape != residuals.shape or rmap.shape[:-1] != labels.shape:
        raise StructuralError(f"regression map {rmap.shape} vs targets {residuals.shape}")

    pos = labels == 1
    neg = labels == 0
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    gamma = cfg.gamma if cls_kind == "focal" else 0.0

    flat_logits = pmap_logits.reshape(-1)
    flat_pos = pos.reshape(-1)
    flat_neg = neg.reshape(-1)
    pos_idx = np.flatnonzero(flat_pos)
    neg_idx = np.flatnonzero(flat_neg)

    zero = T.Tensor(0.0)
    sum_pos = classification_terms(flat_logits[pos_idx], 1, gamma).sum() if n_pos else zero
    sum_neg = classification_terms(flat_logits[neg_idx], -1, gamma).sum() if n_neg else zero

    if n_pos:
        r = rmap.reshape(-1, rmap.shape[-1])[pos_idx]
        diff = r - residuals.reshape(-1, residuals.shape[-1])[pos_idx]
        sum_reg = (diff * diff).sum() if reg_kind == "square" else T.smooth_l1(diff).sum()
    else:
        sum_reg = zero

    if mode == "original":
        cls_pos, cls_neg, reg = sum_pos, sum_neg, sum_reg
    else:
        cls_pos = sum_pos * (cfg.alpha / n_pos) if n_pos else zero
        cls_neg = sum_neg * (cfg.beta / n_neg) if n_neg else zero
        reg = sum_reg * (1.0 / n_pos) if n_pos else zero
    cls = (cls_pos + cls_neg) * cfg.eta
    total = cls + reg
    return LossBreakdown(total, cls, reg, cls_pos, cls_neg, n_pos, n_neg)
