"""Training losses with analytic gradients.

Balanced L1 regression, bidirectional Chamfer over point sets and lane
curves, focal classification, soft Dice on visibility, and the
uncertainty-weighted multi-task combination  sum_i e^{-s_i} L_i + s_i.
Every loss accepts autodiff Vars (or plain arrays, treated as constants)
and returns a scalar Var, so gradients flow wherever the caller needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import Lane3D, VISIBILITY_THRESHOLD

TASK_NAMES = ("regression", "curve", "classification", "visibility")

CONTINUITY_TOL = 1e-9


@dataclass(frozen=True)
class LossConfig:
    """Parameters for every loss term.

    b is never free: it solves alpha*ln(b+1) = gamma so the two Balanced
    L1 branches meet at delta=beta with matching value and slope.
    """

    alpha: float = 0.5
    beta: float = 1.0
    gamma: float = 1.5
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_epsilon: float = 1.0
    b: float = field(init=False)

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0 or self.gamma <= 0:
            raise ValueError("LossConfig: alpha, beta, gamma must be positive")
        if self.focal_gamma < 0 or self.focal_alpha <= 0:
            raise ValueError("LossConfig: focal parameters out of range")
        if self.dice_epsilon <= 0:
            raise ValueError("LossConfig: dice epsilon must be positive")
        b = float(np.expm1(self.gamma / self.alpha))
        object.__setattr__(self, "b", b)
        if abs(self.alpha * np.log1p(b) - self.gamma) > CONTINUITY_TOL:
            raise ValueError("LossConfig: continuity constraint violated")

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "gamma": self.gamma,
            "focal_gamma": self.focal_gamma,
            "focal_alpha": self.focal_alpha,
            "dice_epsilon": self.dice_epsilon,
        }

    @staticmethod
    def from_dict(d: dict) -> "LossConfig":
        return LossConfig(**{k: float(v) for k, v in d.items() if k != "b"})


@dataclass
class UncertaintyState:
    """Learnable log-variances s_i, one per task, initialized to 0."""

    s: dict = None

    def __post_init__(self):
        if self.s is None:
            self.s = {name: 0.0 for name in TASK_NAMES}
        for name, value in self.s.items():
            if not np.isfinite(value):
                raise ValueError(f"UncertaintyState: s[{name}] must be finite")


@dataclass(frozen=True)
class PointSet:
    """A non-empty list of 3D points in meters."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
            raise ValueError("PointSet: need a non-empty (n, 3) array")
        object.__setattr__(self, "points", pts)


def balanced_l1(delta, config: LossConfig):
    """Two-branch regression loss of a non-negative residual magnitude.

    Below beta the log-shaped branch applies; at and above beta the
    affine branch gamma*delta + gamma/b - alpha*beta takes over.  With b
    from the continuity constraint both value and slope agree at beta,
    so which branch evaluates the boundary point is immaterial.
    """
    delta = ad.as_var(delta)
    if np.any(delta.value < 0.0):
        raise ValueError("balanced_l1: residual magnitudes must be non-negative")
    a, beta, g, b = config.alpha, config.beta, config.gamma, config.b
    below = delta.value < beta
    scaled = delta * (b / beta) + 1.0
    left = (delta * b + 1.0) * ad.log(scaled) * (a / b) - delta * a
    right = delta * g + (g / b - a * beta)
    return ad.where(below, left, right)


def balanced_l1_vector(predicted, target, weights, config: LossConfig):
    """Weighted mean of balanced_l1(|predicted - target|) entries.

    Offset vectors are flat (callers concatenate their delta-x and
    delta-z blocks); weights are per-entry, non-negative, positive sum.
    """
    predicted, target = ad.as_var(predicted), ad.as_var(target)
    w = np.asarray(weights, dtype=np.float64)
    if predicted.shape != target.shape or predicted.shape != w.shape:
        raise ValueError("balanced_l1_vector: inputs must share one length")
    if np.any(w < 0.0):
        raise ValueError("balanced_l1_vector: weights must be non-negative")
    total = w.sum()
    if total <= 0.0:
        raise ValueError("balanced_l1_vector: weights must have positive sum")
    per_entry = balanced_l1(ad.absolute(predicted - target), config)
    return (per_entry * w).sum() / total


def _as_points(ps):
    if isinstance(ps, PointSet):
        return ad.Var(ps.points)
    ps = ad.as_var(ps)
    if ps.ndim != 2 or ps.shape[1] != 3 or ps.shape[0] == 0:
        raise ValueError("chamfer: need non-empty (n, 3) point arrays")
    return ps


def chamfer(P, Q):
    """Bidirectional mean of nearest-neighbor squared distances.

    Gradients flow into both sets through the argmin pairs; nearest
    neighbor ties resolve to the lowest index.
    """
    P, Q = _as_points(P), _as_points(Q)
    n, m = P.shape[0], Q.shape[0]
    diff = P.reshape((n, 1, 3)) - Q.reshape((1, m, 3))
    d2 = ad.square(diff).sum(axis=2)
    return ad.reduce_min(d2, axis=1).mean() + ad.reduce_min(d2, axis=0).mean()


def chamfer_curve(pred, gt: Lane3D, visibility_threshold: float = VISIBILITY_THRESHOLD):
    """Chamfer between a predicted lane and a visibility-filtered truth.

    The predicted side contributes every station; the ground-truth side
    only stations with visibility >= threshold.  ``pred`` may be a Lane3D
    or a differentiable (n, 3) point matrix from lane_points_var.
    """
    mask = gt.visibility >= visibility_threshold
    if not np.any(mask):
        raise ValueError("chamfer_curve: ground truth has no visible stations")
    gt_points = gt.points()[mask]
    pred_points = ad.Var(pred.points()) if isinstance(pred, Lane3D) else ad.as_var(pred)
    return chamfer(pred_points, gt_points)


def log_softmax(logits):
    """Numerically stable log-softmax; the constant max shift leaves the
    function (hence its gradient) unchanged."""
    logits = ad.as_var(logits)
    shift = float(np.max(logits.value))
    shifted = logits - shift
    return shifted - ad.log(ad.exp(shifted).sum())


def focal(class_logits, target_category: int, config: LossConfig):
    """-alpha_f * (1 - p_t)^gamma_f * ln(p_t) with softmax p_t.

    gamma_f = 0, alpha_f = 1 reduces exactly to cross-entropy.
    """
    class_logits = ad.as_var(class_logits)
    num_classes = class_logits.shape[0]
    if num_classes < 2:
        raise ValueError("focal: need at least 2 categories")
    if not 0 <= target_category < num_classes:
        raise ValueError(f"focal: target index {target_category} out of range")
    log_pt = log_softmax(class_logits)[int(target_category)]
    pt = ad.exp(log_pt)
    modulator = ad.power(1.0 - pt, config.focal_gamma)
    return modulator * log_pt * (-config.focal_alpha)


def cross_entropy(class_logits, target_category: int):
    """Plain softmax cross-entropy (the focal gamma_f=0, alpha_f=1 case)."""
    class_logits = ad.as_var(class_logits)
    return -log_softmax(class_logits)[int(target_category)]


def dice(pred_probabilities, target_mask, config: LossConfig):
    """Soft Dice 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)."""
    p = ad.as_var(pred_probabilities)
    g = np.asarray(target_mask, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError("dice: prediction and target must share one length")
    if np.any(p.value < 0.0) or np.any(p.value > 1.0):
        raise ValueError("dice: predictions must lie in [0, 1]")
    if not np.all((g == 0.0) | (g == 1.0)):
        raise ValueError("dice: target mask must be binary")
    eps = config.dice_epsilon
    overlap = (p * g).sum() * 2.0 + eps
    return 1.0 - overlap / (p.sum() + float(g.sum()) + eps)


def combine_uncertainty(task_losses: dict, state):
    """sum_i e^{-s_i} L_i + s_i over matching task keys.

    ``state`` is an UncertaintyState or a dict of s values; both losses
    and s entries may be Vars.  d/ds_i = 1 - e^{-s_i} L_i, so the
    stationary point for frozen L_i sits at s_i = ln L_i.
    """
    s_map = state.s if isinstance(state, UncertaintyState) else state
    if set(task_losses.keys()) != set(s_map.keys()):
        raise ValueError("combine_uncertainty: task keys must match")
    total = None
    for name in sorted(task_losses):
        loss = ad.as_var(task_losses[name])
        if np.any(loss.value < 0.0):
            raise ValueError(f"combine_uncertainty: negative loss for task {name}")
        s = ad.as_var(s_map[name])
        term = ad.exp(-s) * loss + s
        total = term if total is None else total + term
    if total is None:
        raise ValueError("combine_uncertainty: need at least one task")
    return total
