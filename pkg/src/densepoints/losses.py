"""Joint 2D projection objective: mask cross-entropy plus weighted depth L1."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import ContractViolation, check_same_shape

DEFAULT_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lam: float = 1.0
    eps: float = DEFAULT_EPS
    k: int = 5

    def __post_init__(self):
        if not self.lam >= 0:
            raise ContractViolation("lambda must be non-negative")
        if not 0 < self.eps < 0.5:
            raise ContractViolation("eps must lie in (0, 0.5)")
        if self.k < 1:
            raise ContractViolation("K must be at least 1")


@dataclass
class LossTerms:
    total: float
    mask: float
    depth: float
    grads: list  # per view: (grad on pred depth, grad on pred mask)


def mask_loss(pred, gt, eps=DEFAULT_EPS):
    """Summed binary cross-entropy and its gradient w.r.t. ``pred.prob``.

    ``pred`` is clamped to ``[eps, 1 - eps]``; inside the clamp zone the
    gradient is zero.
    """
    p = pred.prob
    m = gt.prob
    check_same_shape(p, m, "mask images")
    if np.any((m != 0.0) & (m != 1.0)):
        raise ContractViolation("ground-truth mask must be binary")
    pc = np.clip(p, eps, 1.0 - eps)
    loss = -(m * np.log(pc) + (1.0 - m) * np.log(1.0 - pc)).sum()
    inside = (p > eps) & (p < 1.0 - eps)
    grad = np.where(inside, -m / pc + (1.0 - m) / (1.0 - pc), 0.0)
    return float(loss), grad


def depth_loss(pred, gt):
    """Summed L1 over pixels valid in both images, with its subgradient."""
    check_same_shape(pred.depth, gt.depth, "depth images")
    joint = pred.valid & gt.valid
    diff = np.where(joint, pred.depth - np.where(joint, gt.depth, 0.0), 0.0)
    return float(np.abs(diff).sum()), np.sign(diff)


def total_loss(views, weights=LossWeights()):
    """Sum mask and ``lam``-weighted depth losses over views.

    ``views`` is a sequence of ``(pred_depth, pred_mask, gt_depth, gt_mask)``.
    Per-view gradients are already scaled by their weight in the total.
    """
    views = list(views)
    if not views:
        raise ContractViolation("need at least one view")
    l_mask = 0.0
    l_depth = 0.0
    grads = []
    for pred_depth, pred_mask, gt_depth, gt_mask in views:
        lm, gm = mask_loss(pred_mask, gt_mask, weights.eps)
        ld, gd = depth_loss(pred_depth, gt_depth)
        l_mask += lm
        l_depth += ld
        grads.append((weights.lam * gd, gm))
    return LossTerms(l_mask + weights.lam * l_depth, l_mask, l_depth, grads)
