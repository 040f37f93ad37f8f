"""Training objective: anchor BCE on the original branch, distillation of the
augmented branches toward detached original probabilities, a group-weighted
supervised term on the augmented branches, and an entropy bonus.

The group weights score each augmentation's per-sample BCE divergence from
the detached original prediction, z-normalize those divergences within the
augmentation group (population std, divisor N), and pass the z-score through
a Gaussian: w = exp(-z^2 / (2 s^2)). An augmentation whose divergence sits at
the group mean gets weight 1; outliers in either direction are down-weighted.
Weights are treated as constants by default (no gradient through the group
statistics); set ``grad_through_weights`` to differentiate through them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .encoder import PredictionBundle
from .tensor import (
    ShapeMismatch,
    TargetOutOfRange,
    Tensor,
    bce_with_logits,
    exp,
    sigmoid,
    sqrt,
    stack,
)

# clamp on detached probabilities used as BCE targets, purely for log stability
_P_CLAMP = 1e-7


@dataclass
class LossWeights:
    lambda_distill: float = 0.1
    lambda_aug: float = 1.0
    lambda_ent: float = 0.01
    s: float = 1.5          # width of the weighting Gaussian, in z-score units
    eps: float = 1e-6       # stabilizer added to the group std
    grad_through_weights: bool = False

    def __post_init__(self):
        if self.s <= 0:
            raise ValueError(f"s must be positive, got {self.s}")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        for name in ("lambda_distill", "lambda_aug", "lambda_ent"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class GroupWeightStats:
    """Per-sample divergence statistics across the augmentation group."""

    d: np.ndarray       # (N, B) BCE distances
    mu: np.ndarray      # (B,) group means
    sigma: np.ndarray   # (B,) population stds (divisor N)
    z: np.ndarray       # (N, B) z-scores
    w: np.ndarray       # (N, B) weights in (0, 1]


@dataclass
class LossReport:
    total: float
    bce: float
    distill: float
    bce_w: float
    ent: float
    stats: GroupWeightStats | None = None

    @property
    def mean_w(self) -> float:
        return float(self.stats.w.mean()) if self.stats is not None else float("nan")

    @property
    def min_w(self) -> float:
        return float(self.stats.w.min()) if self.stats is not None else float("nan")


def _check_hard_labels(y: Tensor) -> None:
    vals = y.data
    if not np.all((vals == 0.0) | (vals == 1.0)):
        raise TargetOutOfRange("labels must be exactly 0 or 1")


def _as_stacked(z_aug: "Sequence[Tensor] | Tensor") -> Tensor:
    if isinstance(z_aug, Tensor):
        return z_aug
    return stack(list(z_aug))


def anchor_bce(z_orig: Tensor, y: Tensor) -> Tensor:
    """Mean BCE of the original-branch logits against hard labels."""
    if z_orig.shape != y.shape:
        raise ShapeMismatch(f"logits {z_orig.shape} vs labels {y.shape}")
    _check_hard_labels(y)
    return bce_with_logits(z_orig, y).mean()


def distill_loss(z_aug: "Sequence[Tensor] | Tensor", p_orig: Tensor) -> Tensor:
    """Mean BCE of every augmented branch against detached original
    probabilities. Gradient reaches the augmented branches only."""
    z = _as_stacked(z_aug)
    return bce_with_logits(z, p_orig).mean()


def per_sample_aug_bce(z_aug_i: Tensor, y: Tensor) -> Tensor:
    """Per-sample mean-over-classes BCE for one augmented branch: (B,)."""
    if z_aug_i.shape != y.shape:
        raise ShapeMismatch(f"logits {z_aug_i.shape} vs labels {y.shape}")
    _check_hard_labels(y)
    return bce_with_logits(z_aug_i, y).mean(axis=-1)


def bce_distance(z_aug_i, p_orig) -> np.ndarray:
    """Per-sample mean BCE divergence from the detached original
    probabilities, as plain data (never part of the gradient graph)."""
    z = z_aug_i.data if isinstance(z_aug_i, Tensor) else np.asarray(z_aug_i)
    p = p_orig.data if isinstance(p_orig, Tensor) else np.asarray(p_orig)
    z = z.astype(np.float64)
    p = p.astype(np.float64)
    elem = np.maximum(z, 0.0) - z * p + np.log1p(np.exp(-np.abs(z)))
    return elem.mean(axis=-1)


def group_weights(d: np.ndarray, s: float = 1.5, eps: float = 1e-6) -> GroupWeightStats:
    """Gaussian weights over z-scored divergences, one group per sample.

    ``d`` has shape (N, B). Statistics use the population std (divisor N); a
    degenerate group (all distances equal) yields z = 0 and w = 1 via eps.
    """
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] < 1:
        raise ShapeMismatch(f"expected (N, B) distances, got {d.shape}")
    mu = d.mean(axis=0)
    sigma = np.sqrt(((d - mu) ** 2).mean(axis=0))
    z = (d - mu) / (sigma + eps)
    w = np.exp(-(z**2) / (2.0 * s * s))
    return GroupWeightStats(d=d, mu=mu, sigma=sigma, z=z, w=w)


def weighted_aug_loss(ell: Tensor, w) -> Tensor:
    """Weighted mean (1/(N*B)) sum w_ib * ell_ib. Normalization is by the
    group size, not by the weight sum."""
    w_arr = w.data if isinstance(w, Tensor) else np.asarray(w)
    if isinstance(w, Tensor):
        w_t = w
    else:
        w_t = Tensor(w_arr.astype(ell.dtype))
    if ell.shape != w_t.shape:
        raise ShapeMismatch(f"losses {ell.shape} vs weights {w_t.shape}")
    return (ell * w_t).mean()


def entropy_loss(z_aug: "Sequence[Tensor] | Tensor") -> Tensor:
    """Negative mean binary entropy of the augmented predictions, in
    [-ln 2, 0]. Uses H(sigmoid(z)) = bce(z, sigmoid(z)) with the sigmoid kept
    in the graph so the gradient -z * sigmoid'(z) flows."""
    z = _as_stacked(z_aug)
    return -bce_with_logits(z, sigmoid(z)).mean()


def _group_weights_in_graph(per_elem: Tensor, s: float, eps: float) -> Tensor:
    """Differentiable weights (N, B) from the in-graph BCE elements (N, B, K)."""
    d = per_elem.mean(axis=-1)                       # (N, B)
    mu = d.mean(axis=0, keepdims=True)               # (1, B)
    centered = d - mu
    sigma = sqrt((centered * centered).mean(axis=0, keepdims=True))
    z = centered / (sigma + eps)
    return exp((z * z) * (-1.0 / (2.0 * s * s)))


def total_loss(bundle: PredictionBundle, y: Tensor, lw: LossWeights,
               unit_weights: bool = False) -> tuple[Tensor, LossReport]:
    """Compose the four objective terms for one batch.

    Returns the scalar graph tensor (for backward) and a float report. With
    no augmented branches the three augmentation terms are zero. Detached
    original probabilities are computed once and shared by the distillation
    term and the divergence statistics; ``unit_weights`` forces w = 1.
    """
    bce = anchor_bce(bundle.z_orig, y)

    if bundle.n == 0:
        report = LossReport(total=float(bce.data), bce=float(bce.data),
                            distill=0.0, bce_w=0.0, ent=0.0, stats=None)
        return bce, report

    p_orig = Tensor(np.clip(bundle.z_orig.detach().data, None, None), dtype=bundle.z_orig.dtype)
    p_orig = Tensor(np.clip(_sigmoid_data(bundle.z_orig.data), _P_CLAMP, 1.0 - _P_CLAMP),
                    dtype=bundle.z_orig.dtype)

    z = stack(bundle.z_aug)                          # (N, B, K)
    per_elem = bce_with_logits(z, p_orig)            # one kernel feeds Eq-style distill and distances
    distill = per_elem.mean()

    ell = per_sample_aug_bce(z, _broadcast_labels(y, bundle.n))
    stats = group_weights(per_elem.data.astype(np.float64).mean(axis=-1), lw.s, lw.eps)
    if unit_weights:
        w_used = np.ones_like(stats.w)
        stats = GroupWeightStats(d=stats.d, mu=stats.mu, sigma=stats.sigma,
                                 z=stats.z, w=w_used)
        bce_w = weighted_aug_loss(ell, w_used)
    elif lw.grad_through_weights:
        bce_w = weighted_aug_loss(ell, _group_weights_in_graph(per_elem, lw.s, lw.eps))
    else:
        bce_w = weighted_aug_loss(ell, stats.w)

    ent = entropy_loss(z)

    total = bce + distill * lw.lambda_distill + bce_w * lw.lambda_aug + ent * lw.lambda_ent
    report = LossReport(
        total=float(total.data), bce=float(bce.data), distill=float(distill.data),
        bce_w=float(bce_w.data), ent=float(ent.data), stats=stats,
    )
    return total, report


def _sigmoid_data(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _broadcast_labels(y: Tensor, n: int) -> Tensor:
    """Labels (B, K) viewed as (1, B, K) so they broadcast across branches."""
    return Tensor(y.data.reshape((1,) + y.data.shape), dtype=y.dtype)
