"""Loss terms and the two composite objectives.

Every term supports ``reduction="sum"`` (the textbook sums over samples) and
``reduction="mean"`` (divided by the number of rows; the training default).
Empty batches reduce to zero under both conventions.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import DomainError, ShapeError, ValidationError

LOG_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_1_1: float = 3.0
    lambda_1_2: float = 0.1
    lambda_2_1: float = 0.1
    lambda_2_2: float = 3.0

    def __post_init__(self):
        for name in ("lambda_1_1", "lambda_1_2", "lambda_2_1", "lambda_2_2"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be nonnegative")


def _reduce(per_row, reduction):
    if reduction == "sum":
        return per_row.sum()
    if reduction == "mean":
        return per_row.sum() / max(per_row.shape[0], 1)
    raise ValidationError(f"unknown reduction {reduction!r}")


def _as_one_hot(targets, width, like):
    if targets.dim() == 1:
        if targets.numel() and (targets.min() < 0 or targets.max() >= width):
            raise DomainError(f"target index out of range for width {width}")
        return F.one_hot(targets.long(), width).to(like.dtype)
    if targets.shape != like.shape:
        raise ShapeError(f"targets {tuple(targets.shape)} do not match predictions {tuple(like.shape)}")
    return targets.to(like.dtype)


def cross_entropy(probs, targets, reduction="mean"):
    """``-sum_j y_j . log(p_j)``; targets are one-hot rows or class indices."""
    if probs.dim() != 2:
        raise ShapeError(f"expected 2-D probability rows, got {tuple(probs.shape)}")
    y = _as_one_hot(targets, probs.shape[1], probs)
    per_row = -(y * torch.log(probs.clamp_min(LOG_EPS))).sum(dim=1)
    return _reduce(per_row, reduction)


def entropy_loss(probs, reduction="mean"):
    """Shannon entropy ``-sum p log p`` of each row (unweighted)."""
    if probs.dim() != 2:
        raise ShapeError(f"expected 2-D probability rows, got {tuple(probs.shape)}")
    per_row = -(probs * torch.log(probs.clamp_min(LOG_EPS))).sum(dim=1)
    return _reduce(per_row, reduction)


class CentroidTable:
    """Running class centroids for the center loss, one row per multi-rotation class.

    Centroids start at zero and move toward the batch mean of their class:
    ``c <- c - alpha * (c - mean(v of that class))``.
    """

    def __init__(self, n_classes, dim=256, alpha=0.5, dtype=torch.float32):
        if not 0 < alpha <= 1:
            raise ValidationError("centroid update rate must be in (0, 1]")
        self.alpha = alpha
        self.centroids = torch.zeros(n_classes, dim, dtype=dtype)

    @property
    def n_classes(self):
        return self.centroids.shape[0]

    def check_labels(self, labels):
        if labels.numel() and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise DomainError(f"label outside the centroid table (size {self.n_classes})")

    @torch.no_grad()
    def update(self, v, labels):
        self.check_labels(labels)
        v = v.detach().to(self.centroids.dtype)
        for z in labels.unique():
            members = v[labels == z]
            c = self.centroids[z]
            self.centroids[z] = c - self.alpha * (c - members.mean(dim=0))

    def state_dict(self):
        return {"alpha": self.alpha, "centroids": self.centroids.clone()}


def center_loss(v, labels, table: CentroidTable, reduction="mean", update=True):
    """``sum_j ||v_j - c(z_j)||^2``, computed before the centroids move."""
    if v.dim() != 2 or v.shape[1] != table.centroids.shape[1]:
        raise ShapeError(f"activations {tuple(v.shape)} do not match centroid width {table.centroids.shape[1]}")
    table.check_labels(labels)
    centers = table.centroids.to(v.dtype)[labels]
    per_row = ((v - centers) ** 2).sum(dim=1)
    loss = _reduce(per_row, reduction)
    if update and labels.numel():
        table.update(v, labels)
    return loss


def stage1_objective(sem_probs, y, rot_probs, z, v, weights: LossWeights, table: CentroidTable,
                     reduction="mean", update_centroids=True):
    """Semantic CE + lambda_1_1 * multi-rotation CE + lambda_1_2 * center loss.

    Returns ``(total, terms)`` with the unweighted terms keyed by name.
    """
    terms = {
        "semantic_ce": cross_entropy(sem_probs, y, reduction),
        "rotation_ce": cross_entropy(rot_probs, z, reduction),
        "center": center_loss(v, z, table, reduction, update=update_centroids),
    }
    total = terms["semantic_ce"] + weights.lambda_1_1 * terms["rotation_ce"] + weights.lambda_1_2 * terms["center"]
    return total, terms


def stage2_objective(sup_probs, sup_targets, knw_probs, rot_probs, rot_targets,
                     weights: LossWeights, reduction="mean"):
    """Supervised CE (source and unknown-target rows) + lambda_2_1 * entropy + lambda_2_2 * rotation CE.

    ``sup_targets`` holds source labels and the unknown index ``n_known`` for
    rows drawn from the unknown-target stream. ``knw_probs``/``rot_probs`` may
    have zero rows.
    """
    terms = {
        "supervised_ce": cross_entropy(sup_probs, sup_targets, reduction),
        "entropy": entropy_loss(knw_probs, reduction),
        "rotation_ce": cross_entropy(rot_probs, rot_targets, reduction),
    }
    total = terms["supervised_ce"] + weights.lambda_2_1 * terms["entropy"] + weights.lambda_2_2 * terms["rotation_ce"]
    return total, terms
