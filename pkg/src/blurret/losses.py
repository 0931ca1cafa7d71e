"""Training losses: blur estimation, localization, ArcFace classification,
contrastive, and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F

from blurret.errors import DegenerateDescriptor, DomainError

COS_EPS = 1e-7


@dataclass
class LossWeights:
    alpha_cls: float = 0.1
    alpha_be: float = 1.0
    alpha_loc: float = 10.0

    def __post_init__(self):
        if min(self.alpha_cls, self.alpha_be, self.alpha_loc) < 0:
            raise DomainError("loss weights must be nonnegative")


@dataclass
class ArcFaceParams:
    """Class weights are stored ``(d, N)``; columns are normalized on use."""

    weight: torch.Tensor
    margin: float = 0.15
    scale: float = 30.0

    def __post_init__(self):
        if not 0 <= self.margin < torch.pi / 2:
            raise DomainError(f"margin {self.margin} outside [0, pi/2)")
        if self.scale <= 0:
            raise DomainError("scale must be positive")

    @property
    def normalized(self):
        return F.normalize(self.weight, dim=0)


class LossTerms(NamedTuple):
    con: torch.Tensor
    cls: torch.Tensor
    be: torch.Tensor
    loc: torch.Tensor
    joint: torch.Tensor


def blur_estimation_loss(pred, bs):
    """``|pred - (1 - bs)|``, elementwise; the target is the sharpness."""
    return (pred - (1.0 - bs)).abs()


def localization_loss(pred, gt):
    return (pred - gt).abs().sum(dim=-1)


def arcface_adjust(s, g, margin, eps=COS_EPS):
    """Add the angular margin to cosines where ``g`` is set."""
    s = torch.as_tensor(s)
    g = torch.as_tensor(g, dtype=torch.bool)
    theta = torch.acos(s.clamp(-1.0 + eps, 1.0 - eps))
    return torch.where(g, torch.cos(theta + margin), s)


def _unit(d, name="descriptor"):
    norm = d.norm(dim=-1, keepdim=True)
    if (norm < 1e-12).any():
        raise DegenerateDescriptor(f"{name} norm below 1e-12")
    return d / norm


def classification_loss(descriptor, arcface, labels):
    """ArcFace softmax cross-entropy, one value per row of ``descriptor``."""
    d_hat = _unit(descriptor)
    cosines = d_hat @ arcface.normalized
    target = F.one_hot(torch.as_tensor(labels), cosines.shape[-1]).bool()
    logits = arcface.scale * arcface_adjust(cosines, target, arcface.margin)
    return torch.logsumexp(logits, dim=-1) - logits[target]


def contrastive_loss(d_i, d_j, match, tau=0.7):
    """Pull matches together, push non-matches beyond ``tau`` (inputs unit norm)."""
    dist = (d_i - d_j).norm(dim=-1)
    match = torch.as_tensor(match, dtype=torch.bool)
    pos = 0.5 * dist.pow(2)
    neg = 0.5 * (tau - dist).clamp(min=0).pow(2)
    return torch.where(match, pos, neg)


def combine(con, cls, be, loc, weights):
    return con + weights.alpha_cls * cls + weights.alpha_be * be + weights.alpha_loc * loc


def joint_loss(outputs, bs, bbox, labels, arcface, weights, n_pos=1, tau=0.7):
    """Joint objective for a batch of tuples.

    ``outputs`` holds tensors shaped ``(B, T, ...)`` where position 0 of each
    tuple is the query, the next ``n_pos`` are positives and the rest are
    negatives. The contrastive term averages over the query's pairs, the
    auxiliary terms over every image of the tuple.
    """
    desc = outputs.descriptor
    b, t = desc.shape[:2]
    unit = _unit(desc)
    query = unit[:, :1].expand(-1, t - 1, -1)
    match = torch.zeros(t - 1, dtype=torch.bool)
    match[:n_pos] = True
    con = contrastive_loss(query, unit[:, 1:], match.expand(b, -1), tau).mean()

    cls = classification_loss(desc.reshape(b * t, -1), arcface, labels.reshape(-1)).mean()
    be = blur_estimation_loss(outputs.blur_pred, bs).mean()
    loc = localization_loss(outputs.bbox_pred, bbox).mean()
    return LossTerms(con, cls, be, loc, combine(con, cls, be, loc, weights))
