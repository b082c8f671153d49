"""Training losses: additive-angular-margin identity loss, age-group
cross-entropy, gradient reversal for adversarial decoupling, and the weighted
three-term total.

Per-step loss values are logged to a line-oriented metrics file with header
``step,L_id,L_age,L_adv,L_total,lr``.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class ArcFaceConfig:
    scale: float = 64.0
    margin: float = 0.2

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if not 0.0 <= self.margin < math.pi / 2:
            raise ValueError("margin must lie in [0, pi/2)")


@dataclass(frozen=True)
class LossWeights:
    lambda_age: float = 0.1
    lambda_grl: float = 0.1

    def __post_init__(self):
        if self.lambda_age < 0 or self.lambda_grl < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    l_id: torch.Tensor
    l_age: torch.Tensor
    l_adv: torch.Tensor
    l_total: torch.Tensor

    def detached(self):
        return tuple(float(v.detach()) for v in
                     (self.l_id, self.l_age, self.l_adv, self.l_total))

    @property
    def finite(self) -> bool:
        return all(math.isfinite(v) for v in self.detached())


class _ReverseGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return -ctx.lam * grad_output, None


def grl(v, lam=1.0):
    """Identity on the forward pass; backward multiplies the gradient
    by -lam."""
    return _ReverseGrad.apply(v, float(lam))


class GradientReversal(nn.Module):
    def __init__(self, lam=1.0):
        super().__init__()
        self.lam = float(lam)

    def forward(self, x):
        return grl(x, self.lam)


def arcface_logits(embeddings, weight, labels=None, scale=64.0, margin=0.2):
    """Scaled cosine logits with an additive angular margin on the target
    class.

    Rows of ``weight`` are class centers; both sides are L2-normalized here.
    When labels are None or margin == 0 the output is plain s * cos(theta).
    Past theta + m > pi the margin falls back to cos(theta) - m*sin(m) to
    keep the logit monotone in theta.
    """
    cosine = F.linear(F.normalize(embeddings), F.normalize(weight))
    if labels is None or margin == 0.0:
        return scale * cosine
    if labels.max().item() >= weight.size(0) or labels.min().item() < 0:
        raise ValueError("identity label out of range")
    cos_m, sin_m = math.cos(margin), math.sin(margin)
    sine = torch.sqrt((1.0 - cosine ** 2).clamp(min=1e-12))
    phi = cosine * cos_m - sine * sin_m  # cos(theta + m)
    phi = torch.where(cosine > math.cos(math.pi - margin),
                      phi, cosine - margin * sin_m)
    one_hot = F.one_hot(labels, num_classes=weight.size(0)).to(cosine.dtype)
    return scale * (one_hot * phi + (1.0 - one_hot) * cosine)


class ArcFaceHead(nn.Module):
    """Margin classifier over learned class centers; margin is inserted only
    in training mode, when labels are supplied."""

    def __init__(self, in_dim, n_classes, scale=64.0, margin=0.2):
        super().__init__()
        ArcFaceConfig(scale, max(margin, 0.0))
        self.scale = scale
        self.margin = margin
        self.weight = nn.Parameter(torch.empty(n_classes, in_dim))
        nn.init.xavier_uniform_(self.weight)

    def forward(self, embeddings, labels=None):
        return arcface_logits(embeddings, self.weight, labels,
                              self.scale, self.margin)


def arcface_loss(embeddings, labels, weight, cfg: ArcFaceConfig):
    logits = arcface_logits(embeddings, weight, labels, cfg.scale, cfg.margin)
    return F.cross_entropy(logits, labels)


def age_group_loss(age_logits, y_age, class_weights=None):
    """Cross-entropy over the 7 age groups. ``class_weights`` enables
    optional re-weighting for group imbalance (off by default)."""
    if y_age.min().item() < 0 or y_age.max().item() >= age_logits.size(1):
        raise ValueError("age-group label out of range")
    return F.cross_entropy(age_logits, y_age, weight=class_weights)


def total_loss(l_id, l_age, l_adv, weights: LossWeights) -> LossBreakdown:
    """Weighted sum of the three terms; raises on non-finite input so a
    diverging step aborts instead of propagating NaNs."""
    total = l_id + weights.lambda_age * l_age + weights.lambda_grl * l_adv
    breakdown = LossBreakdown(l_id=l_id, l_age=l_age, l_adv=l_adv,
                              l_total=total)
    if not breakdown.finite:
        raise FloatingPointError(
            f"non-finite loss term: {breakdown.detached()}")
    return breakdown


class MetricsLog:
    """Line-oriented per-step metrics writer."""

    HEADER = "step,L_id,L_age,L_adv,L_total,lr"

    def __init__(self, path):
        self.path = path
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.HEADER + "\n")

    def append(self, step, breakdown: LossBreakdown, lr):
        l_id, l_age, l_adv, l_total = breakdown.detached()
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(f"{step},{l_id:.6f},{l_age:.6f},{l_adv:.6f},"
                    f"{l_total:.6f},{lr:.8f}\n")
