"""Task-sensitive adversarial domain alignment.

Domain label 0 is the source domain and 1 the target domain.
"""

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn

EPS = 1e-7


class _GradientReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, strength):
        ctx.strength = strength
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return -ctx.strength * grad_output, None


def gradient_reverse(x, strength=1.0):
    """Identity on the forward pass; scales the gradient by ``-strength`` on the way back."""
    return _GradientReverse.apply(x, strength)


class GradientReversal(nn.Module):
    def __init__(self, strength=1.0):
        super().__init__()
        self.strength = strength

    def forward(self, x):
        return gradient_reverse(x, self.strength)


def balance_factor(n_source, n_target):
    """Sigmoid weight between the detection and re-id instance alignment terms."""
    n_source, n_target = int(n_source), int(n_target)
    if n_source < 1 or n_target < 1:
        raise ValueError("empty domain")
    diff = n_target - n_source
    sign = (diff > 0) - (diff < 0)
    ratio = max(n_source, n_target) / min(n_source, n_target)
    z = 4.0 * sign * (ratio - 1.0)
    # stable in both tails
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


def _as_tensor(p):
    return p if torch.is_tensor(p) else torch.as_tensor(p, dtype=torch.float64)


def _bce_terms(p, d):
    p = _as_tensor(p).clamp(EPS, 1.0 - EPS)
    return -(d * torch.log(p) + (1 - d) * torch.log(1 - p))


def image_domain_loss(patch_predictions, domain_labels):
    """Summed binary cross-entropy of per-image domain probabilities.

    ``patch_predictions`` holds one probability grid per image; the image's
    probability is the mean over its patches.
    """
    if len(patch_predictions) != len(domain_labels):
        raise ValueError("one patch grid per image is required")
    total = torch.zeros((), dtype=torch.float64)
    for grid, d in zip(patch_predictions, domain_labels):
        p = _as_tensor(grid).mean()
        total = total + _bce_terms(p, float(d))
    return total


@dataclass
class DomainBatch:
    image_features: list
    instance_features_det: list
    instance_features_reid: list
    domain_labels: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.domain_labels) != len(self.image_features):
            raise ValueError("domain_labels length must equal image_features length")
        if not (len(self.instance_features_det) == len(self.instance_features_reid) == len(self.image_features)):
            raise ValueError("one instance group per image is required")


def _group_len(group):
    return 0 if group is None else len(group)


def instance_domain_loss(batch, predictions_det, predictions_reid, lam):
    """Balanced instance-level domain loss over detection and re-id proposals.

    ``lam`` weights the detection branch and ``1 - lam`` the re-id branch.
    """
    if len(predictions_det) != len(batch.domain_labels) or len(predictions_reid) != len(batch.domain_labels):
        raise ValueError("instance/prediction mismatch")
    det = torch.zeros((), dtype=torch.float64)
    reid = torch.zeros((), dtype=torch.float64)
    for i, d in enumerate(batch.domain_labels):
        if _group_len(predictions_det[i]) != _group_len(batch.instance_features_det[i]):
            raise ValueError("instance/prediction mismatch")
        if _group_len(predictions_reid[i]) != _group_len(batch.instance_features_reid[i]):
            raise ValueError("instance/prediction mismatch")
        if _group_len(predictions_det[i]):
            det = det + _bce_terms(predictions_det[i], float(d)).sum()
        if _group_len(predictions_reid[i]):
            reid = reid + _bce_terms(predictions_reid[i], float(d)).sum()
    return lam * det + (1.0 - lam) * reid


def consistency_regularizer(image_level_predictions, instance_level_predictions):
    """Squared gap between each image probability and the mean of its instance probabilities.

    Images without instances contribute nothing.
    """
    total = torch.zeros((), dtype=torch.float64)
    for p_img, p_inst in zip(image_level_predictions, instance_level_predictions):
        if _group_len(p_inst) == 0:
            continue
        total = total + (_as_tensor(p_img) - _as_tensor(p_inst).mean()) ** 2
    return total


class PatchDomainClassifier(nn.Module):
    """Two 1x1 convolutions with a ReLU between; one domain logit per position."""

    def __init__(self, channels, hidden=64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(channels, hidden, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, 1, 1),
        )

    def forward(self, feature_map):
        # (B, C, H, W) -> (B, H, W) patch probabilities
        return torch.sigmoid(self.net(feature_map)).squeeze(1)


class InstanceDomainClassifier(nn.Module):
    def __init__(self, dim, hidden=64):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, 1))

    def forward(self, features):
        return torch.sigmoid(self.net(features)).squeeze(-1)


class DomainClassifiers(nn.Module):
    """Image-level patch classifier plus the detection and re-id instance classifiers.

    Every head sits behind a gradient reversal so that minimising the domain
    losses trains the classifiers while pushing the features toward confusion.
    """

    def __init__(self, image_channels, det_dim, reid_dim, hidden=64, strength=1.0):
        super().__init__()
        self.reverse = GradientReversal(strength)
        self.patch = PatchDomainClassifier(image_channels, hidden)
        self.det = InstanceDomainClassifier(det_dim, hidden)
        self.reid = InstanceDomainClassifier(reid_dim, hidden)

    def image(self, feature_map):
        return self.patch(self.reverse(feature_map))

    def instance_det(self, features):
        return self.det(self.reverse(features))

    def instance_reid(self, features):
        return self.reid(self.reverse(features))
