"""Desk-scale person-search network: backbone, region pooling, attention, heads."""

import warnings

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import nms, roi_align

from fous.alignment import DomainClassifiers
from fous.attention import MultiInfoAttention

STRIDE = 8


def _block(c_in, c_out, stride):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class Backbone(nn.Module):
    """Four conv blocks, total stride 8."""

    def __init__(self, channels=32):
        super().__init__()
        self.body = nn.Sequential(
            _block(3, 16, 1),
            _block(16, 32, 2),
            _block(32, 32, 2),
            _block(32, channels, 2),
        )

    def forward(self, x):
        return self.body(x)


def images_to_tensor(images, dtype=torch.float32):
    """uint8 ``(B, H, W, 3)`` images -> normalised ``(B, 3, H, W)`` tensor."""
    x = torch.as_tensor(np.stack(images)).to(dtype)
    return ((x / 255.0 - 0.5) / 0.25).permute(0, 3, 1, 2).contiguous()


def valid_boxes(boxes, stride=STRIDE):
    """Mask of boxes spanning at least one feature cell in both directions."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return ((boxes[:, 2] - boxes[:, 0]) >= stride) & ((boxes[:, 3] - boxes[:, 1]) >= stride)


class PersonSearchNet(nn.Module):
    def __init__(self, channels=32, roi_height=6, roi_width=4, embed_dim=64, attention_branches=1):
        super().__init__()
        self.roi_size = (roi_height, roi_width)
        self.backbone = Backbone(channels)
        self.attention = MultiInfoAttention(roi_height, roi_width, channels, attention_branches)
        flat = roi_height * roi_width * channels
        self.det_head = nn.Sequential(nn.Linear(flat, 64), nn.ReLU(inplace=True), nn.Linear(64, 1))
        self.embed = nn.Linear(flat, embed_dim)

    @classmethod
    def from_config(cls, m):
        return cls(m.channels, m.roi_height, m.roi_width, m.embed_dim, m.attention_branches)

    def features(self, images):
        return self.backbone(images)

    def instances(self, fmap, boxes_per_image):
        """Pool, attend and embed boxes; ``boxes_per_image`` holds one ``(K, 4)`` array per map.

        Returns per-instance ``det_feat`` (C), ``logit`` and unit ``embedding``.
        """
        rois = [torch.as_tensor(np.asarray(b, dtype=np.float64).reshape(-1, 4), dtype=fmap.dtype) for b in boxes_per_image]
        pooled = roi_align(fmap, rois, self.roi_size, spatial_scale=1.0 / STRIDE, sampling_ratio=2, aligned=True)
        if len(pooled) == 0:
            c = fmap.shape[1]
            empty = fmap.new_zeros((0,))
            return {"det_feat": fmap.new_zeros((0, c)), "logit": empty,
                    "embedding": fmap.new_zeros((0, self.embed.out_features))}
        attended = self.attention(pooled.permute(0, 2, 3, 1))
        flat = attended.flatten(1)
        return {
            "det_feat": attended.mean(dim=(1, 2)),
            "logit": self.det_head(flat).squeeze(-1),
            "embedding": F.normalize(self.embed(flat), dim=-1),
        }


def build_networks(config):
    net = PersonSearchNet.from_config(config.model)
    domain = DomainClassifiers(
        config.model.channels, config.model.channels, config.model.embed_dim,
        hidden=config.model.domain_hidden, strength=config.adapt.reversal_strength,
    )
    return net, domain


def extract_instance_features(net, feature_map, boxes):
    """Unit-norm embeddings for ``boxes`` on a single ``(1, C, h, w)`` map.

    Boxes smaller than one feature cell are skipped with a warning; returns
    ``(embeddings, kept_indices)``.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    ok = valid_boxes(boxes)
    if not ok.all():
        warnings.warn(f"skipped {int((~ok).sum())} degenerate box(es) after stride mapping")
    kept = np.flatnonzero(ok)
    out = net.instances(feature_map, [boxes[kept]])
    return out["embedding"], kept


def _chunks(n, size):
    for start in range(0, n, size):
        yield range(start, min(n, start + size))


@torch.no_grad()
def detect(net, scenes, score_threshold=0.5, nms_iou=0.5, batch=16):
    """Score every scene's proposals; keep those above threshold after NMS.

    Returns one ``(boxes, scores)`` pair per scene.
    """
    was_training = net.training
    net.eval()
    out = []
    dtype = next(net.parameters()).dtype
    for idx in _chunks(len(scenes), batch):
        chunk = [scenes[i] for i in idx]
        fmap = net.features(images_to_tensor([s.image for s in chunk], dtype))
        props = [s.proposals[valid_boxes(s.proposals)] for s in chunk]
        logits = net.instances(fmap, props)["logit"]
        scores = torch.sigmoid(logits).double().numpy()
        offset = 0
        for p in props:
            s = scores[offset:offset + len(p)]
            offset += len(p)
            keep = s >= score_threshold
            b, s = p[keep], s[keep]
            if len(b):
                order = nms(torch.as_tensor(b), torch.as_tensor(s), nms_iou).numpy()
                b, s = b[order], s[order]
            out.append((b.reshape(-1, 4), s))
    net.train(was_training)
    return out


@torch.no_grad()
def embed_boxes(net, scenes, boxes_per_scene, batch=16):
    """Embeddings (``N x D`` float64) for the given boxes, concatenated in scene order."""
    was_training = net.training
    net.eval()
    dtype = next(net.parameters()).dtype
    parts = []
    for idx in _chunks(len(scenes), batch):
        fmap = net.features(images_to_tensor([scenes[i].image for i in idx], dtype))
        boxes = [np.asarray(boxes_per_scene[i], dtype=np.float64).reshape(-1, 4) for i in idx]
        parts.append(net.instances(fmap, boxes)["embedding"].double().numpy())
    net.train(was_training)
    if not parts:
        return np.zeros((0, net.embed.out_features))
    return np.concatenate(parts)
