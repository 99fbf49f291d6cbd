"""Try-on-cloth conditioned segmentation of the expected try-on result."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core_data import CLASS_NAMES, NUM_PRIOR_CHANNELS, SegMask
from .unet import UNet

DEFAULT_CLASS_WEIGHTS = {"background": 3.0, "skin": 3.0}

# 8-bit palette for exported masks, one RGB triple per class
PALETTE = np.array([
    [0, 0, 0], [254, 85, 0], [255, 200, 160], [0, 85, 220], [0, 128, 0], [220, 170, 50], [90, 30, 120],
], dtype=np.uint8)


def class_weights(overrides=None, class_names=CLASS_NAMES):
    """Per-class weight tensor; unspecified classes get 1."""
    overrides = DEFAULT_CLASS_WEIGHTS if overrides is None else overrides
    unknown = set(overrides) - set(class_names)
    if unknown:
        raise KeyError(f"weights given for unknown classes {sorted(unknown)}")
    w = torch.tensor([float(overrides.get(n, 1.0)) for n in class_names])
    if torch.any(w <= 0):
        raise ValueError("class weights must be positive")
    return w


class SegNet(nn.Module):
    """Predicts expected segmentation logits from (priors, product) only;
    the worn garment never enters, so the net cannot learn the identity."""

    def __init__(self, num_classes=len(CLASS_NAMES), base=32, depth=6):
        super().__init__()
        self.num_classes = num_classes
        self.unet = UNet(NUM_PRIOR_CHANNELS + 3, num_classes, base=base, depth=depth)

    def forward(self, priors, product):
        return self.unet(torch.cat([priors, product], dim=1))


def predict_seg(net, priors, product):
    return net(priors, product)


def weighted_ce(logits, gt, weights):
    """Mean over pixels of ``w[gt] * -log softmax(logits)[gt]``.

    Unlike ``F.cross_entropy(weight=...)`` this is not renormalized by the
    sum of weights, so unit weights give plain cross-entropy.
    """
    if logits.shape[0] != gt.shape[0] or logits.shape[2:] != gt.shape[1:]:
        raise ValueError("logits and labels disagree in shape")
    logp = F.log_softmax(logits, dim=1)
    nll = -logp.gather(1, gt[:, None].long())[:, 0]
    w = weights.to(logits.dtype).to(logits.device)[gt.long()]
    return (w * nll).mean()


def finalize_mask(logits):
    """Per-pixel argmax over classes; ties go to the lowest class index."""
    return torch.argmax(logits, dim=1)


def to_segmask(labels, class_names=CLASS_NAMES):
    return SegMask(labels.detach().cpu().numpy().astype(np.int64), class_names)


def pixel_accuracy(pred, gt):
    return (pred == gt).float().mean().item()
