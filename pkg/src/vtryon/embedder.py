"""Frozen feature extractors used by the perceptual losses."""
from __future__ import annotations

import torch
import torch.nn as nn

DEFAULT_EMBEDDER_SEED = 20200101


class PerceptualEmbedder(nn.Module):
    """Base class: ``forward`` returns a list of per-stage feature maps."""

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()

    def train(self, mode=True):
        # always stays in eval mode
        return super().train(False)


class RandomConvEmbedder(PerceptualEmbedder):
    """Four strided conv stages with fixed-seed random weights.

    Deterministic and dependency-free; stands in for an ImageNet network
    when pretrained weights are not available.
    """

    def __init__(self, in_channels=3, widths=(8, 16, 32, 32), seed=DEFAULT_EMBEDDER_SEED):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        stages = []
        prev = in_channels
        for width in widths:
            conv = nn.Conv2d(prev, width, 3, stride=2, padding=1)
            with torch.no_grad():
                fan_in = prev * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
            stages.append(nn.Sequential(conv, nn.ReLU()))
            prev = width
        self.stages = nn.ModuleList(stages)
        self.seed = seed
        self.freeze()

    def forward(self, x):
        feats = []
        h = x - 0.5
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        return feats


class VGG19Embedder(PerceptualEmbedder):
    """relu1_2 .. relu5_4 activations of VGG-19.

    ``weights`` is passed to torchvision; ``"DEFAULT"`` loads the ImageNet
    weights (downloaded by torchvision on first use), ``None`` gives a
    randomly initialised network of the same shape.
    """

    LAYER_ENDS = (4, 9, 18, 27, 36)
    MEAN = (0.485, 0.456, 0.406)
    STD = (0.229, 0.224, 0.225)

    def __init__(self, weights="DEFAULT"):
        super().__init__()
        from torchvision.models import vgg19

        features = vgg19(weights=weights).features
        self.slices = nn.ModuleList()
        start = 0
        for end in self.LAYER_ENDS:
            self.slices.append(nn.Sequential(*[features[i] for i in range(start, end)]))
            start = end
        self.register_buffer("mean", torch.tensor(self.MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(self.STD).view(1, 3, 1, 1))
        self.freeze()

    def forward(self, x):
        h = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        feats = []
        for s in self.slices:
            h = s(h)
            feats.append(h)
        return feats


def build_embedder(name="random", seed=DEFAULT_EMBEDDER_SEED):
    if name == "random":
        return RandomConvEmbedder(seed=seed)
    if name == "vgg19":
        return VGG19Embedder()
    raise ValueError(f"unknown embedder {name!r} (expected 'random' or 'vgg19')")


def flatten_features(feats):
    """Concatenate all stages into one ``(B, D)`` vector per sample."""
    return torch.cat([f.reshape(f.shape[0], -1) for f in feats], dim=1)
