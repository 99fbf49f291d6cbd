"""Two-stage (coarse, then residual fine) TPS garment warping and its loss."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .embedder import flatten_features
from .tps import bilinear_sample, tps_grid

PAPER_LAMBDAS = (1.0, 1.0, 1.0, 0.5, 0.5)
PAPER_MARGIN_K = 3.0


def _encoder(in_ch, base):
    layers = []
    chans = [base, base * 2, base * 4, base * 4]
    prev = in_ch
    for c in chans:
        layers += [nn.Conv2d(prev, c, 4, stride=2, padding=1), nn.InstanceNorm2d(c, affine=True), nn.ReLU()]
        prev = c
    return nn.Sequential(*layers)


def feature_correlation(fa, fb):
    """Normalized correlation: channel ``i`` holds <fa at position i, fb>."""
    B, C, h, w = fa.shape
    fa = F.normalize(fa, dim=1, eps=1e-6).reshape(B, C, h * w)
    fb = F.normalize(fb, dim=1, eps=1e-6).reshape(B, C, h * w)
    corr = torch.bmm(fa.transpose(1, 2), fb)          # (B, hw_a, hw_b)
    corr = F.relu(corr.reshape(B, h * w, h, w))
    return F.normalize(corr, dim=1, eps=1e-6)


class TPSRegressor(nn.Module):
    """Twin conv encoders, correlation matching, and a regression head."""

    def __init__(self, resolution, grid_size=5, prior_channels=19, image_channels=3, base=16,
                 hidden=128, zero_init=False):
        super().__init__()
        h, w = resolution
        if h % 16 or w % 16:
            raise ValueError(f"resolution {resolution} must be divisible by 16")
        self.grid_size = grid_size
        self.enc_priors = _encoder(prior_channels, base)
        self.enc_image = _encoder(image_channels, base)
        n_pos = (h // 16) * (w // 16)
        self.head = nn.Sequential(
            nn.Conv2d(n_pos, 64, 3, padding=1), nn.ReLU(),
            nn.Conv2d(64, 32, 3, padding=1), nn.ReLU(),
            nn.Flatten(),
            nn.Linear(32 * n_pos, hidden), nn.ReLU(),
        )
        self.out = nn.Linear(hidden, 2 * grid_size * grid_size)
        with torch.no_grad():
            if zero_init:
                self.out.weight.zero_()
            else:
                self.out.weight.mul_(1e-2)
            self.out.bias.zero_()

    def forward(self, priors, image):
        corr = feature_correlation(self.enc_priors(priors), self.enc_image(image))
        return self.out(self.head(corr))


@dataclass
class WarpOutput:
    coarse: torch.Tensor
    fine: torch.Tensor
    theta: torch.Tensor
    delta_theta: torch.Tensor


def warp_image(product, params, padding="zeros"):
    """One TPS resampling of ``product``. Computed in float64, returned in the input dtype."""
    B, C, H, W = product.shape
    grid = tps_grid(params, H, W)
    return bilinear_sample(product.to(torch.float64), grid, padding).to(product.dtype)


def warp_from_params(product, theta, delta_theta):
    """Coarse and fine warps; the fine one resamples the original product with theta + delta."""
    coarse = warp_image(product, theta)
    fine = warp_image(product, theta + delta_theta)
    return WarpOutput(coarse, fine, theta, delta_theta)


class WarpNet(nn.Module):
    def __init__(self, resolution, grid_size=5, base=16, use_fine=True):
        super().__init__()
        self.resolution = tuple(resolution)
        self.grid_size = grid_size
        self.use_fine = use_fine
        self.coarse = TPSRegressor(resolution, grid_size, base=base)
        self.fine = TPSRegressor(resolution, grid_size, base=base, zero_init=True)

    def coarse_regress(self, priors, product):
        return self.coarse(priors, product)

    def fine_regress(self, priors, coarse_warp):
        return self.fine(priors, coarse_warp)

    def forward(self, priors, product):
        theta = self.coarse_regress(priors, product)
        coarse = warp_image(product, theta)
        if self.use_fine:
            delta = self.fine_regress(priors, coarse)
        else:
            delta = torch.zeros_like(theta)
        fine = warp_image(product, theta + delta)
        return WarpOutput(coarse, fine, theta, delta)


def cosine_or_one(a, b, eps=1e-12):
    """Row-wise cosine similarity; rows where either vector vanishes count as 1."""
    na = a.norm(dim=1)
    nb = b.norm(dim=1)
    degenerate = (na <= eps) | (nb <= eps)
    safe = torch.where(degenerate, torch.ones_like(na), na * nb)
    cos = (a * b).sum(1) / safe
    return torch.where(degenerate, torch.ones_like(cos), cos), degenerate


def warp_loss(out, gt, embedder, lambdas=PAPER_LAMBDAS, k=PAPER_MARGIN_K, clamp_push=True):
    """Total warp loss and a breakdown dict of its (detached) components."""
    if k <= 1:
        raise ValueError("margin k must exceed 1")
    if not (out.coarse.shape == out.fine.shape == gt.shape):
        raise ValueError("warp outputs and ground truth must share a shape")
    l1, l2, l3, l4, l5 = lambdas
    ls0 = (gt - out.coarse).abs().mean()
    ls1 = (gt - out.fine).abs().mean()
    push = k * ls1 - (out.fine - out.coarse).abs().mean()
    if clamp_push:
        push = F.relu(push)
    fg = flatten_features(embedder(gt))
    v0 = flatten_features(embedder(out.coarse)) - fg
    v1 = flatten_features(embedder(out.fine)) - fg
    cos, degenerate = cosine_or_one(v0, v1)
    align = ((cos - 1) ** 2).mean()
    pgm = l4 * push + l5 * align
    total = l1 * ls0 + l2 * ls1 + l3 * pgm
    parts = {
        "L_warp": total.detach(), "L_s0": ls0.detach(), "L_s1": ls1.detach(), "L_push": push.detach(),
        "L_align": align.detach(), "L_pgm": pgm.detach(), "align_degenerate": int(degenerate.sum()),
    }
    return total, parts
