"""Thin-plate-spline sampling grids and differentiable bilinear resampling.

A parameter vector of length ``2*g*g`` holds the ``(x, y)`` displacement of
each point of a regular ``g x g`` control lattice spanning ``[-1, 1]^2``
(row-major, ``y`` outer). The spline maps an output location to the source
location it samples from; zero offsets give the identity map.

The spline is solved for the displacement field rather than the target
positions, so the identity is represented exactly (all coefficients zero)
and the affine part of the full map is ``identity + displacement affine``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import torch


class SingularTPSError(RuntimeError):
    pass


def grid_size_of(params):
    n = params.shape[-1]
    g = int(round(math.sqrt(n / 2)))
    if 2 * g * g != n:
        raise ValueError(f"TPS parameter length {n} is not 2*g*g")
    return g


def control_lattice(g, dtype=torch.float64):
    """``(g*g, 2)`` regular lattice of ``(x, y)`` points in [-1, 1]."""
    if g < 2:
        raise ValueError("control grid needs at least 2 points per axis")
    t = torch.linspace(-1.0, 1.0, g, dtype=dtype)
    yy, xx = torch.meshgrid(t, t, indexing="ij")
    return torch.stack([xx.reshape(-1), yy.reshape(-1)], dim=1)


def radial_kernel(sq_dist):
    """U(r) = r^2 log r^2, with U(0) = 0."""
    safe = torch.where(sq_dist > 0, sq_dist, torch.ones_like(sq_dist))
    return torch.where(sq_dist > 0, sq_dist * torch.log(safe), torch.zeros_like(sq_dist))


def _pairwise_sq(a, b):
    d = a[:, None, :] - b[None, :, :]
    return (d * d).sum(-1)


def _system_inverse(points, ridge):
    n = points.shape[0]
    K = radial_kernel(_pairwise_sq(points, points))
    P = torch.cat([torch.ones(n, 1, dtype=points.dtype), points], dim=1)
    L = torch.zeros(n + 3, n + 3, dtype=points.dtype)
    L[:n, :n] = K + ridge * torch.eye(n, dtype=points.dtype)
    L[:n, n:] = P
    L[n:, :n] = P.T
    try:
        inv = torch.linalg.inv(L)
    except RuntimeError as exc:
        raise SingularTPSError(f"TPS system is singular ({n} control points, ridge={ridge})") from exc
    if not torch.all(torch.isfinite(inv)) or torch.linalg.cond(L) > 1e12:
        raise SingularTPSError(f"TPS system is singular ({n} control points, ridge={ridge})")
    return inv


@lru_cache(maxsize=32)
def _lattice_inverse(g, ridge):
    return _system_inverse(control_lattice(g), ridge)


@dataclass
class TPSCoefficients:
    control: torch.Tensor   # (n, 2)
    weights: torch.Tensor   # (..., n, 2) kernel weights
    affine: torch.Tensor    # (..., 3, 2) rows: constant, x, y, of the full map

    def __call__(self, points):
        """Evaluate the map at ``(..., m, 2)`` points."""
        U = radial_kernel(_pairwise_sq_batched(points, self.control))
        ones = torch.ones_like(points[..., :1])
        basis = torch.cat([ones, points], dim=-1)
        return basis @ self.affine + U @ self.weights


def _pairwise_sq_batched(points, control):
    d = points[..., :, None, :] - control
    return (d * d).sum(-1)


def tps_coefficients(params, ridge=1e-6, control=None):
    """Solve the spline mapping each control point ``c`` to ``c + offset``.

    ``params`` has shape ``(..., 2*n)``. A custom ``control`` point set
    may be given (mainly to probe degenerate configurations).
    """
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    params = params.to(torch.float64)
    if control is None:
        g = grid_size_of(params)
        control = control_lattice(g)
        inv = _lattice_inverse(g, float(ridge))
    else:
        control = control.to(torch.float64)
        inv = _system_inverse(control, float(ridge))
    n = control.shape[0]
    disp = params.reshape(*params.shape[:-1], n, 2)
    rhs = torch.cat([disp, disp.new_zeros(*disp.shape[:-2], 3, 2)], dim=-2)
    sol = inv @ rhs
    identity = torch.tensor([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    return TPSCoefficients(control=control, weights=sol[..., :n, :], affine=sol[..., n:, :] + identity)


def identity_grid(h, w, dtype=torch.float64):
    """``(h, w, 2)`` normalized pixel-centre coordinates, corners at +-1."""
    ys = torch.linspace(-1.0, 1.0, h, dtype=dtype) if h > 1 else torch.zeros(1, dtype=dtype)
    xs = torch.linspace(-1.0, 1.0, w, dtype=dtype) if w > 1 else torch.zeros(1, dtype=dtype)
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([xx, yy], dim=-1)


def tps_grid(params, h, w, ridge=1e-6):
    """Sampling grid ``(..., h, w, 2)`` in float64; differentiable in ``params``."""
    coef = tps_coefficients(params, ridge)
    base = identity_grid(h, w).reshape(h * w, 2)
    U = radial_kernel(_pairwise_sq(base, coef.control))         # (hw, n)
    basis = torch.cat([torch.ones(h * w, 1, dtype=base.dtype), base], dim=1)
    disp_affine = coef.affine - torch.tensor([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], dtype=base.dtype)
    disp = basis @ disp_affine + U @ coef.weights
    grid = base + disp
    return grid.reshape(*params.shape[:-1], h, w, 2)


def bilinear_sample(img, grid, padding="zeros"):
    """Bilinearly resample ``img (B, C, H, W)`` at ``grid (B, h, w, 2)``.

    Grid coordinates are normalized so -1/+1 hit the centres of the corner
    pixels. ``padding`` is ``"zeros"`` or ``"border"``.
    """
    if padding not in ("zeros", "border"):
        raise ValueError(f"unknown padding mode {padding!r}")
    B, C, H, W = img.shape
    # pixel coordinates in float64 so identity grids land exactly on pixel centres
    grid = grid.to(torch.float64)
    h, w = grid.shape[1:3]
    ix = (grid[..., 0] + 1) * (W - 1) / 2
    iy = (grid[..., 1] + 1) * (H - 1) / 2
    if padding == "border":
        ix = ix.clamp(0, W - 1)
        iy = iy.clamp(0, H - 1)
    x0 = torch.floor(ix).detach()
    y0 = torch.floor(iy).detach()
    wx1 = ix - x0
    wy1 = iy - y0
    wx0 = 1 - wx1
    wy0 = 1 - wy1
    flat = img.reshape(B, C, H * W)
    out = img.new_zeros(B, C, h * w)
    for dx, dy, wgt in ((0, 0, wx0 * wy0), (1, 0, wx1 * wy0), (0, 1, wx0 * wy1), (1, 1, wx1 * wy1)):
        xi = x0 + dx
        yi = y0 + dy
        valid = (xi >= 0) & (xi <= W - 1) & (yi >= 0) & (yi <= H - 1)
        idx = (yi.clamp(0, H - 1) * W + xi.clamp(0, W - 1)).long().reshape(B, 1, h * w)
        vals = torch.gather(flat, 2, idx.expand(B, C, h * w))
        out = out + vals * (wgt * valid).to(img.dtype).reshape(B, 1, h * w)
    return out.reshape(B, C, h, w)
