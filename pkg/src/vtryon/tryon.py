"""Segmentation-assisted texture translation and the duelling triplet schedule."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .core_data import CLASS_NAMES
from .unet import UNet


@dataclass
class TranslationOutput:
    rendered: torch.Tensor
    comp_mask: torch.Tensor


class TryOnNet(nn.Module):
    """Inputs: warped product (3), expected mask one-hot (C), texture priors (3).
    Outputs a rendered person (3) and a composition mask (1), both sigmoid-bounded.

    With ``use_seg=False`` the mask channels are fed zeros (no segmentation prior).
    """

    def __init__(self, num_classes=len(CLASS_NAMES), base=32, depth=6, use_seg=True):
        super().__init__()
        self.num_classes = num_classes
        self.use_seg = use_seg
        self.unet = UNet(3 + num_classes + 3, 4, base=base, depth=depth)

    def forward(self, warped, exp_mask_onehot, priors_tt):
        if not self.use_seg:
            exp_mask_onehot = torch.zeros_like(exp_mask_onehot)
        out = self.unet(torch.cat([warped, exp_mask_onehot, priors_tt], dim=1))
        return TranslationOutput(torch.sigmoid(out[:, :3]), torch.sigmoid(out[:, 3:4]))


def translate(net, warped, exp_mask_onehot, priors_tt):
    return net(warped, exp_mask_onehot, priors_tt)


def compose(out, warped):
    m = out.comp_mask
    return m * warped + (1 - m) * out.rendered


def tt_loss(tryon, model, comp_mask, gt_cloth_mask, embedder):
    l1 = (tryon - model).abs().mean()
    percep = sum((a - b).abs().mean() for a, b in zip(embedder(tryon), embedder(model)))
    mask = (comp_mask - gt_cloth_mask).abs().mean()
    total = l1 + percep + mask
    return total, {"L_tt": total.detach(), "L_l1": l1.detach(), "L_percep": percep.detach(),
                   "L_mask": mask.detach()}


def prev_phase_index(i, K, T, clamp=True):
    """Step whose weights supply the negative at step ``i``.

    ``K + T * (floor((i - K) / T) - 1)``; with ``clamp`` the result is
    raised to ``K``, the earliest step with a snapshot.
    """
    if K < 1 or T < 1:
        raise ValueError("K and T must be >= 1")
    if i <= K:
        raise ValueError(f"step {i} is in the conditioning phase (K={K}); no negative exists")
    prev = K + T * ((i - K) // T - 1)
    return max(prev, K) if clamp else prev


def duelling_triplet_loss(tryon_i, tryon_prev, model):
    d_neg = (tryon_i - tryon_prev.detach()).abs().mean()
    d_pos = (tryon_i - model).abs().mean()
    return torch.clamp(d_pos - d_neg, min=0.0), {"D_pos": d_pos.detach(), "D_neg": d_neg.detach()}


def in_finetune(step, K):
    return K is not None and not math.isinf(K) and step > K


def tryon_total_loss(step, K, l_tt, l_d=None):
    """``L_tt`` during conditioning (``step <= K``), ``L_tt + L_d`` after."""
    if not in_finetune(step, K):
        return l_tt
    if l_d is None:
        raise ValueError(f"step {step} > K={K} requires the duelling term")
    return l_tt + l_d


class MissingSnapshotError(RuntimeError):
    pass


@dataclass
class PhasedTrainState:
    """Step counter plus frozen negatives keyed by the step they were taken at.

    ``K=None`` (or inf) disables fine-tuning: every step is conditioning.
    """

    K: float | None
    T: int
    step: int = 0
    registry: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.T < 1 or (self.K is not None and self.K < 1):
            raise ValueError("K and T must be >= 1")

    @property
    def phase(self):
        if not in_finetune(self.step, self.K):
            return 0
        return 1 + int((self.step - self.K) // self.T)

    def negative_step(self):
        return prev_phase_index(self.step, int(self.K), self.T) if in_finetune(self.step, self.K) else None


class SnapshotManager:
    """Keeps at most two frozen copies of the live model: the one serving as
    the current negative and the one taken at the latest phase boundary."""

    def __init__(self, state):
        self.state = state

    def is_boundary(self, step):
        K = self.state.K
        return K is not None and not math.isinf(K) and step >= K and (step - K) % self.state.T == 0

    def advance(self, model):
        """Begin the next step. Returns ``(step, snapshot_taken)``.

        The snapshot at step ``i`` holds the weights the live model uses to
        compute step ``i`` (before that step's update).
        """
        st = self.state
        st.step += 1
        i = st.step
        needed = st.negative_step()
        if needed is not None:
            for key in [k for k in st.registry if k < needed]:
                del st.registry[key]
        taken = False
        if self.is_boundary(i):
            st.registry[i] = freeze_copy(model)
            taken = True
        if needed is not None and needed not in st.registry:
            raise MissingSnapshotError(f"no snapshot for step {needed} required at step {i}")
        return i, taken

    def negative(self):
        needed = self.state.negative_step()
        if needed is None:
            return None
        try:
            return self.state.registry[needed]
        except KeyError:
            raise MissingSnapshotError(f"no snapshot for step {needed}") from None


def freeze_copy(model):
    snap = copy.deepcopy(model)
    for p in snap.parameters():
        p.requires_grad_(False)
    return snap.eval()
