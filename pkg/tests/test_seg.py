import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from vtryon.core_data import CLASS_NAMES, SKIN, SegMask
from vtryon.seg import (
    DEFAULT_CLASS_WEIGHTS, SegNet, class_weights, finalize_mask, pixel_accuracy, predict_seg, to_segmask,
    weighted_ce,
)
from vtryon.unet import UNet


def test_unet_has_twelve_sampling_layers():
    net = UNet(4, 2, base=8, depth=6)
    convs = [m for m in net.modules() if isinstance(m, (torch.nn.Conv2d, torch.nn.ConvTranspose2d))]
    assert len(convs) == 12


@pytest.mark.parametrize("h,w", [(64, 48), (32, 32), (17, 9)])
def test_unet_preserves_spatial_size(h, w):
    assert UNet(3, 5, base=4)(torch.rand(1, 3, h, w)).shape == (1, 5, h, w)


class TestPredict:
    def setup_method(self):
        torch.manual_seed(0)
        self.net = SegNet(base=8).eval()
        gen = torch.Generator().manual_seed(0)
        self.priors = torch.rand(1, 19, 64, 48, generator=gen)
        self.product = torch.rand(1, 3, 64, 48, generator=gen)

    def test_shape_and_finite(self):
        logits = predict_seg(self.net, self.priors, self.product)
        assert logits.shape == (1, len(CLASS_NAMES), 64, 48)
        assert torch.isfinite(logits).all()

    def test_identical_rows(self):
        logits = predict_seg(self.net, self.priors.repeat(2, 1, 1, 1), self.product.repeat(2, 1, 1, 1))
        torch.testing.assert_close(logits[0], logits[1])

    def test_finalized_prediction_is_valid_mask(self):
        labels = finalize_mask(predict_seg(self.net, self.priors, self.product))
        seg = to_segmask(labels[0])
        assert isinstance(seg, SegMask) and seg.labels.shape == (64, 48)

    def test_interface_takes_only_priors_and_product(self):
        import inspect

        assert list(inspect.signature(SegNet.forward).parameters) == ["self", "priors", "product"]


class TestWeightedCE:
    def test_defaults(self):
        w = class_weights()
        assert DEFAULT_CLASS_WEIGHTS == {"background": 3.0, "skin": 3.0}
        assert w.tolist() == [3.0, 1.0, 3.0, 1.0, 1.0, 1.0, 1.0]

    def test_rejects_bad_weights(self):
        with pytest.raises(ValueError):
            class_weights({"skin": 0})
        with pytest.raises(KeyError):
            class_weights({"hat": 2})

    def test_uniform_logits(self):
        gt = torch.randint(0, 7, (2, 5, 4))
        loss = weighted_ce(torch.zeros(2, 7, 5, 4), gt, torch.ones(7))
        assert abs(float(loss) - math.log(7)) < 1e-6

    def test_confident_correct_logits(self):
        gt = torch.randint(0, 7, (1, 4, 4))
        logits = 100.0 * F.one_hot(gt, 7).permute(0, 3, 1, 2).float()
        assert float(weighted_ce(logits, gt, class_weights())) < 1e-12

    def test_unit_weights_equal_plain_ce(self):
        logits = torch.randn(2, 7, 6, 5)
        gt = torch.randint(0, 7, (2, 6, 5))
        assert abs(float(weighted_ce(logits, gt, torch.ones(7)) - F.cross_entropy(logits, gt))) < 1e-6

    def test_matches_per_pixel_recomputation(self):
        gen = torch.Generator().manual_seed(4)
        logits = torch.randn(1, 7, 5, 4, generator=gen, dtype=torch.float64)
        gt = torch.randint(0, 7, (1, 5, 4), generator=gen)
        w = class_weights()
        total = 0.0
        for y in range(5):
            for x in range(4):
                z = logits[0, :, y, x].tolist()
                m = max(z)
                lse = m + math.log(sum(math.exp(v - m) for v in z))
                c = int(gt[0, y, x])
                total += float(w[c]) * (lse - z[c])
        assert abs(float(weighted_ce(logits, gt, w)) - total / 20) < 1e-12

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), bump=st.floats(0.1, 5))
    def test_monotone_in_class_weight(self, seed, bump):
        gen = torch.Generator().manual_seed(seed)
        logits = torch.randn(1, 7, 4, 4, generator=gen, dtype=torch.float64)
        gt = torch.randint(0, 7, (1, 4, 4), generator=gen)
        gt[0, 0, 0] = SKIN
        w = class_weights()
        heavier = w.clone()
        heavier[SKIN] += bump
        assert weighted_ce(logits, gt, heavier) >= weighted_ce(logits, gt, w)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            weighted_ce(torch.zeros(1, 7, 4, 4), torch.zeros(1, 4, 5, dtype=torch.long), torch.ones(7))


class TestFinalize:
    def test_favoring_class_zero(self):
        logits = torch.zeros(1, 7, 3, 3)
        logits[:, 0] = 1
        assert not finalize_mask(logits).any()

    def test_tie_goes_to_lower_index(self):
        logits = torch.zeros(1, 7, 2, 2)
        logits[:, 2] = 5
        logits[:, 5] = 5
        assert (finalize_mask(logits) == 2).all()

    def test_all_equal_gives_zero(self):
        assert not finalize_mask(torch.ones(1, 7, 2, 2)).any()

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_matches_linear_scan(self, seed):
        gen = torch.Generator().manual_seed(seed)
        logits = torch.randint(-2, 3, (1, 7, 4, 3), generator=gen).float()
        out = finalize_mask(logits)
        for y in range(4):
            for x in range(3):
                best, arg = -np.inf, 0
                for c in range(7):
                    if logits[0, c, y, x] > best:
                        best, arg = logits[0, c, y, x], c
                assert out[0, y, x] == arg

    def test_pixel_accuracy(self):
        assert pixel_accuracy(torch.tensor([[1, 2], [3, 4]]), torch.tensor([[1, 2], [0, 4]])) == 0.75
