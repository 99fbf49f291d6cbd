import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from vtryon.metrics import (
    MetricReport, RandomImageEncoder, fid, fid_from_embeddings, frechet_distance, inception_score,
    inception_score_from_probs, max_scales, ms_ssim, psnr, reports_to_csv, ssim,
)

rng = np.random.default_rng(0)


def sk_ssim(a, b):
    return structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                 use_sample_covariance=False, channel_axis=2)


def gaussian_shift_fid(n, d=8, seed=0):
    r = np.random.default_rng(seed)
    a = r.standard_normal((n, d))
    b = r.standard_normal((n, d))
    b[:, 0] += 1.0
    return fid_from_embeddings(a, b)


class TestSSIM:
    def test_self(self):
        x = rng.random((64, 48, 3))
        assert ssim(x, x) == 1.0

    @pytest.mark.parametrize("shape", [(64, 48, 3), (32, 32, 1), (20, 30, 3)])
    def test_matches_skimage(self, shape):
        a = rng.random(shape)
        b = np.clip(a + 0.2 * rng.standard_normal(shape), 0, 1)
        assert abs(ssim(a, b) - sk_ssim(a, b)) < 1e-10

    def test_binary_inverse_is_negative(self):
        x = (rng.random((32, 32)) > 0.5).astype(float)
        assert ssim(x, 1 - x) < 0

    def test_two_constants_closed_form(self):
        a, b = np.full((24, 24), 0.2), np.full((24, 24), 0.7)
        c1 = 0.01 ** 2
        assert abs(ssim(a, b) - (2 * 0.2 * 0.7 + c1) / (0.2 ** 2 + 0.7 ** 2 + c1)) < 1e-12

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_symmetric_and_bounded(self, seed):
        r = np.random.default_rng(seed)
        a, b = r.random((16, 16, 3)), r.random((16, 16, 3))
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-12
        assert ssim(a, b) < 1

    def test_too_small(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))


class TestMSSSIM:
    def test_self(self):
        x = rng.random((64, 48, 3))
        assert abs(ms_ssim(x, x) - 1.0) < 1e-12

    def test_single_scale_is_ssim(self):
        a = rng.random((40, 40, 3))
        b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
        assert abs(ms_ssim(a, b, scales=1, weights=[1.0]) - ssim(a, b)) < 1e-12

    def test_monotone_in_noise(self):
        base = rng.random((64, 48, 3))
        noise = rng.standard_normal(base.shape)
        scores = [ms_ssim(base, np.clip(base + s * noise, 0, 1)) for s in (0.02, 0.05, 0.1, 0.2, 0.4)]
        assert all(x > y for x, y in zip(scores, scores[1:]))

    def test_scale_count(self):
        assert max_scales(64, 48) == 3
        assert max_scales(256, 192) == 5
        with pytest.raises(ValueError, match="too small"):
            ms_ssim(np.zeros((64, 48)), np.zeros((64, 48)), scales=5)

    def test_full_five_scales(self):
        a = rng.random((176, 176))
        b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
        assert 0 < ms_ssim(a, b, scales=5) < 1


class TestPSNR:
    def test_identical(self):
        x = rng.random((8, 8))
        assert math.isinf(psnr(x, x))

    def test_closed_form(self):
        a = np.zeros((10, 10))
        assert abs(psnr(a, a + 0.1) - 20.0) < 1e-9

    def test_direct_mse(self):
        a, b = rng.random((7, 5, 3)), rng.random((7, 5, 3))
        mse = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
        assert abs(psnr(a, b) - 10 * math.log10(1 / mse)) < 1e-9
        assert psnr(a, b) == psnr(b, a)


class TestFID:
    def test_identical_sets(self):
        e = rng.standard_normal((200, 6))
        assert fid_from_embeddings(e, e) < 1e-6
        assert fid_from_embeddings(e, e[rng.permutation(200)]) < 1e-6

    def test_gaussian_shift(self):
        assert abs(gaussian_shift_fid(5000) - 1.0) < 0.05

    def test_closed_form_diagonal(self):
        A, B = np.diag([1.0, 4.0]), np.diag([9.0, 1.0])
        expected = 1.0 + (1 + 4 + 9 + 1) - 2 * (3 + 2)
        assert abs(frechet_distance(np.zeros(2), A, np.array([1.0, 0.0]), B) - expected) < 1e-12

    def test_symmetric(self):
        a, b = rng.standard_normal((100, 4)), 2 * rng.standard_normal((100, 4)) + 0.3
        assert abs(fid_from_embeddings(a, b) - fid_from_embeddings(b, a)) < 1e-9

    def test_rejects_non_psd(self):
        with pytest.raises(ValueError):
            frechet_distance(np.zeros(2), np.diag([1.0, -1.0]), np.zeros(2), np.eye(2))

    def test_warns_when_rank_deficient(self):
        with pytest.warns(UserWarning, match="rank deficient"):
            fid_from_embeddings(rng.standard_normal((3, 8)), rng.standard_normal((3, 8)))

    def test_on_images(self):
        enc = RandomImageEncoder()
        imgs = [rng.random((32, 24, 3)).astype(np.float32) for _ in range(20)]
        assert fid(imgs, imgs, enc) < 1e-6


class TestIS:
    def test_constant_posteriors(self):
        p = np.tile(rng.dirichlet(np.ones(5)), (12, 1))
        mean, std = inception_score_from_probs(p)
        assert math.isclose(mean, 1.0, rel_tol=4 * np.finfo(float).eps, abs_tol=0) and std == 0
        assert inception_score_from_probs(np.full((6, 4), 0.25)) == (1.0, 0.0)

    @pytest.mark.parametrize("n", [2, 3, 5, 10, 16])
    def test_deterministic_distinct_classes(self, n):
        mean, _ = inception_score_from_probs(np.eye(n))
        assert math.isclose(mean, n, rel_tol=4 * np.finfo(float).eps, abs_tol=0)

    def test_splits(self):
        mean, std = inception_score_from_probs(np.tile(np.eye(4), (3, 1)), splits=3)
        assert abs(mean - 4) < 1e-12 and std < 1e-12
        with pytest.raises(ValueError):
            inception_score_from_probs(np.eye(3), splits=4)

    def test_encoder_posteriors(self):
        enc = RandomImageEncoder()
        imgs = [rng.random((32, 24, 3)).astype(np.float32) for _ in range(10)]
        p = enc.posteriors(imgs)
        assert p.shape == (10, 10)
        np.testing.assert_allclose(p.sum(1), 1, atol=1e-6)
        mean, _ = inception_score(imgs, enc)
        assert mean >= 1


class TestReport:
    def make(self, **kw):
        base = dict(ssim=0.8, ms_ssim=0.85, psnr=21.5, fid=3.2, is_mean=2.1, is_std=0.1, n_samples=4, label="x")
        base.update(kw)
        return MetricReport(**base)

    def test_json_roundtrip_with_infinite_psnr(self):
        r = self.make(psnr=math.inf)
        assert json.loads(r.to_json())["psnr"] == "inf"
        again = MetricReport.from_json(r.to_json())
        assert again.psnr_infinite and again == r

    @pytest.mark.parametrize("field,value", [("ssim", 1.5), ("fid", -1.0), ("is_mean", 0.5), ("psnr", -2.0)])
    def test_invariants(self, field, value):
        with pytest.raises(ValueError):
            self.make(**{field: value})

    def test_csv(self):
        text = reports_to_csv([self.make(label="C2F+SATT-D")])
        lines = text.strip().splitlines()
        assert lines[0] == "Configuration,SSIM,MS-SSIM,FID,PSNR,IS"
        assert lines[1].startswith("C2F+SATT-D,0.800,0.850,3.200,21.500,")
