"""Image quality metrics: SSIM, MS-SSIM, PSNR, FID and Inception Score.

Paired metrics take ``(H, W, C)`` or ``(H, W)`` arrays in the unit range.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
from scipy.ndimage import correlate1d

log = logging.getLogger(__name__)

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_WIN = 11
SSIM_SIGMA = 1.5


def _gaussian_1d(size=SSIM_WIN, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, win):
    # separable gaussian, then crop to the fully-covered region
    out = correlate1d(img, win, axis=0, mode="reflect")
    out = correlate1d(out, win, axis=1, mode="reflect")
    p = (len(win) - 1) // 2
    return out[p:out.shape[0] - p, p:out.shape[1] - p]


def _ssim_components(a, b, data_range=1.0):
    """Mean luminance*contrast*structure and contrast*structure terms for one channel."""
    win = _gaussian_1d()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a = _filter_valid(a, win)
    mu_b = _filter_valid(b, win)
    saa = _filter_valid(a * a, win) - mu_a ** 2
    sbb = _filter_valid(b * b, win) - mu_b ** 2
    sab = _filter_valid(a * b, win) - mu_a * mu_b
    cs_map = (2 * sab + c2) / (saa + sbb + c2)
    lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    return float(np.mean(lum * cs_map)), float(np.mean(cs_map))


def _as_channels(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    if x.ndim != 3:
        raise ValueError(f"expected an (H, W[, C]) image, got shape {x.shape}")
    return x


def _check_pair(a, b):
    a, b = _as_channels(a), _as_channels(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[:2]) < SSIM_WIN:
        raise ValueError(f"images must be at least {SSIM_WIN}px per side")
    return a, b


def ssim(a, b, data_range=1.0):
    """Gaussian-window SSIM (11x11, sigma 1.5), averaged over channels."""
    a, b = _check_pair(a, b)
    return float(np.mean([_ssim_components(a[..., c], b[..., c], data_range)[0] for c in range(a.shape[2])]))


def _downsample2(x):
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def max_scales(h, w):
    n = 1
    while min(h, w) // 2 ** n >= SSIM_WIN and n < len(MS_SSIM_WEIGHTS):
        n += 1
    return n


def ms_ssim(a, b, scales=None, weights=None, data_range=1.0):
    """Multi-scale SSIM.

    With ``scales=None`` as many of the five standard scales are used as
    the image supports (each level must stay >= 11 px) and the leading
    exponents are renormalized to sum to one. Asking for more scales than
    fit raises ``ValueError``. Negative contrast-structure terms are
    clipped to zero before exponentiation.
    """
    a, b = _check_pair(a, b)
    fit = max_scales(*a.shape[:2])
    if scales is None:
        scales = fit
        if scales < len(MS_SSIM_WEIGHTS):
            log.debug("ms_ssim: %dx%d image supports %d scale(s)", a.shape[0], a.shape[1], scales)
    elif scales > fit:
        raise ValueError(f"{a.shape[0]}x{a.shape[1]} image is too small for {scales} scales")
    if weights is None:
        w = np.asarray(MS_SSIM_WEIGHTS[:scales])
        w = w / w.sum()
    else:
        w = np.asarray(weights, dtype=np.float64)
        if len(w) != scales:
            raise ValueError("need one exponent per scale")
    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        score = 1.0
        for s in range(scales):
            full, cs = _ssim_components(x, y, data_range)
            term = full if s == scales - 1 else cs
            score *= max(term, 0.0) ** w[s] if w[s] != 1 else term
            x, y = _downsample2(x), _downsample2(y)
        vals.append(score)
    return float(np.mean(vals))


def psnr(a, b, data_range=1.0):
    """10*log10(range^2/MSE); ``inf`` for identical inputs."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10 * math.log10(data_range ** 2 / mse)


def _sym_sqrt(m, tol):
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    if vals.min() < -tol * max(1.0, abs(vals).max()):
        raise ValueError(f"covariance is not positive semi-definite (min eigenvalue {vals.min():.3g})")
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(mu_a, cov_a, mu_b, cov_b, tol=1e-10):
    """||mu_a - mu_b||^2 + Tr(A + B - 2 (A B)^(1/2)).

    The trace of (A B)^(1/2) is taken as the trace of the symmetric
    (A^(1/2) B A^(1/2))^(1/2), which shares its eigenvalues.
    """
    sa = _sym_sqrt(cov_a, tol)
    inner = sa @ cov_b @ sa
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    if vals.min() < -tol * max(1.0, abs(vals).max()):
        raise ValueError("covariance product is not positive semi-definite")
    tr_sqrt = float(np.sqrt(np.clip(vals, 0, None)).sum())
    diff = np.asarray(mu_a) - np.asarray(mu_b)
    d = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_sqrt)
    return max(d, 0.0)


def fid_from_embeddings(emb_a, emb_b):
    emb_a = np.asarray(emb_a, dtype=np.float64)
    emb_b = np.asarray(emb_b, dtype=np.float64)
    for e in (emb_a, emb_b):
        if e.shape[0] < e.shape[1]:
            warnings.warn(f"FID from {e.shape[0]} samples of a {e.shape[1]}-dim embedding: "
                          "covariance is rank deficient", stacklevel=2)
    cov = lambda e: np.cov(e, rowvar=False) if len(e) > 1 else np.zeros((e.shape[1],) * 2)
    return frechet_distance(emb_a.mean(0), np.atleast_2d(cov(emb_a)), emb_b.mean(0), np.atleast_2d(cov(emb_b)))


def fid(set_a, set_b, embedder):
    """FID between two image collections under ``embedder.embed``."""
    return fid_from_embeddings(embedder.embed(set_a), embedder.embed(set_b))


def inception_score_from_probs(probs, splits=1):
    """exp(mean KL(p(y|x) || p(y))) per split; returns ``(mean, std)`` over splits."""
    probs = np.asarray(probs, dtype=np.float64)
    if splits < 1 or splits > len(probs):
        raise ValueError("splits must be between 1 and the number of samples")
    scores = []
    for part in np.array_split(probs, splits):
        marginal = part.mean(0, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(part > 0, part * (np.log(part) - np.log(marginal)), 0.0)
        scores.append(math.exp(terms.sum(1).mean()))
    return float(np.mean(scores)), float(np.std(scores))


def inception_score(images, classifier, splits=1):
    return inception_score_from_probs(classifier.posteriors(images), splits)


class RandomImageEncoder(nn.Module):
    """Fixed-seed frozen convnet giving pooled embeddings and class posteriors.

    A dependency-free stand-in for Inception; scores it produces are only
    comparable with each other.
    """

    def __init__(self, dim=16, num_classes=10, seed=1234, temperature=0.05):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        widths = (8, 16, dim)
        layers = []
        prev = 3
        for wd in widths:
            conv = nn.Conv2d(prev, wd, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / (prev * 9)) ** 0.5)
                conv.bias.zero_()
            layers += [conv, nn.ReLU()]
            prev = wd
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(dim, num_classes)
        with torch.no_grad():
            self.head.weight.copy_(torch.randn(self.head.weight.shape, generator=gen))
            self.head.bias.zero_()
        self.temperature = temperature
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def _batch(self, images):
        x = np.stack([np.asarray(im, dtype=np.float32) for im in images])
        return torch.from_numpy(x).permute(0, 3, 1, 2) - 0.5

    @torch.no_grad()
    def embed(self, images):
        return self.features(self._batch(images)).mean(dim=(2, 3)).double().numpy()

    @torch.no_grad()
    def posteriors(self, images):
        e = torch.from_numpy(self.embed(images)).float()
        e = (e - e.mean()) / (e.std() + 1e-8)
        return torch.softmax(self.head(e) / (self.temperature * e.shape[1] ** 0.5), dim=1).double().numpy()


@dataclass
class MetricReport:
    ssim: float
    ms_ssim: float
    psnr: float
    fid: float
    is_mean: float
    is_std: float
    n_samples: int
    label: str = ""

    def __post_init__(self):
        for name in ("ssim", "ms_ssim"):
            v = getattr(self, name)
            if not -1 - 1e-9 <= v <= 1 + 1e-9:
                raise ValueError(f"{name}={v} outside [-1, 1]")
        if self.fid < 0:
            raise ValueError("fid must be non-negative")
        if self.is_mean < 1 - 1e-9:
            raise ValueError("inception score must be >= 1")
        if not (self.psnr >= 0 or math.isinf(self.psnr)):
            raise ValueError("psnr must be non-negative")

    @property
    def psnr_infinite(self):
        return math.isinf(self.psnr)

    def to_json(self):
        d = asdict(self)
        d["psnr"] = "inf" if self.psnr_infinite else self.psnr
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        d["psnr"] = float(d["psnr"])
        return cls(**d)

    CSV_COLUMNS = ("Configuration", "SSIM", "MS-SSIM", "FID", "PSNR", "IS")

    def csv_row(self):
        return [self.label, f"{self.ssim:.3f}", f"{self.ms_ssim:.3f}", f"{self.fid:.3f}",
                "inf" if self.psnr_infinite else f"{self.psnr:.3f}", f"{self.is_mean:.2f} +- {self.is_std:.2f}"]


def reports_to_csv(reports):
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(MetricReport.CSV_COLUMNS)
    for r in reports:
        writer.writerow(r.csv_row())
    return buf.getvalue()
