"""Distribution- and pair-level image quality metrics.

Feature extractors are pluggable. At full scale they wrap pretrained
networks (inception pool features for FID, VGG-style layer stacks for
LPIPS); the deterministic random-conv extractors here stand in at desk
scale and in tests. Images are (C, H, W) float arrays in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


class InsufficientSamplesError(ValueError):
    pass


class ScaleError(ValueError):
    """Image too small for the requested number of MS-SSIM scales."""


@dataclass(frozen=True)
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        if mu.ndim != 1 or sigma.shape != (mu.size, mu.size):
            raise ValueError(f"inconsistent stats shapes mu={mu.shape} sigma={sigma.shape}")
        if not np.allclose(sigma, sigma.T, atol=1e-10, rtol=1e-8):
            raise ValueError("covariance is not symmetric")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)


def compute_feature_stats(images: Sequence[np.ndarray], extractor: Callable[[np.ndarray], np.ndarray]) -> FeatureStats:
    """Sample mean and unbiased covariance of extracted feature vectors."""
    if len(images) < 2:
        raise InsufficientSamplesError(f"need at least 2 images, got {len(images)}")
    feats = np.stack([np.asarray(extractor(img), dtype=np.float64).ravel() for img in images])
    return FeatureStats(feats.mean(axis=0), np.atleast_2d(np.cov(feats, rowvar=False, ddof=1)), len(images))


def _psd_sqrt(m: np.ndarray, clamp: float = -1e-8) -> np.ndarray:
    m = 0.5 * (m + m.T)
    w, v = np.linalg.eigh(m)
    if w.min(initial=0.0) < clamp * max(1.0, abs(w).max(initial=0.0)):
        raise ValueError(f"matrix is not positive semidefinite (min eigenvalue {w.min():.3e})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the product root is evaluated as the trace of the root of
    the symmetric matrix ``S_a^(1/2) S_b S_a^(1/2)``, which has the same
    eigenvalues and stays numerically PSD.
    """
    if a.mu.shape != b.mu.shape:
        raise ValueError(f"dimension mismatch: {a.mu.size} vs {b.mu.size}")
    diff = a.mu - b.mu
    ra = _psd_sqrt(a.sigma)
    inner = ra @ b.sigma @ ra
    w = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    tr_covmean = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    val = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * tr_covmean)
    return max(val, 0.0)


# -------------------------------------------------------------- extractors


@dataclass
class RandomConvExtractor:
    """Fixed random conv features with global average pooling.

    Deterministic in ``seed``; used for FID at desk scale.
    """

    seed: int = 0
    in_channels: int = 3
    widths: Sequence[int] = (16, 32)
    _kernels: list = field(default_factory=list, init=False, repr=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        c = self.in_channels
        for w in self.widths:
            self._kernels.append(rng.standard_normal((w, c, 3, 3)) / np.sqrt(9 * c))
            c = w

    def layers(self, img: np.ndarray) -> list[np.ndarray]:
        x = np.asarray(img, dtype=np.float64)
        feats = []
        for k in self._kernels:
            out = np.stack(
                [sum(ndimage.correlate(x[ci], k[o, ci], mode="nearest") for ci in range(x.shape[0])) for o in range(k.shape[0])]
            )
            x = np.maximum(out, 0.0)
            feats.append(x)
            if min(x.shape[1:]) >= 4:
                x = x[:, ::2, ::2]
        return feats

    def __call__(self, img: np.ndarray) -> np.ndarray:
        return np.concatenate([f.mean(axis=(1, 2)) for f in self.layers(img)])


def flatten_extractor(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64).ravel()


@dataclass
class PerceptualExtractor:
    """Per-layer feature maps and per-channel layer weights for LPIPS.

    ``fn(img)`` returns a list of (C_l, H_l, W_l) arrays; ``weights[l]`` is a
    length-C_l vector (or scalar). With ``normalize`` the features are scaled
    to unit length along channels at each position first.
    """

    fn: Callable[[np.ndarray], list]
    weights: Optional[Sequence] = None
    normalize: bool = True

    def layer_weights(self, feats) -> list[np.ndarray]:
        if self.weights is None:
            return [np.ones(f.shape[0]) for f in feats]
        return [np.broadcast_to(np.asarray(w, dtype=np.float64), (f.shape[0],)) for w, f in zip(self.weights, feats)]


def identity_perceptual() -> PerceptualExtractor:
    return PerceptualExtractor(lambda img: [np.asarray(img, dtype=np.float64)], None, normalize=False)


def random_conv_perceptual(seed: int = 0, in_channels: int = 3) -> PerceptualExtractor:
    ext = RandomConvExtractor(seed=seed, in_channels=in_channels)
    return PerceptualExtractor(ext.layers, None, normalize=True)


def lpips(img_a: np.ndarray, img_b: np.ndarray, extractor: PerceptualExtractor) -> float:
    """Sum over layers of the mean channel-weighted squared feature difference.

    The mean runs over channels and positions, so the identity extractor with
    unit weights reduces to plain mean squared error.
    """
    img_a, img_b = np.asarray(img_a, dtype=np.float64), np.asarray(img_b, dtype=np.float64)
    if img_a.shape != img_b.shape:
        raise ValueError(f"image shapes differ: {img_a.shape} vs {img_b.shape}")
    fa, fb = extractor.fn(img_a), extractor.fn(img_b)
    total = 0.0
    for a, b, w in zip(fa, fb, extractor.layer_weights(fa)):
        if extractor.normalize:
            a = a / (np.sqrt((a**2).sum(axis=0, keepdims=True)) + 1e-10)
            b = b / (np.sqrt((b**2).sum(axis=0, keepdims=True)) + 1e-10)
        total += float(np.mean(w[:, None, None] * (a - b) ** 2))
    return total


# ----------------------------------------------------------------- ms-ssim


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    y = ndimage.correlate1d(x, g, axis=0, mode="constant")
    y = ndimage.correlate1d(y, g, axis=1, mode="constant")
    return y[r : x.shape[0] - r, r : x.shape[1] - r]


def _ssim_terms(x: np.ndarray, y: np.ndarray, data_range: float, g: np.ndarray):
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    return float((lum * cs).mean()), float(cs.mean())


def ms_ssim(
    img_a: np.ndarray,
    img_b: np.ndarray,
    scales: int = 5,
    weights: Optional[Sequence[float]] = None,
    data_range: float = 1.0,
) -> float:
    """Multi-scale SSIM with an 11-tap Gaussian window (sigma 1.5).

    Contrast-structure terms enter at every scale and luminance only at the
    coarsest; negative per-scale terms are clamped to 0 before the weighted
    product. Channels are scored separately and averaged.
    """
    a, b = np.asarray(img_a, dtype=np.float64), np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if weights is None:
        if scales > len(MS_SSIM_WEIGHTS):
            raise ValueError("give explicit weights for more than 5 scales")
        weights = MS_SSIM_WEIGHTS[:scales]
    w = np.asarray(weights, dtype=np.float64)
    if w.size != scales:
        raise ValueError("need one weight per scale")
    w = w / w.sum()
    need = 2 ** (scales - 1) * 11
    if min(a.shape[1:]) < need:
        raise ScaleError(f"images must be at least {need} px per side for {scales} scales, got {a.shape[1:]}")
    g = _gaussian_window()
    per_channel = []
    for c in range(a.shape[0]):
        x, y = a[c], b[c]
        vals = []
        for s in range(scales):
            ssim_v, cs_v = _ssim_terms(x, y, data_range, g)
            vals.append(ssim_v if s == scales - 1 else cs_v)
            if s < scales - 1:
                h2, w2 = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
                x = x[:h2, :w2].reshape(h2 // 2, 2, w2 // 2, 2).mean(axis=(1, 3))
                y = y[:h2, :w2].reshape(h2 // 2, 2, w2 // 2, 2).mean(axis=(1, 3))
        v = np.clip(np.asarray(vals), 0.0, None)
        per_channel.append(float(np.prod(v**w)))
    return float(np.mean(per_channel))


def _pairs(n_a: int, n_b: int, max_pairs: int, seed: int):
    rng = np.random.default_rng(seed)
    if n_a * n_b <= max_pairs:
        return [(i, j) for i in range(n_a) for j in range(n_b)]
    return list(zip(rng.integers(0, n_a, max_pairs).tolist(), rng.integers(0, n_b, max_pairs).tolist()))


def set_lpips(a: Sequence[np.ndarray], b: Sequence[np.ndarray], extractor: PerceptualExtractor, max_pairs=256, seed=0) -> float:
    """Mean LPIPS over random cross-set pairs."""
    return float(np.mean([lpips(a[i], b[j], extractor) for i, j in _pairs(len(a), len(b), max_pairs, seed)]))


def set_ms_ssim(a: Sequence[np.ndarray], b: Sequence[np.ndarray], scales=5, max_pairs=256, seed=0) -> float:
    """Mean MS-SSIM over random cross-set pairs."""
    return float(np.mean([ms_ssim(a[i], b[j], scales) for i, j in _pairs(len(a), len(b), max_pairs, seed)]))
