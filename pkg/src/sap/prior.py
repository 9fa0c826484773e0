"""Anomaly scoring of the residual image: the solver's anomaly sub-step.

The residual cube is cut into overlapped spatial cubes, each cube is
embedded by a feature extractor, cube features are scored by Mahalanobis
distance against their own statistics, scores are spread back to pixels by
normalized Gaussian weighting, and an adaptive threshold turns the score
map into a binary gate applied to the residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.linalg import cho_factor, cho_solve

from .weights import NORM_EPS, CnnWeights


@dataclass
class PriorConfig:
    cube_size: int = 16
    stride: int = 8
    feature_dim: int = 64
    kernel_sigma: float | None = None  # defaults to cube_size / 2
    threshold_method: str = "otsu"
    k: float = 2.0
    cov_ridge_rel: float = 1e-6

    def __post_init__(self):
        if not 1 <= self.stride <= self.cube_size:
            raise ValueError("stride must satisfy 1 <= stride <= cube_size")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be at least 2")
        if self.threshold_method not in ("otsu", "mean_plus_k_sigma"):
            raise ValueError(f"unknown threshold method {self.threshold_method!r}")

    @property
    def sigma(self) -> float:
        return self.cube_size / 2.0 if self.kernel_sigma is None else self.kernel_sigma


@dataclass
class FeatureMatrix:
    rows: np.ndarray  # K x F
    positions: np.ndarray  # K x 2 top-left corners

    @property
    def count(self) -> int:
        return self.rows.shape[0]


@dataclass
class FeatureStats:
    mu: np.ndarray
    gamma: np.ndarray
    gamma_inv: np.ndarray


@dataclass
class DetectionMap:
    scores: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2:
            raise ValueError("detection map must be 2-D")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("detection map contains non-finite values")
        if self.normalized and (self.scores.min() < 0.0 or self.scores.max() > 1.0):
            raise ValueError("normalized map must lie in [0, 1]")


@dataclass
class GuidedMap:
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask)
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("guided map must be binary")
        self.mask = self.mask.astype(np.float64)


@dataclass
class TargetTaskResult:
    anomaly: np.ndarray  # gated residual, same shape as the input cube
    detection_map: DetectionMap
    guided_map: GuidedMap
    scores: np.ndarray


def split_cubes(shape: tuple[int, int], cfg: PriorConfig) -> np.ndarray:
    """Top-left corners of the overlapped cube grid, edges clamped inward.

    Corners step by ``stride``; the final row/column is clamped to M-w / N-w
    so every pixel is covered by at least one cube.
    """
    m, n = shape
    w = cfg.cube_size
    if w > min(m, n):
        raise ValueError(f"cube size {w} exceeds image dims {shape}")
    rows = list(range(0, m - w + 1, cfg.stride))
    if rows[-1] != m - w:
        rows.append(m - w)
    cols = list(range(0, n - w + 1, cfg.stride))
    if cols[-1] != n - w:
        cols.append(n - w)
    return np.array([(r, c) for r in rows for c in cols], dtype=np.intp)


class RandomConvExtractor:
    """Training-free fallback: one seeded random 3x3 conv bank, rectified,
    then globally average-pooled. Deterministic given its seed."""

    def __init__(self, input_bands: int, feature_dim: int = 64, seed: int = 0):
        self.input_bands = input_bands
        self.feature_dim = feature_dim
        self.seed = seed
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(9.0 * input_bands)
        self.bank = rng.normal(0.0, scale, size=(feature_dim, input_bands, 3, 3))

    def __call__(self, cube: np.ndarray) -> np.ndarray:
        out = _conv3x3_same(np.asarray(cube, dtype=np.float64), self.bank)
        np.maximum(out, 0.0, out=out)
        return out.mean(axis=(1, 2))


class CnnExtractor:
    """Forward pass of the interchange-defined backbone.

    Each block is conv3x3 (stride 1, same padding, no bias), per-channel
    normalization over the spatial extent (biased variance, eps 1e-5),
    rectification and 2x2 max-pool; a global average pool yields the
    feature vector.
    """

    def __init__(self, weights: CnnWeights):
        self.weights = weights
        self.input_bands = weights.input_bands
        self.feature_dim = weights.feature_dim

    def __call__(self, cube: np.ndarray) -> np.ndarray:
        x = np.asarray(cube, dtype=np.float64)
        if x.shape[0] != self.input_bands:
            raise ValueError(f"extractor expects {self.input_bands} bands, cube has {x.shape[0]}")
        for i, _blk in enumerate(self.weights.blocks):
            w = self.weights.params[f"blocks.{i}.conv.weight"]
            x = _conv3x3_same(x, w)
            x = _channel_norm(x)
            np.maximum(x, 0.0, out=x)
            x = _max_pool2(x)
        return x.mean(axis=(1, 2))


def _conv3x3_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """(C,H,W) x (O,C,3,3) -> (O,H,W), zero padding, stride 1."""
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    patches = sliding_window_view(padded, (3, 3), axis=(1, 2))  # C,H,W,3,3
    return np.einsum("chwij,ocij->ohw", patches, w, optimize=True)


def _channel_norm(x: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=(1, 2), keepdims=True)
    var = x.var(axis=(1, 2), keepdims=True)
    return (x - mean) / np.sqrt(var + NORM_EPS)


def _max_pool2(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        return x
    return x[:, : h2 * 2, : w2 * 2].reshape(c, h2, 2, w2, 2).max(axis=(2, 4))


def extract_features(
    z: np.ndarray, positions: np.ndarray, extractor, cube_size: int
) -> FeatureMatrix:
    """Embed each cube of the residual image with the given backend."""
    if z.shape[0] != extractor.input_bands:
        raise ValueError(f"extractor expects {extractor.input_bands} bands, image has {z.shape[0]}")
    rows = np.empty((positions.shape[0], extractor.feature_dim))
    for i, (r, c) in enumerate(positions):
        rows[i] = extractor(z[:, r : r + cube_size, c : c + cube_size])
    return FeatureMatrix(rows, np.asarray(positions, dtype=np.intp))


def feature_stats(features: np.ndarray, eps_rel: float = 1e-6) -> FeatureStats:
    mu = features.mean(axis=0)
    centered = features - mu
    k = features.shape[0]
    gamma = centered.T @ centered / max(k - 1, 1)
    eps = eps_rel * np.trace(gamma) / gamma.shape[0]
    if eps == 0.0:
        eps = np.finfo(np.float64).tiny
    reg = gamma + eps * np.eye(gamma.shape[0])
    gamma_inv = cho_solve(cho_factor(reg, lower=True), np.eye(gamma.shape[0]))
    return FeatureStats(mu, gamma, gamma_inv)


def mahalanobis_scores(features, eps_rel: float = 1e-6) -> np.ndarray:
    """Per-cube anomaly score (x - mu)^T Gamma^-1 (x - mu).

    mu and Gamma are the sample mean and covariance of the feature rows;
    Gamma is ridged by eps_rel * trace(Gamma)/F so rank-deficient feature
    sets (K < F) stay solvable.
    """
    rows = features.rows if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=np.float64)
    if rows.shape[0] < 2:
        raise ValueError("need at least 2 feature rows for Mahalanobis scoring")
    stats = feature_stats(rows, eps_rel)
    centered = rows - stats.mu
    scores = np.einsum("kf,fg,kg->k", centered, stats.gamma_inv, centered)
    np.maximum(scores, 0.0, out=scores)
    return scores


def propagate_scores(
    scores: np.ndarray, positions: np.ndarray, shape: tuple[int, int], cfg: PriorConfig
) -> DetectionMap:
    """Spread cube scores to pixels by normalized Gaussian weighting.

    A pixel's raw value is the convex combination of the scores of every
    cube covering it, weighted by an isotropic Gaussian centered on each
    cube; the map is then min-max normalized (constant raw maps become all
    zeros).
    """
    raw = propagate_raw(scores, positions, shape, cfg)
    lo, hi = raw.min(), raw.max()
    out = np.zeros_like(raw) if hi == lo else (raw - lo) / (hi - lo)
    return DetectionMap(out, normalized=True)


def propagate_raw(scores, positions, shape, cfg: PriorConfig) -> np.ndarray:
    """Un-normalized propagation; every pixel is a convex combination of the
    scores of the cubes covering it."""
    m, n = shape
    w = cfg.cube_size
    num = np.zeros((m, n))
    den = np.zeros((m, n))
    yy, xx = np.meshgrid(np.arange(w) + 0.5, np.arange(w) + 0.5, indexing="ij")
    half = w / 2.0
    g_local = np.exp(-((yy - half) ** 2 + (xx - half) ** 2) / (2.0 * cfg.sigma**2))
    for s, (r, c) in zip(np.asarray(scores, dtype=np.float64), positions):
        num[r : r + w, c : c + w] += s * g_local
        den[r : r + w, c : c + w] += g_local
    if np.any(den == 0.0):
        raise ValueError("cube grid leaves uncovered pixels")
    return num / den


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Threshold maximizing between-class variance over a binned histogram.

    Bins span the data range, so the chosen partition is invariant under
    positive affine rescaling of the values.
    """
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return hi  # constant input: caller treats nothing as above threshold
    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    p = hist.astype(np.float64) / hist.sum()
    centers = (edges[:-1] + edges[1:]) / 2.0
    w0 = np.cumsum(p)
    w1 = 1.0 - w0
    mu_cum = np.cumsum(p * centers)
    mu_total = mu_cum[-1]
    valid = (w0 > 0) & (w1 > 0)
    between = np.zeros(bins)
    between[valid] = (mu_total * w0[valid] - mu_cum[valid]) ** 2 / (w0[valid] * w1[valid])
    cut = int(np.argmax(between))
    return float(edges[cut + 1])


def adaptive_threshold(dmap: DetectionMap, cfg: PriorConfig) -> GuidedMap:
    """Binarize the detection map; constant maps give an all-zero mask."""
    values = dmap.scores
    if values.max() == values.min():
        return GuidedMap(np.zeros_like(values))
    if cfg.threshold_method == "otsu":
        thr = otsu_threshold(values)
    else:
        thr = float(values.mean() + cfg.k * values.std())
    return GuidedMap((values > thr).astype(np.float64))


def apply_guided_map(guided: GuidedMap, z: np.ndarray) -> np.ndarray:
    """Gate every band of the residual by the binary map."""
    if guided.mask.shape != z.shape[1:]:
        raise ValueError(f"mask shape {guided.mask.shape} does not match image {z.shape[1:]}")
    return z * guided.mask[None, :, :]


def run_target_task(z: np.ndarray, extractor, cfg: PriorConfig) -> TargetTaskResult:
    """Full anomaly sub-step over a (bands, M, N) residual image."""
    z = np.asarray(z, dtype=np.float64)
    positions = split_cubes(z.shape[1:], cfg)
    feats = extract_features(z, positions, extractor, cfg.cube_size)
    scores = mahalanobis_scores(feats, cfg.cov_ridge_rel)
    dmap = propagate_scores(scores, positions, z.shape[1:], cfg)
    guided = adaptive_threshold(dmap, cfg)
    return TargetTaskResult(apply_guided_map(guided, z), dmap, guided, scores)
