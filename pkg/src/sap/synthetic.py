"""Deterministic synthetic scene used by the test suite and the CLI demo.

A low-rank smooth background (three spectral endmembers mixed by smooth
abundance maps) with a few high-contrast polygon implants and the matching
ground-truth mask.
"""

from __future__ import annotations

import numpy as np

from .core import HsiCube
from .pseudo import rasterize_polygon


def make_textured_source(
    seed: int,
    side: int = 256,
    bands: int = 48,
    bumps: int = 14,
    noise: float = 0.002,
) -> HsiCube:
    """A textured source image for pretext-task dataset synthesis.

    Mixes three smooth endmember spectra by medium-scale bump fields, so a
    prism pasted from elsewhere in the same tile lands on visibly different
    content while the background itself stays free of sharp edges.
    """
    rng = np.random.default_rng(seed)
    grid = np.linspace(0.0, 1.0, bands)
    spectra = np.stack(
        [
            0.4 + 0.3 * np.sin(2.0 * np.pi * (grid + rng.uniform(0, 1))),
            0.5 + 0.25 * np.cos(3.0 * np.pi * (grid + rng.uniform(0, 1))),
            0.3 + 0.2 * grid + 0.1 * np.sin(5.0 * np.pi * grid + rng.uniform(0, 2)),
        ]
    )
    yy, xx = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    maps = []
    for _ in range(3):
        field = np.zeros((side, side))
        for _ in range(bumps):
            cy, cx = rng.uniform(0, side, 2)
            sy, sx = rng.uniform(6, 24, 2)
            field += rng.uniform(0.3, 1.0) * np.exp(-(((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))
        maps.append(field + 0.03)
    abund = np.stack(maps)
    abund /= abund.sum(axis=0, keepdims=True)
    data = np.einsum("rb,rhw->bhw", spectra, abund)
    data = data + rng.normal(0.0, noise, size=data.shape)
    return HsiCube(np.clip(data, 0.0, None))


def make_synthetic_scene(
    bands: int = 48,
    height: int = 64,
    width: int = 64,
    n_anomalies: int = 3,
    noise: float = 0.002,
    contrast: float = 0.30,
    seed: int = 7,
) -> tuple[HsiCube, np.ndarray]:
    """Build (cube, truth_mask) with a rank-3 background and polygon implants.

    All implants share one out-of-background spectral signature (a sharp
    oscillatory pattern no smooth endmember can mix), each occupying only a
    handful of pixels; real anomaly targets are similarly rare, and keeping
    the total implant area small also keeps the global-mean leak of the
    anomaly direction into the background statistics negligible.
    """
    rng = np.random.default_rng(seed)

    # three smooth endmember spectra
    grid = np.linspace(0.0, 1.0, bands)
    spectra = np.stack(
        [
            0.4 + 0.3 * np.sin(2.0 * np.pi * (grid + rng.uniform(0, 1))),
            0.5 + 0.25 * np.cos(3.0 * np.pi * (grid + rng.uniform(0, 1))),
            0.3 + 0.2 * grid + 0.1 * np.sin(5.0 * np.pi * grid + rng.uniform(0, 2)),
        ]
    )

    # smooth abundance maps from low-frequency bumps
    yy, xx = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    maps = []
    for _ in range(3):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        sy, sx = rng.uniform(height / 4, height), rng.uniform(width / 4, width)
        maps.append(np.exp(-(((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2)))
    abund = np.stack(maps)
    abund /= abund.sum(axis=0, keepdims=True)

    data = np.einsum("rb,rhw->bhw", spectra, abund)  # bands x H x W
    truth = np.zeros((height, width), dtype=np.uint8)
    signature = 0.55 + contrast * np.sin(16.0 * np.pi * grid)

    for _ in range(n_anomalies):
        mask = None
        for _attempt in range(100):
            v = int(rng.integers(4, 7))
            radius = rng.uniform(2.2, 3.2)
            center = np.array(
                [rng.uniform(radius + 2, height - radius - 2), rng.uniform(radius + 2, width - radius - 2)]
            )
            angles = np.sort(rng.uniform(0, 2 * np.pi, v))
            radii = radius * rng.uniform(0.7, 1.2, v)
            verts = center + np.column_stack([radii * np.cos(angles), radii * np.sin(angles)])
            mask = rasterize_polygon(verts, (height, width))
            if 8 <= mask.sum() <= 20 and not (mask & truth.astype(bool)).any():
                break
        data[:, mask] = signature[:, None]
        truth[mask] = 1

    data = data + rng.normal(0.0, noise, size=data.shape)
    return HsiCube(np.clip(data, 0.0, None)), truth
