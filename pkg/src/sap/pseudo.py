"""Pseudo-anomaly synthesis: crop a polygonal prism, rotate it, paste it back.

The prism is a simple polygon footprint times a contiguous band interval.
Datasets of (original, pseudo-anomaly) pairs drive the pretext classifier;
generation is fully seeded so datasets are reproducible byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import HsiCube, save_hsi

TILE = 64
MAX_SAMPLE_ATTEMPTS = 1000


@dataclass
class GenConfig:
    """Bounds for prism sampling. The area cap keeps pseudo-anomalies sparse."""

    vertex_range: tuple[int, int] = (3, 8)
    area_fraction_range: tuple[float, float] = (0.005, 0.05)
    band_count_range: tuple[int, int] = (1, 48)
    seed: int = 0

    def __post_init__(self):
        v_lo, v_hi = self.vertex_range
        f_lo, f_hi = self.area_fraction_range
        b_lo, b_hi = self.band_count_range
        if not (3 <= v_lo <= v_hi):
            raise ValueError(f"vertex_range must satisfy 3 <= lo <= hi, got {self.vertex_range}")
        if not (0.0 < f_lo <= f_hi <= 0.05):
            raise ValueError(f"area_fraction_range must lie in (0, 0.05], got {self.area_fraction_range}")
        if not (1 <= b_lo <= b_hi):
            raise ValueError(f"band_count_range must satisfy 1 <= lo <= hi, got {self.band_count_range}")


@dataclass
class PolygonPrism:
    """One pseudo-anomaly: polygon base, band interval, rotation and anchors.

    ``vertices`` are (row, col) points in the source frame; the prism is
    rotated about ``src_anchor`` and translated so the anchor lands on
    ``dst_anchor`` before pasting.
    """

    vertices: np.ndarray
    band_start: int
    band_count: int
    rotation_deg: float
    src_anchor: tuple[float, float]
    dst_anchor: tuple[float, float]

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2 or self.vertices.shape[0] < 3:
            raise ValueError("vertices must be an (n>=3, 2) array")
        if self.band_count < 1 or self.band_start < 0:
            raise ValueError("band interval must be non-empty and start at a valid band")
        if not 0.0 <= self.rotation_deg < 360.0:
            raise ValueError(f"rotation_deg must lie in [0, 360), got {self.rotation_deg}")

    def pasted_vertices(self) -> np.ndarray:
        """Polygon vertices after rotation about src_anchor and anchor translation."""
        theta = np.deg2rad(self.rotation_deg)
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        src = np.asarray(self.src_anchor, dtype=np.float64)
        dst = np.asarray(self.dst_anchor, dtype=np.float64)
        return (self.vertices - src) @ rot.T + dst


@dataclass
class LabeledPair:
    x: HsiCube
    y: HsiCube
    spec: PolygonPrism
    label_x: int = 0
    label_y: int = 1

    def __post_init__(self):
        if (self.label_x, self.label_y) != (0, 1):
            raise ValueError("labels are fixed: 0 for the original, 1 for the pseudo-anomaly")
        if self.x.data.shape != self.y.data.shape:
            raise ValueError("pair members must share dimensions")


def rasterize_polygon(vertices: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Even-odd rasterization of a simple polygon onto an (M, N) boolean mask.

    Pixel (i, j) is inside iff its center (i+0.5, j+0.5) passes the even-odd
    crossing test. The half-open edge rule means two polygons sharing an edge
    never both claim a pixel center. Degenerate polygons give an empty mask.
    """
    m, n = grid
    verts = np.asarray(vertices, dtype=np.float64)
    mask = np.zeros((m, n), dtype=bool)
    if verts.shape[0] < 3:
        return mask

    r_lo = max(int(np.floor(verts[:, 0].min())), 0)
    r_hi = min(int(np.ceil(verts[:, 0].max())), m)
    c_lo = max(int(np.floor(verts[:, 1].min())), 0)
    c_hi = min(int(np.ceil(verts[:, 1].max())), n)
    if r_lo >= r_hi or c_lo >= c_hi:
        return mask

    cy = np.arange(r_lo, r_hi, dtype=np.float64) + 0.5
    cx = np.arange(c_lo, c_hi, dtype=np.float64) + 0.5
    inside = np.zeros((cy.size, cx.size), dtype=bool)
    y1, x1 = verts[:, 0], verts[:, 1]
    y2, x2 = np.roll(y1, -1), np.roll(x1, -1)
    for k in range(verts.shape[0]):
        if y1[k] == y2[k]:
            continue  # horizontal edge never crosses a scanline half-open in y
        spans = (y1[k] > cy) != (y2[k] > cy)
        if not spans.any():
            continue
        x_cross = x1[k] + (cy - y1[k]) * (x2[k] - x1[k]) / (y2[k] - y1[k])
        inside ^= spans[:, None] & (cx[None, :] < x_cross[:, None])
    mask[r_lo:r_hi, c_lo:c_hi] = inside
    return mask


def sample_prism_spec(seed: int, dims: tuple[int, int, int], cfg: GenConfig) -> PolygonPrism:
    """Draw a random prism whose footprint satisfies the configured bounds.

    Vertices are angularly sorted points on a random-radius star domain, so
    the polygon is always simple. Draws are rejected until the rasterized
    footprint area lands in ``area_fraction_range`` and the rotated footprint
    fits inside the image; after 1000 failed attempts the config is deemed
    infeasible for these dims.
    """
    b, m, n = dims
    b_lo, b_hi = cfg.band_count_range
    if b_hi > b:
        raise ValueError(f"band_count_range {cfg.band_count_range} exceeds {b} bands")
    f_lo, f_hi = cfg.area_fraction_range
    rng = np.random.default_rng(seed)

    for _ in range(MAX_SAMPLE_ATTEMPTS):
        v = int(rng.integers(cfg.vertex_range[0], cfg.vertex_range[1] + 1))
        band_count = int(rng.integers(b_lo, b_hi + 1))
        band_start = int(rng.integers(0, b - band_count + 1))

        # star polygon around a random center, radius set by the target area
        target = rng.uniform(f_lo, f_hi) * m * n
        r0 = np.sqrt(target / np.pi)
        angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, size=v))
        radii = r0 * rng.uniform(0.6, 1.3, size=v)
        r_max = radii.max()
        if 2.0 * r_max >= min(m, n):
            continue
        center = np.array(
            [rng.uniform(r_max, m - r_max), rng.uniform(r_max, n - r_max)]
        )
        verts = center + np.column_stack([radii * np.cos(angles), radii * np.sin(angles)])

        footprint = rasterize_polygon(verts, (m, n))
        frac = footprint.sum() / (m * n)
        if not f_lo <= frac <= f_hi:
            continue

        rotation = float(rng.uniform(0.0, 360.0))
        dst = np.array([rng.uniform(r_max, m - r_max), rng.uniform(r_max, n - r_max)])
        spec = PolygonPrism(verts, band_start, band_count, rotation, tuple(center), tuple(dst))
        pasted = spec.pasted_vertices()
        if (
            pasted[:, 0].min() < 0.0
            or pasted[:, 0].max() > m
            or pasted[:, 1].min() < 0.0
            or pasted[:, 1].max() > n
        ):
            continue
        return spec
    raise ValueError(f"could not satisfy prism bounds for dims {dims} within {MAX_SAMPLE_ATTEMPTS} attempts")


def generate_pseudo_anomaly(x: HsiCube, spec: PolygonPrism) -> HsiCube:
    """Paste the rotated prism crop into a copy of ``x``.

    Outside the pasted footprint and band interval, the output equals the
    input exactly. Inside, each pixel takes the nearest source pixel under
    the inverse rotation (no interpolation, so all spectra are real).
    """
    b, m, n = x.data.shape
    if spec.band_start + spec.band_count > b:
        raise ValueError("band interval exceeds cube bands")
    pasted = spec.pasted_vertices()
    if (
        pasted[:, 0].min() < 0.0
        or pasted[:, 0].max() > m
        or pasted[:, 1].min() < 0.0
        or pasted[:, 1].max() > n
    ):
        raise ValueError("rotated footprint exceeds image bounds")

    mask = rasterize_polygon(pasted, (m, n))
    y = HsiCube(x.data.copy(), x.wavelengths_nm)
    if not mask.any():
        return y

    rows, cols = np.nonzero(mask)
    centers = np.column_stack([rows + 0.5, cols + 0.5])
    theta = np.deg2rad(spec.rotation_deg)
    inv_rot = np.array([[np.cos(theta), np.sin(theta)], [-np.sin(theta), np.cos(theta)]])
    src_pts = (centers - np.asarray(spec.dst_anchor)) @ inv_rot.T + np.asarray(spec.src_anchor)
    src_r = np.clip(np.floor(src_pts[:, 0]).astype(np.intp), 0, m - 1)
    src_c = np.clip(np.floor(src_pts[:, 1]).astype(np.intp), 0, n - 1)

    band_sel = slice(spec.band_start, spec.band_start + spec.band_count)
    y.data[band_sel, rows, cols] = x.data[band_sel, src_r, src_c]
    return y


def _make_pair(tid: str, x: HsiCube, seed: int, cfg: GenConfig) -> LabeledPair:
    # resample until the paste actually changes the tile
    for attempt in range(MAX_SAMPLE_ATTEMPTS):
        spec = sample_prism_spec(seed + attempt, x.data.shape, cfg)
        candidate = generate_pseudo_anomaly(x, spec)
        if not np.array_equal(candidate.data, x.data):
            return LabeledPair(x, candidate, spec)
    raise ValueError(f"tile {tid}: paste never altered the tile (constant content?)")


def emit_dataset(
    sources: list[HsiCube], cfg: GenConfig, out_dir, tile: int = TILE, workers: int = 1
) -> dict:
    """Cut sources into non-overlapping tiles and emit labeled pairs.

    Every tile yields its original (label 0) and one pseudo-anomaly copy
    (label 1); pairs are split train:val = 4:1 by a seeded shuffle, with
    both members of a pair always in the same split. Generation runs on up
    to ``workers`` threads (per-tile seeds keep the output independent of
    scheduling); each file has a single writer. Returns the manifest,
    which is also written as ``manifest.json``.
    """
    out = Path(out_dir)
    pairs_dir = out / "pairs"
    pairs_dir.mkdir(parents=True, exist_ok=True)

    tiles: list[tuple[str, HsiCube]] = []
    for si, src in enumerate(sources):
        if src.height < tile or src.width < tile:
            raise ValueError(f"source {si} is {src.height}x{src.width}, smaller than the {tile} tile")
        ti = 0
        for r0 in range(0, src.height - tile + 1, tile):
            for c0 in range(0, src.width - tile + 1, tile):
                tiles.append(
                    (f"s{si:03d}_t{ti:03d}", HsiCube(src.data[:, r0 : r0 + tile, c0 : c0 + tile].copy()))
                )
                ti += 1

    seed_seq = np.random.SeedSequence(cfg.seed)
    tile_seeds = seed_seq.generate_state(2 * len(tiles) + 1, dtype=np.uint32)

    jobs = [(tid, x, int(tile_seeds[2 * idx])) for idx, (tid, x) in enumerate(tiles)]
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            pairs = list(pool.map(lambda job: _make_pair(job[0], job[1], job[2], cfg), jobs))
    else:
        pairs = [_make_pair(tid, x, seed, cfg) for tid, x, seed in jobs]

    entries = []
    for (tid, _x, _seed), pair in zip(jobs, pairs):
        save_hsi(pair.x, pairs_dir / f"{tid}_x")
        save_hsi(pair.y, pairs_dir / f"{tid}_y")
        entries.append(tid)

    order = np.random.default_rng(int(tile_seeds[-1])).permutation(len(entries))
    n_val = len(entries) // 5
    val_ids = {entries[i] for i in order[:n_val]}

    files = []
    for tid in entries:
        split = "val" if tid in val_ids else "train"
        files.append({"file": f"pairs/{tid}_x", "label": 0, "split": split})
        files.append({"file": f"pairs/{tid}_y", "label": 1, "split": split})

    manifest = {
        "seed": cfg.seed,
        "tile": tile,
        "vertex_range": list(cfg.vertex_range),
        "area_fraction_range": list(cfg.area_fraction_range),
        "band_count_range": list(cfg.band_count_range),
        "entries": files,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )
    return manifest
