"""Hyperspectral cube data model, container I/O and shared spectral primitives."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

KMEANS_MAX_ITER = 300


@dataclass
class HsiCube:
    """A band-major hyperspectral cube of shape (bands, height, width).

    Values are dimensionless reflectance-like floats and must be finite.
    ``wavelengths_nm``, when given, carries one strictly increasing center
    wavelength per band.
    """

    data: np.ndarray
    wavelengths_nm: tuple[float, ...] | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError(f"cube data must be 3-D (bands, height, width), got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValueError(f"cube dimensions must be positive, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("cube contains non-finite values")
        if self.wavelengths_nm is not None:
            wl = tuple(float(w) for w in self.wavelengths_nm)
            if len(wl) != self.data.shape[0]:
                raise ValueError(f"expected {self.data.shape[0]} wavelengths, got {len(wl)}")
            if any(b <= a for a, b in zip(wl, wl[1:])):
                raise ValueError("wavelengths_nm must be strictly increasing")
            self.wavelengths_nm = wl

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass
class UnfoldedMatrix:
    """2-D pixel-major view of a cube: column p holds pixel (p // W, p % W)."""

    values: np.ndarray
    origin_height: int
    origin_width: int

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ValueError(f"unfolded matrix must be 2-D, got shape {self.values.shape}")
        if self.values.shape[1] != self.origin_height * self.origin_width:
            raise ValueError(
                f"cols {self.values.shape[1]} != origin {self.origin_height}x{self.origin_width}"
            )
        if self.values.shape[0] < 1:
            raise ValueError("unfolded matrix needs at least one row")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("unfolded matrix contains non-finite values")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


def unfold(cube: HsiCube) -> UnfoldedMatrix:
    """Flatten the spatial grid; column index p maps to pixel (p // W, p % W)."""
    b, m, n = cube.data.shape
    return UnfoldedMatrix(cube.data.reshape(b, m * n).copy(), m, n)


def fold(mat: UnfoldedMatrix) -> HsiCube:
    """Inverse of :func:`unfold`; bit-exact roundtrip."""
    m, n = mat.origin_height, mat.origin_width
    return HsiCube(np.asarray(mat.values).reshape(mat.rows, m, n).copy())


def normalize(cube: HsiCube, mode: str = "global_minmax") -> HsiCube:
    """Rescale values into [0, 1]; a constant range maps to all zeros."""
    data = cube.data
    if mode == "global_minmax":
        lo, hi = data.min(), data.max()
        out = np.zeros_like(data) if hi == lo else (data - lo) / (hi - lo)
    elif mode == "per_band_minmax":
        lo = data.min(axis=(1, 2), keepdims=True)
        hi = data.max(axis=(1, 2), keepdims=True)
        span = hi - lo
        flat = span == 0
        span = np.where(flat, 1.0, span)
        out = (data - lo) / span
        out = np.where(flat, 0.0, out)
    else:
        raise ValueError(f"unknown normalize mode {mode!r}")
    return HsiCube(out, cube.wavelengths_nm)


def sad(u: np.ndarray, v: np.ndarray) -> float:
    """Spectral angle between two spectra, in radians.

    Scale-invariant in each argument; the cosine is clamped to [-1, 1]
    before arccos to absorb floating-point drift.
    """
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"spectra lengths differ: {u.size} vs {v.size}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("spectral angle undefined for zero-norm input")
    c = float(np.dot(u, v) / (nu * nv))
    return float(np.arccos(min(1.0, max(-1.0, c))))


def pairwise_sad(columns: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Spectral angles between every column of ``columns`` and vector ``ref``."""
    columns = np.asarray(columns, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64).ravel()
    norms = np.linalg.norm(columns, axis=0)
    nref = np.linalg.norm(ref)
    if nref == 0.0 or np.any(norms == 0.0):
        raise ValueError("spectral angle undefined for zero-norm input")
    cos = np.clip((ref @ columns) / (norms * nref), -1.0, 1.0)
    return np.arccos(cos)


def kmeans(
    samples: np.ndarray, k: int, seed: int, max_iter: int = KMEANS_MAX_ITER
) -> tuple[np.ndarray, np.ndarray]:
    """Seeded k-means++ with Lloyd iterations.

    Runs until the assignment vector stops changing or ``max_iter``
    iterations (300 by default), whichever comes first. A cluster that
    empties is re-seeded with the sample currently farthest from its own
    center, which keeps every center equal to the mean of its assigned
    samples at return.

    Returns (assignments, centers) with shapes (n,) and (k, d).
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise ValueError("kmeans needs a non-empty (n, d) sample matrix")
    n = samples.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} out of range for {n} samples")

    rng = np.random.default_rng(seed)
    centers = _kmeanspp_init(samples, k, rng)
    assignments = np.full(n, -1, dtype=np.intp)
    for _ in range(max_iter):
        d2 = _sq_dists(samples, centers)
        new_assign = np.argmin(d2, axis=1)
        if np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
        for c in range(k):
            mask = assignments == c
            if mask.any():
                centers[c] = samples[mask].mean(axis=0)
            else:
                # relocate the empty cluster onto the worst-fit sample
                worst = np.argmax(d2[np.arange(n), assignments])
                centers[c] = samples[worst]
                assignments[worst] = c
                d2[worst, :] = -1.0  # a sample can seed at most one empty cluster
    return assignments, centers


def kmeans_inertia(samples: np.ndarray, assignments: np.ndarray, centers: np.ndarray) -> float:
    diffs = np.asarray(samples) - np.asarray(centers)[np.asarray(assignments)]
    return float(np.sum(diffs * diffs))


def _sq_dists(samples: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = (
        np.sum(samples * samples, axis=1)[:, None]
        - 2.0 * samples @ centers.T
        + np.sum(centers * centers, axis=1)[None, :]
    )
    np.maximum(d2, 0.0, out=d2)
    return d2


def _kmeanspp_init(samples: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = samples.shape[0]
    centers = np.empty((k, samples.shape[1]), dtype=np.float64)
    centers[0] = samples[rng.integers(n)]
    closest = _sq_dists(samples, centers[:1]).ravel()
    for c in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            centers[c] = samples[rng.integers(n)]
        else:
            centers[c] = samples[rng.choice(n, p=closest / total)]
        closest = np.minimum(closest, _sq_dists(samples, centers[c : c + 1]).ravel())
    return centers


# ---------------------------------------------------------------------------
# container I/O: <name>.hdr.json (UTF-8 JSON header) + <name>.raw (LE float32)


def _container_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    name = p.name
    if name.endswith(".hdr.json"):
        base = p.with_name(name[: -len(".hdr.json")])
    elif name.endswith(".raw"):
        base = p.with_name(name[: -len(".raw")])
    else:
        base = p
    return base.with_name(base.name + ".hdr.json"), base.with_name(base.name + ".raw")


def load_hsi(path) -> HsiCube:
    """Load a cube from the paired header/payload container.

    ``path`` may name the base, the ``.hdr.json`` or the ``.raw`` file.
    """
    hdr_path, raw_path = _container_paths(path)
    if not hdr_path.exists():
        raise FileNotFoundError(f"missing header file {hdr_path}")
    if not raw_path.exists():
        raise FileNotFoundError(f"missing payload file {raw_path}")
    header = json.loads(hdr_path.read_text(encoding="utf-8"))
    for key in ("bands", "height", "width"):
        if key not in header:
            raise ValueError(f"header {hdr_path} lacks field {key!r}")
    if header.get("dtype", "f32") != "f32":
        raise ValueError(f"unsupported dtype {header.get('dtype')!r}")
    if header.get("order", "band_major") != "band_major":
        raise ValueError(f"unsupported layout {header.get('order')!r}")
    b, m, n = int(header["bands"]), int(header["height"]), int(header["width"])
    payload = np.fromfile(raw_path, dtype="<f4")
    if payload.size != b * m * n:
        raise ValueError(
            f"payload length mismatch in {raw_path}: header says {b * m * n} values, file holds {payload.size}"
        )
    wl = header.get("wavelengths_nm")
    return HsiCube(payload.astype(np.float64).reshape(b, m, n), tuple(wl) if wl else None)


def save_hsi(cube: HsiCube, path) -> None:
    """Write a cube as the paired header/payload container (float32 payload)."""
    hdr_path, raw_path = _container_paths(path)
    header = {
        "bands": cube.bands,
        "height": cube.height,
        "width": cube.width,
        "dtype": "f32",
        "order": "band_major",
    }
    if cube.wavelengths_nm is not None:
        header["wavelengths_nm"] = list(cube.wavelengths_nm)
    hdr_path.parent.mkdir(parents=True, exist_ok=True)
    hdr_path.write_text(json.dumps(header, sort_keys=True) + "\n", encoding="utf-8")
    cube.data.astype("<f4").tofile(raw_path)
