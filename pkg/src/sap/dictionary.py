"""Latent spectral representation and the dual-purified background dictionary.

The dictionary keeps one latent column per surviving pixel after two
purification passes: the smallest spectral cluster is dropped outright,
then low-probability samples are dropped within each remaining cluster.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import HsiCube, UnfoldedMatrix, kmeans, pairwise_sad, sad, unfold


@dataclass
class DictConfig:
    n_clusters: int = 8
    drop_quantile: float = 0.10
    sdc_weight: float = 1e-3
    sdc_clusters: int = 2
    temperature: float = 1.0
    latent_backend: str = "pca"
    latent_dim: int = 48
    seed: int = 0

    def __post_init__(self):
        if self.n_clusters < 2:
            raise ValueError("n_clusters must be at least 2")
        if not 0.0 <= self.drop_quantile < 1.0:
            raise ValueError("drop_quantile must lie in [0, 1)")
        if self.sdc_weight < 0.0:
            raise ValueError("sdc_weight must be non-negative")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")
        if self.latent_backend not in ("pca", "linear_ae"):
            raise ValueError(f"unknown latent backend {self.latent_backend!r}")


@dataclass
class LatentHsi:
    """Reduced-dimension unfolded image plus the map that produced it."""

    matrix: UnfoldedMatrix
    basis: np.ndarray | None = None  # bands x dim projection (pca backend)
    mean: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.matrix.rows


@dataclass
class BackgroundDictionary:
    atoms: np.ndarray
    atom_pixel_ids: np.ndarray

    def __post_init__(self):
        self.atoms = np.asarray(self.atoms, dtype=np.float64)
        self.atom_pixel_ids = np.asarray(self.atom_pixel_ids, dtype=np.intp)
        if self.atoms.ndim != 2 or self.atoms.shape[1] != self.atom_pixel_ids.size:
            raise ValueError("atoms must be (dim, nb) with one pixel id per atom")
        if self.nb < 1:
            raise ValueError("dictionary must keep at least one atom")

    @property
    def nb(self) -> int:
        return self.atoms.shape[1]


def extract_latent(h: HsiCube, cfg: DictConfig) -> LatentHsi:
    """Map the cube into a ``latent_dim``-band representation.

    pca: deterministic projection onto the top principal components of the
    mean-centered unfolded matrix. linear_ae: a bias-free one-hidden-layer
    autoencoder trained 500 full-batch gradient steps (step 1e-2) on
    reconstruction MSE plus ``sdc_weight`` times the spectral-distribution
    penalty; the mild penalty nudges latent spectral angles to track the
    input's.
    """
    if h.bands < cfg.latent_dim:
        raise ValueError(f"cube has {h.bands} bands, latent needs at least {cfg.latent_dim}")
    x = unfold(h)
    if cfg.latent_backend == "pca":
        return _pca_latent(x, cfg.latent_dim)
    return _linear_ae_latent(x, cfg)


def _pca_latent(x: UnfoldedMatrix, dim: int) -> LatentHsi:
    mean = x.values.mean(axis=1)
    centered = x.values - mean[:, None]
    cov = centered @ centered.T / max(x.cols - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    basis = evecs[:, ::-1][:, :dim]
    # fix the eigh sign ambiguity: largest-magnitude loading is positive
    picks = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[picks, np.arange(dim)])
    signs[signs == 0] = 1.0
    basis = basis * signs
    latent = basis.T @ centered
    return LatentHsi(UnfoldedMatrix(latent, x.origin_height, x.origin_width), basis, mean)


def _linear_ae_latent(x: UnfoldedMatrix, cfg: DictConfig) -> LatentHsi:
    steps, lr = 500, 1e-2
    b, n = x.rows, x.cols
    dim = cfg.latent_dim
    rng = np.random.default_rng(cfg.seed)
    w_enc = rng.normal(0.0, 1.0 / np.sqrt(b), size=(dim, b))
    w_dec = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(b, dim))

    assignments, reps = _sdc_pairing(x.values, cfg.sdc_clusters, cfg.seed)
    rep_of = reps[assignments]  # representative pixel id per sample

    h = x.values
    for _ in range(steps):
        z = w_enc @ h
        recon = w_dec @ z
        err = recon - h
        g_dec = 2.0 * err @ z.T / err.size
        g_enc = 2.0 * w_dec.T @ err @ h.T / err.size
        if cfg.sdc_weight > 0.0:
            g_enc += cfg.sdc_weight * _sdc_grad_enc(h, z, rep_of, cfg.sdc_clusters)
        w_enc -= lr * g_enc
        w_dec -= lr * g_dec
    return LatentHsi(UnfoldedMatrix(w_enc @ h, x.origin_height, x.origin_width), None, None)


def _sdc_pairing(h: np.ndarray, n_clusters: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Cluster the columns of h and pick each cluster's min-angle representative."""
    assignments, centers = kmeans(h.T, n_clusters, seed)
    reps = np.empty(n_clusters, dtype=np.intp)
    for c in range(n_clusters):
        members = np.nonzero(assignments == c)[0]
        if members.size == 0:
            reps[c] = 0
            continue
        angles = pairwise_sad(h[:, members], centers[c])
        reps[c] = members[np.argmin(angles)]
    return assignments, reps


def sdc_loss(h: UnfoldedMatrix, phi_h: UnfoldedMatrix, cfg: DictConfig) -> float:
    """Signed gap between input-space and latent-space spectral angles.

    Each column is paired with its own cluster's representative (the member
    closest in angle to the cluster center); the two angle sums, each scaled
    by 1/C over C clusters, are subtracted. Identical or uniformly rescaled
    latents give exactly zero.
    """
    if h.cols != phi_h.cols:
        raise ValueError("input and latent must have the same number of columns")
    assignments, reps = _sdc_pairing(h.values, cfg.sdc_clusters, cfg.seed)
    rep_of = reps[assignments]
    c = float(cfg.sdc_clusters)
    total = 0.0
    for i in range(h.cols):
        total += sad(h.values[:, i], h.values[:, rep_of[i]])
        total -= sad(phi_h.values[:, i], phi_h.values[:, rep_of[i]])
    return total / c


def _sdc_grad_enc(h: np.ndarray, z: np.ndarray, rep_of: np.ndarray, n_clusters: int) -> np.ndarray:
    """Analytic d(sdc_loss)/d(w_enc) for z = w_enc @ h; input-space term is constant."""
    a = z
    b_cols = z[:, rep_of]
    na = np.linalg.norm(a, axis=0)
    nb = np.linalg.norm(b_cols, axis=0)
    ok = (na > 1e-12) & (nb > 1e-12)
    cosv = np.zeros(a.shape[1])
    cosv[ok] = np.sum(a[:, ok] * b_cols[:, ok], axis=0) / (na[ok] * nb[ok])
    cosv = np.clip(cosv, -1.0, 1.0)
    # d(arccos u)/du, flattened to 0 where the angle is pinned at 0 or pi
    du = np.zeros_like(cosv)
    interior = ok & (np.abs(cosv) < 1.0 - 1e-12)
    du[interior] = -1.0 / np.sqrt(1.0 - cosv[interior] ** 2)

    # sdc_loss subtracts the latent sum, so the sign flips once more
    coeff = -du / n_clusters
    ga = np.zeros_like(a)
    gb = np.zeros_like(a)
    ga[:, interior] = coeff[interior] * (
        b_cols[:, interior] / (na[interior] * nb[interior])
        - cosv[interior] * a[:, interior] / na[interior] ** 2
    )
    gb[:, interior] = coeff[interior] * (
        a[:, interior] / (na[interior] * nb[interior])
        - cosv[interior] * b_cols[:, interior] / nb[interior] ** 2
    )
    # pair (i, rep_of[i]) contributes ga_i h_i^T + gb_i h_{rep_of[i]}^T
    return ga @ h.T + gb @ h[:, rep_of].T


def cluster_probabilities(phi_h: LatentHsi, cfg: DictConfig) -> tuple[np.ndarray, np.ndarray]:
    """Cluster latent pixels and score each by a softmax occurrence probability.

    The probability of pixel p is the softmax over clusters of
    -||phi_p - center_k||^2 / temperature, read at p's assigned cluster.
    A pixel scores low when a rival cluster center competes with its own at
    the temperature's distance scale, i.e. exactly the samples drifting away
    from their class toward another.
    """
    z = phi_h.matrix.values
    assignments, centers = kmeans(z.T, cfg.n_clusters, cfg.seed)
    d2 = (
        np.sum(z.T * z.T, axis=1)[:, None]
        - 2.0 * z.T @ centers.T
        + np.sum(centers * centers, axis=1)[None, :]
    )
    np.maximum(d2, 0.0, out=d2)
    logits = -d2 / cfg.temperature
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    probs_all = weights / weights.sum(axis=1, keepdims=True)
    return assignments, probs_all[np.arange(z.shape[1]), assignments]


def dual_purify(
    phi_h: LatentHsi, assignments: np.ndarray, probs: np.ndarray, cfg: DictConfig
) -> BackgroundDictionary:
    """Two-pass dictionary cleaning.

    Pass 1 removes every pixel of the single smallest non-empty cluster
    (ties broken by lowest cluster id). Pass 2 removes, within each
    surviving cluster, pixels whose probability falls strictly below that
    cluster's ``drop_quantile`` quantile. Survivors' latent columns become
    the dictionary atoms, in pixel order.
    """
    assignments = np.asarray(assignments)
    probs = np.asarray(probs, dtype=np.float64)
    ids, counts = np.unique(assignments, return_counts=True)
    if ids.size < 2:
        raise ValueError("dual purification needs at least 2 non-empty clusters")
    smallest = ids[np.argmin(counts)]  # argmin takes the first, i.e. lowest id, on ties

    keep = np.ones(assignments.size, dtype=bool)
    keep[assignments == smallest] = False
    for cid in ids:
        if cid == smallest:
            continue
        members = assignments == cid
        thr = np.quantile(probs[members], cfg.drop_quantile)
        keep[members & (probs < thr)] = False

    survivors = np.nonzero(keep)[0]
    if survivors.size == 0:
        raise ValueError("purification removed every candidate atom")
    return BackgroundDictionary(phi_h.matrix.values[:, survivors].copy(), survivors)


def build_dictionary(h: HsiCube, cfg: DictConfig) -> tuple[LatentHsi, BackgroundDictionary]:
    """Latent extraction, clustering and dual purification in one call."""
    latent = extract_latent(h, cfg)
    assignments, probs = cluster_probabilities(latent, cfg)
    return latent, dual_purify(latent, assignments, probs, cfg)


# dictionary container: <name>.hdr.json {dim, nb, pixel_ids} + <name>.raw (LE f32 atoms)


def save_dictionary(d: BackgroundDictionary, path) -> None:
    from .core import _container_paths

    hdr_path, raw_path = _container_paths(path)
    header = {"dim": int(d.atoms.shape[0]), "nb": int(d.nb), "pixel_ids": d.atom_pixel_ids.tolist()}
    hdr_path.parent.mkdir(parents=True, exist_ok=True)
    hdr_path.write_text(json.dumps(header, sort_keys=True) + "\n", encoding="utf-8")
    d.atoms.astype("<f4").tofile(raw_path)


def load_dictionary(path) -> BackgroundDictionary:
    from .core import _container_paths

    hdr_path, raw_path = _container_paths(path)
    if not hdr_path.exists() or not raw_path.exists():
        raise FileNotFoundError(f"missing dictionary container at {hdr_path}")
    header = json.loads(hdr_path.read_text(encoding="utf-8"))
    dim, nb = int(header["dim"]), int(header["nb"])
    payload = np.fromfile(raw_path, dtype="<f4")
    if payload.size != dim * nb:
        raise ValueError(f"dictionary payload holds {payload.size} values, header says {dim * nb}")
    return BackgroundDictionary(
        payload.astype(np.float64).reshape(dim, nb), np.asarray(header["pixel_ids"], dtype=np.intp)
    )
