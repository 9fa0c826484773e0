"""Threshold-swept detection evaluation: ROC triples and the five AUC scores."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .prior import DetectionMap


@dataclass
class RocTriple:
    """Detection and false-alarm rates over a descending threshold sweep.

    Both rates use the strict rule score > tau, except that the terminal
    tau = 0 entry closes the curve at (1, 1); thresholds always include 0
    and 1 besides every distinct score value.
    """

    taus: np.ndarray
    pd: np.ndarray
    pf: np.ndarray

    def __post_init__(self):
        self.taus = np.asarray(self.taus, dtype=np.float64)
        self.pd = np.asarray(self.pd, dtype=np.float64)
        self.pf = np.asarray(self.pf, dtype=np.float64)
        if not (self.taus.shape == self.pd.shape == self.pf.shape):
            raise ValueError("taus, pd, pf must have equal length")
        if np.any(np.diff(self.taus) > 0):
            raise ValueError("thresholds must be descending")
        for name, arr in (("pd", self.pd), ("pf", self.pf)):
            if np.any(np.diff(arr) < 0):
                raise ValueError(f"{name} must be non-decreasing as tau decreases")
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass
class AucReport:
    """The three base areas; the two composites are derived, never stored."""

    auc_pd_pf: float
    auc_pd_tau: float
    auc_pf_tau: float

    @property
    def auc_oa(self) -> float:
        return self.auc_pd_pf + self.auc_pd_tau - self.auc_pf_tau

    @property
    def auc_snpr(self) -> float:
        if self.auc_pf_tau == 0.0:
            return float("inf")
        return self.auc_pd_tau / self.auc_pf_tau

    def as_dict(self) -> dict:
        return {
            "auc_pd_pf": self.auc_pd_pf,
            "auc_pd_tau": self.auc_pd_tau,
            "auc_pf_tau": self.auc_pf_tau,
            "auc_oa": self.auc_oa,
            "auc_snpr": self.auc_snpr,
        }


def roc_curves(scores, truth: np.ndarray) -> RocTriple:
    """Sweep every distinct score value (plus 0 and 1) as a threshold.

    pd(tau) is the fraction of anomaly pixels scoring strictly above tau,
    pf(tau) the same over background pixels; the final tau = 0 row closes
    the curve at pd = pf = 1.
    """
    values = scores.scores if isinstance(scores, DetectionMap) else np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth)
    if values.shape != truth.shape:
        raise ValueError(f"scores {values.shape} and truth {truth.shape} differ in shape")
    if values.min() < 0.0 or values.max() > 1.0:
        raise ValueError("scores must be normalized to [0, 1]")
    anom = truth.astype(bool)
    n_anom = int(anom.sum())
    n_back = int(truth.size - n_anom)
    if n_anom == 0 or n_back == 0:
        raise ValueError("truth must contain both anomaly and background pixels")

    taus = np.unique(np.concatenate([values.ravel(), [0.0, 1.0]]))[::-1]
    s_anom = np.sort(values[anom].ravel())
    s_back = np.sort(values[~anom].ravel())
    # count of values strictly greater than tau via searchsorted on the right
    pd = 1.0 - np.searchsorted(s_anom, taus, side="right") / n_anom
    pf = 1.0 - np.searchsorted(s_back, taus, side="right") / n_back
    pd[-1] = 1.0  # tau = 0 terminal row: every score counts
    pf[-1] = 1.0
    return RocTriple(taus, pd, pf)


def auc_indicators(r: RocTriple) -> AucReport:
    """Trapezoidal areas under (pd, pf), (pd, tau) and (pf, tau)."""
    pf_asc = r.pf
    pd_asc = r.pd
    auc_pd_pf = float(np.trapezoid(pd_asc, pf_asc))
    taus_asc = r.taus[::-1]
    auc_pd_tau = float(np.trapezoid(r.pd[::-1], taus_asc))
    auc_pf_tau = float(np.trapezoid(r.pf[::-1], taus_asc))
    return AucReport(auc_pd_pf, auc_pd_tau, auc_pf_tau)


def evaluate(scores, truth: np.ndarray) -> AucReport:
    return auc_indicators(roc_curves(scores, truth))


def render_map(dmap, path) -> None:
    """Write the map as a binary 8-bit portable graymap (P5).

    Pixel byte = round(255 * score) with halves rounding up.
    """
    values = dmap.scores if isinstance(dmap, DetectionMap) else np.asarray(dmap, dtype=np.float64)
    if values.min() < 0.0 or values.max() > 1.0:
        raise ValueError("render expects a map normalized to [0, 1]")
    byte_vals = np.floor(values * 255.0 + 0.5).astype(np.uint8)
    h, w = values.shape
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(byte_vals.tobytes())
