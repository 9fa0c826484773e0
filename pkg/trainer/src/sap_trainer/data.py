"""Reads the labeled-pair dataset layout: pairs/*.hdr.json + *.raw + manifest.json."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import Dataset


def read_container(base) -> np.ndarray:
    """Load one band-major float32 image container as a (B, H, W) array."""
    base = Path(base)
    hdr_path = base.with_name(base.name + ".hdr.json")
    raw_path = base.with_name(base.name + ".raw")
    header = json.loads(hdr_path.read_text(encoding="utf-8"))
    b, m, n = int(header["bands"]), int(header["height"]), int(header["width"])
    payload = np.fromfile(raw_path, dtype="<f4")
    if payload.size != b * m * n:
        raise ValueError(f"payload length mismatch in {raw_path}")
    return payload.reshape(b, m, n)


def read_manifest(data_dir) -> dict:
    data_dir = Path(data_dir)
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json under {data_dir}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    labels = {e["label"] for e in manifest["entries"]}
    if labels != {0, 1}:
        raise ValueError(f"dataset must carry both labels, found {sorted(labels)}")
    return manifest


class PairDataset(Dataset):
    """One split of the emitted dataset; items are (image tensor, label)."""

    def __init__(self, data_dir, split: str):
        self.data_dir = Path(data_dir)
        manifest = read_manifest(data_dir)
        self.entries = [e for e in manifest["entries"] if e["split"] == split]
        if not self.entries:
            raise ValueError(f"split {split!r} is empty")

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, idx):
        entry = self.entries[idx]
        image = read_container(self.data_dir / entry["file"])
        return torch.from_numpy(image.astype(np.float32)), int(entry["label"])
