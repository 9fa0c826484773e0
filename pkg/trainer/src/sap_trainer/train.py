"""Training loop for the pretext classifier and backbone export."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.utils.data import DataLoader

from .data import PairDataset
from .model import PretextClassifier

WEIGHTS_MAGIC = b"SAPW"
BLOCK_TYPE = "conv3x3_norm_relu_pool"


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 3e-4
    seed: int = 0
    feature_dim: int = 64
    head_width: int = 32
    widths: list[int] | None = None
    target_val_accuracy: float | None = None  # stop early once reached


@dataclass
class TrainReport:
    epochs_run: int
    final_train_loss: float
    val_accuracy: float
    history: list[dict] = field(default_factory=list)


def cross_entropy_pairs(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross entropy between softmax predictions and one-hot signals."""
    return nn.functional.cross_entropy(logits, labels)


def _evaluate(model, loader, device) -> float:
    model.eval()
    correct = total = 0
    with torch.no_grad():
        for images, labels in loader:
            logits = model(images.to(device))
            correct += int((logits.argmax(dim=1).cpu() == labels).sum())
            total += len(labels)
    return correct / max(total, 1)


def train(data_dir, cfg: TrainConfig) -> tuple[PretextClassifier, TrainReport]:
    # seeded, single-threaded, deterministic kernels: same seed, same run
    torch.manual_seed(cfg.seed)
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)
    device = torch.device("cpu")
    train_set = PairDataset(data_dir, "train")
    val_set = PairDataset(data_dir, "val")
    bands = train_set[0][0].shape[0]

    generator = torch.Generator().manual_seed(cfg.seed)
    train_loader = DataLoader(
        train_set, batch_size=cfg.batch_size, shuffle=True, generator=generator
    )
    val_loader = DataLoader(val_set, batch_size=cfg.batch_size)

    model = PretextClassifier(bands, cfg.feature_dim, cfg.head_width, cfg.widths).to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)

    history = []
    last_loss = float("nan")
    val_acc = 0.0
    epochs_run = 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        running, seen = 0.0, 0
        for images, labels in train_loader:
            optimizer.zero_grad()
            logits = model(images.to(device))
            loss = cross_entropy_pairs(logits, labels.to(device))
            loss.backward()
            optimizer.step()
            running += loss.item() * len(labels)
            seen += len(labels)
        last_loss = running / seen
        val_acc = _evaluate(model, val_loader, device)
        epochs_run = epoch
        history.append({"epoch": epoch, "train_loss": last_loss, "val_accuracy": val_acc})
        if cfg.target_val_accuracy is not None and val_acc >= cfg.target_val_accuracy:
            break
    return model, TrainReport(epochs_run, last_loss, val_acc, history)


def export_weights(model: PretextClassifier, path) -> None:
    """Write the backbone (head discarded) in the interchange layout."""
    convs = model.conv_weights()
    blocks = []
    for w in convs:
        out_ch, in_ch, kh, kw = w.shape
        blocks.append({"type": BLOCK_TYPE, "in_ch": in_ch, "out_ch": out_ch, "kernel": kh})
    descriptor = {
        "version": 1,
        "input_bands": model.input_bands,
        "feature_dim": model.feature_dim,
        "blocks": blocks,
        "param_order": [f"blocks.{i}.conv.weight" for i in range(len(blocks))],
    }
    header = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(w.detach().cpu().numpy(), dtype="<f4").tobytes() for w in convs
    )
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)


def load_exported(path) -> tuple[dict, list[np.ndarray]]:
    """Reload an exported file for round-trip checks."""
    blob = Path(path).read_bytes()
    if blob[:4] != WEIGHTS_MAGIC:
        raise ValueError("bad magic")
    (header_len,) = struct.unpack("<I", blob[4:8])
    descriptor = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    raw = np.frombuffer(blob[8 + header_len :], dtype="<f4")
    params = []
    offset = 0
    for blk in descriptor["blocks"]:
        shape = (blk["out_ch"], blk["in_ch"], blk["kernel"], blk["kernel"])
        n = int(np.prod(shape))
        params.append(raw[offset : offset + n].reshape(shape).copy())
        offset += n
    if offset != raw.size:
        raise ValueError("payload length does not match the descriptor")
    return descriptor, params
