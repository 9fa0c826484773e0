"""Interchange container for the compact feature-extractor network.

Layout: 4-byte magic ``SAPW``, little-endian uint32 header length, UTF-8
JSON descriptor, then all parameters as little-endian float32 in the
order declared by ``param_order``. The descriptor is the single source of
truth for the architecture on both the training and the inference side.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"SAPW"
FORMAT_VERSION = 1
BLOCK_TYPE = "conv3x3_norm_relu_pool"
NORM_EPS = 1e-5


@dataclass
class BlockSpec:
    """One backbone block: 3x3 same-pad conv (no bias), per-channel
    normalization, rectification, 2x2 max-pool."""

    in_ch: int
    out_ch: int
    kernel: int = 3
    type: str = BLOCK_TYPE

    def param_shape(self) -> tuple[int, int, int, int]:
        return (self.out_ch, self.in_ch, self.kernel, self.kernel)

    def param_count(self) -> int:
        o, i, kh, kw = self.param_shape()
        return o * i * kh * kw


@dataclass
class CnnWeights:
    input_bands: int
    feature_dim: int
    blocks: list[BlockSpec]
    params: dict[str, np.ndarray]
    version: int = FORMAT_VERSION

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("descriptor declares no blocks")
        chain = self.input_bands
        for i, blk in enumerate(self.blocks):
            if blk.type != BLOCK_TYPE:
                raise ValueError(f"unknown block type {blk.type!r}")
            if blk.in_ch != chain:
                raise ValueError(f"block {i} expects {blk.in_ch} channels, previous stage emits {chain}")
            chain = blk.out_ch
        if chain != self.feature_dim:
            raise ValueError(f"last block emits {chain} channels, feature_dim says {self.feature_dim}")
        for i, blk in enumerate(self.blocks):
            name = _param_name(i)
            if name not in self.params:
                raise ValueError(f"missing parameter tensor {name}")
            got = self.params[name].shape
            if tuple(got) != blk.param_shape():
                raise ValueError(f"{name} has shape {got}, descriptor wants {blk.param_shape()}")

    @property
    def param_order(self) -> list[str]:
        return [_param_name(i) for i in range(len(self.blocks))]


def _param_name(block_idx: int) -> str:
    return f"blocks.{block_idx}.conv.weight"


def default_blocks(input_bands: int, feature_dim: int) -> list[BlockSpec]:
    """The stock 4-block backbone used by the pipeline and the trainer."""
    widths = [32, 32, 48, feature_dim]
    chain = [input_bands] + widths
    return [BlockSpec(chain[i], chain[i + 1]) for i in range(len(widths))]


def save_weights(w: CnnWeights, path) -> None:
    descriptor = {
        "version": w.version,
        "input_bands": w.input_bands,
        "feature_dim": w.feature_dim,
        "blocks": [
            {"type": b.type, "in_ch": b.in_ch, "out_ch": b.out_ch, "kernel": b.kernel}
            for b in w.blocks
        ],
        "param_order": w.param_order,
    }
    header = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(w.params[name], dtype="<f4").tobytes() for name in w.param_order
    )
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)


def load_weights(path) -> CnnWeights:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing weights file {p}")
    blob = p.read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{p} is not a weights container (bad magic)")
    (header_len,) = struct.unpack("<I", blob[4:8])
    descriptor = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    blocks = [
        BlockSpec(int(b["in_ch"]), int(b["out_ch"]), int(b.get("kernel", 3)), b.get("type", BLOCK_TYPE))
        for b in descriptor["blocks"]
    ]
    declared = [_param_name(i) for i in range(len(blocks))]
    if descriptor.get("param_order", declared) != declared:
        raise ValueError("param_order does not match the block list")

    raw = np.frombuffer(blob[8 + header_len :], dtype="<f4")
    expected = sum(b.param_count() for b in blocks)
    if raw.size != expected:
        raise ValueError(f"payload holds {raw.size} parameters, descriptor declares {expected}")
    params = {}
    offset = 0
    for i, blk in enumerate(blocks):
        n = blk.param_count()
        params[declared[i]] = raw[offset : offset + n].astype(np.float64).reshape(blk.param_shape())
        offset += n
    return CnnWeights(
        int(descriptor["input_bands"]),
        int(descriptor["feature_dim"]),
        blocks,
        params,
        int(descriptor.get("version", FORMAT_VERSION)),
    )
