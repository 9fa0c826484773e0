"""The compact backbone and its detection head.

The backbone mirrors the interchange block semantics exactly: 3x3 same-pad
convolution without bias, per-sample channel normalization (biased
variance, eps 1e-5), rectification, 2x2 max-pool, and a global average
pool at the end. Any deviation here would break the cross-package
forward-pass agreement check.
"""

from __future__ import annotations

import torch
from torch import nn

NORM_EPS = 1e-5
DEFAULT_WIDTHS = [32, 32, 48]  # final block width is the feature dim


def build_backbone(input_bands: int, feature_dim: int, widths=None) -> nn.Sequential:
    widths = list(widths) if widths is not None else DEFAULT_WIDTHS + [feature_dim]
    if widths[-1] != feature_dim:
        raise ValueError(f"last block width {widths[-1]} must equal feature_dim {feature_dim}")
    layers = []
    in_ch = input_bands
    for out_ch in widths:
        layers += [
            nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1, bias=False),
            nn.InstanceNorm2d(out_ch, eps=NORM_EPS, affine=False, track_running_stats=False),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
        ]
        in_ch = out_ch
    return nn.Sequential(*layers)


class PretextClassifier(nn.Module):
    """Backbone + global average pool + a small MLP detection head."""

    def __init__(self, input_bands: int, feature_dim: int = 64, head_width: int = 32, widths=None):
        super().__init__()
        self.input_bands = input_bands
        self.feature_dim = feature_dim
        self.backbone = build_backbone(input_bands, feature_dim, widths)
        self.head = nn.Sequential(
            nn.Linear(feature_dim, head_width),
            nn.ReLU(inplace=True),
            nn.Linear(head_width, 2),
        )

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = self.backbone(x)
        return h.mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))

    def conv_weights(self) -> list[torch.Tensor]:
        return [m.weight for m in self.backbone if isinstance(m, nn.Conv2d)]
