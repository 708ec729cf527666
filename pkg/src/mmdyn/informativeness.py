"""Feature-level informativeness: per-feature gates for tables, patch gates for images."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import PATCH, DataError, write_gray_png


class TabularGate(nn.Module):
    """One affine layer ``d -> d`` followed by a sigmoid."""

    def __init__(self, n_features: int):
        super().__init__()
        self.linear = nn.Linear(n_features, n_features)

    def forward(self, x):
        return tabular_gate_forward(x, self)


def tabular_gate_forward(x: torch.Tensor, gate: TabularGate) -> torch.Tensor:
    d = gate.linear.in_features
    if x.shape[-1] != d:
        raise ValueError(f"gate expects {d} features, got {x.shape[-1]}")
    return torch.sigmoid(gate.linear(x))


class ImageGate(nn.Module):
    """Compact U-Net producing one informativeness value per 4x4 patch.

    Encoder: two conv3x3 + ReLU + maxpool2 stages (c -> 8 -> 16). The skip
    path carries stage-1 features, pooled to the bottleneck grid, into the
    single decoder convolution, which emits one channel at ``H/4 x W/4``.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.enc1 = nn.Conv2d(channels, 8, 3, padding=1)
        self.enc2 = nn.Conv2d(8, 16, 3, padding=1)
        self.dec = nn.Conv2d(16 + 8, 1, 3, padding=1)

    def grid(self, x: torch.Tensor) -> torch.Tensor:
        """Patch-level gates, shape ``(N, 1, H/4, W/4)``; ``x`` is ``(N, C, H, W)``."""
        h, w = x.shape[-2:]
        if h % PATCH or w % PATCH:
            raise DataError(f"image gate needs H, W divisible by {PATCH}, got {h}x{w}")
        e1 = F.max_pool2d(F.relu(self.enc1(x)), 2)
        e2 = F.max_pool2d(F.relu(self.enc2(e1)), 2)
        skip = F.max_pool2d(e1, 2)
        return torch.sigmoid(self.dec(torch.cat([e2, skip], dim=1)))

    def forward(self, x):
        return upsample_grid(self.grid(x))


def upsample_grid(grid: torch.Tensor) -> torch.Tensor:
    """Nearest-neighbour replication of each grid cell to a 4x4 block."""
    return F.interpolate(grid, scale_factor=PATCH, mode="nearest")


def image_gate_forward(image: torch.Tensor, gate: ImageGate) -> torch.Tensor:
    """Full-resolution informativeness map ``(N, 1, H, W)`` for ``(N, C, H, W)`` input."""
    return gate(image)


def apply_gate(x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Elementwise ``x * w``; an image map ``(N, 1, H, W)`` broadcasts over channels."""
    try:
        shape = torch.broadcast_shapes(x.shape, w.shape)
    except RuntimeError:
        shape = None
    if shape != x.shape:
        raise ValueError(f"gate shape {tuple(w.shape)} does not match features {tuple(x.shape)}")
    return x * w


def l1_gate_loss(gates: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum of absolute gate values over all modalities (and any batch axis).

    Image gates must be passed as their patch grid, not the replicated map.
    """
    if len(gates) == 0:
        raise ValueError("no gates given")
    return sum(torch.as_tensor(g).abs().sum() for g in gates)


def rank_features(mean_gates, k: int, feature_names: Sequence[str] | None = None) -> list[tuple[str, float]]:
    """Top-``k`` features by mean gate, descending; ties go to the lower index."""
    mean_gates = np.asarray(mean_gates, dtype=np.float64)
    d = len(mean_gates)
    if k > d:
        raise ValueError(f"k={k} exceeds the {d} available features")
    names = list(feature_names) if feature_names is not None else [f"f{i}" for i in range(d)]
    order = sorted(range(d), key=lambda i: (-mean_gates[i], i))[:k]
    return [(names[i], float(mean_gates[i])) for i in order]


def write_ranking(ranking: Sequence[tuple[str, float]], path, delimiter: str = "\t"):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter)
        w.writerow(["rank", "feature_name", "mean_gate"])
        for r, (name, g) in enumerate(ranking, start=1):
            w.writerow([r, name, f"{g:.6f}"])


def write_heatmap(values: np.ndarray, path):
    """8-bit grayscale export of an ``H x W`` map in [0, 1]."""
    write_gray_png(np.asarray(values, dtype=np.float64), path)
