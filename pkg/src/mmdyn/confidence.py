"""Unimodal classifiers, true class probability and its regression target."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

PROB_FLOOR = 1e-12


class TabularEncoder(nn.Module):
    """Affine + ReLU to the latent space, then a removable affine head to C logits."""

    def __init__(self, n_features: int, latent_dim: int, n_classes: int):
        super().__init__()
        if latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        self.body = nn.Linear(n_features, latent_dim)
        self.head = nn.Linear(latent_dim, n_classes)

    def latent(self, x):
        if x.shape[-1] != self.body.in_features:
            raise ValueError(f"encoder expects {self.body.in_features} features, got {x.shape[-1]}")
        return F.relu(self.body(x))


class ImageEncoder(nn.Module):
    """Two conv+maxpool stages, two affine layers to the latent space, affine head."""

    def __init__(self, channels: int, height: int, width: int, latent_dim: int, n_classes: int,
                 hidden_dim: int = 128):
        super().__init__()
        if latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        self.input_shape = (channels, height, width)
        self.conv1 = nn.Conv2d(channels, 8, 3, padding=1)
        self.conv2 = nn.Conv2d(8, 16, 3, padding=1)
        self.fc1 = nn.Linear(16 * (height // 4) * (width // 4), hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, latent_dim)
        self.head = nn.Linear(latent_dim, n_classes)

    def latent(self, x):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"encoder expects images {self.input_shape}, got {tuple(x.shape[1:])}")
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        x = F.relu(self.fc1(x.flatten(1)))
        return F.relu(self.fc2(x))


def unimodal_forward(x_gated: torch.Tensor, encoder: nn.Module) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(h, p)``: the pre-head latent and the softmax over classes."""
    h = encoder.latent(x_gated)
    return h, torch.softmax(encoder.head(h), dim=-1)


def _check_one_hot(y: torch.Tensor):
    if not torch.all((y == 0) | (y == 1)) or not torch.all(y.sum(-1) == 1):
        raise ValueError("labels must be one-hot")


def cross_entropy(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """``-y . log p`` over the last axis with probabilities floored at 1e-12."""
    _check_one_hot(y)
    if p.shape != y.shape:
        raise ValueError(f"probabilities {tuple(p.shape)} and labels {tuple(y.shape)} differ in shape")
    return -(y * torch.log(p.clamp_min(PROB_FLOOR))).sum(-1)


def classification_loss(probs_per_modality: Sequence[torch.Tensor], y: torch.Tensor) -> torch.Tensor:
    """Unimodal cross-entropy summed over modalities (per sample if batched)."""
    return sum(cross_entropy(p, y) for p in probs_per_modality)


def true_class_probability(y: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    if y.shape != p.shape:
        raise ValueError(f"labels {tuple(y.shape)} and probabilities {tuple(p.shape)} differ in shape")
    return (y * p).sum(-1)


class TcpRegressor(nn.Module):
    """Single affine map to one output, squashed by a sigmoid."""

    def __init__(self, input_dim: int):
        super().__init__()
        self.linear = nn.Linear(input_dim, 1)

    def forward(self, x):
        return estimate_tcp(x, self)


def estimate_tcp(x_gated: torch.Tensor, regressor: TcpRegressor) -> torch.Tensor:
    """TCP estimate in (0, 1); images are flattened per sample first."""
    x = x_gated.flatten(1) if x_gated.dim() > 2 else x_gated
    if x.shape[-1] != regressor.linear.in_features:
        raise ValueError(f"regressor expects {regressor.linear.in_features} inputs, got {x.shape[-1]}")
    return torch.sigmoid(regressor.linear(x)).squeeze(-1)


@dataclass
class ConfidenceRecord:
    """Per-modality softmax, true class probability and its estimate (tensors, possibly batched)."""

    probs: torch.Tensor
    tcp: torch.Tensor
    tcp_hat: torch.Tensor


def confidence_loss(records: Sequence[ConfidenceRecord], cls_loss: torch.Tensor) -> torch.Tensor:
    """Squared TCP estimation error summed over modalities, plus the classification loss."""
    return sum((r.tcp_hat - r.tcp) ** 2 for r in records) + cls_loss


def tcp_calibration_stats(tcps, tcp_hats) -> dict[str, float]:
    tcps = np.asarray(tcps, dtype=np.float64)
    tcp_hats = np.asarray(tcp_hats, dtype=np.float64)
    if tcps.size == 0 or tcps.shape != tcp_hats.shape:
        raise ValueError("need equal-length nonempty TCP lists")
    err = np.abs(tcp_hats - tcps)
    return {"mae": float(err.mean()), "mae_std": float(err.std()), "mean_tcp": float(tcps.mean()),
            "max_abs_error": float(err.max())}


def write_confidence_records(rows: Sequence[dict], path):
    """One JSON object per line: sample, modality, tcp, tcp_hat, true_class, predicted_class."""
    with Path(path).open("w") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
