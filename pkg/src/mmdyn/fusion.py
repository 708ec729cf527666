"""Late fusion of modality latents, the final classifier and the assembled model."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import torch
from torch import nn

from .confidence import (
    ConfidenceRecord,
    ImageEncoder,
    TabularEncoder,
    TcpRegressor,
    classification_loss,
    confidence_loss,
    cross_entropy,
    estimate_tcp,
    true_class_probability,
    unimodal_forward,
)
from .informativeness import ImageGate, TabularGate, apply_gate, l1_gate_loss, upsample_grid


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0

    def __post_init__(self):
        lams = (self.lambda1, self.lambda2, self.lambda3)
        if min(lams) < 0:
            raise ValueError(f"loss weights must be >= 0, got {lams}")
        if max(lams) == 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass
class FusionConfig:
    mode: Literal["dynamic", "static"] = "dynamic"
    static_weights: list[float] | None = None

    def __post_init__(self):
        if self.mode not in ("dynamic", "static"):
            raise ValueError(f"unknown fusion mode {self.mode!r}")
        if self.static_weights is not None and min(self.static_weights) < 0:
            raise ValueError("static weights must be >= 0")

    def resolved_weights(self, n_modalities: int) -> list[float]:
        """Static weights, defaulting to 1/M each."""
        if self.static_weights is None:
            return [1.0 / n_modalities] * n_modalities
        if len(self.static_weights) != n_modalities:
            raise ValueError(f"{len(self.static_weights)} static weights for {n_modalities} modalities")
        return list(self.static_weights)


def _weighted_concat(latents: Sequence[torch.Tensor], weights: torch.Tensor) -> torch.Tensor:
    # weights: (M,) or (M, N); broadcast each over its latent's last axis
    return torch.cat([w.unsqueeze(-1) * h for w, h in zip(weights, latents)], dim=-1)


def fuse_dynamic(latents: Sequence[torch.Tensor], tcp_hats) -> torch.Tensor:
    """Concatenate latents, each scaled by its modality's TCP estimate."""
    if len(latents) != len(tcp_hats):
        raise ValueError(f"{len(latents)} latents but {len(tcp_hats)} TCP estimates")
    ref = latents[0]
    weights = torch.stack([torch.as_tensor(t, dtype=ref.dtype) for t in tcp_hats])
    return _weighted_concat(latents, weights)


def fuse_static(latents: Sequence[torch.Tensor], weights) -> torch.Tensor:
    """Concatenate latents, each scaled by a fixed nonnegative weight."""
    if len(latents) != len(weights):
        raise ValueError(f"{len(latents)} latents but {len(weights)} weights")
    w = torch.as_tensor(weights, dtype=latents[0].dtype)
    if torch.any(w < 0):
        raise ValueError("static weights must be >= 0")
    if latents[0].dim() > 1:
        w = w.unsqueeze(-1).expand(len(latents), latents[0].shape[0])
    return _weighted_concat(latents, w)


class FinalClassifier(nn.Module):
    def __init__(self, fused_dim: int, n_classes: int):
        super().__init__()
        self.linear = nn.Linear(fused_dim, n_classes)

    def forward(self, fused):
        return final_classifier_forward(fused, self)


def final_classifier_forward(fused: torch.Tensor, clf: FinalClassifier) -> torch.Tensor:
    if fused.shape[-1] != clf.linear.in_features:
        raise ValueError(f"classifier expects {clf.linear.in_features} inputs, got {fused.shape[-1]}")
    return torch.softmax(clf.linear(fused), dim=-1)


def hard_prediction(p: torch.Tensor) -> torch.Tensor:
    """Argmax over classes; ties resolve to the lowest class index."""
    return torch.argmax(p, dim=-1)


def final_loss(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return cross_entropy(p, y)


def total_loss(l1, conf, final, lw: LossWeights):
    return lw.lambda1 * l1 + lw.lambda2 * conf + lw.lambda3 * final


@dataclass
class ModalitySpec:
    name: str
    kind: Literal["tabular", "image"]
    shape: tuple[int, ...]  # (d,) or (channels, H, W)
    latent_dim: int

    @property
    def flat_dim(self) -> int:
        n = 1
        for s in self.shape:
            n *= s
        return n


@dataclass
class ForwardOutput:
    gates: dict[str, torch.Tensor]  # full-resolution gates (ones when gating is off)
    gate_grids: dict[str, torch.Tensor]  # what the L1 term sees
    latents: dict[str, torch.Tensor]
    probs: dict[str, torch.Tensor]
    tcp_hat: dict[str, torch.Tensor]
    fusion_weights: dict[str, torch.Tensor]
    p: torch.Tensor
    extras: dict = field(default_factory=dict)


class MMDynamics(nn.Module):
    """Gated unimodal encoders, TCP regressors and a fused linear classifier.

    ``use_feature_gates`` / ``use_modality_weights`` switch off feature and
    modality informativeness (gates fixed to 1, TCP weights fixed to 1 with the
    squared TCP term dropped). Static fusion replaces TCP weights with
    ``fusion.static_weights`` and also drops the squared term.
    """

    def __init__(self, specs: Sequence[ModalitySpec], n_classes: int, fusion: FusionConfig | None = None,
                 use_feature_gates: bool = True, use_modality_weights: bool = True, image_hidden_dim: int = 128):
        super().__init__()
        self.specs = list(specs)
        self.n_classes = n_classes
        self.fusion = fusion or FusionConfig()
        self.use_feature_gates = use_feature_gates
        self.use_modality_weights = use_modality_weights and self.fusion.mode == "dynamic"
        self.gates = nn.ModuleDict()
        self.encoders = nn.ModuleDict()
        self.regressors = nn.ModuleDict()
        for s in self.specs:
            if s.kind == "tabular":
                self.gates[s.name] = TabularGate(s.shape[0])
                self.encoders[s.name] = TabularEncoder(s.shape[0], s.latent_dim, n_classes)
            else:
                c, h, w = s.shape
                self.gates[s.name] = ImageGate(c)
                self.encoders[s.name] = ImageEncoder(c, h, w, s.latent_dim, n_classes, image_hidden_dim)
            self.regressors[s.name] = TcpRegressor(s.flat_dim)
        self.final = FinalClassifier(sum(s.latent_dim for s in self.specs), n_classes)
        if self.fusion.mode == "static":
            self._static = self.fusion.resolved_weights(len(self.specs))

    def forward(self, xs: dict[str, torch.Tensor]) -> ForwardOutput:
        gates, grids, latents, probs, tcp_hat, weights = {}, {}, {}, {}, {}, {}
        for s in self.specs:
            x = xs[s.name]
            if self.use_feature_gates:
                if s.kind == "image":
                    grid = self.gates[s.name].grid(x)
                    w = upsample_grid(grid)
                else:
                    w = grid = self.gates[s.name](x)
                x_gated = apply_gate(x, w)
                gates[s.name], grids[s.name] = w, grid
            else:
                x_gated = x
            latents[s.name], probs[s.name] = unimodal_forward(x_gated, self.encoders[s.name])
            if self.use_modality_weights:
                tcp_hat[s.name] = estimate_tcp(x_gated, self.regressors[s.name])
        names = [s.name for s in self.specs]
        hs = [latents[n] for n in names]
        if self.fusion.mode == "static":
            fused = fuse_static(hs, self._static)
            weights = {n: torch.tensor(w) for n, w in zip(names, self._static)}
        elif self.use_modality_weights:
            fused = fuse_dynamic(hs, [tcp_hat[n] for n in names])
            weights = dict(tcp_hat)
        else:
            ones = torch.ones(hs[0].shape[:-1], dtype=hs[0].dtype)
            fused = fuse_dynamic(hs, [ones] * len(hs))
            weights = {n: ones for n in names}
        return ForwardOutput(gates, grids, latents, probs, tcp_hat, weights, final_classifier_forward(fused, self.final))

    def losses(self, xs: dict[str, torch.Tensor], y: torch.Tensor, lw: LossWeights,
               out: ForwardOutput | None = None) -> dict[str, torch.Tensor]:
        """Batch means of the three loss components and their weighted total."""
        out = out or self(xs)
        n = y.shape[0]
        names = [s.name for s in self.specs]
        if self.use_feature_gates:
            l1 = l1_gate_loss([out.gate_grids[k] for k in names]) / n
        else:
            l1 = torch.zeros((), dtype=out.p.dtype)
        cls = classification_loss([out.probs[k] for k in names], y)
        if self.use_modality_weights:
            records = [ConfidenceRecord(out.probs[k], true_class_probability(y, out.probs[k]), out.tcp_hat[k])
                       for k in names]
            conf = confidence_loss(records, cls).mean()
        else:
            conf = cls.mean()
        fin = final_loss(out.p, y).mean()
        return {"l1": l1, "conf": conf, "final": fin, "total": total_loss(l1, conf, fin, lw)}

    def predict_proba(self, xs):
        return self(xs).p


class EarlyFusionLinear(nn.Module):
    """Logistic regression on the concatenation of all (flattened) modalities."""

    def __init__(self, specs: Sequence[ModalitySpec], n_classes: int):
        super().__init__()
        self.specs = list(specs)
        self.linear = nn.Linear(sum(s.flat_dim for s in self.specs), n_classes)

    def forward(self, xs: dict[str, torch.Tensor]) -> torch.Tensor:
        x = torch.cat([xs[s.name].flatten(1) for s in self.specs], dim=-1)
        return torch.softmax(self.linear(x), dim=-1)

    def losses(self, xs, y, lw: LossWeights | None = None, out=None):
        zero = torch.zeros(())
        fin = final_loss(self(xs), y).mean()
        return {"l1": zero, "conf": zero, "final": fin, "total": fin}

    def predict_proba(self, xs):
        return self(xs)
