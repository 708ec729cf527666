"""Joint training, checkpoints, ablations, sweeps and the early-fusion comparator."""

from __future__ import annotations

import copy
import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch
from torch import nn

from .data import MultimodalDataset, SplitSpec, Standardizer
from .evaluation import MetricSummary, Metrics, compute_metrics, evaluate_masked, evaluate_model
from .fusion import EarlyFusionLinear, FusionConfig, LossWeights, MMDynamics, ModalitySpec

log = logging.getLogger(__name__)

VARIANTS = ("none", "FI", "MI", "both")
DEFAULT_LATENT = {"protein": 35, "rna": 250, "image": 500}
DEFAULT_LATENT_BY_KIND = {"tabular": 35, "image": 500}
CHECKPOINT_MAGIC = "mmdyn-checkpoint/1"


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, components: dict[str, float]):
        self.epoch, self.components = epoch, components
        parts = ", ".join(f"{k}={v}" for k, v in components.items())
        super().__init__(f"loss became non-finite at epoch {epoch}: {parts}")


@dataclass
class TrainConfig:
    epochs: int = 250
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    latent_dims: dict[str, int] = field(default_factory=dict)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    ablation_variant: Literal["none", "FI", "MI", "both"] = "both"
    mask_image_at_test: bool = False
    mask_intensity: float = 0.5
    early_fusion_baseline: bool = False
    image_hidden_dim: int = 128
    test_patients: list[str] | None = None
    val_fraction: float = 0.2

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if isinstance(self.fusion, dict):
            self.fusion = FusionConfig(**self.fusion)
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ConfigError("need epochs >= 1, batch_size >= 1 and learning_rate > 0")
        if self.ablation_variant not in VARIANTS:
            raise ConfigError(f"ablation_variant must be one of {VARIANTS}, got {self.ablation_variant!r}")
        if any(int(v) < 1 for v in self.latent_dims.values()):
            raise ConfigError("latent dimensions must be >= 1")

    @property
    def feature_gates(self) -> bool:
        return self.ablation_variant in ("FI", "both")

    @property
    def modality_weights(self) -> bool:
        return self.ablation_variant in ("MI", "both")

    def latent_dim_for(self, name: str, kind: str) -> int:
        if name in self.latent_dims:
            return int(self.latent_dims[name])
        return DEFAULT_LATENT.get(name.lower(), DEFAULT_LATENT_BY_KIND[kind])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None


def modality_specs(dataset: MultimodalDataset, config: TrainConfig) -> list[ModalitySpec]:
    specs = []
    for m in dataset.modalities:
        if m.kind == "tabular":
            shape = (m.data.shape[1],)
        else:
            _, h, w, c = m.data.shape
            shape = (c, h, w)
        specs.append(ModalitySpec(m.name, m.kind, shape, config.latent_dim_for(m.name, m.kind)))
    return specs


def build_model(config: TrainConfig, specs: Sequence[ModalitySpec], n_classes: int) -> nn.Module:
    if config.early_fusion_baseline:
        return EarlyFusionLinear(specs, n_classes)
    return MMDynamics(specs, n_classes, config.fusion, use_feature_gates=config.feature_gates,
                      use_modality_weights=config.modality_weights, image_hidden_dim=config.image_hidden_dim)


def _stream_seed(seed: int, name: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def init_parameters(model: nn.Module, seed: int):
    """Uniform fan-in init, one random stream per named layer."""
    with torch.no_grad():
        for name, mod in model.named_modules():
            if not isinstance(mod, (nn.Linear, nn.Conv2d)):
                continue
            g = torch.Generator().manual_seed(_stream_seed(seed, name))
            bound = 1.0 / math.sqrt(mod.weight[0].numel())
            mod.weight.uniform_(-bound, bound, generator=g)
            if mod.bias is not None:
                mod.bias.uniform_(-bound, bound, generator=g)


def to_tensors(dataset: MultimodalDataset, indices, standardizer: Standardizer,
               dtype=torch.float32) -> dict[str, torch.Tensor]:
    idx = np.asarray(indices, dtype=np.int64)
    xs = {}
    for m in dataset.modalities:
        x = standardizer.transform(m.subset(idx)) if m.kind == "tabular" else m.data[idx]
        t = torch.as_tensor(np.ascontiguousarray(x), dtype=dtype)
        xs[m.name] = t.permute(0, 3, 1, 2).contiguous() if m.kind == "image" else t
    return xs


def one_hot(labels, n_classes: int, dtype=torch.float32) -> torch.Tensor:
    return torch.nn.functional.one_hot(torch.as_tensor(labels, dtype=torch.long), n_classes).to(dtype)


@dataclass
class TrainedModel:
    model: nn.Module
    config: TrainConfig
    specs: list[ModalitySpec]
    class_count: int
    standardizer: Standardizer
    best_epoch: int
    history: list[dict]

    @property
    def modality_names(self) -> list[str]:
        return [s.name for s in self.specs]

    def _batches(self, dataset, indices, size=512):
        indices = np.asarray(indices, dtype=np.int64)
        for start in range(0, len(indices), size):
            yield to_tensors(dataset, indices[start:start + size], self.standardizer)

    def predict_proba(self, dataset: MultimodalDataset, indices) -> np.ndarray:
        self.model.eval()
        with torch.no_grad():
            return np.concatenate([self.model.predict_proba(xs).numpy() for xs in self._batches(dataset, indices)])

    def predict(self, dataset: MultimodalDataset, indices) -> np.ndarray:
        return np.argmax(self.predict_proba(dataset, indices), axis=-1)

    def forward_numpy(self, dataset: MultimodalDataset, indices) -> dict:
        """Final and unimodal probabilities, TCP estimates and gates as arrays."""
        if not isinstance(self.model, MMDynamics):
            return {"p": self.predict_proba(dataset, indices), "probs": {}, "tcp_hat": {}, "gates": {}}
        parts = []
        self.model.eval()
        with torch.no_grad():
            for xs in self._batches(dataset, indices):
                parts.append(self.model(xs))
        cat = lambda key: {k: np.concatenate([getattr(o, key)[k].numpy() for o in parts])  # noqa: E731
                           for k in getattr(parts[0], key)}
        return {"p": np.concatenate([o.p.numpy() for o in parts]), "probs": cat("probs"),
                "tcp_hat": cat("tcp_hat"), "gates": cat("gates")}

    # -- checkpoint ---------------------------------------------------------

    def save(self, path):
        """Single file: one JSON header line followed by raw little-endian parameter blocks."""
        state = self.model.state_dict()
        blocks, offset, payload = [], 0, []
        for key, t in state.items():
            a = t.detach().cpu().numpy()
            a = a.astype(a.dtype.newbyteorder("<"), copy=False)
            raw = a.tobytes(order="C")
            blocks.append({"key": key, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset,
                           "nbytes": len(raw)})
            payload.append(raw)
            offset += len(raw)
        header = {
            "format": CHECKPOINT_MAGIC,
            "seed": self.config.seed,
            "fusion": asdict(self.config.fusion),
            "loss_weights": asdict(self.config.loss_weights),
            "latent_dims": {s.name: s.latent_dim for s in self.specs},
            "config": self.config.to_dict(),
            "specs": [asdict(s) for s in self.specs],
            "class_count": self.class_count,
            "best_epoch": self.best_epoch,
            "standardizer": self.standardizer.to_dict(),
            "history": self.history,
            "blocks": blocks,
        }
        with Path(path).open("wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            for raw in payload:
                fh.write(raw)

    @classmethod
    def load(cls, path) -> "TrainedModel":
        with Path(path).open("rb") as fh:
            header = json.loads(fh.readline())
            data = fh.read()
        if header.get("format") != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        config = TrainConfig.from_dict(header["config"])
        specs = [ModalitySpec(s["name"], s["kind"], tuple(s["shape"]), s["latent_dim"]) for s in header["specs"]]
        model = build_model(config, specs, header["class_count"])
        state = {}
        for b in header["blocks"]:
            arr = np.frombuffer(data, dtype=np.dtype(b["dtype"]), count=int(np.prod(b["shape"], dtype=np.int64)),
                                offset=b["offset"]).reshape(b["shape"])
            state[b["key"]] = torch.from_numpy(arr.copy())
        model.load_state_dict(state)
        return cls(model, config, specs, header["class_count"], Standardizer.from_dict(header["standardizer"]),
                   header["best_epoch"], header["history"])


def _check_split(dataset: MultimodalDataset, split: SplitSpec):
    parts = [np.asarray(p) for p in (split.train_indices, split.val_indices, split.test_indices)]
    allidx = np.concatenate(parts)
    if len(parts[0]) == 0 or len(parts[1]) == 0:
        raise ConfigError("split needs nonempty train and validation sets")
    if len(np.unique(allidx)) != len(allidx) or allidx.min() < 0 or allidx.max() >= dataset.sample_count:
        raise ConfigError("split indices must be disjoint and within the dataset")


def train(config: TrainConfig, dataset: MultimodalDataset, split: SplitSpec) -> TrainedModel:
    """Minimize the batch-mean total loss with Adam; keep the epoch with the best validation balanced accuracy."""
    _check_split(dataset, split)
    specs = modality_specs(dataset, config)
    C = dataset.class_count
    model = build_model(config, specs, C)
    init_parameters(model, config.seed)
    standardizer = Standardizer.fit(dataset, split.train_indices)
    lw = config.loss_weights

    train_idx = np.asarray(split.train_indices, dtype=np.int64)
    x_train = to_tensors(dataset, train_idx, standardizer)
    y_train = one_hot(dataset.labels[train_idx], C)
    x_val = to_tensors(dataset, split.val_indices, standardizer)
    y_val_labels = dataset.labels[np.asarray(split.val_indices)]
    y_val = one_hot(y_val_labels, C)

    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), weight_decay=0.0)
    shuffle = np.random.default_rng(_stream_seed(config.seed, "shuffle"))
    n = len(train_idx)
    history, best, best_epoch, best_state = [], -1.0, 0, None
    for epoch in range(config.epochs):
        model.train()
        order = torch.as_tensor(shuffle.permutation(n))
        sums = {"l1": 0.0, "conf": 0.0, "final": 0.0, "total": 0.0}
        for start in range(0, n, config.batch_size):
            b = order[start:start + config.batch_size]
            comps = model.losses({k: v[b] for k, v in x_train.items()}, y_train[b], lw)
            if not torch.isfinite(comps["total"]):
                raise TrainingDiverged(epoch, {k: float(v) for k, v in comps.items()})
            opt.zero_grad()
            comps["total"].backward()
            opt.step()
            for k in sums:
                sums[k] += float(comps[k].detach()) * len(b)
        model.eval()
        with torch.no_grad():
            vcomps = model.losses(x_val, y_val, lw)
            vpred = np.argmax(model.predict_proba(x_val).numpy(), axis=-1)
        val_bacc = compute_metrics(vpred, y_val_labels, C).balanced_accuracy
        record = {"epoch": epoch, **{f"train_{k}": v / n for k, v in sums.items()},
                  **{f"val_{k}": float(v) for k, v in vcomps.items()}, "val_balanced_accuracy": val_bacc}
        history.append(record)
        if val_bacc >= best:  # ties go to the later, lower-loss epoch
            best, best_epoch, best_state = val_bacc, epoch, copy.deepcopy(model.state_dict())
        log.debug("epoch %d total %.4f val bacc %.4f", epoch, record["train_total"], val_bacc)
    model.load_state_dict(best_state)
    model.eval()
    return TrainedModel(model, config, specs, C, standardizer, best_epoch, history)


def train_early_fusion_baseline(dataset: MultimodalDataset, split: SplitSpec, config: TrainConfig) -> TrainedModel:
    """Logistic regression on concatenated standardized features, same optimizer and selection rule."""
    return train(replace(config, early_fusion_baseline=True), dataset, split)


def variant_config(config: TrainConfig, variant: str, seed: int) -> TrainConfig:
    lw = config.loss_weights
    if variant in ("MI", "none"):
        lw = LossWeights(0.0, lw.lambda2, lw.lambda3)
    return replace(config, ablation_variant=variant, seed=seed, loss_weights=lw)


@dataclass
class RunResult:
    metrics: Metrics
    model: TrainedModel | None = None
    masked_metrics: dict[str, Metrics] = field(default_factory=dict)


class RunError(RuntimeError):
    pass


def run_and_evaluate(config: TrainConfig, dataset: MultimodalDataset, split: SplitSpec,
                     keep_model: bool = True) -> RunResult:
    trained = train(config, dataset, split)
    result = RunResult(evaluate_model(trained, dataset, split.test_indices), trained if keep_model else None)
    if config.mask_image_at_test:
        for m in dataset.modalities:
            if m.kind == "image":
                result.masked_metrics[m.name] = evaluate_masked(trained, dataset, split, m.name, config.mask_intensity)
    return result


@dataclass
class AblationReport:
    summaries: dict[str, MetricSummary]
    runs: dict[tuple[str, int], RunResult]


def run_ablation(config: TrainConfig, dataset: MultimodalDataset, split: SplitSpec, variants: Sequence[str],
                 seeds: Sequence[int], keep_models: bool = True) -> AblationReport:
    """Train every variant under every seed on the same split."""
    variants = list(variants)
    if not variants or not seeds:
        raise ConfigError("need at least one variant and one seed")
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise ConfigError(f"unknown variants {bad}; choose from {VARIANTS}")
    runs = {}
    for v in variants:
        for s in seeds:
            try:
                runs[v, s] = run_and_evaluate(variant_config(config, v, s), dataset, split, keep_models)
            except Exception as e:
                raise RunError(f"variant {v}, seed {s}: {e}") from e
    summaries = {v: MetricSummary.of([runs[v, s].metrics for s in seeds]) for v in variants}
    return AblationReport(summaries, runs)


@dataclass
class SweepReport:
    axis: str
    rows: dict[str, MetricSummary]
    values: list


def _sweep_label(axis: str, value, dataset: MultimodalDataset) -> str:
    if axis == "lambdas":
        return ", ".join(f"{float(v):g}" for v in value)
    dims = value if isinstance(value, dict) else dict(zip(dataset.modality_names, value))
    return ", ".join(f"{k}: {v}" for k, v in dims.items())


def sweep_config(base: TrainConfig, axis: str, value, dataset: MultimodalDataset) -> TrainConfig:
    if axis == "lambdas":
        if len(value) != 3:
            raise ConfigError(f"lambda sweep values need 3 entries, got {value}")
        return replace(base, loss_weights=LossWeights(*map(float, value)))
    if axis == "latent_dims":
        dims = value if isinstance(value, dict) else dict(zip(dataset.modality_names, value))
        if not isinstance(value, dict) and len(value) != len(dataset.modality_names):
            raise ConfigError(f"latent sweep value {value} must give one dimension per modality")
        return replace(base, latent_dims={**base.latent_dims, **{k: int(v) for k, v in dims.items()}})
    raise ConfigError(f"unknown sweep axis {axis!r}; use latent_dims or lambdas")


def run_sweep(base: TrainConfig, axis: str, values: Sequence, dataset: MultimodalDataset, split: SplitSpec,
              seeds: Sequence[int]) -> SweepReport:
    """One table row per value: metric mean and std over seeds."""
    if not values:
        raise ConfigError("sweep needs at least one value")
    if not seeds:
        raise ConfigError("sweep needs at least one seed")
    rows = {}
    for value in values:
        cfg = sweep_config(base, axis, value, dataset)
        metrics = []
        for s in seeds:
            try:
                metrics.append(run_and_evaluate(replace(cfg, seed=s), dataset, split, keep_model=False).metrics)
            except Exception as e:
                raise RunError(f"{axis}={value}, seed {s}: {e}") from e
        rows[_sweep_label(axis, value, dataset)] = MetricSummary.of(metrics)
    return SweepReport(axis, rows, list(values))
