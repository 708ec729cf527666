"""Classification metrics, TCP error curves, masking evaluation and explainability artifacts."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, fields
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import DataError, MultimodalDataset, SplitSpec, mask_image_modality

COLUMNS = [
    ("f1_weighted", "F1 Score"),
    ("f1_macro", "F1 macro"),
    ("recall_weighted", "Recall"),
    ("precision_weighted", "Precision"),
    ("accuracy", "Accuracy"),
    ("balanced_accuracy", "Balanced accuracy"),
]


@dataclass(frozen=True)
class Metrics:
    f1_weighted: float
    f1_macro: float
    recall_weighted: float
    precision_weighted: float
    accuracy: float
    balanced_accuracy: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    def as_percent(self) -> dict[str, float]:
        return {k: round(100 * v, 2) for k, v in asdict(self).items()}


def confusion_matrix(predictions, labels, class_count: int) -> np.ndarray:
    """``cm[t, p]`` counts samples of true class t predicted as p."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.size == 0 or predictions.shape != labels.shape:
        raise ValueError("need equal-length nonempty predictions and labels")
    for arr, what in ((predictions, "prediction"), (labels, "label")):
        if arr.min() < 0 or arr.max() >= class_count:
            raise ValueError(f"{what} outside [0, {class_count})")
    cm = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return cm


def _ratio(num: int, den: int) -> Fraction:
    return Fraction(num, den) if den else Fraction(0)


def compute_metrics(predictions, labels, class_count: int) -> Metrics:
    """Six confusion-matrix metrics.

    Weighted variants weight per-class scores by true-class support. Macro
    averages (and balanced accuracy) divide by ``class_count``, so a class
    absent from ``labels`` contributes a zero. Every metric is a ratio of
    counts; it is evaluated exactly and rounded to float once.
    """
    cm = confusion_matrix(predictions, labels, class_count)
    n = int(cm.sum())
    tp = [int(v) for v in np.diag(cm)]
    support = [int(v) for v in cm.sum(axis=1)]
    predicted = [int(v) for v in cm.sum(axis=0)]
    recall = [_ratio(t, s) for t, s in zip(tp, support)]
    precision = [_ratio(t, p) for t, p in zip(tp, predicted)]
    f1 = [2 * p * r / (p + r) if p + r else Fraction(0) for p, r in zip(precision, recall)]
    weighted = lambda v: sum(Fraction(s, n) * x for s, x in zip(support, v))  # noqa: E731
    return Metrics(
        f1_weighted=float(weighted(f1)),
        f1_macro=float(sum(f1) / class_count),
        recall_weighted=float(weighted(recall)),
        precision_weighted=float(weighted(precision)),
        accuracy=float(Fraction(sum(tp), n)),
        balanced_accuracy=float(sum(recall) / class_count),
    )


@dataclass
class MetricSummary:
    """Mean and standard deviation (ddof=0) of each metric over seeds."""

    mean: dict[str, float]
    std: dict[str, float]
    n: int

    @classmethod
    def of(cls, runs: Sequence[Metrics]) -> "MetricSummary":
        if not runs:
            raise ValueError("no runs to summarize")
        names = [f.name for f in fields(Metrics)]
        arr = np.array([[getattr(m, k) for k in names] for m in runs])
        return cls(dict(zip(names, arr.mean(0).tolist())), dict(zip(names, arr.std(0).tolist())), len(runs))

    def cells(self) -> list[str]:
        return [f"{100 * self.mean[k]:.2f} ± {100 * self.std[k]:.2f}" for k, _ in COLUMNS]

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "n": self.n}


def render_table(rows: Mapping[str, MetricSummary], first_column: str = "Method", delimiter: str = "\t") -> str:
    """Delimiter-separated table in the usual column order, percent with 2 decimals."""
    lines = [delimiter.join([first_column] + [title for _, title in COLUMNS])]
    for name, s in rows.items():
        lines.append(delimiter.join([str(name)] + s.cells()))
    return "\n".join(lines) + "\n"


def write_report(rows: Mapping[str, MetricSummary], directory, stem: str, first_column: str = "Method",
                 extra: dict | None = None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = {"columns": [k for k, _ in COLUMNS], "rows": {k: v.to_dict() for k, v in rows.items()}}
    if extra:
        payload.update(extra)
    (directory / f"{stem}.json").write_text(json.dumps(payload, indent=2))
    (directory / f"{stem}.tsv").write_text(render_table(rows, first_column))


# ---------------------------------------------------------------------------
# TCP relative error
# ---------------------------------------------------------------------------

@dataclass
class TcpErrorCurve:
    thresholds: list[float]
    fractions: list[float]
    excluded_zero_tcp: int = 0

    def write(self, path, delimiter: str = "\t"):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, delimiter=delimiter)
            w.writerow(["threshold", "fraction"])
            for x, f in zip(self.thresholds, self.fractions):
                w.writerow([repr(float(x)), repr(float(f))])


def tcp_error_curve(tcps, tcp_hats, thresholds) -> TcpErrorCurve:
    """Fraction of samples whose estimate overshoots the TCP by a relative margin x.

    A sample counts at threshold x when ``(1 + x) * tcp <= tcp_hat``. Samples
    with ``tcp == 0`` have no relative error and are only counted.
    """
    tcps = np.asarray(tcps, dtype=np.float64)
    tcp_hats = np.asarray(tcp_hats, dtype=np.float64)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if tcps.size == 0 or tcps.shape != tcp_hats.shape:
        raise ValueError("need equal-length nonempty TCP lists")
    if np.any(np.diff(thresholds) <= 0):
        raise ValueError("thresholds must be strictly ascending")
    if np.any(tcps < 0):
        raise ValueError("TCP values must be >= 0")
    keep = tcps > 0
    if not keep.any():
        raise ValueError("every sample has TCP 0; relative error undefined")
    t, th = tcps[keep], tcp_hats[keep]
    fractions = [float(np.count_nonzero(x * t + t <= th) / t.size) for x in thresholds]
    return TcpErrorCurve(thresholds.tolist(), fractions, int((~keep).sum()))


# ---------------------------------------------------------------------------
# Model-level evaluation
# ---------------------------------------------------------------------------

def evaluate_model(model, dataset: MultimodalDataset, indices) -> Metrics:
    """Metrics of a trained model (anything with ``predict``) on ``indices``."""
    indices = np.asarray(indices, dtype=np.int64)
    preds = model.predict(dataset, indices)
    return compute_metrics(preds, dataset.labels[indices], dataset.class_count)


def evaluate_masked(model, dataset: MultimodalDataset, split: SplitSpec, masked_modality: str,
                    intensity: float = 0.5) -> Metrics:
    """Test-set metrics with one image modality replaced by uniform gray at test time only."""
    if masked_modality not in model.modality_names:
        raise DataError(f"model was not trained with modality {masked_modality!r}")
    view = dataset.modality(masked_modality)
    if view.kind != "image":
        raise DataError(f"cannot mask tabular modality {masked_modality!r}")
    test = dataset.subset(split.test_indices).replace_modality(
        mask_image_modality(view.subset(split.test_indices), intensity))
    return evaluate_model(model, test, np.arange(test.sample_count))


def confidence_rows(model, dataset: MultimodalDataset, indices) -> list[dict]:
    """Per test sample and modality: tcp, tcp_hat, true and predicted class."""
    indices = np.asarray(indices, dtype=np.int64)
    out = model.forward_numpy(dataset, indices)
    rows = []
    preds = np.argmax(out["p"], axis=-1)
    for name in model.modality_names:
        probs = out["probs"][name]
        tcp_hat = out["tcp_hat"].get(name)
        for k, i in enumerate(indices):
            y = int(dataset.labels[i])
            rows.append({
                "sample": int(i), "modality": name, "tcp": float(probs[k, y]),
                "tcp_hat": None if tcp_hat is None else float(tcp_hat[k]),
                "true_class": y, "predicted_class": int(preds[k]),
            })
    return rows


def mean_informativeness_map(maps) -> np.ndarray:
    """Elementwise mean of equally shaped informativeness maps."""
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    if not maps:
        raise ValueError("no maps given")
    if any(m.shape != maps[0].shape for m in maps):
        raise ValueError("maps differ in shape")
    return np.mean(np.stack(maps), axis=0)


def mean_feature_gates(model, dataset: MultimodalDataset, indices) -> dict[str, np.ndarray]:
    """Mean gate per feature (tabular) or per pixel (image, ``H x W``) over ``indices``."""
    out = model.forward_numpy(dataset, indices)
    result = {}
    for name, g in out["gates"].items():
        if g.ndim == 4:
            result[name] = mean_informativeness_map(list(g[:, 0]))
        else:
            result[name] = g.mean(axis=0)
    return result


def planted_recovery(ranking: Sequence[tuple[str, float]], feature_names: Sequence[str], planted) -> float:
    """Precision of a top-k ranking against the planted feature indices."""
    planted_names = {feature_names[i] for i in planted}
    return sum(name in planted_names for name, _ in ranking) / len(ranking)


def patch_contrast(mean_map: np.ndarray, patch) -> tuple[float, float]:
    """Mean map value inside and outside a ``(row, col, h, w)`` region."""
    r, c, h, w = patch
    inside = np.zeros(mean_map.shape, dtype=bool)
    inside[r:r + h, c:c + w] = True
    return float(mean_map[inside].mean()), float(mean_map[~inside].mean())
