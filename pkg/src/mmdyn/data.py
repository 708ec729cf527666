"""Multimodal datasets: containers, file ingestion, synthetic generation and splits."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from PIL import Image

PATCH = 4

Kind = Literal["tabular", "image"]


class DataError(ValueError):
    """Raised for malformed input files or inconsistent datasets."""


@dataclass
class ModalityView:
    """One modality: ``N x d`` table or ``N x H x W x channels`` image stack."""

    name: str
    kind: Kind
    data: np.ndarray
    feature_names: list[str] | None = None

    def __post_init__(self):
        if self.kind not in ("tabular", "image"):
            raise DataError(f"unknown modality kind {self.kind!r}")
        self.data = np.asarray(self.data)
        if self.kind == "tabular":
            if self.data.ndim != 2 or self.data.shape[1] < 1:
                raise DataError(f"{self.name}: tabular data must be N x d with d >= 1, got {self.data.shape}")
            if self.feature_names is None:
                self.feature_names = [f"f{i}" for i in range(self.data.shape[1])]
            elif len(self.feature_names) != self.data.shape[1]:
                raise DataError(f"{self.name}: {len(self.feature_names)} feature names for {self.data.shape[1]} columns")
        else:
            if self.data.ndim != 4:
                raise DataError(f"{self.name}: image data must be N x H x W x C, got {self.data.shape}")
            _, h, w, _ = self.data.shape
            check_patch_divisible(h, w, self.name)
            if self.data.size and (self.data.min() < 0 or self.data.max() > 1):
                raise DataError(f"{self.name}: image values must lie in [0, 1]")
            self.feature_names = None

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]

    @property
    def n_features(self) -> int:
        """d_m: column count for tables, H*W*C for images."""
        return int(np.prod(self.data.shape[1:]))

    def subset(self, indices) -> "ModalityView":
        return ModalityView(self.name, self.kind, self.data[np.asarray(indices, dtype=int)],
                            None if self.feature_names is None else list(self.feature_names))


@dataclass
class MultimodalDataset:
    modalities: list[ModalityView]
    labels: np.ndarray
    patient_ids: np.ndarray
    class_count: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.patient_ids = np.asarray([str(p) for p in self.patient_ids], dtype=object)
        n = len(self.labels)
        if n < 1:
            raise DataError("dataset has no samples")
        if not self.modalities:
            raise DataError("dataset has no modalities")
        if self.class_count < 2:
            raise DataError("class_count must be >= 2")
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate modality names: {names}")
        for m in self.modalities:
            if m.n_samples != n:
                raise DataError(f"modality {m.name} has {m.n_samples} samples, expected {n}")
        if len(self.patient_ids) != n:
            raise DataError(f"{len(self.patient_ids)} patient ids for {n} samples")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DataError(f"labels must lie in [0, {self.class_count})")

    @property
    def sample_count(self) -> int:
        return len(self.labels)

    @property
    def modality_names(self) -> list[str]:
        return [m.name for m in self.modalities]

    def modality(self, name: str) -> ModalityView:
        for m in self.modalities:
            if m.name == name:
                return m
        raise KeyError(f"no modality named {name!r}; have {self.modality_names}")

    def replace_modality(self, view: ModalityView) -> "MultimodalDataset":
        self.modality(view.name)
        mods = [view if m.name == view.name else m for m in self.modalities]
        return MultimodalDataset(mods, self.labels.copy(), self.patient_ids.copy(), self.class_count)

    def subset(self, indices) -> "MultimodalDataset":
        idx = np.asarray(indices, dtype=int)
        return MultimodalDataset([m.subset(idx) for m in self.modalities], self.labels[idx],
                                 self.patient_ids[idx], self.class_count)


@dataclass
class SplitSpec:
    train_indices: np.ndarray
    val_indices: np.ndarray
    test_indices: np.ndarray
    seed: int

    def to_dict(self) -> dict:
        return {"train_indices": self.train_indices.tolist(), "val_indices": self.val_indices.tolist(),
                "test_indices": self.test_indices.tolist(), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        return cls(np.asarray(d["train_indices"], dtype=np.int64), np.asarray(d["val_indices"], dtype=np.int64),
                   np.asarray(d["test_indices"], dtype=np.int64), int(d["seed"]))


def check_patch_divisible(h: int, w: int, what: str = "image"):
    if h % PATCH or w % PATCH:
        raise DataError(f"{what}: height and width must be divisible by {PATCH}, got {h}x{w}")


# ---------------------------------------------------------------------------
# File ingestion
# ---------------------------------------------------------------------------

def _delimiter_for(path: Path) -> str:
    return "\t" if path.suffix.lower() in (".tsv", ".tab") else ","


def load_tabular_modality(path, name: str, delimiter: str | None = None) -> ModalityView:
    """Read a delimiter-separated numeric table with a header row of feature names."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: file not found")
    delimiter = delimiter or _delimiter_for(path)
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh, delimiter=delimiter) if r]
    if len(rows) < 2:
        raise DataError(f"{path}: no samples")
    header = [h.strip() for h in rows[0]]
    values = np.empty((len(rows) - 1, len(header)), dtype=np.float64)
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataError(f"{path}: row {i} has {len(row)} cells, header has {len(header)}")
        for j, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}: non-numeric cell {cell!r} at row {i}, column {j + 1} ({header[j]})") from None
            if not math.isfinite(v):
                raise DataError(f"{path}: non-finite cell {cell!r} at row {i}, column {j + 1} ({header[j]})")
            values[i - 2, j] = v
    return ModalityView(name, "tabular", values, header)


def save_tabular_modality(view: ModalityView, path, delimiter: str | None = None):
    path = Path(path)
    delimiter = delimiter or _delimiter_for(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter)
        writer.writerow(view.feature_names)
        for row in view.data:
            writer.writerow([repr(float(v)) for v in row])


def read_manifest(manifest) -> list[dict]:
    """Manifest entries sorted by ``sample``."""
    manifest = Path(manifest)
    if not manifest.is_file():
        raise DataError(f"{manifest}: file not found")
    try:
        entries = json.loads(manifest.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{manifest}: invalid JSON ({e})") from None
    if not isinstance(entries, list) or not entries:
        raise DataError(f"{manifest}: expected a nonempty JSON array")
    for e in entries:
        missing = {"sample", "file"} - set(e)
        if missing:
            raise DataError(f"{manifest}: entry {e} lacks {sorted(missing)}")
    entries = sorted(entries, key=lambda e: int(e["sample"]))
    samples = [int(e["sample"]) for e in entries]
    if samples != list(range(len(samples))):
        raise DataError(f"{manifest}: sample indices must be 0..{len(samples) - 1} without gaps")
    return entries


def load_image_modality(directory, manifest, name: str = "image") -> ModalityView:
    """Load 8-bit images listed in a JSON manifest; pixels are scaled to [0, 1]."""
    directory = Path(directory)
    arrays = []
    for e in read_manifest(manifest):
        f = directory / e["file"]
        try:
            with Image.open(f) as im:
                a = np.asarray(im)
        except (OSError, ValueError) as err:
            raise DataError(f"{f}: unreadable image ({err})") from None
        if a.dtype != np.uint8:
            raise DataError(f"{f}: expected 8-bit pixels, got {a.dtype}")
        if a.ndim == 2:
            a = a[..., None]
        if arrays and a.shape != arrays[0].shape:
            raise DataError(f"{f}: dimensions {a.shape} differ from first image {arrays[0].shape}")
        check_patch_divisible(a.shape[0], a.shape[1], str(f))
        arrays.append(a)
    return ModalityView(name, "image", np.stack(arrays).astype(np.float64) / 255.0)


def save_image_modality(view: ModalityView, directory, labels, patient_ids, manifest_name="manifest.json"):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, img in enumerate(view.data):
        fname = f"{i:06d}.png"
        write_gray_png(img, directory / fname)
        entries.append({"sample": i, "file": fname, "label": int(labels[i]), "patient": str(patient_ids[i])})
    (directory / manifest_name).write_text(json.dumps(entries, indent=1))


def to_uint8(values: np.ndarray) -> np.ndarray:
    """[0,1] -> 0..255, rounding half up."""
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_gray_png(img: np.ndarray, path):
    img = np.asarray(img)
    if img.ndim == 3:
        img = img[..., 0] if img.shape[-1] == 1 else img
    mode = "L" if img.ndim == 2 else "RGB"
    Image.fromarray(to_uint8(img), mode=mode).save(path)


def save_dataset(dataset: MultimodalDataset, directory):
    """Write a dataset as ``dataset.json`` + one table or image folder per modality."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    mods = []
    for m in dataset.modalities:
        if m.kind == "tabular":
            save_tabular_modality(m, directory / f"{m.name}.csv")
            mods.append({"name": m.name, "kind": "tabular", "file": f"{m.name}.csv"})
        else:
            save_image_modality(m, directory / m.name, dataset.labels, dataset.patient_ids)
            mods.append({"name": m.name, "kind": "image", "directory": m.name, "manifest": f"{m.name}/manifest.json"})
    with (directory / "samples.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "label", "patient"])
        for i, (y, p) in enumerate(zip(dataset.labels, dataset.patient_ids)):
            w.writerow([i, int(y), p])
    (directory / "dataset.json").write_text(json.dumps({"class_count": dataset.class_count, "modalities": mods}, indent=2))


def load_dataset(directory) -> MultimodalDataset:
    directory = Path(directory)
    meta_path = directory / "dataset.json"
    if not meta_path.is_file():
        raise DataError(f"{meta_path}: file not found")
    meta = json.loads(meta_path.read_text())
    mods = []
    for m in meta["modalities"]:
        if m["kind"] == "tabular":
            mods.append(load_tabular_modality(directory / m["file"], m["name"]))
        else:
            mods.append(load_image_modality(directory / m["directory"], directory / m["manifest"], m["name"]))
    with (directory / "samples.csv").open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    labels = [int(r["label"]) for r in rows]
    patients = [r["patient"] for r in rows]
    return MultimodalDataset(mods, labels, patients, int(meta["class_count"]))


# ---------------------------------------------------------------------------
# Splits, standardization, masking
# ---------------------------------------------------------------------------

def patient_split(dataset: MultimodalDataset, test_patients, val_fraction: float, seed: int) -> SplitSpec:
    """Hold out every sample of ``test_patients``; split the rest into train/val, stratified by class."""
    test_patients = {str(p) for p in test_patients}
    all_patients = set(dataset.patient_ids.tolist())
    if not test_patients:
        raise DataError("test_patients is empty")
    unknown = test_patients - all_patients
    if unknown:
        raise DataError(f"unknown test patients: {sorted(unknown)}")
    if test_patients >= all_patients:
        raise DataError("test_patients cover every patient; nothing left for training")
    if not 0 < val_fraction < 1:
        raise DataError("val_fraction must lie in (0, 1)")

    is_test = np.isin(dataset.patient_ids, list(test_patients))
    test_idx = np.flatnonzero(is_test)
    rest = np.flatnonzero(~is_test)
    if val_fraction * len(rest) < 1:
        raise DataError(f"val_fraction {val_fraction} of {len(rest)} non-test samples leaves no validation set")

    rng = np.random.default_rng(seed)
    val, train = [], []
    for c in range(dataset.class_count):
        members = rest[dataset.labels[rest] == c]
        members = members[rng.permutation(len(members))]
        k = int(round(val_fraction * len(members)))
        val.extend(members[:k])
        train.extend(members[k:])
    if not val:
        # every class too small to round up; take one training sample
        val.append(train.pop(int(rng.integers(len(train)))))
    if not train:
        raise DataError("split leaves an empty training set")
    return SplitSpec(np.sort(np.asarray(train, dtype=np.int64)), np.sort(np.asarray(val, dtype=np.int64)),
                     test_idx.astype(np.int64), seed)


@dataclass
class Standardizer:
    """Per-feature z-scoring for tabular modalities, fitted on the training split only."""

    mean: dict[str, np.ndarray] = field(default_factory=dict)
    scale: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def fit(cls, dataset: MultimodalDataset, train_indices) -> "Standardizer":
        st = cls()
        idx = np.asarray(train_indices, dtype=int)
        for m in dataset.modalities:
            if m.kind != "tabular":
                continue
            x = m.data[idx]
            sd = x.std(axis=0)
            st.mean[m.name] = x.mean(axis=0)
            st.scale[m.name] = np.where(sd > 0, sd, 1.0)
        return st

    def transform(self, view: ModalityView) -> np.ndarray:
        if view.kind != "tabular" or view.name not in self.mean:
            return view.data
        return (view.data - self.mean[view.name]) / self.scale[view.name]

    def to_dict(self) -> dict:
        return {k: {"mean": self.mean[k].tolist(), "scale": self.scale[k].tolist()} for k in self.mean}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        st = cls()
        for k, v in d.items():
            st.mean[k] = np.asarray(v["mean"], dtype=np.float64)
            st.scale[k] = np.asarray(v["scale"], dtype=np.float64)
        return st


def mask_image_modality(view: ModalityView, intensity: float = 0.5) -> ModalityView:
    """Replace every pixel with a uniform gray ``intensity``."""
    if view.kind != "image":
        raise DataError(f"cannot mask tabular modality {view.name!r}")
    if not 0 <= intensity <= 1:
        raise DataError("intensity must lie in [0, 1]")
    return ModalityView(view.name, "image", np.full_like(view.data, intensity, dtype=np.float64))


# ---------------------------------------------------------------------------
# Synthetic data with planted ground truth
# ---------------------------------------------------------------------------

@dataclass
class SyntheticTabular:
    name: str
    n_features: int
    n_informative: int
    informative: bool = True
    kind: str = "tabular"


@dataclass
class SyntheticImage:
    name: str
    height: int = 16
    width: int = 16
    channels: int = 1
    patch: tuple[int, int, int, int] = (4, 4, 8, 8)  # row, col, height, width
    informative: bool = True
    kind: str = "image"


@dataclass
class SyntheticSpec:
    """Recipe for a dataset whose informative features, patch and modalities are known.

    ``assignment="all"`` gives class signal to every informative modality for
    every sample; ``"exclusive"`` gives it to exactly one informative modality
    per sample, drawn uniformly.
    """

    sample_count: int
    class_count: int
    modalities: list
    noise: float = 1.0
    class_separation: float = 2.0
    background_std: float = 1.0
    image_noise: float = 0.1
    class_ratios: list[float] | None = None
    assignment: Literal["all", "exclusive"] = "all"
    patient_count: int = 3

    def validate(self):
        if self.sample_count < 1 or self.class_count < 2:
            raise DataError("need sample_count >= 1 and class_count >= 2")
        if self.sample_count < self.class_count:
            raise DataError("sample_count must be at least class_count so every class appears")
        if self.noise < 0 or self.image_noise < 0 or self.background_std < 0:
            raise DataError("noise levels must be >= 0")
        if self.class_separation < 2 * self.noise:
            raise DataError("class means must be separated by at least 2 * noise")
        if self.class_ratios is not None:
            if len(self.class_ratios) != self.class_count or min(self.class_ratios) <= 0:
                raise DataError("class_ratios needs one positive entry per class")
        if self.assignment not in ("all", "exclusive"):
            raise DataError(f"unknown assignment {self.assignment!r}")
        if not self.modalities:
            raise DataError("spec has no modalities")
        if self.patient_count < 2:
            raise DataError("patient_count must be >= 2")
        for m in self.modalities:
            if isinstance(m, SyntheticTabular):
                if not 1 <= m.n_informative <= m.n_features:
                    raise DataError(f"{m.name}: {m.n_informative} planted features do not fit in {m.n_features}")
            elif isinstance(m, SyntheticImage):
                check_patch_divisible(m.height, m.width, m.name)
                r, c, h, w = m.patch
                if h < 1 or w < 1 or r < 0 or c < 0 or r + h > m.height or c + w > m.width:
                    raise DataError(f"{m.name}: planted patch {m.patch} outside {m.height}x{m.width}")
            else:
                raise DataError(f"unsupported modality spec {m!r}")
        if self.assignment == "exclusive" and not any(m.informative for m in self.modalities):
            raise DataError("exclusive assignment needs at least one informative modality")

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "modalities"}
        d["modalities"] = [dict(m.__dict__) for m in self.modalities]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        mods = []
        for m in d.pop("modalities"):
            m = dict(m)
            kind = m.pop("kind", "tabular")
            if kind == "image":
                if "patch" in m:
                    m["patch"] = tuple(m["patch"])
                mods.append(SyntheticImage(**m))
            else:
                mods.append(SyntheticTabular(**m))
        return cls(modalities=mods, **d)


@dataclass
class GroundTruth:
    planted_features: dict[str, list[int]]
    planted_patch: dict[str, list[int]]
    informative_modalities: list[list[str]]

    def to_dict(self) -> dict:
        return {"planted_features": self.planted_features, "planted_patch": self.planted_patch,
                "informative_modalities": self.informative_modalities}

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(d["planted_features"], d["planted_patch"], d["informative_modalities"])


def _class_counts(n: int, ratios: Sequence[float]) -> np.ndarray:
    r = np.asarray(ratios, dtype=np.float64)
    counts = np.maximum(1, np.floor(n * r / r.sum()).astype(int))
    # largest-remainder fill so counts sum to n
    while counts.sum() < n:
        counts[np.argmax(n * r / r.sum() - counts)] += 1
    while counts.sum() > n:
        counts[np.argmax(counts)] -= 1
    return counts


def synthesize_dataset(spec: SyntheticSpec, seed: int) -> tuple[MultimodalDataset, GroundTruth]:
    """Draw a dataset from ``spec``; a pure function of ``(spec, seed)``.

    Each planted tabular feature belongs to one class: that class's mean sits
    ``class_separation`` above the mean 0 shared by the other classes and by
    uninformative samples. Images carry a class-coded intensity level inside
    the planted patch.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    n, C = spec.sample_count, spec.class_count
    counts = _class_counts(n, spec.class_ratios or [1.0] * C)
    labels = np.repeat(np.arange(C), counts)[rng.permutation(n)]
    patients = np.array([f"P{i}" for i in rng.integers(spec.patient_count, size=n)], dtype=object)
    # make sure every patient exists
    patients[: spec.patient_count] = [f"P{i}" for i in range(spec.patient_count)]

    informative_names = [m.name for m in spec.modalities if m.informative]
    if spec.assignment == "all":
        carriers = [list(informative_names) for _ in range(n)]
    else:
        pick = rng.integers(len(informative_names), size=n)
        carriers = [[informative_names[k]] for k in pick]
    carrier_mask = {m.name: np.array([m.name in c for c in carriers]) for m in spec.modalities}

    views, planted, patches = [], {}, {}
    for m in spec.modalities:
        on = carrier_mask[m.name]
        if isinstance(m, SyntheticTabular):
            feats = np.sort(rng.choice(m.n_features, size=m.n_informative, replace=False))
            # one-vs-rest: each planted feature lifts one class (round robin) by the separation
            owner = rng.permutation(np.arange(len(feats)) % C)
            levels = spec.class_separation * (np.arange(C)[:, None] == owner[None, :])
            x = rng.normal(0.0, spec.background_std, size=(n, m.n_features))
            signal = levels[labels] + rng.normal(0.0, spec.noise, size=(n, len(feats)))
            x[np.ix_(on, feats)] = signal[on]
            views.append(ModalityView(m.name, "tabular", x, [f"{m.name}_{j}" for j in range(m.n_features)]))
            planted[m.name] = feats.tolist()
        else:
            r, c, h, w = m.patch
            imgs = np.clip(0.5 + rng.normal(0.0, spec.image_noise, size=(n, m.height, m.width, m.channels)), 0, 1)
            level = 0.1 + 0.8 * labels / (C - 1)
            patch = level[:, None, None, None] + rng.normal(0.0, spec.image_noise, size=(n, h, w, m.channels))
            region = imgs[:, r:r + h, c:c + w, :]
            region[on] = np.clip(patch[on], 0, 1)
            views.append(ModalityView(m.name, "image", imgs))
            patches[m.name] = [r, c, h, w]
    dataset = MultimodalDataset(views, labels, patients, C)
    truth = GroundTruth(planted, patches, [[nm for nm in c] for c in carriers])
    return dataset, truth
