"""Datasets: in-memory model, on-disk format, normalization, splitting,
and the seeded synthetic image+tabular benchmark generator.

A sample couples an image with a designed-feature vector and a label.
The synthetic generator plants class evidence in both modalities
independently: each modality's evidence agrees with the true label only
with a configurable reliability, so neither alone suffices and a model
that combines them can beat either single-modality model.

On-disk layout (one directory per dataset):

* ``manifest.json`` — counts, shapes, file names, provenance.
* ``images.bin``    — raw little-endian float64 pixels, sample-major.
* ``features.csv``  — ``id,f0..f{N-1}`` rows, floats printed exactly.
* ``labels.csv``    — ``id,label`` rows.

Everything round-trips bit-exactly.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .autodiff import Tensor
from .exceptions import ConfigError, DataError, FormatError, ShapeError

FORMAT_VERSION = 1
_CONST_STD = 1e-12


@dataclass(frozen=True)
class Sample:
    """One observation: image ``[C,H,W]``, designed features ``[N]``, label."""
    id: str
    image: Tensor
    features: Tensor
    label: int

    def __post_init__(self) -> None:
        if self.image.data.ndim != 3:
            raise ShapeError(f"sample image must be [C,H,W], got {list(self.image.shape)}")
        if self.features.data.ndim != 1:
            raise ShapeError(f"sample features must be a vector, got {list(self.features.shape)}")
        if not np.isfinite(self.image.data).all() or not np.isfinite(self.features.data).all():
            raise DataError(f"sample {self.id}: non-finite values")
        if self.label < 0:
            raise DataError(f"sample {self.id}: negative label {self.label}")


class Dataset:
    """Immutable ordered collection of samples with shared shape metadata.

    Stacked views (``images()``, ``features()``, ``labels()``) are built
    lazily and cached; they are what models and the trainer consume.
    """

    def __init__(self, samples: Sequence[Sample], image_shape: Sequence[int],
                 n_features: int, n_classes: int, provenance: Mapping | None = None):
        self.samples = list(samples)
        self.image_shape = tuple(int(d) for d in image_shape)
        self.n_features = int(n_features)
        self.n_classes = int(n_classes)
        self.provenance = dict(provenance or {})
        if len(self.image_shape) != 3:
            raise ShapeError(f"image_shape must be [C,H,W], got {list(image_shape)}")
        if self.n_classes < 2:
            raise DataError(f"need at least 2 classes, got {self.n_classes}")
        for s in self.samples:
            if s.image.shape != self.image_shape:
                raise ShapeError(
                    f"sample {s.id}: image shape {list(s.image.shape)} != "
                    f"dataset {list(self.image_shape)}")
            if s.features.shape != (self.n_features,):
                raise ShapeError(
                    f"sample {s.id}: {s.features.shape[0]} features != "
                    f"dataset {self.n_features}")
            if s.label >= self.n_classes:
                raise DataError(
                    f"sample {s.id}: label {s.label} >= n_classes {self.n_classes}")
        self._images: np.ndarray | None = None
        self._features: np.ndarray | None = None
        self._labels: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.samples)

    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def images(self) -> np.ndarray:
        if self._images is None:
            if self.samples:
                self._images = np.stack([s.image.data for s in self.samples])
            else:
                self._images = np.zeros((0, *self.image_shape))
        return self._images

    def features(self) -> np.ndarray:
        if self._features is None:
            if self.samples:
                self._features = np.stack([s.features.data for s in self.samples])
            else:
                self._features = np.zeros((0, self.n_features))
        return self._features

    def labels(self) -> np.ndarray:
        if self._labels is None:
            self._labels = np.array([s.label for s in self.samples], dtype=np.int64)
        return self._labels

    def subset(self, indices: Iterable[int], provenance_note: Mapping | None = None) -> "Dataset":
        prov = dict(self.provenance)
        if provenance_note:
            prov.update(provenance_note)
        return Dataset([self.samples[i] for i in indices], self.image_shape,
                       self.n_features, self.n_classes, prov)


@dataclass
class Normalizer:
    """Per-feature centering and scaling fitted on a training split.

    Features whose population standard deviation is below 1e-12 are
    flagged constant and always map to 0.
    """
    mean: np.ndarray
    std: np.ndarray
    constant_mask: np.ndarray

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        self.constant_mask = np.asarray(self.constant_mask, dtype=bool)
        if not (self.mean.shape == self.std.shape == self.constant_mask.shape) \
                or self.mean.ndim != 1:
            raise ShapeError("normalizer fields must be matching vectors")
        if (self.std < 0).any():
            raise DataError("normalizer std must be non-negative")

    def transform(self, features: np.ndarray) -> np.ndarray:
        if features.ndim != 2 or features.shape[1] != self.mean.shape[0]:
            raise ShapeError(
                f"normalizer fitted on {self.mean.shape[0]} features, "
                f"got matrix {list(features.shape)}")
        safe_std = np.where(self.constant_mask, 1.0, self.std)
        out = (features - self.mean) / safe_std
        return np.where(self.constant_mask, 0.0, out)

    def to_dict(self) -> dict:
        return {
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
            "constant_mask": [bool(v) for v in self.constant_mask],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Normalizer":
        try:
            return cls(mean=np.asarray(d["mean"], dtype=np.float64),
                       std=np.asarray(d["std"], dtype=np.float64),
                       constant_mask=np.asarray(d["constant_mask"], dtype=bool))
        except KeyError as exc:
            raise FormatError(f"normalizer json missing key {exc}") from None


def zscore_fit(train: Dataset) -> Normalizer:
    """Fit per-feature mean and population standard deviation on ``train``."""
    if len(train) == 0:
        raise DataError("cannot fit a normalizer on an empty dataset")
    feats = train.features()
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    return Normalizer(mean=mean, std=std, constant_mask=std < _CONST_STD)


def zscore_apply(norm: Normalizer, ds: Dataset) -> Dataset:
    """New dataset whose features are ``(x - mean) / std`` under ``norm``."""
    transformed = norm.transform(ds.features())
    samples = [
        Sample(id=s.id, image=s.image, features=Tensor(transformed[i], _own=True),
               label=s.label)
        for i, s in enumerate(ds.samples)
    ]
    prov = dict(ds.provenance)
    prov["normalized"] = True
    return Dataset(samples, ds.image_shape, ds.n_features, ds.n_classes, prov)


@dataclass
class SynthSpec:
    """Parameters of the synthetic two-modality benchmark generator.

    ``image_reliability`` / ``feature_reliability`` are the probabilities
    that each modality's evidence agrees with the true label; both must
    exceed 0.5 so the evidence is informative.  ``pixel_noise`` is the
    Gaussian sigma added to the unit-amplitude image template.
    """
    n_samples: int
    image_shape: tuple[int, int, int] = (1, 32, 32)
    n_features: int = 16
    n_informative: int = 8
    n_classes: int = 2
    image_reliability: float = 0.8
    feature_reliability: float = 0.8
    pixel_noise: float = 5.0
    class_balance: tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        self.image_shape = tuple(int(d) for d in self.image_shape)
        if self.n_samples < 1:
            raise ConfigError(f"n_samples must be >= 1, got {self.n_samples}")
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise ConfigError(f"image_shape must be [C,H,W] >= 1, got {list(self.image_shape)}")
        if not 1 <= self.n_informative <= self.n_features:
            raise ConfigError(
                f"n_informative must be in [1, {self.n_features}], got {self.n_informative}")
        if self.n_classes != 2:
            raise ConfigError(
                f"the synthetic generator renders two templates and is binary-only; "
                f"got n_classes={self.n_classes}")
        for name, r in (("image_reliability", self.image_reliability),
                        ("feature_reliability", self.feature_reliability)):
            if not 0.5 < r <= 1.0:
                raise ConfigError(f"{name} must be in (0.5, 1], got {r}")
        if self.pixel_noise < 0:
            raise ConfigError(f"pixel_noise must be >= 0, got {self.pixel_noise}")
        if self.class_balance is not None:
            self.class_balance = tuple(float(p) for p in self.class_balance)
            if len(self.class_balance) != self.n_classes:
                raise ConfigError(
                    f"class_balance needs {self.n_classes} entries, "
                    f"got {len(self.class_balance)}")
            if min(self.class_balance) <= 0 or abs(sum(self.class_balance) - 1.0) > 1e-9:
                raise ConfigError("class_balance must be positive and sum to 1")

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "image_shape": list(self.image_shape),
            "n_features": self.n_features,
            "n_informative": self.n_informative,
            "n_classes": self.n_classes,
            "image_reliability": self.image_reliability,
            "feature_reliability": self.feature_reliability,
            "pixel_noise": self.pixel_noise,
            "class_balance": list(self.class_balance) if self.class_balance else None,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthSpec":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown generator spec keys: {sorted(extra)}")
        kwargs = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"bad generator spec: {exc}") from None


def render_template(class_index: int, image_shape: Sequence[int]) -> np.ndarray:
    """Noise-free evidence image for one class, amplitude 1.

    Class 0 is a centered filled disc; class 1 is a diagonal cross.  The
    same pattern is stamped onto every channel.
    """
    c, h, w = (int(d) for d in image_shape)
    if class_index not in (0, 1):
        raise ConfigError(f"templates exist for classes 0 and 1, got {class_index}")
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    if class_index == 0:
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        radius = min(h, w) / 4.0
        mask = (rows - cy) ** 2 + (cols - cx) ** 2 <= radius ** 2
    else:
        thickness = max(1.0, min(h, w) / 16.0)
        scale = (h - 1) / max(1, w - 1)
        main = np.abs(rows - cols * scale) <= thickness
        anti = np.abs(rows - ((h - 1) - cols * scale)) <= thickness
        mask = main | anti
    plane = mask.astype(np.float64)
    return np.broadcast_to(plane, (c, h, w)).copy()


def generate_synthetic(spec: SynthSpec) -> Dataset:
    """Draw a dataset from ``spec``; identical specs yield identical bytes.

    Per sample: a label, an image-evidence class that agrees with the
    label with probability ``image_reliability`` (its template plus
    pixel noise becomes the image), and a feature-evidence class that
    agrees with probability ``feature_reliability`` (informative features
    are Normal(+1,1) for class 1 evidence, Normal(-1,1) for class 0;
    the rest are Normal(0,1) nuisance).  Informative features occupy
    indices ``0..n_informative-1``.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n_samples
    balance = spec.class_balance or tuple(1.0 / spec.n_classes
                                          for _ in range(spec.n_classes))
    labels = np.searchsorted(np.cumsum(balance), rng.random(n)).astype(np.int64)
    labels = np.minimum(labels, spec.n_classes - 1)

    img_evidence = np.where(rng.random(n) < spec.image_reliability, labels, 1 - labels)
    feat_evidence = np.where(rng.random(n) < spec.feature_reliability, labels, 1 - labels)

    templates = np.stack([render_template(k, spec.image_shape) for k in range(2)])
    images = templates[img_evidence]
    if spec.pixel_noise > 0:
        images = images + rng.normal(0.0, spec.pixel_noise, size=images.shape)
    else:
        images = images.copy()

    features = rng.normal(0.0, 1.0, size=(n, spec.n_features))
    signs = 2.0 * feat_evidence - 1.0
    features[:, :spec.n_informative] += signs[:, None]

    width = max(6, len(str(n - 1)))
    samples = [
        Sample(id=f"s{i:0{width}d}", image=Tensor(images[i], _own=True),
               features=Tensor(features[i], _own=True), label=int(labels[i]))
        for i in range(n)
    ]
    provenance = {"kind": "synthetic", "spec": spec.to_dict()}
    return Dataset(samples, spec.image_shape, spec.n_features, spec.n_classes,
                   provenance)


def _write_atomic(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def _float_repr(v: float) -> str:
    # repr of a Python float is the shortest string that parses back to
    # the same 64-bit value, which is exactly the round-trip we need.
    return repr(float(v))


def save_dataset(ds: Dataset, out_dir) -> Path:
    """Write the dataset directory; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    _write_atomic(out / "images.bin", ds.images().astype("<f8").tobytes())

    feat_lines = ["id," + ",".join(f"f{j}" for j in range(ds.n_features))]
    for s in ds.samples:
        feat_lines.append(s.id + "," + ",".join(_float_repr(v) for v in s.features.data))
    _write_atomic(out / "features.csv", ("\n".join(feat_lines) + "\n").encode("utf-8"))

    label_lines = ["id,label"] + [f"{s.id},{s.label}" for s in ds.samples]
    _write_atomic(out / "labels.csv", ("\n".join(label_lines) + "\n").encode("utf-8"))

    manifest = {
        "format_version": FORMAT_VERSION,
        "name": ds.provenance.get("name", ds.provenance.get("kind", "dataset")),
        "n_samples": len(ds),
        "image_shape": list(ds.image_shape),
        "n_features": ds.n_features,
        "n_classes": ds.n_classes,
        "files": {"images": "images.bin", "features": "features.csv",
                  "labels": "labels.csv"},
        "provenance": ds.provenance,
    }
    payload = json.dumps(manifest, indent=2, sort_keys=True).encode("utf-8") + b"\n"
    manifest_path = out / "manifest.json"
    _write_atomic(manifest_path, payload)
    return manifest_path


def load_dataset(manifest_path) -> Dataset:
    """Read a dataset directory back; inverse of :func:`save_dataset`.

    ``manifest_path`` may be the manifest file or its directory.
    """
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        manifest = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: not valid manifest JSON: {exc}") from None
    for key in ("format_version", "n_samples", "image_shape", "n_features",
                "n_classes", "files"):
        if key not in manifest:
            raise FormatError(f"{path}: manifest missing key {key!r}")
    if manifest["format_version"] != FORMAT_VERSION:
        raise FormatError(
            f"{path}: unsupported format_version {manifest['format_version']!r}")
    n = int(manifest["n_samples"])
    image_shape = tuple(int(d) for d in manifest["image_shape"])
    n_features = int(manifest["n_features"])
    n_classes = int(manifest["n_classes"])
    base = path.parent

    with open(base / manifest["files"]["images"], "rb") as fh:
        blob = fh.read()
    expected = n * int(np.prod(image_shape))
    pixels = np.frombuffer(blob, dtype="<f8")
    if pixels.size != expected:
        raise FormatError(
            f"images payload holds {pixels.size} values, manifest implies {expected}")
    images = pixels.astype(np.float64).reshape((n, *image_shape))

    ids, rows = _read_csv_rows(base / manifest["files"]["features"],
                               ["id"] + [f"f{j}" for j in range(n_features)], n)
    try:
        features = np.array([[float(v) for v in row] for row in rows], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"features.csv: non-numeric value: {exc}") from None
    features = features.reshape((n, n_features))

    label_ids, label_rows = _read_csv_rows(base / manifest["files"]["labels"],
                                           ["id", "label"], n)
    if label_ids != ids:
        raise FormatError("labels.csv sample ids do not match features.csv")
    try:
        labels = [int(row[0]) for row in label_rows]
    except ValueError as exc:
        raise FormatError(f"labels.csv: non-integer label: {exc}") from None
    for sid, y in zip(ids, labels):
        if not 0 <= y < n_classes:
            raise DataError(f"sample {sid}: label {y} outside [0, {n_classes})")

    samples = [
        Sample(id=ids[i], image=Tensor(images[i], _own=True),
               features=Tensor(features[i], _own=True), label=labels[i])
        for i in range(n)
    ]
    return Dataset(samples, image_shape, n_features, n_classes,
                   manifest.get("provenance", {}))


def _read_csv_rows(path: Path, header: list[str], n: int) -> tuple[list[str], list[list[str]]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows or rows[0] != header:
        raise FormatError(f"{path.name}: expected header {','.join(header)}")
    body = rows[1:]
    if len(body) != n:
        raise FormatError(f"{path.name}: {len(body)} rows, manifest says {n}")
    ids = []
    values = []
    for row in body:
        if len(row) != len(header):
            raise FormatError(f"{path.name}: row with {len(row)} fields, "
                              f"expected {len(header)}")
        ids.append(row[0])
        values.append(row[1:])
    return ids, values


def split(ds: Dataset, train_fraction: float, seed: int,
          stratified: bool = True) -> tuple[Dataset, Dataset]:
    """Deterministic disjoint train/test split.

    Stratified mode keeps each class's train share within one sample of
    ``round(train_fraction * class_count)`` while making the overall
    train size exactly ``round(train_fraction * n)``; both sides keep at
    least one sample of every class.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(ds)
    if n < 2:
        raise DataError(f"cannot split a dataset of {n} samples")
    rng = np.random.default_rng(seed)
    if not stratified:
        target = min(max(int(np.floor(train_fraction * n + 0.5)), 1), n - 1)
        perm = rng.permutation(n)
        train_idx = sorted(int(i) for i in perm[:target])
        test_idx = sorted(int(i) for i in perm[target:])
    else:
        labels = ds.labels()
        classes = sorted(int(c) for c in np.unique(labels))
        counts = {c: int((labels == c).sum()) for c in classes}
        for c in classes:
            if counts[c] < 2:
                raise DataError(
                    f"stratified split needs >= 2 samples per class; "
                    f"class {c} has {counts[c]}")
        target = int(np.floor(train_fraction * n + 0.5))
        target = min(max(target, len(classes)), n - len(classes))
        base = {c: int(np.floor(train_fraction * counts[c])) for c in classes}
        # Hand out the remaining train slots by largest fractional part,
        # ties toward the lower class index.
        fractional = sorted(
            classes,
            key=lambda c: (-(train_fraction * counts[c] - base[c]), c))
        remainder = target - sum(base.values())
        take = dict(base)
        for c in fractional:
            if remainder <= 0:
                break
            if take[c] < counts[c] - 1:
                take[c] += 1
                remainder -= 1
        for c in classes:
            take[c] = min(max(take[c], 1), counts[c] - 1)
        train_idx = []
        test_idx = []
        for c in classes:
            members = np.flatnonzero(labels == c)
            perm = members[rng.permutation(len(members))]
            train_idx += [int(i) for i in perm[:take[c]]]
            test_idx += [int(i) for i in perm[take[c]:]]
        train_idx.sort()
        test_idx.sort()
    note = {"split_seed": int(seed), "train_fraction": float(train_fraction),
            "stratified": bool(stratified)}
    train = ds.subset(train_idx, {**note, "split": "train"})
    test = ds.subset(test_idx, {**note, "split": "test"})
    return train, test
