"""Datasets: IDX / CIFAR-binary ingestion, synthetic clusters, clean-label poisoning.

Images are float32 arrays of shape (N, C, H, W) with values in [0, 1].
Labels are stored 0-based; see :func:`plab.models.report_label` for the
1-based reporting convention.
"""
from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import DTYPE, make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    classes: int | None = None

    def __post_init__(self):
        images = np.asarray(self.images, dtype=DTYPE)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got {images.shape}")
        if len(images) != len(labels):
            raise ValueError(f"{len(images)} images but {len(labels)} labels")
        if images.size and (images.min() < 0 or images.max() > 1):
            raise ValueError("image values must lie in [0, 1]")
        m = self.classes
        if m is None:
            m = max(int(labels.max()) + 1, 2) if len(labels) else 2
        if len(labels) and (labels.min() < 0 or labels.max() >= m):
            raise ValueError(f"labels outside [0, {m})")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "classes", int(m))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], name or self.name, self.classes)

    def with_label(self, label: int) -> "Dataset":
        idx = np.flatnonzero(self.labels == label)
        if idx.size == 0:
            raise ValueError(f"no samples with label {label}")
        return self.subset(idx, f"{self.name}[y={label}]")

    def without_label(self, label: int) -> "Dataset":
        idx = np.flatnonzero(self.labels != label)
        if idx.size == 0:
            raise ValueError(f"every sample has label {label}")
        return self.subset(idx, f"{self.name}[y!={label}]")

    def split(self, fraction: float, seed: int) -> tuple["Dataset", "Dataset"]:
        """Random split; the first part holds ``floor(fraction * N)`` samples."""
        rng = make_rng(seed, "split", self.name)
        perm = rng.permutation(len(self))
        k = int(math.floor(fraction * len(self) + 1e-9))
        return (self.subset(np.sort(perm[:k]), f"{self.name}.a"),
                self.subset(np.sort(perm[k:]), f"{self.name}.b"))


# --------------------------------------------------------------------------
# file formats


def _open(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def load_idx(images_path, labels_path, name: str = "idx") -> Dataset:
    """Read an IDX image/label file pair (MNIST layout); pixels are scaled by 1/255."""
    with _open(images_path) as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise DataFormatError("IDX image header truncated")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(f"bad IDX image magic 0x{magic:08x}")
    if len(raw) - 16 != n * rows * cols:
        raise DataFormatError("IDX image payload truncated or oversized")
    pix = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(n, 1, rows, cols)

    with _open(labels_path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise DataFormatError("IDX label header truncated")
    magic, n_lab = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise DataFormatError(f"bad IDX label magic 0x{magic:08x}")
    if len(raw) - 8 != n_lab:
        raise DataFormatError("IDX label payload truncated or oversized")
    if n_lab != n:
        raise DataFormatError(f"{n} images but {n_lab} labels")
    labels = np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset(pix.astype(DTYPE) / DTYPE(255), labels, name,
                   max(10, int(labels.max()) + 1 if n else 10))


def load_cifar_binary(paths: Sequence, name: str = "cifar") -> Dataset:
    """Read CIFAR-10 binary batches: records of 1 label byte + 3072 CHW pixel bytes."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    for p in paths:
        with _open(p) as fh:
            raw = fh.read()
        if len(raw) % CIFAR_RECORD:
            raise DataFormatError(f"{p}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    img = np.concatenate(images).astype(DTYPE) / DTYPE(255)
    return Dataset(img, np.concatenate(labels), name, 10)


def write_idx(images_path, labels_path, pixels: np.ndarray, labels: Sequence[int]) -> None:
    """Write uint8 pixels (N, H, W) and labels as an IDX pair."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    n, rows, cols = pixels.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols)
                                  + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels))
                                  + np.asarray(labels, dtype=np.uint8).tobytes())


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthSpec:
    classes: int = 4
    per_class: int = 100
    shape: tuple = (1, 8, 8)
    sigma: float = 0.1
    centers: tuple | None = None        # optional explicit (classes, n) centers
    center_low: float = 0.25
    center_high: float = 0.75

    def to_dict(self) -> dict:
        return {"classes": self.classes, "per_class": self.per_class,
                "shape": list(self.shape), "sigma": self.sigma,
                "centers": None if self.centers is None else [list(c) for c in self.centers],
                "center_low": self.center_low, "center_high": self.center_high}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        d["shape"] = tuple(d.get("shape", (1, 8, 8)))
        if d.get("centers") is not None:
            d["centers"] = tuple(tuple(c) for c in d["centers"])
        return cls(**d)


def synth_clusters(spec: SynthSpec, seed: int, name: str = "synth") -> Dataset:
    """Gaussian clusters around per-class centers, clamped to [0, 1].

    Samples are ordered class by class.  Centers are drawn uniformly from
    [center_low, center_high]^n unless given explicitly.
    """
    if spec.sigma < 0:
        raise ValueError("sigma must be non-negative")
    if spec.classes < 2 or spec.per_class < 1:
        raise ValueError("need >= 2 classes and >= 1 sample per class")
    shape = tuple(int(s) for s in spec.shape)
    n = int(np.prod(shape))
    rng = make_rng(seed, "synth_clusters")
    if spec.centers is not None:
        centers = np.asarray(spec.centers, dtype=np.float64)
        if centers.shape != (spec.classes, n):
            raise ValueError(f"centers must have shape {(spec.classes, n)}")
    else:
        centers = rng.uniform(spec.center_low, spec.center_high, size=(spec.classes, n))
    noise = rng.normal(0.0, 1.0, size=(spec.classes, spec.per_class, n)) * spec.sigma
    x = np.clip(centers[:, None, :] + noise, 0.0, 1.0)
    labels = np.repeat(np.arange(spec.classes), spec.per_class)
    return Dataset(x.reshape(-1, *shape).astype(DTYPE), labels, name, spec.classes)


# --------------------------------------------------------------------------
# clean-label poisoning


@dataclass(frozen=True)
class PoisonPlan:
    target: int                 # internal 0-based label l_p
    rate: float
    seed: int
    selected_indices: tuple = ()

    def to_dict(self) -> dict:
        return {"target": self.target, "rate": self.rate, "seed": self.seed,
                "selected_indices": list(self.selected_indices)}


def poison_count(n_target: int, rate: float) -> int:
    return int(math.floor(rate * n_target + 1e-9))


def plan_poison(base: Dataset, target: int, rate: float, seed: int) -> PoisonPlan:
    """Uniformly choose ``floor(rate * #target)`` target-class indices."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"poison rate {rate} outside [0, 1]")
    candidates = np.flatnonzero(base.labels == target)
    k = poison_count(len(candidates), rate)
    rng = make_rng(seed, "plan_poison", target)
    chosen = np.sort(rng.choice(candidates, size=k, replace=False)) if k else np.array([], int)
    return PoisonPlan(target, float(rate), seed, tuple(int(i) for i in chosen))


@dataclass
class PoisonedDataset:
    base: Dataset
    plan: PoisonPlan
    triggers: object
    images: np.ndarray
    flags: np.ndarray = field(repr=False)

    @property
    def labels(self) -> np.ndarray:
        return self.base.labels

    def as_dataset(self) -> Dataset:
        return Dataset(self.images, self.base.labels, f"{self.base.name}+poison",
                       self.base.classes)

    def __len__(self) -> int:
        return len(self.base)


def apply_trigger(x: np.ndarray, p: np.ndarray) -> np.ndarray:
    """clamp(x + P(x), 0, 1) in float32."""
    return np.clip(np.asarray(x, DTYPE) + np.asarray(p, DTYPE), 0.0, 1.0).astype(DTYPE)


def build_poisoned_set(base: Dataset, triggers, target: int, rate: float,
                       seed: int) -> PoisonedDataset:
    """Perturb a random ``rate`` fraction of the target class; labels stay as they are.

    ``triggers`` must provide ``perturbations`` aligned with ``base`` and a
    ``check_budget()`` method (see :class:`plab.triggers.TriggerSet`).
    """
    plan = plan_poison(base, target, rate, seed)
    idx = np.asarray(plan.selected_indices, dtype=np.int64)
    pert = np.asarray(triggers.perturbations)
    if idx.size:
        if pert.shape[0] != len(base) and pert.shape[0] != 1:
            raise ValueError("triggers do not cover the base dataset")
        triggers.check_budget(idx if pert.shape[0] != 1 else None)
    images = base.images.copy()
    flags = np.zeros(len(base), dtype=bool)
    if idx.size:
        p = pert[idx] if pert.shape[0] != 1 else np.broadcast_to(pert, (idx.size,) + pert.shape[1:])
        images[idx] = apply_trigger(base.images[idx], p)
        flags[idx] = True
    return PoisonedDataset(base, plan, triggers, images, flags)
