"""Procedural synthetic datasets standing in for real benchmark suites.

Each class is a fixed low-frequency prototype image (a seeded sum of
three 2-D cosines) plus per-sample Gaussian pixel noise, so classes are
separable by a small encoder but not by any single pixel.  Distinct
``family_id`` values emulate distinct datasets with disjoint class
pools, and simple pixel shifts emulate domain-shifted variants.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from . import vocab
from .errors import InputError
from .masking import rng_from

SHIFT_KINDS = ("none", "brightness", "noise", "invert")

DEFAULT_FAMILIES = 6
DEFAULT_CLASSES_PER_FAMILY = 8
DEFAULT_SAMPLES_PER_CLASS = 64
DEFAULT_NOISE_STD = 0.18


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    """Everything needed to regenerate one dataset bit-for-bit."""

    n_classes: int = DEFAULT_CLASSES_PER_FAMILY
    prototypes_seed: int = 0
    samples_per_class: int = DEFAULT_SAMPLES_PER_CLASS
    noise_std: float = DEFAULT_NOISE_STD
    family_id: int = 0
    image_side: int = 16
    shift: str = "none"
    shift_magnitude: float = 0.0

    def __post_init__(self):
        if self.n_classes < 4:
            raise InputError("need at least 4 classes so each split half has 2")
        if self.shift not in SHIFT_KINDS:
            raise InputError(f"unknown shift kind {self.shift!r}")

    def to_dict(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "prototypes_seed": self.prototypes_seed,
            "samples_per_class": self.samples_per_class,
            "noise_std": self.noise_std,
            "family_id": self.family_id,
            "image_side": self.image_side,
            "shift": self.shift,
            "shift_magnitude": self.shift_magnitude,
        }


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    label: int
    class_name: str


class Dataset:
    """Immutable image/label collection generated from a spec."""

    def __init__(self, spec: SyntheticDatasetSpec, images: np.ndarray,
                 labels: np.ndarray, class_names: tuple[str, ...]):
        images = np.ascontiguousarray(images, dtype=np.float64)
        images.setflags(write=False)
        labels = np.ascontiguousarray(labels, dtype=np.int64)
        labels.setflags(write=False)
        self.spec = spec
        self.images = images
        self.labels = labels
        self.class_names = class_names

    def __len__(self) -> int:
        return self.images.shape[0]

    def sample(self, i: int) -> Sample:
        label = int(self.labels[i])
        return Sample(self.images[i], label, self.class_names[label])

    def class_sample_ids(self, label: int) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.labels == label)]

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()

    def manifest(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "n_samples": len(self),
            "class_names": list(self.class_names),
            "pixel_checksum": self.checksum(),
        }


def _class_prototype(side: int, rng: np.random.Generator) -> np.ndarray:
    """Sum of three low-frequency 2-D cosines, rescaled into [0, 1]."""
    ys, xs = np.mgrid[0:side, 0:side].astype(np.float64)
    proto = np.zeros((side, side))
    for _ in range(3):
        amp = rng.uniform(0.5, 1.0)
        fx = rng.integers(1, 4)
        fy = rng.integers(1, 4)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        proto += amp * np.cos(2.0 * np.pi * (fx * xs + fy * ys) / side + phase)
    lo, hi = proto.min(), proto.max()
    return (proto - lo) / (hi - lo + 1e-12)


def family_class_names(family_id: int, n_classes: int) -> tuple[str, ...]:
    start = family_id * n_classes
    if start + n_classes > len(vocab.CLASS_WORDS):
        raise InputError(
            f"family {family_id} with {n_classes} classes exceeds the "
            f"{len(vocab.CLASS_WORDS)}-word class vocabulary"
        )
    return vocab.CLASS_WORDS[start : start + n_classes]


def generate_dataset(spec: SyntheticDatasetSpec, noise_tag: str = "bench") -> Dataset:
    """Deterministically generate the dataset described by ``spec``.

    ``noise_tag`` names the per-sample noise stream; the pretraining
    corpus uses a different tag so its pixels never coincide with the
    benchmark samples even though the class prototypes are shared.
    """
    names = family_class_names(spec.family_id, spec.n_classes)
    side = spec.image_side
    images = np.empty((spec.n_classes * spec.samples_per_class, side, side))
    labels = np.empty(spec.n_classes * spec.samples_per_class, dtype=np.int64)
    for c in range(spec.n_classes):
        proto = _class_prototype(
            side, rng_from(spec.prototypes_seed, "proto", spec.family_id, c)
        )
        noise_rng = rng_from(spec.prototypes_seed, noise_tag, spec.family_id, c)
        noise = noise_rng.normal(0.0, spec.noise_std,
                                 size=(spec.samples_per_class, side, side))
        block = np.clip(proto[None, :, :] + noise, 0.0, 1.0)
        start = c * spec.samples_per_class
        images[start : start + spec.samples_per_class] = block
        labels[start : start + spec.samples_per_class] = c
    ds = Dataset(replace(spec, shift="none", shift_magnitude=0.0), images, labels, names)
    if spec.shift != "none":
        ds = apply_shift(ds, spec.shift, spec.shift_magnitude)
    return ds


def apply_shift(dataset: Dataset, kind: str, magnitude: float) -> Dataset:
    """Pixel-level domain shift; labels unchanged, values clamped to [0, 1]."""
    if kind not in SHIFT_KINDS:
        raise InputError(f"unknown shift kind {kind!r}")
    images = dataset.images
    if kind == "none":
        shifted = images.copy()
    elif kind == "brightness":
        shifted = images + magnitude
    elif kind == "invert":
        shifted = 1.0 - images
    else:  # noise
        rng = rng_from(dataset.spec.prototypes_seed, "shift-noise",
                       dataset.spec.family_id)
        shifted = images + rng.normal(0.0, magnitude, size=images.shape)
    shifted = np.clip(shifted, 0.0, 1.0)
    spec = replace(dataset.spec, shift=kind, shift_magnitude=magnitude)
    return Dataset(spec, shifted, dataset.labels.copy(), dataset.class_names)


@dataclass(frozen=True)
class SplitPlan:
    """Base/new class halves plus K-shot training and held-out eval ids."""

    base_classes: tuple[int, ...]
    new_classes: tuple[int, ...]
    k: int
    train_ids: tuple[int, ...]
    base_eval_ids: tuple[int, ...]
    new_eval_ids: tuple[int, ...]


def make_split(dataset: Dataset, k: int, split_seed: int,
               eval_per_class: int = 32) -> SplitPlan:
    """Halve the classes into base/new and draw K-shot training samples.

    Training samples come only from base classes; eval samples are drawn
    from the opposite end of each class's seeded permutation, so the two
    pools never overlap.
    """
    spec = dataset.spec
    if k < 1 or k + eval_per_class > spec.samples_per_class:
        raise InputError(
            f"K={k} with eval_per_class={eval_per_class} does not fit in "
            f"{spec.samples_per_class} samples per class"
        )
    class_perm = rng_from(split_seed, "classes", spec.family_id).permutation(
        spec.n_classes
    )
    half = spec.n_classes // 2
    base = tuple(sorted(int(c) for c in class_perm[:half]))
    new = tuple(sorted(int(c) for c in class_perm[half:]))

    train_ids: list[int] = []
    base_eval: list[int] = []
    new_eval: list[int] = []
    for c in range(spec.n_classes):
        ids = np.asarray(dataset.class_sample_ids(c))
        perm = rng_from(split_seed, "samples", spec.family_id, c).permutation(len(ids))
        ordered = ids[perm]
        if c in base:
            train_ids.extend(int(i) for i in ordered[:k])
            base_eval.extend(int(i) for i in ordered[-eval_per_class:])
        else:
            new_eval.extend(int(i) for i in ordered[-eval_per_class:])
    return SplitPlan(base, new, k, tuple(train_ids),
                     tuple(base_eval), tuple(new_eval))


def default_suite(n_families: int = DEFAULT_FAMILIES,
                  prototypes_seed: int = 0,
                  noise_std: float = DEFAULT_NOISE_STD) -> list[SyntheticDatasetSpec]:
    """Specs for the default benchmark suite (distinct class pools per family)."""
    return [
        SyntheticDatasetSpec(
            family_id=f, prototypes_seed=prototypes_seed, noise_std=noise_std
        )
        for f in range(n_families)
    ]
