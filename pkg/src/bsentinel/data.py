"""Dataset ingestion, synthetic generation, and leave-one-attack-out set
construction with balanced clean/backdoored halves."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import cachefile, triggers
from .triggers import KINDS, PROVENANCE_CLEAN, PROVENANCE_CODES, PROVENANCE_NAMES, TriggerSpec

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 1024 pixel bytes
CIFAR_CLASSES = 10

_LOO_SALT = 0x100
_BATCH_SALT = 0x200


class DatasetFormatError(ValueError):
    """Raw dataset input is malformed."""


@dataclass(frozen=True)
class Sample:
    image: np.ndarray      # (C, H, W) float32 in [0, 1]
    class_label: int
    detection_label: int   # 0 clean, 1 backdoored
    provenance: str        # "clean" or an attack kind

    def __post_init__(self):
        if self.detection_label not in (0, 1):
            raise ValueError(f"detection label must be 0 or 1, got {self.detection_label}")
        backdoored = self.provenance != PROVENANCE_CLEAN
        if bool(self.detection_label) != backdoored:
            raise ValueError(
                f"detection label {self.detection_label} inconsistent with provenance {self.provenance!r}"
            )
        if self.provenance != PROVENANCE_CLEAN and self.provenance not in KINDS:
            raise ValueError(f"unknown provenance {self.provenance!r}")


def clean_sample(image: np.ndarray, class_label: int) -> Sample:
    return Sample(image=image, class_label=class_label, detection_label=0, provenance=PROVENANCE_CLEAN)


@dataclass
class Dataset:
    samples: list[Sample]
    num_classes: int

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    @property
    def image_shape(self) -> tuple[int, ...]:
        return self.samples[0].image.shape


# ---------------------------------------------------------------------------
# loaders


def load_cifar10_binary(path) -> Dataset:
    """Parse CIFAR-10 binary batches: per record 1 label byte, then 1024 R,
    1024 G, 1024 B bytes in row-major 32x32 order, scaled into [0, 1].

    ``path`` may be one .bin file, a directory of them, or a sequence of files.
    """
    if isinstance(path, (str, Path)):
        p = Path(path)
        if p.is_dir():
            files = sorted(p.glob("*.bin"))
            if not files:
                raise FileNotFoundError(f"no .bin files under {p}")
        else:
            files = [p]
    else:
        files = [Path(f) for f in path]

    samples: list[Sample] = []
    for f in files:
        if not f.exists():
            raise FileNotFoundError(f"CIFAR-10 batch file not found: {f}")
        raw = np.frombuffer(f.read_bytes(), dtype=np.uint8)
        if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES != 0:
            raise DatasetFormatError(
                f"{f}: truncated file, {raw.size} bytes is not a multiple of {CIFAR_RECORD_BYTES}"
            )
        records = raw.reshape(-1, CIFAR_RECORD_BYTES)
        labels = records[:, 0]
        bad = np.nonzero(labels >= CIFAR_CLASSES)[0]
        if bad.size:
            raise DatasetFormatError(
                f"{f}: label byte {int(labels[bad[0]])} out of range [0, {CIFAR_CLASSES}) at record {int(bad[0])}"
            )
        pixels = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
        for label, image in zip(labels, pixels):
            samples.append(clean_sample(image, int(label)))
    return Dataset(samples=samples, num_classes=CIFAR_CLASSES)


def load_image_directory(path, labels_csv, resize_to: tuple[int, int] = (32, 32),
                         num_classes: int | None = None) -> Dataset:
    """Load PNG/PPM images listed in a ``filename,label`` CSV, bilinear-resized
    to (H, W); samples come back in CSV order."""
    from PIL import Image, UnidentifiedImageError

    root = Path(path)
    csv_path = Path(labels_csv)
    if not csv_path.exists():
        raise FileNotFoundError(f"labels CSV not found: {csv_path}")
    with csv_path.open(newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError(f"{csv_path}: empty CSV") from None
        if [h.strip() for h in header] != ["filename", "label"]:
            raise DatasetFormatError(f"{csv_path}: expected header 'filename,label', got {header}")
        rows = list(reader)

    h, w = int(resize_to[0]), int(resize_to[1])
    loaded: list[tuple[np.ndarray, int]] = []
    for row_no, row in enumerate(rows, start=2):
        if len(row) != 2:
            raise DatasetFormatError(f"{csv_path}:{row_no}: expected 2 columns, got {len(row)}")
        filename, label_text = row[0].strip(), row[1].strip()
        try:
            label = int(label_text)
        except ValueError:
            raise DatasetFormatError(f"{csv_path}:{row_no}: label {label_text!r} is not an integer") from None
        image_path = root / filename
        if not image_path.exists():
            raise FileNotFoundError(f"{csv_path}:{row_no}: image file not found: {image_path}")
        try:
            with Image.open(image_path) as img:
                rgb = img.convert("RGB").resize((w, h), Image.Resampling.BILINEAR)
        except UnidentifiedImageError:
            raise DatasetFormatError(f"{csv_path}:{row_no}: cannot decode image {image_path}") from None
        array = np.asarray(rgb, dtype=np.float32).transpose(2, 0, 1) / 255.0
        loaded.append((array, label))

    k = num_classes if num_classes is not None else (max(l for _, l in loaded) + 1 if loaded else 0)
    out: list[Sample] = []
    for array, label in loaded:
        if not (0 <= label < k):
            raise DatasetFormatError(f"label {label} out of range [0, {k})")
        out.append(clean_sample(array, label))
    return Dataset(samples=out, num_classes=k)


def generate_synthetic_dataset(n: int, num_classes: int, shape: Sequence[int], seed: int) -> Dataset:
    """Seeded class-conditional images: a distinct smooth base pattern per
    class plus Gaussian pixel noise, clipped to [0, 1]."""
    if n < num_classes:
        raise ValueError(f"need at least one sample per class: n={n} < classes={num_classes}")
    c, h, w = (int(v) for v in shape)
    rng = np.random.default_rng([seed, 0x515])
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")

    bases = []
    for _ in range(num_classes):
        base = np.empty((c, h, w), dtype=np.float32)
        for ch in range(c):
            fi, fj = rng.uniform(0.5, 3.0, size=2)
            pi, pj = rng.uniform(0.0, 2.0 * np.pi, size=2)
            base[ch] = 0.5 + 0.3 * np.sin(2 * np.pi * fi * ii / h + pi) * np.cos(2 * np.pi * fj * jj / w + pj)
        bases.append(base)

    counts = [n // num_classes + (1 if cls < n % num_classes else 0) for cls in range(num_classes)]
    samples: list[Sample] = []
    for cls, count in enumerate(counts):
        noise = rng.normal(0.0, 0.05, size=(count, c, h, w)).astype(np.float32)
        for i in range(count):
            image = np.clip(bases[cls] + noise[i], 0.0, 1.0)
            samples.append(clean_sample(image, cls))
    return Dataset(samples=samples, num_classes=num_classes)


# ---------------------------------------------------------------------------
# leave-one-attack-out construction


@dataclass(frozen=True)
class LooPlan:
    """One held-out attack; the remaining five are the training attacks."""

    held_out_attack: str
    seed: int = 0
    training_attacks: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        if self.held_out_attack not in KINDS:
            raise ValueError(f"unknown attack kind {self.held_out_attack!r}")
        object.__setattr__(
            self, "training_attacks", tuple(k for k in KINDS if k != self.held_out_attack)
        )


def split_counts(total: int, parts: int) -> list[int]:
    """Split as evenly as possible: floor(total/parts) each, remainder to the
    first total mod parts slots."""
    base, rem = divmod(total, parts)
    return [base + (1 if i < rem else 0) for i in range(parts)]


def loo_source_partition(n: int, training_attacks: Sequence[str], seed: int) -> dict[str, np.ndarray]:
    """Seeded permutation of clean indices, sliced per training attack.

    Drawing is without replacement across all five attacks, so every clean
    image sources at most one backdoored sample.
    """
    perm = np.random.default_rng([seed, _LOO_SALT]).permutation(n)
    counts = split_counts(n, len(training_attacks))
    partition: dict[str, np.ndarray] = {}
    offset = 0
    for kind, count in zip(training_attacks, counts):
        partition[kind] = perm[offset:offset + count]
        offset += count
    return partition


def _check_specs(specs: Mapping[str, TriggerSpec], kinds: Sequence[str]) -> None:
    for kind in kinds:
        spec = specs.get(kind)
        if spec is None:
            raise ValueError(f"missing trigger spec for attack kind {kind!r}")
        if spec.kind != kind:
            raise ValueError(f"spec registered under {kind!r} has kind {spec.kind!r}")


def build_loo_training_set(clean_train: Dataset, plan: LooPlan,
                           specs: Mapping[str, TriggerSpec]) -> Dataset:
    """All N clean samples plus N backdoored samples split across the five
    training attacks; the held-out attack contributes nothing."""
    _check_specs(specs, plan.training_attacks)
    n = len(clean_train)
    if n == 0:
        raise ValueError("clean training set is empty")
    partition = loo_source_partition(n, plan.training_attacks, plan.seed)

    samples = list(clean_train.samples)
    shape = clean_train.image_shape
    for kind in plan.training_attacks:
        realization = triggers.realize_trigger(specs[kind], shape)
        for idx in partition[kind]:
            src = clean_train[int(idx)]
            samples.append(
                Sample(
                    image=triggers.apply_trigger(src.image, realization),
                    class_label=src.class_label,
                    detection_label=1,
                    provenance=kind,
                )
            )
    return Dataset(samples=samples, num_classes=clean_train.num_classes)


def build_loo_test_set(clean_test: Dataset, plan: LooPlan, spec: TriggerSpec) -> Dataset:
    """All M clean test samples plus all M backdoored with the held-out attack."""
    if spec.kind != plan.held_out_attack:
        raise ValueError(
            f"kind mismatch: spec is {spec.kind!r} but the plan holds out {plan.held_out_attack!r}"
        )
    m = len(clean_test)
    if m == 0:
        raise ValueError("clean test set is empty")
    realization = triggers.realize_trigger(spec, clean_test.image_shape)
    samples = list(clean_test.samples)
    for src in clean_test:
        samples.append(
            Sample(
                image=triggers.apply_trigger(src.image, realization),
                class_label=src.class_label,
                detection_label=1,
                provenance=spec.kind,
            )
        )
    return Dataset(samples=samples, num_classes=clean_test.num_classes)


def contamination_count(dataset: Dataset, held_out: str) -> int:
    return sum(1 for s in dataset if s.provenance == held_out)


# ---------------------------------------------------------------------------
# batching


def batch_indices(n: int, batch_size: int, seed: int, epoch: int = 0) -> list[np.ndarray]:
    """Seeded permutation chunked into batches; the final short batch is kept."""
    if batch_size < 1:
        raise ValueError(f"batch size must be at least 1, got {batch_size}")
    perm = np.random.default_rng([seed, epoch, _BATCH_SALT]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def batch_iterator(dataset: Dataset, batch_size: int, shuffle_seed: int,
                   epoch: int = 0) -> Iterator[list[Sample]]:
    for chunk in batch_indices(len(dataset), batch_size, shuffle_seed, epoch):
        yield [dataset[int(i)] for i in chunk]


# ---------------------------------------------------------------------------
# dataset cache (BSEC container with pixel payloads)


def write_dataset_cache(path, dataset: Dataset) -> None:
    n = len(dataset)
    if n == 0:
        raise ValueError("refusing to cache an empty dataset")
    c, h, w = dataset.image_shape
    dim = c * h * w
    pixels = np.stack([s.image.reshape(dim) for s in dataset.samples]).astype(np.float32)
    ids = np.arange(n, dtype=np.uint64)
    prov = np.array([PROVENANCE_CODES[s.provenance] for s in dataset.samples], dtype=np.uint8)
    det = np.array([s.detection_label for s in dataset.samples], dtype=np.uint8)
    labels = np.array([[s.class_label] for s in dataset.samples], dtype=np.float32)
    zeros = np.zeros(n, dtype=np.uint8)
    sections = [
        cachefile.Section(
            tag=cachefile.SECTION_GEOMETRY,
            dim=4,
            ids=np.zeros(1, dtype=np.uint64),
            provenance=np.zeros(1, dtype=np.uint8),
            detection=np.zeros(1, dtype=np.uint8),
            vectors=np.array([[c, h, w, dataset.num_classes]], dtype=np.float32),
        ),
        cachefile.Section(tag=cachefile.SECTION_PIXELS, dim=dim, ids=ids,
                          provenance=prov, detection=det, vectors=pixels),
        cachefile.Section(tag=cachefile.SECTION_CLASS_LABELS, dim=1, ids=ids,
                          provenance=zeros, detection=zeros, vectors=labels),
    ]
    cachefile.write_container(path, sections)


def read_dataset_cache(path) -> Dataset:
    sections = {sec.tag: sec for sec in cachefile.read_container(path)}
    for tag, name in ((cachefile.SECTION_GEOMETRY, "geometry"),
                      (cachefile.SECTION_PIXELS, "pixels"),
                      (cachefile.SECTION_CLASS_LABELS, "class labels")):
        if tag not in sections:
            raise cachefile.CacheFormatError(f"dataset cache is missing its {name} section")
    geo = sections[cachefile.SECTION_GEOMETRY].vectors[0]
    c, h, w, num_classes = (int(round(v)) for v in geo)
    pix = sections[cachefile.SECTION_PIXELS]
    if pix.dim != c * h * w:
        raise cachefile.CacheFormatError(
            f"dimension mismatch: pixel records carry {pix.dim} floats, geometry implies {c * h * w}"
        )
    label_sec = sections[cachefile.SECTION_CLASS_LABELS]
    labels = {int(i): int(round(v[0])) for i, v in zip(label_sec.ids, label_sec.vectors)}

    samples = []
    for rec_id, prov_code, det, flat in zip(pix.ids, pix.provenance, pix.detection, pix.vectors):
        if int(rec_id) not in labels:
            raise cachefile.CacheFormatError(f"pixel record {int(rec_id)} has no class label record")
        samples.append(
            Sample(
                image=flat.reshape(c, h, w).copy(),
                class_label=labels[int(rec_id)],
                detection_label=int(det),
                provenance=PROVENANCE_NAMES[int(prov_code)],
            )
        )
    return Dataset(samples=samples, num_classes=num_classes)
