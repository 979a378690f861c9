"""Label parsing, stratified splitting and batch generation.

The label file follows the Plant Pathology 2020 layout::

    image_id,healthy,multiple_diseases,rust,scab
    Train_0,0,0,0,1
"""

from __future__ import annotations

import csv
import math
import os
import queue
import threading
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    ContractError,
    DataError,
    LabelFormatError,
    LabelIntegrityError,
    StratificationError,
)
from .imaging import IMAGENET_MEAN, IMAGENET_STD, AugmentConfig, augment, load_image, normalize
from .tensor import Tensor

CLASS_NAMES = ("healthy", "multiple_diseases", "rust", "scab")
CLASS_IDS = {name: i for i, name in enumerate(CLASS_NAMES)}
IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png", ".ppm", ".bmp")


@dataclass(frozen=True)
class SampleRecord:
    image_id: str
    image_path: Optional[Path]
    class_id: int

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.class_id]


def _parse_flag(text: str) -> Optional[int]:
    try:
        value = float(text)
    except ValueError:
        return None
    if value == 0.0:
        return 0
    if value == 1.0:
        return 1
    return None


def parse_labels(csv_path, image_dir=None) -> List[SampleRecord]:
    """Read the one-hot label CSV.

    Errors carry the 1-based file line number of the offending row. When
    ``image_dir`` is given, each record's path is resolved to
    ``<image_dir>/<image_id>.<ext>`` (first existing extension).
    """
    with open(csv_path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise LabelFormatError(f"{csv_path}: empty label file") from None
        missing = [c for c in ("image_id",) + CLASS_NAMES if c not in header]
        if missing:
            raise LabelFormatError(f"{csv_path}: header is missing column(s) {', '.join(missing)}")
        id_col = header.index("image_id")
        class_cols = [header.index(c) for c in CLASS_NAMES]

        records, seen = [], {}
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise LabelFormatError(
                    f"{csv_path}: row {line_no} has {len(row)} fields, expected {len(header)}"
                )
            image_id = row[id_col].strip()
            if not image_id:
                raise LabelFormatError(f"{csv_path}: row {line_no} has an empty image_id")
            if image_id in seen:
                raise LabelFormatError(
                    f"{csv_path}: duplicate image_id {image_id!r} on rows {seen[image_id]} and {line_no}"
                )
            seen[image_id] = line_no
            flags = [_parse_flag(row[c].strip()) for c in class_cols]
            if any(f is None for f in flags):
                raise LabelIntegrityError(
                    f"{csv_path}: row {line_no} has a non-binary label value", row=line_no
                )
            if sum(flags) != 1:
                raise LabelIntegrityError(
                    f"{csv_path}: row {line_no} ({image_id}) has {sum(flags)} positive labels, expected exactly 1",
                    row=line_no,
                )
            path = find_image(image_dir, image_id) if image_dir is not None else None
            records.append(SampleRecord(image_id, path, flags.index(1)))
    return records


def find_image(image_dir, image_id: str) -> Path:
    for ext in IMAGE_EXTENSIONS:
        candidate = Path(image_dir) / f"{image_id}{ext}"
        if candidate.exists():
            return candidate
    raise DataError(f"no image file for {image_id!r} in {image_dir}")


def class_counts(records: Iterable[SampleRecord]) -> Dict[int, int]:
    return dict(sorted(Counter(r.class_id for r in records).items()))


# splitting


def apportion_test_counts(sizes: Dict[str, int], test_fraction: float) -> Dict[str, int]:
    """Largest-remainder apportionment of ``round(test_fraction * total)`` test slots.

    Quotas are ``test_fraction * size`` per class. Leftover slots go to the
    largest fractional remainders, ties broken alphabetically by class name.
    Each class is then clamped to ``[1, size - 1]`` so both partitions contain it.
    """
    names = sorted(sizes)
    # exact rationals: float quotas such as 0.2 * 7 = 1.4000000000000001 would
    # break remainder ties that should fall back to the alphabetical rule
    frac = Fraction(repr(float(test_fraction)))
    total = sum(sizes.values())
    target = math.floor(frac * total + Fraction(1, 2))
    quotas = {n: frac * sizes[n] for n in names}
    counts = {n: math.floor(quotas[n]) for n in names}
    leftover = target - sum(counts.values())
    by_remainder = sorted(names, key=lambda n: (-(quotas[n] - counts[n]), n))
    for n in by_remainder[: max(leftover, 0)]:
        counts[n] += 1
    return {n: min(max(counts[n], 1), sizes[n] - 1) for n in names}


@dataclass
class SplitManifest:
    seed: int
    test_fraction: float
    train: List[str]
    test: List[str]
    train_counts: Dict[str, int] = field(default_factory=dict)
    test_counts: Dict[str, int] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [
            "# leafnet split manifest v1",
            f"# seed {self.seed}",
            f"# test_fraction {self.test_fraction!r}",
        ]
        for name in sorted(set(self.train_counts) | set(self.test_counts)):
            lines.append(
                f"# class {name} train {self.train_counts.get(name, 0)} test {self.test_counts.get(name, 0)}"
            )
        lines += [f"train {i}" for i in self.train]
        lines += [f"test {i}" for i in self.test]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SplitManifest":
        seed, fraction = None, None
        train, test = [], []
        train_counts, test_counts = {}, {}
        for line_no, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split()
            if parts[0] == "#":
                if len(parts) >= 3 and parts[1] == "seed":
                    seed = int(parts[2])
                elif len(parts) >= 3 and parts[1] == "test_fraction":
                    fraction = float(parts[2])
                elif len(parts) == 7 and parts[1] == "class":
                    train_counts[parts[2]] = int(parts[4])
                    test_counts[parts[2]] = int(parts[6])
                continue
            if len(parts) != 2 or parts[0] not in ("train", "test"):
                raise DataError(f"manifest line {line_no}: expected 'train|test <image_id>'")
            (train if parts[0] == "train" else test).append(parts[1])
        if seed is None or fraction is None:
            raise DataError("manifest header must record seed and test_fraction")
        overlap = set(train) & set(test)
        if overlap:
            raise DataError(f"manifest lists {len(overlap)} id(s) in both partitions")
        return cls(seed, fraction, train, test, train_counts, test_counts)

    def save(self, path) -> None:
        atomic_write_text(path, self.to_text())

    @classmethod
    def load(cls, path) -> "SplitManifest":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def stratified_split(
    records: Sequence[SampleRecord], test_fraction: float = 0.2, seed: int = 0
) -> SplitManifest:
    """Deterministic per-class split; see :func:`apportion_test_counts` for the rounding rule.

    Records are grouped by class and sorted by id, so the result depends only
    on the record set, the fraction and the seed. Within each class the ids are
    permuted by a generator seeded with ``seed``; the first ``k`` go to test.
    The train list is then shuffled once more as a whole.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ContractError(f"test_fraction must be in (0, 1), got {test_fraction}")
    by_class: Dict[str, List[str]] = {}
    for r in records:
        by_class.setdefault(r.class_name, []).append(r.image_id)
    for name, ids in sorted(by_class.items()):
        if len(ids) < 2:
            raise StratificationError(
                f"class {name!r} has {len(ids)} record(s); stratification needs at least 2", name
            )
    ids_all = [r.image_id for r in records]
    if len(set(ids_all)) != len(ids_all):
        raise ContractError("duplicate image ids in records")

    sizes = {name: len(ids) for name, ids in by_class.items()}
    k = apportion_test_counts(sizes, test_fraction)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for name in sorted(by_class):
        ids = sorted(by_class[name])
        perm = rng.permutation(len(ids))
        shuffled = [ids[i] for i in perm]
        test.extend(shuffled[: k[name]])
        train.extend(shuffled[k[name] :])
    train = [train[i] for i in rng.permutation(len(train))]
    return SplitManifest(
        seed=int(seed),
        test_fraction=float(test_fraction),
        train=train,
        test=test,
        train_counts={n: sizes[n] - k[n] for n in sorted(sizes)},
        test_counts=dict(k),
    )


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


# datasets and batching


class ArrayDataset:
    """In-memory images ([N, 3, H, W] in [0, 1]) with integer labels."""

    def __init__(self, images: np.ndarray, labels: Sequence[int], ids: Optional[Sequence[str]] = None):
        self.images = np.asarray(images, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ContractError("images and labels differ in length")
        self.ids = list(ids) if ids is not None else [str(i) for i in range(len(self.labels))]

    def __len__(self) -> int:
        return len(self.labels)

    def get(self, i: int) -> Tuple[np.ndarray, int]:
        return self.images[i], int(self.labels[i])

    def subset(self, indices) -> "ArrayDataset":
        indices = list(indices)
        return ArrayDataset(self.images[indices], self.labels[indices], [self.ids[i] for i in indices])


class ImageFileDataset:
    """Records backed by raster files, decoded and resized on access."""

    def __init__(self, records: Sequence[SampleRecord], resolution: int = 224):
        missing = [r.image_id for r in records if r.image_path is None]
        if missing:
            raise ContractError(f"{len(missing)} record(s) have no image path, e.g. {missing[0]!r}")
        self.records = list(records)
        self.resolution = resolution
        self.labels = np.array([r.class_id for r in self.records], dtype=np.int64)
        self.ids = [r.image_id for r in self.records]

    def __len__(self) -> int:
        return len(self.records)

    def get(self, i: int) -> Tuple[np.ndarray, int]:
        r = self.records[i]
        return load_image(r.image_path, self.resolution).data, r.class_id

    @classmethod
    def from_manifest(cls, records, manifest: SplitManifest, partition: str, resolution: int = 224):
        by_id = {r.image_id: r for r in records}
        ids = manifest.train if partition == "train" else manifest.test
        unknown = [i for i in ids if i not in by_id]
        if unknown:
            raise DataError(f"manifest references {len(unknown)} unknown image id(s), e.g. {unknown[0]!r}")
        return cls([by_id[i] for i in ids], resolution)


@dataclass(frozen=True)
class BatchSpec:
    batch_size: int = 16
    shuffle: bool = True
    augment: AugmentConfig = AugmentConfig()
    mean: Tuple[float, float, float] = IMAGENET_MEAN
    std: Tuple[float, float, float] = IMAGENET_STD
    resolution: int = 224


def make_batches(
    dataset,
    spec: BatchSpec,
    rng: Optional[np.random.Generator] = None,
    training: bool = False,
) -> Iterator[Tuple[Tensor, np.ndarray]]:
    """Yield ``(images [N, 3, H, W], labels [N])`` covering ``dataset`` once.

    Shuffling and augmentation happen only when ``training`` is true. The last
    batch may be short.
    """
    if spec.batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    n = len(dataset)
    order = np.arange(n)
    if training:
        if rng is None:
            raise ContractError("training batches need an explicit rng")
        if spec.shuffle:
            order = rng.permutation(n)
    for start in range(0, n, spec.batch_size):
        idx = order[start : start + spec.batch_size]
        images, labels = [], []
        for i in idx:
            img, label = dataset.get(int(i))
            if training:
                img = augment(img, spec.augment, rng)
            images.append(img)
            labels.append(label)
        batch = np.stack(images).astype(np.float32, copy=False)
        batch = normalize(batch, spec.mean, spec.std)
        yield Tensor(batch, dtype=np.float32), np.asarray(labels, dtype=np.int64)


_DONE = object()


class _Failure:
    def __init__(self, exc: BaseException):
        self.exc = exc


def prefetch(iterator: Iterable, depth: int = 2) -> Iterator:
    """Run ``iterator`` in a background thread, keeping at most ``depth`` items ready."""
    q: "queue.Queue" = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def worker():
        try:
            for item in iterator:
                if stop.is_set():
                    return
                q.put(item)
        except BaseException as exc:  # forwarded to the consumer
            q.put(_Failure(exc))
            return
        q.put(_DONE)

    thread = threading.Thread(target=worker, daemon=True)
    thread.start()
    try:
        while True:
            item = q.get()
            if item is _DONE:
                return
            if isinstance(item, _Failure):
                raise item.exc
            yield item
    finally:
        stop.set()
