"""Synthetic image datasets and class-incremental task streams.

CILB file layout (little-endian)::

    b"CILB"
    u16  version (= 1)
    u32  number of classes C
    u32  number of samples
    u16  H, u16 W
    u8   channels
    per sample:
        u16  label
        u8   split (0 = train, 1 = test)
        H*W*channels bytes, channel-major then row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import FormatError
from .fileio import atomic_write_bytes

TRAIN, TEST = 0, 1
CILB_MAGIC = b"CILB"
CILB_VERSION = 1


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray  # uint8, (n, channels, H, W)
    labels: np.ndarray  # int64, (n,)
    split: np.ndarray  # uint8, (n,), TRAIN or TEST
    n_classes: int

    def __post_init__(self):
        for arr in (self.images, self.labels, self.split):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[1:]

    def validate(self) -> None:
        n = len(self.labels)
        if n == 0:
            raise ValueError("dataset has no samples")
        if self.images.dtype != np.uint8 or self.images.ndim != 4 or len(self.images) != n:
            raise ValueError("images must be a uint8 array of shape (n, channels, H, W)")
        if len(self.split) != n or not np.isin(self.split, (TRAIN, TEST)).all():
            raise ValueError("split tags must be 0 (train) or 1 (test)")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ValueError("labels must lie in [0, n_classes)")
        for c in range(self.n_classes):
            mask = self.labels == c
            if not (mask & (self.split == TRAIN)).any() or not (mask & (self.split == TEST)).any():
                raise ValueError(f"class {c} needs at least one train and one test sample")

    def equals(self, other: "Dataset") -> bool:
        return (self.n_classes == other.n_classes
                and self.images.shape == other.images.shape
                and self.images.tobytes() == other.images.tobytes()
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.split, other.split))

    def subset_classes(self, classes) -> "Dataset":
        """Keep only ``classes``, relabelled densely in the given order."""
        classes = list(classes)
        remap = {c: i for i, c in enumerate(classes)}
        keep = np.isin(self.labels, classes)
        labels = np.array([remap[c] for c in self.labels[keep]], dtype=np.int64)
        return Dataset(self.images[keep].copy(), labels, self.split[keep].copy(), len(classes))


def to_float(images: np.ndarray) -> np.ndarray:
    """Map uint8 pixels to [-1, 1]."""
    return images.astype(np.float64) / 127.5 - 1.0


# -- synthetic gratings ------------------------------------------------------


@dataclass(frozen=True)
class GratingSpec:
    image_size: int = 16
    channels: int = 1
    jitter: float = 1.0
    noise: float = 0.1
    fine_grained: bool = False


def class_parameters(n_classes: int, rng: np.random.Generator, fine_grained: bool = False) -> np.ndarray:
    """Per-class (frequency, orientation, phase, centre_x, centre_y) rows.

    In fine-grained mode classes come in sibling pairs that share a base
    pattern and differ by a small frequency/orientation offset.
    """
    n_base = (n_classes + 1) // 2 if fine_grained else n_classes
    base = np.column_stack([
        rng.uniform(1.0, 4.0, n_base),          # cycles per image
        rng.uniform(0.0, np.pi, n_base),        # orientation
        rng.uniform(0.0, 2 * np.pi, n_base),    # phase
        rng.uniform(0.3, 0.7, n_base),          # envelope centre x (fraction of width)
        rng.uniform(0.3, 0.7, n_base),          # envelope centre y
    ])
    if not fine_grained:
        return base
    params = np.repeat(base, 2, axis=0)[:n_classes].copy()
    params[1::2, 0] *= 1.15
    params[1::2, 1] += 0.2
    return params


def render_gratings(params: np.ndarray, image_size: int, channels: int) -> np.ndarray:
    """Render float images in [0, 1] from rows of (freq, theta, phase, cx, cy)."""
    s = image_size
    coords = (np.arange(s) + 0.5) / s
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    f, th, ph, cx, cy = (params[:, i, None, None] for i in range(5))
    wave = np.sin(2 * np.pi * f * (xx * np.cos(th) + yy * np.sin(th)) + ph)
    env = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * 0.3 ** 2))
    img = 0.5 + 0.5 * wave * env
    out = np.repeat(img[:, None], channels, axis=1)
    if channels > 1:
        # colour channels see phase-shifted copies so they are not redundant
        for c in range(1, channels):
            shifted = np.sin(2 * np.pi * f * (xx * np.cos(th) + yy * np.sin(th)) + ph + c * np.pi / channels)
            out[:, c] = 0.5 + 0.5 * shifted * env
    return out


def generate_synthetic(n_classes: int, n_train: int, n_test: int, spec: GratingSpec = GratingSpec(),
                       seed: int = 0) -> Dataset:
    """Oriented-grating classes with per-sample jitter and pixel noise.

    Deterministic in ``seed``. Samples are ordered class by class, train
    before test.
    """
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if n_train < 1 or n_test < 1:
        raise ValueError("need at least one train and one test sample per class")
    rng = np.random.default_rng(seed)
    cls_params = class_parameters(n_classes, rng, spec.fine_grained)
    per_class = n_train + n_test
    labels = np.repeat(np.arange(n_classes), per_class)
    split = np.tile(np.r_[np.zeros(n_train), np.ones(n_test)], n_classes).astype(np.uint8)
    p = cls_params[labels].copy()
    j = spec.jitter
    n = len(labels)
    p[:, 0] *= np.exp(rng.normal(0.0, 0.08 * j, n))
    p[:, 1] += rng.normal(0.0, 0.12 * j, n)
    p[:, 2] += rng.normal(0.0, 0.6 * j, n)
    p[:, 3:] += rng.normal(0.0, 0.06 * j, (n, 2))
    img = render_gratings(p, spec.image_size, spec.channels)
    img += rng.normal(0.0, spec.noise, img.shape)
    images = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    ds = Dataset(images, labels.astype(np.int64), split, n_classes)
    ds.validate()
    return ds


# -- streams -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StreamSpec:
    tasks: tuple[tuple[int, ...], ...]
    train_idx: tuple[np.ndarray, ...]
    test_idx: tuple[np.ndarray, ...]
    class_order: tuple[int, ...]
    seed: int

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def classes(self) -> tuple[int, ...]:
        return tuple(c for task in self.tasks for c in task)

    def task_of(self, cls: int) -> int:
        for t, task in enumerate(self.tasks):
            if cls in task:
                return t
        raise KeyError(cls)

    def seen_classes(self, t: int) -> tuple[int, ...]:
        return tuple(c for task in self.tasks[:t + 1] for c in task)


def task_sizes(n_classes: int, n_tasks: int) -> list[int]:
    base, extra = divmod(n_classes, n_tasks)
    return [base + (1 if i < extra else 0) for i in range(n_tasks)]


def split_stream(dataset: Dataset, n_tasks: int, seed: int = 0, fine_grained: bool = False) -> StreamSpec:
    """Shuffle the class order by ``seed`` and cut it into balanced tasks.

    With ``fine_grained`` the sibling pairs (2j, 2j+1) of a fine-grained
    dataset are dealt into different tasks where possible.
    """
    c = dataset.n_classes
    if n_tasks < 1:
        raise ValueError("need at least one task")
    if n_tasks > c:
        raise ValueError(f"cannot split {c} classes into {n_tasks} tasks")
    rng = np.random.default_rng(seed)
    if fine_grained:
        groups = [list(range(i, min(i + 2, c))) for i in range(0, c, 2)]
        order_groups = rng.permutation(len(groups))
        order = [cls for g in order_groups for cls in rng.permutation(groups[g]).tolist()]
        # deal round-robin so siblings land in neighbouring tasks
        sizes = task_sizes(c, n_tasks)
        tasks: list[list[int]] = [[] for _ in range(n_tasks)]
        k = 0
        for cls in order:
            while len(tasks[k % n_tasks]) >= sizes[k % n_tasks]:
                k += 1
            tasks[k % n_tasks].append(cls)
            k += 1
        class_order = [cls for task in tasks for cls in task]
    else:
        class_order = rng.permutation(c).tolist()
        tasks, start = [], 0
        for size in task_sizes(c, n_tasks):
            tasks.append(class_order[start:start + size])
            start += size
    train_idx, test_idx = [], []
    for task in tasks:
        in_task = np.isin(dataset.labels, task)
        train_idx.append(np.flatnonzero(in_task & (dataset.split == TRAIN)))
        test_idx.append(np.flatnonzero(in_task & (dataset.split == TEST)))
    return StreamSpec(tuple(tuple(int(x) for x in t) for t in tasks), tuple(train_idx), tuple(test_idx),
                      tuple(int(x) for x in class_order), seed)


@dataclass(frozen=True)
class TrainBatch:
    images: np.ndarray
    labels: np.ndarray
    task_id: int


@dataclass(frozen=True)
class EvalBatch:
    """Evaluation batches deliberately carry no task identity."""

    images: np.ndarray
    labels: np.ndarray


def epoch_order(indices: np.ndarray, seed: int, t: int, epoch: int) -> np.ndarray:
    return indices[np.random.default_rng([seed, t, epoch]).permutation(len(indices))]


def batches(dataset: Dataset, stream: StreamSpec, t: int, split: str, batch_size: int,
            seed: int = 0, epoch: int = 0) -> Iterator[TrainBatch | EvalBatch]:
    """Iterate task ``t``: shuffled train batches with task id, or ordered test batches without."""
    if not 0 <= t < stream.n_tasks:
        raise IndexError(f"task {t} outside stream of {stream.n_tasks} tasks")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    if split == "train":
        idx = epoch_order(stream.train_idx[t], seed, t, epoch)
        for i in range(0, len(idx), batch_size):
            sel = idx[i:i + batch_size]
            yield TrainBatch(to_float(dataset.images[sel]), dataset.labels[sel], t)
    elif split == "test":
        idx = stream.test_idx[t]
        for i in range(0, len(idx), batch_size):
            sel = idx[i:i + batch_size]
            yield EvalBatch(to_float(dataset.images[sel]), dataset.labels[sel])
    else:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")


# -- CILB files --------------------------------------------------------------


def encode_dataset(dataset: Dataset) -> bytes:
    if len(dataset) == 0:
        raise ValueError("refusing to write an empty dataset")
    dataset.validate()
    n, ch, h, w = dataset.images.shape
    if dataset.n_classes > 0xFFFF or h > 0xFFFF or w > 0xFFFF or ch > 0xFF:
        raise ValueError("dataset dimensions exceed the CILB field widths")
    header = CILB_MAGIC + struct.pack("<HIIHHB", CILB_VERSION, dataset.n_classes, n, h, w, ch)
    rec = np.dtype([("label", "<u2"), ("split", "u1"), ("pix", "u1", (ch * h * w,))])
    body = np.empty(n, dtype=rec)
    body["label"] = dataset.labels
    body["split"] = dataset.split
    body["pix"] = dataset.images.reshape(n, -1)
    return header + body.tobytes()


def decode_dataset(buf: bytes) -> Dataset:
    if len(buf) < 4 or buf[:4] != CILB_MAGIC:
        raise FormatError("bad magic, expected b'CILB'", 0)
    hsize = struct.calcsize("<HIIHHB")
    if len(buf) < 4 + hsize:
        raise FormatError("truncated header", len(buf))
    version, c, n, h, w, ch = struct.unpack_from("<HIIHHB", buf, 4)
    if version != CILB_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if n == 0 or c == 0 or h == 0 or w == 0 or ch == 0:
        raise FormatError("zero-sized dimension in header", 6)
    per = 3 + h * w * ch
    start = 4 + hsize
    expected = start + n * per
    if n * per > 1 << 34:
        raise FormatError("sample count overflows a plausible file size", 10)
    if len(buf) < expected:
        full = (len(buf) - start) // per
        raise FormatError(f"truncated after {full} of {n} samples", start + full * per)
    if len(buf) > expected:
        raise FormatError("trailing bytes after last sample", expected)
    rec = np.dtype([("label", "<u2"), ("split", "u1"), ("pix", "u1", (ch * h * w,))])
    body = np.frombuffer(buf, dtype=rec, count=n, offset=start)
    labels = body["label"].astype(np.int64)
    split = body["split"].copy()
    bad = np.flatnonzero(labels >= c)
    if len(bad):
        raise FormatError(f"label {labels[bad[0]]} >= class count {c}", start + int(bad[0]) * per)
    bad = np.flatnonzero(split > 1)
    if len(bad):
        raise FormatError(f"split tag {split[bad[0]]} is not 0 or 1", start + int(bad[0]) * per + 2)
    images = body["pix"].reshape(n, ch, h, w).copy()
    ds = Dataset(images, labels, split, c)
    try:
        ds.validate()
    except ValueError as exc:
        raise FormatError(str(exc), start) from None
    return ds


def write_dataset(path, dataset: Dataset) -> None:
    atomic_write_bytes(path, encode_dataset(dataset))


def read_dataset(path) -> Dataset:
    return decode_dataset(Path(path).read_bytes())
