"""Dataset catalog, image I/O and batching for the lung/colon tasks.

Images are read from binary PPM (P6, maxval 255) or from the ``NTSR`` raw
tensor format.  Each image goes through ``load -> resize -> min-max
normalize`` before batching.
"""

from __future__ import annotations

import csv
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .autodiff import RngStream, interpolation_matrix

CLASSES = ("colon_aca", "colon_n", "lung_aca", "lung_n", "lung_scc")
SPLITS = ("train", "val", "test")

NTSR_MAGIC = b"NTSR"
NTSR_VERSION = 1
NTSR_F32 = 0


class DataError(ValueError):
    """Bad input data: unreadable file, malformed CSV, unknown class."""


@dataclass(frozen=True)
class TaskSpec:
    k: int
    classes: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes):
            raise DataError(f"task classes must be distinct: {self.classes}")
        unknown = [c for c in self.classes if c not in CLASSES]
        if unknown:
            raise DataError(f"unknown classes {unknown}; canonical classes are {list(CLASSES)}")
        if len(self.classes) != self.k:
            raise DataError(f"task k={self.k} but {len(self.classes)} classes given")

    @classmethod
    def for_k(cls, k: int) -> "TaskSpec":
        table = {2: CLASSES[:2], 3: CLASSES[2:], 5: CLASSES}
        if k not in table:
            raise DataError(f"task must have 2, 3 or 5 classes, got {k}")
        return cls(k, tuple(table[k]))


@dataclass
class Sample:
    path: str
    label: int
    split: str | None = None


@dataclass
class DatasetManifest:
    """Samples labelled by index into ``classes``."""

    samples: list[Sample]
    classes: tuple[str, ...] = CLASSES
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def k(self) -> int:
        return len(self.classes)

    @property
    def class_counts(self) -> dict[str, int]:
        counts = {c: 0 for c in self.classes}
        for s in self.samples:
            counts[self.classes[s.label]] += 1
        return counts

    def split_samples(self, split: str) -> list[Sample]:
        return [s for s in self.samples if s.split == split]

    def split_counts(self) -> dict[str, int]:
        return {sp: sum(1 for s in self.samples if s.split == sp) for sp in SPLITS}


# ---------------------------------------------------------------------------
# Image interchange formats
# ---------------------------------------------------------------------------


def save_tensor(array, path) -> None:
    Path(path).write_bytes(encode_tensor(array))


def encode_tensor(array) -> bytes:
    """Serialize to ``NTSR``: magic, u16 version, u8 dtype tag, u8 rank, u32 extents, f32 payload."""
    arr = np.asarray(array)
    if arr.dtype != np.float32:
        if arr.dtype.kind == "f" and not np.array_equal(arr.astype(np.float32), arr):
            raise ValueError(f"array of dtype {arr.dtype} is not exactly representable as f32")
        arr = arr.astype(np.float32)
    if arr.ndim > 255:
        raise ValueError("rank too large for NTSR")
    head = NTSR_MAGIC + struct.pack("<HBB", NTSR_VERSION, NTSR_F32, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_tensor(buf: bytes, offset: int = 0, source: str = "<bytes>") -> tuple[np.ndarray, int]:
    """Parse one ``NTSR`` tensor starting at ``offset``; returns ``(array, end_offset)``."""
    if buf[offset : offset + 4] != NTSR_MAGIC:
        raise DataError(f"{source}: not an NTSR tensor")
    if len(buf) < offset + 8:
        raise DataError(f"{source}: truncated NTSR header")
    version, tag, rank = struct.unpack_from("<HBB", buf, offset + 4)
    if version != NTSR_VERSION:
        raise DataError(f"{source}: unsupported NTSR version {version}")
    if tag != NTSR_F32:
        raise DataError(f"{source}: unsupported NTSR dtype tag {tag}")
    pos = offset + 8
    if len(buf) < pos + 4 * rank:
        raise DataError(f"{source}: truncated NTSR extents")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    nbytes = 4 * math.prod(shape)
    if len(buf) < pos + nbytes:
        raise DataError(f"{source}: truncated NTSR payload")
    arr = np.frombuffer(buf, dtype="<f4", count=math.prod(shape), offset=pos).astype(np.float32).reshape(shape)
    return arr, pos + nbytes


def load_tensor(path) -> np.ndarray:
    arr, _ = decode_tensor(Path(path).read_bytes(), source=str(path))
    return arr


def write_ppm(path, image) -> None:
    """Write a C x H x W (C = 3) array of values in [0, 255] as binary P6."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"P6 needs a 3 x H x W image, got {arr.shape}")
    px = np.clip(np.rint(arr), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = px.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + px.tobytes())


def _ppm_header(buf: bytes, source: str) -> tuple[list[int], int]:
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise DataError(f"{source}: corrupt PPM header")
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise DataError(f"{source}: corrupt PPM header")
    return fields, pos + 1


def load_image(path) -> np.ndarray:
    """Read a P6 PPM or NTSR file as a float32 C x H x W array with values in [0, 255]."""
    path = str(path)
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read image ({exc.strerror})") from exc
    if buf[:4] == NTSR_MAGIC:
        arr, _ = decode_tensor(buf, source=path)
        if arr.ndim != 3:
            raise DataError(f"{path}: NTSR image must have rank 3, got shape {arr.shape}")
        return arr
    if buf[:2] != b"P6":
        raise DataError(f"{path}: unsupported image format; expected binary PPM (P6) or NTSR")
    (w, h, maxval), pos = _ppm_header(buf, path)
    if maxval != 255:
        raise DataError(f"{path}: PPM maxval must be 255, got {maxval}")
    if w < 1 or h < 1:
        raise DataError(f"{path}: empty PPM image")
    if len(buf) - pos < 3 * w * h:
        raise DataError(f"{path}: truncated PPM payload")
    px = np.frombuffer(buf, dtype=np.uint8, count=3 * w * h, offset=pos).reshape(h, w, 3)
    return px.transpose(2, 0, 1).astype(np.float32)


# ---------------------------------------------------------------------------
# Pre-processing
# ---------------------------------------------------------------------------


def resize_bilinear(image, out_h: int = 224, out_w: int = 224) -> np.ndarray:
    """Align-corners bilinear resampling of each channel to ``(out_h, out_w)``."""
    img = np.asarray(image)
    if img.ndim != 3:
        raise ValueError(f"expected C x H x W image, got shape {img.shape}")
    h, w = img.shape[1:]
    if h < 2 or w < 2:
        raise ValueError(f"cannot resize degenerate image of extent {h}x{w}")
    if (h, w) == (out_h, out_w):
        return img.copy()
    dtype = img.dtype if img.dtype.kind == "f" else np.float32
    ah = interpolation_matrix(h, out_h, np.float64)
    aw = interpolation_matrix(w, out_w, np.float64)
    return (ah @ img.astype(np.float64) @ aw.T).astype(dtype)


def minmax_normalize(image) -> np.ndarray:
    """Rescale to [0, 1] using the image-wide minimum and maximum; constant images map to 0."""
    img = np.asarray(image)
    lo, hi = img.min(), img.max()
    if hi == lo:
        return np.zeros_like(img, dtype=img.dtype if img.dtype.kind == "f" else np.float32)
    return (img - lo) / (hi - lo)


def prepare_image(path, size: tuple[int, int] = (224, 224)) -> np.ndarray:
    img = load_image(path)
    return minmax_normalize(resize_bilinear(img, *size)).astype(np.float32)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


def _resolve(base: Path, p: str) -> str:
    return str(Path(p)) if os.path.isabs(p) else str(base / p)


def _relative(base: Path, p: str) -> str:
    try:
        return Path(os.path.relpath(p, base)).as_posix()
    except ValueError:
        return str(p)


def read_manifest(path) -> DatasetManifest:
    """Read ``path,label`` or ``path,label,split`` CSV; paths are relative to the CSV's directory."""
    path = Path(path)
    base = path.parent
    samples = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header not in (["path", "label"], ["path", "label", "split"]):
            raise DataError(f"{path}: header must be 'path,label' or 'path,label,split', got {header}")
        with_split = len(header) == 3
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            if row[1] not in CLASSES:
                raise DataError(f"{path}:{lineno}: unknown label {row[1]!r}; canonical classes are {list(CLASSES)}")
            split = row[2] if with_split else None
            if with_split and split not in SPLITS:
                raise DataError(f"{path}:{lineno}: unknown split {split!r}")
            samples.append(Sample(_resolve(base, row[0]), CLASSES.index(row[1]), split))
    return DatasetManifest(samples)


def write_manifest(manifest: DatasetManifest, path, with_split: bool | None = None) -> None:
    path = Path(path)
    base = path.parent
    if with_split is None:
        with_split = any(s.split is not None for s in manifest.samples)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label", "split"] if with_split else ["path", "label"])
        for s in manifest.samples:
            row = [_relative(base, s.path), manifest.classes[s.label]]
            if with_split:
                row.append(s.split or "")
            writer.writerow(row)


def scan_directory(data_dir) -> DatasetManifest:
    """Enumerate ``data_dir/<class>/<file>`` lexicographically."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DataError(f"{data_dir}: not a directory")
    samples = []
    for sub in sorted(p for p in data_dir.iterdir() if p.is_dir()):
        if sub.name not in CLASSES:
            raise DataError(f"{sub}: unknown class directory {sub.name!r}; canonical classes are {list(CLASSES)}")
    for label, name in enumerate(CLASSES):
        sub = data_dir / name
        if not sub.is_dir():
            continue
        for f in sorted(p for p in sub.iterdir() if p.is_file()):
            samples.append(Sample(str(f), label))
    return DatasetManifest(samples)


def stratified_split(
    manifest: DatasetManifest, fractions: Sequence[float] = (0.6, 0.2, 0.2), seed: int = 0
) -> DatasetManifest:
    """Assign train/val/test per class by a seeded shuffle and contiguous slicing.

    Validation and test sizes are ``floor(fraction * n)``; train takes the remainder.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    by_class: dict[int, list[int]] = {}
    for i, s in enumerate(manifest.samples):
        by_class.setdefault(s.label, []).append(i)
    for label in range(manifest.k):
        if not by_class.get(label):
            raise DataError(f"class {manifest.classes[label]!r} has no samples")
    assign = [""] * len(manifest.samples)
    root = RngStream(seed)
    for label, idx in sorted(by_class.items()):
        n = len(idx)
        n_val = math.floor(fractions[1] * n + 1e-9)
        n_test = math.floor(fractions[2] * n + 1e-9)
        n_train = n - n_val - n_test
        order = root.fork(f"split/{manifest.classes[label]}").permutation(n)
        for rank, j in enumerate(order):
            assign[idx[j]] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    samples = [replace(s, split=a) for s, a in zip(manifest.samples, assign)]
    return DatasetManifest(samples, manifest.classes, seed)


def make_task_subset(manifest: DatasetManifest, task: TaskSpec) -> DatasetManifest:
    """Keep only ``task.classes`` and relabel them 0..k-1 in canonical order."""
    for c in task.classes:
        if c not in manifest.classes:
            raise DataError(f"task class {c!r} not present in manifest classes {list(manifest.classes)}")
    if any(s.split is None for s in manifest.samples):
        raise DataError("make_task_subset needs split assignments; run stratified_split first")
    ordered = tuple(c for c in CLASSES if c in task.classes)
    remap = {manifest.classes.index(c): i for i, c in enumerate(ordered)}
    samples = [replace(s, label=remap[s.label]) for s in manifest.samples if s.label in remap]
    return DatasetManifest(samples, ordered, manifest.seed)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


def epoch_order(n: int, shuffle: bool, seed: int, epoch: int) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return RngStream(seed).fork(f"shuffle/{epoch}").permutation(n)


@dataclass
class ImageCache:
    """Memoizes prepared images by (path, size); safe because preparation is deterministic."""

    store: dict = field(default_factory=dict)

    def get(self, path: str, size: tuple[int, int]) -> np.ndarray:
        key = (path, size)
        if key not in self.store:
            self.store[key] = prepare_image(path, size)
        return self.store[key]


def batch_iterator(
    manifest: DatasetManifest,
    split: str,
    batch_size: int = 32,
    shuffle: bool = False,
    seed: int = 0,
    epoch: int = 0,
    size: tuple[int, int] = (224, 224),
    workers: int = 0,
    cache: ImageCache | None = None,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images N x C x H x W, onehot N x K)``; the last batch may be short.

    ``workers > 0`` decodes images on a thread pool; results are consumed in
    submission order, so batch contents never depend on thread timing.
    """
    samples = manifest.split_samples(split)
    if not samples:
        raise DataError(f"split {split!r} is empty")
    order = epoch_order(len(samples), shuffle, seed, epoch)
    eye = np.eye(manifest.k, dtype=np.float32)

    def prep(s: Sample) -> np.ndarray:
        try:
            return cache.get(s.path, size) if cache is not None else prepare_image(s.path, size)
        except DataError:
            raise
        except Exception as exc:
            raise DataError(f"{s.path}: {exc}") from exc

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 0 else None
    try:
        for start in range(0, len(order), batch_size):
            chunk = [samples[i] for i in order[start : start + batch_size]]
            images = list(pool.map(prep, chunk)) if pool else [prep(s) for s in chunk]
            yield np.stack(images), eye[[s.label for s in chunk]]
    finally:
        if pool:
            pool.shutdown()


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


def synth_image(label: int, rng: RngStream, size: int = 32, noise: float = 0.08) -> np.ndarray:
    """A 3 x size x size texture in [0, 255] whose grating orientation encodes ``label``.

    Class ``c`` uses orientation ``c * 36`` degrees; frequency, phase, tint
    and additive noise are drawn from ``rng``.
    """
    theta = np.deg2rad(36.0 * label)
    freq, phase, jitter = rng.random(3)
    freq = 0.08 + 0.08 * freq
    theta = theta + np.deg2rad(6.0) * (jitter - 0.5)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    wave = np.sin(2 * np.pi * (freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase))
    tint = 0.7 + 0.3 * rng.random(3)
    img = 0.5 + 0.35 * wave[None] * tint[:, None, None]
    img = img + noise * rng.normal((3, size, size))
    return np.clip(img, 0.0, 1.0) * 255.0


def write_synthetic_corpus(out_dir, n_per_class: int, seed: int, size: int = 32) -> DatasetManifest:
    """Write ``out_dir/<class>/<class>_<i>.ppm`` for all five canonical classes."""
    out_dir = Path(out_dir)
    root = RngStream(seed)
    samples = []
    for label, name in enumerate(CLASSES):
        (out_dir / name).mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class):
            img = synth_image(label, root.fork(f"{name}/{i}"), size)
            path = out_dir / name / f"{name}_{i:05d}.ppm"
            write_ppm(path, img)
            samples.append(Sample(str(path), label))
    return DatasetManifest(samples)
