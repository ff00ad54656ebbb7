"""IDX / CIFAR-10 binary loaders and a synthetic dataset generator."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073


class DataFormatError(ValueError):
    def __init__(self, message: str, offset: int, path=None):
        self.offset = offset
        self.path = path
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (byte offset {offset})")


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] in [0, 1]
    labels: np.ndarray  # [N] int
    num_classes: int = 10
    split: str = "train"
    source: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"inconsistent dataset shapes {self.images.shape} / {self.labels.shape}")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values outside [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label outside class range")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes,
                       split or self.split, self.source)

    def head(self, n: int) -> "Dataset":
        return self.subset(np.arange(min(n, len(self))))

    def holdout_split(self, fraction: float = 0.1) -> tuple["Dataset", "Dataset"]:
        """(train, held-out) where held-out is the last ``fraction`` of the records."""
        n = len(self)
        n_hold = int(round(n * fraction))
        cut = n - n_hold
        return self.subset(np.arange(cut), "train"), self.subset(np.arange(cut, n), "heldout")


# ---------------------------------------------------------------------------
# IDX


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expected_magic: int, path=None) -> np.ndarray:
    if len(raw) < 4:
        raise DataFormatError("file too short for IDX magic", 0, path)
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataFormatError(f"bad IDX magic 0x{magic:08X}, expected 0x{expected_magic:08X}", 0, path)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError("truncated IDX header", len(raw), path)
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise DataFormatError(
            f"truncated IDX payload: need {count} bytes, have {len(raw) - header}", len(raw), path)
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def read_idx_images(path, limit: int | None = None) -> np.ndarray:
    """uint8 array [N, H, W]."""
    arr = _parse_idx(_read_bytes(path), IDX_IMAGES_MAGIC, path)
    return arr[:limit] if limit is not None else arr


def read_idx_labels(path, limit: int | None = None, num_classes: int = 10) -> np.ndarray:
    arr = _parse_idx(_read_bytes(path), IDX_LABELS_MAGIC, path)
    if limit is not None:
        arr = arr[:limit]
    bad = np.flatnonzero(arr >= num_classes)
    if bad.size:
        i = int(bad[0])
        raise DataFormatError(f"label out of range ({arr[i]}) at record {i}", 8 + i, path)
    return arr.astype(np.int64)


def write_idx(path, images_u8: np.ndarray | None = None, labels: np.ndarray | None = None) -> None:
    """Write one IDX file: images [N, H, W] uint8 or labels [N]."""
    if (images_u8 is None) == (labels is None):
        raise ValueError("pass exactly one of images_u8 / labels")
    if images_u8 is not None:
        arr = np.asarray(images_u8, dtype=np.uint8)
        magic = IDX_IMAGES_MAGIC
    else:
        arr = np.asarray(labels, dtype=np.uint8)
        magic = IDX_LABELS_MAGIC
    header = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape)
    data = header + arr.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        data = gzip.compress(data, mtime=0)
    path.write_bytes(data)


def quantize(images: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(images) * 255).astype(np.uint8)


def write_idx_dataset(ds: Dataset, images_path, labels_path) -> None:
    if ds.images.shape[1] != 1:
        raise ValueError("IDX writer handles single-channel images only")
    write_idx(images_path, images_u8=quantize(ds.images[:, 0]))
    write_idx(labels_path, labels=ds.labels)


# ---------------------------------------------------------------------------
# CIFAR-10 binary


def read_cifar_binary(paths, limit: int | None = None, num_classes: int = 10):
    """(images uint8 [N, 3, 32, 32], labels [N]) from one or more data_batch files."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    total = 0
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) % CIFAR_RECORD:
            full = len(raw) // CIFAR_RECORD
            raise DataFormatError(
                f"truncated CIFAR record {full} ({len(raw) - full * CIFAR_RECORD} of {CIFAR_RECORD} bytes)",
                full * CIFAR_RECORD, path)
        recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if limit is not None:
            recs = recs[: max(limit - total, 0)]
        bad = np.flatnonzero(recs[:, 0] >= num_classes)
        if bad.size:
            i = int(bad[0])
            raise DataFormatError(f"label out of range ({recs[i, 0]}) at record {i}", i * CIFAR_RECORD, path)
        labels.append(recs[:, 0].astype(np.int64))
        images.append(recs[:, 1:].reshape(-1, 3, 32, 32))
        total += len(recs)
        if limit is not None and total >= limit:
            break
    return np.concatenate(images), np.concatenate(labels)


def load_dataset(fmt: str, paths, limit: int | None = None, split: str = "train",
                 num_classes: int = 10) -> Dataset:
    """``fmt`` is "idx" (paths = (images, labels)) or "cifar" (paths = batch files)."""
    key = fmt.lower().replace("_", "").replace("-", "")
    if key == "idx":
        img_path, lab_path = paths
        imgs = read_idx_images(img_path, limit)
        labs = read_idx_labels(lab_path, limit, num_classes)
        if len(imgs) != len(labs):
            raise DataFormatError(f"image/label count mismatch {len(imgs)} vs {len(labs)}", 4, lab_path)
        images = imgs[:, None].astype(np.float64) / 255.0
        source = f"idx:{img_path}"
    elif key in ("cifar", "cifarbinary"):
        imgs, labs = read_cifar_binary(paths, limit, num_classes)
        images = imgs.astype(np.float64) / 255.0
        source = f"cifar:{','.join(str(p) for p in ([paths] if isinstance(paths, (str, Path)) else paths))}"
    else:
        raise ValueError(f"unknown dataset format {fmt!r}")
    return Dataset(images, labs, num_classes, split, source)


# ---------------------------------------------------------------------------
# synthetic


def blob_templates(classes: int, side: int, channels: int = 1) -> np.ndarray:
    """Fixed smooth per-class patterns in [0.1, 0.9], shape [classes, C, side, side]."""
    yy, xx = np.meshgrid(np.linspace(0, 1, side), np.linspace(0, 1, side), indexing="ij")
    out = np.empty((classes, channels, side, side))
    for c in range(classes):
        fx = 1 + c % 3
        fy = 1 + (c // 3) % 3
        phase = 2 * np.pi * c / max(classes, 1)
        for ch in range(channels):
            pat = np.sin(np.pi * (fx * xx + 0.5 * ch) + phase) * np.cos(np.pi * fy * yy + phase / 2)
            out[c, ch] = 0.5 + 0.4 * pat
    return out


def synth_blobs(classes: int, per_class: int, image_side: int, noise: float, seed: int,
                channels: int = 1) -> Dataset:
    """Class template plus Gaussian pixel noise, clipped to [0, 1]; classes interleaved."""
    if min(classes, per_class, image_side) <= 0 or noise < 0:
        raise ValueError("classes, per_class and image_side must be positive")
    rng = np.random.default_rng(seed)
    templates = blob_templates(classes, image_side, channels)
    labels = np.tile(np.arange(classes), per_class)
    images = templates[labels] + noise * rng.standard_normal((len(labels), channels, image_side, image_side))
    return Dataset(np.clip(images, 0.0, 1.0), labels, classes, "train", f"synth:{classes}x{per_class}:{seed}")
