"""MNIST-family ingestion: IDX parsing, 12x12 reduction, median binarization, class selection.

Derived binary datasets persist in a small record format::

    b"RBIN" | u32 version | u32 width | u32 height | u32 count | u32 n_classes
    | i32 class_map[n_classes] | packed bitmaps (count x ceil(w*h/8)) | u8 labels[count]

All integers little-endian; bitmaps row-major, most significant bit first.
"""
from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .params import ConfigurationError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
RBIN_MAGIC = b"RBIN"
RBIN_VERSION = 1

MNIST_CLASSES = (0, 1, 4, 7)
FMNIST_CLASSES = (0, 1, 7)  # T-shirt/top, Trouser, Sneaker


class ParseError(ValueError):
    pass


def parse_idx(data: bytes) -> np.ndarray:
    """Decode an unsigned-byte IDX file (images 0x803 or labels 0x801)."""
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    if len(data) < 4:
        raise ParseError(f"truncated header at byte 0: need 4 bytes, got {len(data)}")
    magic = struct.unpack_from(">I", data, 0)[0]
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise ParseError(f"bad magic 0x{magic:08x} at byte 0 (expected 0x00000803 or 0x00000801)")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise ParseError(f"truncated dimension header at byte {len(data)}: expected {header} bytes")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    expected = header + int(np.prod(dims, dtype=np.int64))
    if len(data) != expected:
        raise ParseError(f"payload length mismatch at byte {header}: expected {expected} bytes "
                         f"in total, got {len(data)}")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims).copy()


def to_idx(array) -> bytes:
    """Encode uint8 images (n, h, w) or labels (n,) as IDX bytes."""
    array = np.asarray(array)
    if array.ndim not in (1, 3):
        raise ConfigurationError("IDX encoding supports labels (n,) or images (n, h, w)")
    if array.size and (array.min() < 0 or array.max() > 255):
        raise ConfigurationError("IDX payload must fit unsigned bytes")
    magic = IDX_IMAGES if array.ndim == 3 else IDX_LABELS
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.astype(np.uint8).tobytes()


def read_idx(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_idx(fh.read())


def reduce(images, size: int = 12) -> np.ndarray:
    """Nearest-neighbor resampling with source index floor(target * n / size)."""
    images = np.asarray(images)
    h, w = images.shape[-2:]
    if h != w:
        raise ConfigurationError(f"expected square images, got {h}x{w}")
    idx = (np.arange(size) * h) // size
    return images[..., idx, :][..., idx]


def binarize(images) -> np.ndarray:
    """1 where a pixel is strictly above its image's median gray value.

    Input polarity must have ink as the high value (MNIST convention), so that
    ink maps to z = 1.
    """
    images = np.asarray(images)
    flat = images.reshape(images.shape[:-2] + (-1,)).astype(float)
    med = np.median(flat, axis=-1, keepdims=True)
    return (flat > med).astype(np.uint8).reshape(images.shape)


def ink_is_minority(bits) -> bool:
    """Polarity sanity check: on average, fewer than half of the pixels are ink."""
    return bool(np.asarray(bits, dtype=float).mean() < 0.5)


def select_classes(images, labels, classes):
    """Keep the given classes and relabel them 0..k-1 in the given order.

    Returns (images, labels, class_map) with class_map[new] = original.
    """
    classes = [int(c) for c in classes]
    if not classes:
        raise ConfigurationError("need at least one class")
    labels = np.asarray(labels)
    present = set(np.unique(labels).tolist())
    unknown = [c for c in classes if c not in present]
    if unknown:
        raise ConfigurationError(f"unknown class ids {unknown}; dataset has {sorted(present)}")
    lookup = {c: k for k, c in enumerate(classes)}
    keep = np.isin(labels, classes)
    new = np.array([lookup[c] for c in labels[keep].tolist()], dtype=np.int64)
    return np.asarray(images)[keep], new, np.array(classes, dtype=np.int64)


@dataclass
class BinaryDataset:
    """Binary images (count, height, width) with labels 0..k-1 and the original class ids."""

    bits: np.ndarray
    labels: np.ndarray
    class_map: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.class_map = np.asarray(self.class_map, dtype=np.int64)
        if self.bits.ndim != 3:
            raise ConfigurationError("bits must have shape (count, height, width)")
        if self.labels.shape != (self.bits.shape[0],):
            raise ConfigurationError("one label per image required")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_map.size):
            raise ConfigurationError("label outside the configured class set")

    def __len__(self):
        return self.bits.shape[0]

    @property
    def flat(self) -> np.ndarray:
        return self.bits.reshape(len(self), -1)

    @property
    def n_classes(self) -> int:
        return self.class_map.size

    def subset(self, index) -> "BinaryDataset":
        return BinaryDataset(self.bits[index], self.labels[index], self.class_map)

    def per_class(self, count: int, offset: int = 0) -> "BinaryDataset":
        """The images [offset, offset + count) of every class, in class order."""
        idx = []
        for k in range(self.n_classes):
            members = np.flatnonzero(self.labels == k)
            if members.size < offset + count:
                raise ConfigurationError(f"class {k} has only {members.size} images, "
                                         f"need {offset + count}")
            idx.append(members[offset:offset + count])
        return self.subset(np.concatenate(idx))

    def sha256(self) -> str:
        return hashlib.sha256(encode_rbin(self)).hexdigest()


def prepare(images, labels, classes, size: int = 12) -> BinaryDataset:
    """Raw grayscale images to a reduced, binarized, class-selected dataset."""
    imgs, labs, cmap = select_classes(images, labels, classes)
    return BinaryDataset(binarize(reduce(imgs, size)), labs, cmap)


def encode_rbin(ds: BinaryDataset) -> bytes:
    count, h, w = ds.bits.shape
    head = RBIN_MAGIC + struct.pack("<5I", RBIN_VERSION, w, h, count, ds.n_classes)
    head += ds.class_map.astype("<i4").tobytes()
    packed = np.packbits(ds.bits.reshape(count, -1), axis=1)
    return head + packed.tobytes() + ds.labels.astype(np.uint8).tobytes()


def decode_rbin(data: bytes) -> BinaryDataset:
    if data[:4] != RBIN_MAGIC:
        raise ParseError(f"bad magic {data[:4]!r} at byte 0 (expected b'RBIN')")
    if len(data) < 24:
        raise ParseError(f"truncated header at byte {len(data)}")
    version, w, h, count, k = struct.unpack_from("<5I", data, 4)
    if version != RBIN_VERSION:
        raise ParseError(f"unsupported RBIN version {version} at byte 4")
    row = (w * h + 7) // 8
    expected = 24 + 4 * k + count * row + count
    if len(data) != expected:
        raise ParseError(f"RBIN length mismatch: expected {expected} bytes, got {len(data)}")
    cmap = np.frombuffer(data, "<i4", k, 24)
    off = 24 + 4 * k
    packed = np.frombuffer(data, np.uint8, count * row, off).reshape(count, row)
    bits = np.unpackbits(packed, axis=1, count=w * h).reshape(count, h, w)
    labels = np.frombuffer(data, np.uint8, count, off + count * row)
    return BinaryDataset(bits, labels, cmap)


def write_rbin(path, ds: BinaryDataset):
    with open(path, "wb") as fh:
        fh.write(encode_rbin(ds))


def read_rbin(path) -> BinaryDataset:
    with open(path, "rb") as fh:
        return decode_rbin(fh.read())


def bundled_mnist_subset():
    """(images uint8 (5000, 28, 28), labels) from the MNIST sample shipped with mlxtend.

    Needs the optional ``mlxtend`` dependency; used when the IDX files are not
    available locally.
    """
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:  # pragma: no cover
        raise ConfigurationError("install the 'data' extra (mlxtend) or provide IDX files") from exc
    X, y = mnist_data()
    return X.reshape(-1, 28, 28).astype(np.uint8), y.astype(np.uint8)
