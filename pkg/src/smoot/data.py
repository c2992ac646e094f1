"""Datasets: IDX (MNIST / Fashion-MNIST) files and a planted-feature generator."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IDXFormatError(ValueError):
    """Bad magic number or malformed header."""


class ConsistencyError(ValueError):
    """Image and label files disagree."""


@dataclass
class Dataset:
    """Images in [0, 1] shaped [N, C, H, W], integer labels, and stable sample ids."""

    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray = None
    n_classes: int = 10
    masks: Optional[np.ndarray] = None  # ground-truth informative pixels, planted data only

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(len(self.labels), dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N, C, H, W], got {self.images.shape}")
        if len(self.images) != len(self.labels) or len(self.ids) != len(self.labels):
            raise ConsistencyError("images, labels and ids must have the same length")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return int(np.prod(self.images.shape[1:]))

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        masks = None if self.masks is None else self.masks[index]
        return Dataset(self.images[index], self.labels[index], self.ids[index], self.n_classes, masks)

    def head(self, n: Optional[int]) -> "Dataset":
        return self if n is None or n >= len(self) else self.subset(np.arange(n))


def _open(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expected_magic: Optional[int] = None) -> np.ndarray:
    """Read an unsigned-byte IDX file (gzip accepted) into a uint8 array."""
    raw = _open(path)
    if len(raw) < 4:
        raise OSError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if expected_magic is not None and magic != expected_magic:
        raise IDXFormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 8 != 0x08:
        raise IDXFormatError(f"{path}: unsupported IDX element type in magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise OSError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise OSError(f"{path}: truncated IDX body ({len(raw) - header} of {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray, compress: Optional[bool] = None) -> None:
    """Write a uint8 array as IDX; gzip when the name ends in .gz (or ``compress``)."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x0800 | arr.ndim
    payload = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()
    path = Path(path)
    if compress or (compress is None and path.suffix == ".gz"):
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)


def load_idx(images_path, labels_path, n_classes: int = 10) -> Dataset:
    """Load an image/label IDX pair; pixels are scaled by 1/255."""
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = (images.astype(np.float32) / np.float32(255.0))[:, None, :, :]
    return Dataset(x, labels.astype(np.int64), n_classes=n_classes)


def _find(directory: Path, stem: str) -> Optional[Path]:
    for suffix in ("", ".gz"):
        p = directory / f"{stem}{suffix}"
        if p.exists():
            return p
    return None


SPLITS = {"train": "train", "test": "t10k"}


def load_split(directory, split: str = "test", n_classes: int = 10) -> Dataset:
    """Load ``<prefix>-images-idx3-ubyte[.gz]`` and labels from a directory.

    ``split`` is ``train`` or ``test`` (MNIST file prefixes ``train`` / ``t10k``).
    A ``<prefix>-masks-idx3-ubyte`` sidecar, when present, becomes ``Dataset.masks``.
    """
    directory = Path(directory)
    prefix = SPLITS.get(split, split)
    img = _find(directory, f"{prefix}-images-idx3-ubyte")
    lab = _find(directory, f"{prefix}-labels-idx1-ubyte")
    if img is None or lab is None:
        raise FileNotFoundError(f"no {prefix}-images/labels IDX pair in {directory}")
    ds = load_idx(img, lab, n_classes=n_classes)
    mask_path = _find(directory, f"{prefix}-masks-idx3-ubyte")
    if mask_path is not None:
        m = read_idx(mask_path, IMAGE_MAGIC)
        if m.shape[0] != len(ds):
            raise ConsistencyError(f"{m.shape[0]} masks for {len(ds)} images")
        ds.masks = (m > 127)[:, None, :, :]
    return ds


def save_split(directory, ds: Dataset, split: str = "test") -> None:
    """Persist a single-channel dataset in the IDX layout (plus mask sidecar)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    prefix = SPLITS.get(split, split)
    if ds.images.shape[1] != 1:
        raise ValueError("IDX persistence supports single-channel images only")
    pixels = np.rint(np.clip(ds.images[:, 0], 0.0, 1.0) * 255.0).astype(np.uint8)
    write_idx(directory / f"{prefix}-images-idx3-ubyte", pixels)
    write_idx(directory / f"{prefix}-labels-idx1-ubyte", ds.labels.astype(np.uint8))
    if ds.masks is not None:
        write_idx(directory / f"{prefix}-masks-idx3-ubyte", ds.masks[:, 0].astype(np.uint8) * 255)


# ---------------------------------------------------------------------------
# planted-feature data
# ---------------------------------------------------------------------------

@dataclass
class PlantedSpec:
    """Uniform-noise images with one bright class-specific square patch.

    ``locations[c]`` is the (row, col) of the top-left corner of class c's patch.
    """

    image_size: int = 16
    patch_size: int = 4
    n_classes: int = 4
    locations: Optional[List[Tuple[int, int]]] = None
    noise: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.locations is None:
            self.locations = self.default_locations()
        if len(self.locations) != self.n_classes:
            raise ValueError(f"{len(self.locations)} patch locations for {self.n_classes} classes")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError(f"noise level must lie in [0, 1], got {self.noise}")
        for r, c in self.locations:
            if r < 0 or c < 0 or r + self.patch_size > self.image_size or c + self.patch_size > self.image_size:
                raise ValueError(f"patch at ({r}, {c}) of size {self.patch_size} leaves a "
                                 f"{self.image_size}x{self.image_size} image")

    def default_locations(self) -> List[Tuple[int, int]]:
        # spread the patches along a ring inside the image, one per class
        span = self.image_size - self.patch_size
        centre = span / 2.0
        radius = span / 2.0 * 0.8
        out = []
        for k in range(self.n_classes):
            ang = 2 * np.pi * k / self.n_classes
            out.append((int(round(centre + radius * np.sin(ang))), int(round(centre + radius * np.cos(ang)))))
        return out


def generate_planted(spec: PlantedSpec, n: int, seed: Optional[int] = None) -> Dataset:
    """Draw ``n`` planted images (labels cycle through the classes, then shuffle).

    Background pixels are U[0, noise]; patch pixels are exactly 1.  The
    returned ``Dataset.masks`` marks the patch of each image.
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    s, p = spec.image_size, spec.patch_size
    labels = rng.permutation(np.arange(n) % spec.n_classes)
    images = rng.uniform(0.0, 1.0, size=(n, 1, s, s)) * spec.noise
    masks = np.zeros((n, 1, s, s), dtype=bool)
    for i, y in enumerate(labels):
        r, c = spec.locations[y]
        masks[i, 0, r:r + p, c:c + p] = True
    images[masks] = 1.0
    return Dataset(images.astype(np.float32), labels, n_classes=spec.n_classes, masks=masks)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def batch_iter(ds: Dataset, batch_size: int, shuffle: bool = False,
               seed: Optional[int] = None) -> Iterator[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(ids, images, labels)`` batches covering the dataset once."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(ds))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        yield ds.ids[idx], ds.images[idx], ds.labels[idx]
