"""Synthetic vessel-segmentation data and the portable tensor container.

Images are sea-like low-frequency backgrounds with a few rotated elongated
rectangles standing in for vessels; the mask is the exact vessel footprint.
Everything is deterministic per seed, byte for byte.

Container layout (little-endian, normative): magic "LPNT", version u8,
dtype u8 (0=binary32, 1=binary64, 2=u8 labels), rank u8, dims as u32 each,
then the raw row-major payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "MAGIC",
    "SyntheticConfig",
    "Dataset",
    "ContainerError",
    "ContainerHeaderError",
    "ContainerTruncatedError",
    "ContainerDtypeError",
    "DataError",
    "generate_synthetic",
    "container_to_bytes",
    "save_container",
    "load_container",
    "split",
    "save_dataset",
    "load_dataset",
]

MAGIC = b"LPNT"
VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODE_FOR_KIND = {("f", 4): 0, ("f", 8): 1, ("u", 1): 2}


class DataError(ValueError):
    pass


class ContainerError(DataError):
    pass


class ContainerHeaderError(ContainerError):
    pass


class ContainerTruncatedError(ContainerError):
    pass


class ContainerDtypeError(ContainerError):
    pass


@dataclass(frozen=True)
class SyntheticConfig:
    image_size: int = 32
    n_train: int = 200
    n_eval: int = 50
    vessels_min: int = 0
    vessels_max: int = 3
    aspect_min: float = 2.0
    aspect_max: float = 6.0
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.image_size not in (16, 32, 64):
            raise ValueError(f"image_size must be one of 16, 32, 64; got {self.image_size}")
        if self.n_train < 1 or self.n_eval < 1:
            raise ValueError("sample counts must be >= 1")
        if not 0 <= self.vessels_min <= self.vessels_max:
            raise ValueError("need 0 <= vessels_min <= vessels_max")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class Dataset:
    """In-memory dataset: images (n,3,H,W) float32 in [0,1], masks (n,H,W) u8."""

    images: np.ndarray
    masks: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise DataError(f"images must be (n,3,H,W), got {self.images.shape}")
        if self.masks.shape != (self.images.shape[0],) + self.images.shape[2:]:
            raise DataError(f"masks shape {self.masks.shape} does not match images {self.images.shape}")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.images[idx].copy(), self.masks[idx].copy())

    def batches(self, batch_size: int):
        for start in range(0, len(self), batch_size):
            stop = min(start + batch_size, len(self))
            yield self.images[start:stop], self.masks[start:stop]


def _paint_vessels(image: np.ndarray, mask: np.ndarray, cfg: SyntheticConfig, rng: np.random.Generator) -> None:
    size = cfg.image_size
    if cfg.vessels_max == 0:
        return
    if cfg.vessels_min == 0:
        # keep ~90% of images populated with both classes
        count = 0 if rng.random() < 0.1 else int(rng.integers(1, cfg.vessels_max + 1))
    else:
        count = int(rng.integers(cfg.vessels_min, cfg.vessels_max + 1))
    ys, xs = np.mgrid[0:size, 0:size]
    px = xs + 0.5
    py = ys + 0.5
    for _ in range(count):
        cx = rng.uniform(0.15, 0.85) * size
        cy = rng.uniform(0.15, 0.85) * size
        length = rng.uniform(0.30, 0.55) * size
        aspect = rng.uniform(cfg.aspect_min, cfg.aspect_max)
        half_l = length / 2.0
        half_w = max(length / aspect, 1.6) / 2.0
        theta = rng.uniform(0.0, np.pi)
        delta = rng.uniform(0.15, 0.35) * (1.0 if rng.random() < 0.5 else -1.0)
        tint = rng.uniform(-0.03, 0.03, 3)
        cos_t, sin_t = np.cos(theta), np.sin(theta)
        u = (px - cx) * cos_t + (py - cy) * sin_t
        v = -(px - cx) * sin_t + (py - cy) * cos_t
        footprint = (np.abs(u) <= half_l) & (np.abs(v) <= half_w)
        if not footprint.any():
            continue
        mask[footprint] = 1
        for ch in range(3):
            image[ch][footprint] = image[ch][footprint] + delta + tint[ch]


def _make_sample(cfg: SyntheticConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    size = cfg.image_size
    ys, xs = np.mgrid[0:size, 0:size]
    gx, gy = xs / size, ys / size
    swell = np.zeros((size, size))
    for _ in range(3):
        fx, fy = rng.uniform(0.5, 2.0, 2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        swell += rng.uniform(0.02, 0.06) * np.sin(2.0 * np.pi * (fx * gx + fy * gy) + phase)
    base = np.array([0.30, 0.38, 0.48]) + rng.uniform(-0.04, 0.04, 3)
    image = base[:, None, None] + swell[None]
    mask = np.zeros((size, size), dtype=np.uint8)
    _paint_vessels(image, mask, cfg, rng)
    if cfg.noise_sigma > 0:
        image = image + rng.normal(0.0, cfg.noise_sigma, image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask


def generate_synthetic(cfg: SyntheticConfig) -> tuple[Dataset, Dataset]:
    """Deterministically generate (train, eval) datasets from cfg.seed."""
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.n_train + cfg.n_eval)
    images, masks = [], []
    for child in children:
        img, msk = _make_sample(cfg, np.random.default_rng(child))
        images.append(img)
        masks.append(msk)
    images = np.stack(images)
    masks = np.stack(masks)
    train = Dataset(images[: cfg.n_train], masks[: cfg.n_train])
    evalset = Dataset(images[cfg.n_train :], masks[cfg.n_train :])
    return train, evalset


# ---------------------------------------------------------------------------
# container format


def container_to_bytes(tensor: np.ndarray) -> bytes:
    arr = np.asarray(tensor)
    key = (arr.dtype.kind, arr.dtype.itemsize)
    if key not in _CODE_FOR_KIND:
        raise ContainerDtypeError(f"unsupported dtype {arr.dtype}")
    code = _CODE_FOR_KIND[key]
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr).astype(_DTYPE_CODES[code], copy=False).tobytes()
    return header + payload


def save_container(path, tensor: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(container_to_bytes(tensor))


def load_container(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    return container_from_bytes(blob)


def container_from_bytes(blob: bytes, offset: int = 0) -> np.ndarray:
    arr, _ = _read_container(blob, offset)
    return arr


def _read_container(blob: bytes, offset: int) -> tuple[np.ndarray, int]:
    if len(blob) - offset < 7:
        raise ContainerTruncatedError("container shorter than fixed header")
    if blob[offset : offset + 4] != MAGIC:
        raise ContainerHeaderError(f"bad magic {blob[offset:offset + 4]!r}")
    version, code, rank = struct.unpack_from("<BBB", blob, offset + 4)
    if version != VERSION:
        raise ContainerHeaderError(f"unsupported version {version}")
    if code not in _DTYPE_CODES:
        raise ContainerDtypeError(f"unknown dtype code {code}")
    dims_at = offset + 7
    if len(blob) - dims_at < 4 * rank:
        raise ContainerTruncatedError("truncated dims")
    dims = struct.unpack_from(f"<{rank}I", blob, dims_at)
    dtype = _DTYPE_CODES[code]
    n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
    payload_at = dims_at + 4 * rank
    if len(blob) - payload_at < n_bytes:
        raise ContainerTruncatedError(
            f"payload needs {n_bytes} bytes, only {len(blob) - payload_at} present")
    arr = np.frombuffer(blob, dtype=dtype, count=int(np.prod(dims, dtype=np.int64)) if rank else 1,
                        offset=payload_at).reshape(dims).copy()
    return arr, payload_at + n_bytes


# ---------------------------------------------------------------------------
# dataset directory layout: index.txt + images/ + masks/


def save_dataset(directory, dataset: Dataset) -> None:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(len(dataset)):
        img_rel = f"images/img_{i:05d}.lpt"
        msk_rel = f"masks/msk_{i:05d}.lpt"
        save_container(root / img_rel, dataset.images[i])
        save_container(root / msk_rel, dataset.masks[i])
        lines.append(f"{img_rel},{msk_rel}")
    (root / "index.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(directory) -> Dataset:
    root = Path(directory)
    index = root / "index.txt"
    if not index.is_file():
        raise DataError(f"no index.txt in {root}")
    images, masks = [], []
    for line in index.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        img_rel, msk_rel = line.split(",")
        images.append(load_container(root / img_rel))
        masks.append(load_container(root / msk_rel))
    if not images:
        raise DataError(f"empty dataset index in {root}")
    return Dataset(np.stack(images).astype(np.float32), np.stack(masks).astype(np.uint8))


def split(dataset: Dataset, fractions: Sequence[float], seed: int) -> list[Dataset]:
    """Disjoint, covering, seed-deterministic shuffle split."""
    fractions = list(fractions)
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(dataset)
    bounds = [int(round(sum(fractions[: i + 1]) * n)) for i in range(len(fractions))]
    starts = [0] + bounds[:-1]
    if any(b - s <= 0 for s, b in zip(starts, bounds)):
        raise DataError(f"split of {n} samples by {fractions} leaves an empty partition")
    perm = np.random.default_rng(seed).permutation(n)
    return [dataset.subset(perm[s:b]) for s, b in zip(starts, bounds)]
