"""Dataset loaders (MNIST IDX, CIFAR-10 binary, synthetic bars) and augmentation.

No downloading happens here: loaders read local files, gzip or raw.
"""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] in [0, 1]
    labels: np.ndarray  # [N] int64
    split: str = "train"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx, split=None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], split or self.split, dict(self.provenance))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_maybe_gz(path) -> bytes:
    raw = Path(path).read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def _parse_idx(buf: bytes, expect_magic: int, path) -> np.ndarray:
    if len(buf) < 8:
        raise DataFormatError(f"{path}: truncated header at offset 0")
    magic = struct.unpack_from(">I", buf, 0)[0]
    if magic != expect_magic:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    if len(buf) < 4 + 4 * ndim:
        raise DataFormatError(f"{path}: truncated dimension header at offset 4")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    start = 4 + 4 * ndim
    need = int(np.prod(dims, dtype=np.int64))
    if len(buf) - start < need:
        raise DataFormatError(
            f"{path}: payload truncated at offset {len(buf)}; expected {need} bytes from offset {start}"
        )
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=start).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Read an IDX image/label pair (plain or gzip) and scale pixels by 1/255."""
    imgs = _parse_idx(_read_maybe_gz(images_path), IDX_IMAGES, images_path)
    labels = _parse_idx(_read_maybe_gz(labels_path), IDX_LABELS, labels_path)
    if len(imgs) != len(labels):
        raise DataFormatError(f"{len(imgs)} images vs {len(labels)} labels")
    images = imgs.astype(np.float64)[:, None] / 255.0
    prov = {
        "images": str(images_path), "images_sha256": sha256_file(images_path),
        "labels": str(labels_path), "labels_sha256": sha256_file(labels_path),
    }
    return Dataset(images, labels.astype(np.int64), split, prov)


def write_idx(path, array: np.ndarray, compress: bool | None = None) -> None:
    """Write uint8 data as IDX (3-D images or 1-D labels); gzip if the name ends in .gz."""
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ValueError("IDX writer expects uint8 data")
    magic = 0x00000800 | arr.ndim
    buf = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()
    compress = str(path).endswith(".gz") if compress is None else compress
    if compress:
        buf = gzip.compress(buf, mtime=0)
    Path(path).write_bytes(buf)


_MNIST_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_mnist_dir(directory, split: str = "train") -> Dataset:
    """Load the standard MNIST file names (``.gz`` or not) from ``directory``."""
    directory = Path(directory)
    paths = []
    for stem in _MNIST_NAMES[split]:
        for cand in (directory / stem, directory / f"{stem}.gz"):
            if cand.exists():
                paths.append(cand)
                break
        else:
            raise FileNotFoundError(f"{directory}: missing {stem}[.gz]")
    return load_idx(*paths, split=split)


def load_cifar10_bin(paths, limit: int | None = None, split: str = "train") -> Dataset:
    """Read CIFAR-10 binary batches (1 label byte + 3072 channel-planar pixels)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels, prov = [], [], {}
    remaining = limit
    for path in paths:
        buf = _read_maybe_gz(path)
        if len(buf) % CIFAR_RECORD:
            whole = len(buf) // CIFAR_RECORD
            raise DataFormatError(
                f"{path}: truncated record at byte offset {whole * CIFAR_RECORD} "
                f"(length {len(buf)} is not a multiple of {CIFAR_RECORD})"
            )
        recs = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if remaining is not None:
            recs = recs[:remaining]
            remaining -= len(recs)
        labels.append(recs[:, 0].astype(np.int64))
        images.append(recs[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
        prov[str(path)] = sha256_file(path)
        if remaining == 0:
            break
    if not images:
        return Dataset(np.zeros((0, 3, 32, 32)), np.zeros(0, np.int64), split, prov)
    return Dataset(np.concatenate(images), np.concatenate(labels), split, prov)


def bar_template(angle: float, size: int, width: float = 2.0) -> np.ndarray:
    """Anti-aliased bar through the image centre at ``angle`` radians."""
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    # distance from the line through the centre with direction (cos, -sin)
    dist = np.abs((xx - c) * np.sin(angle) + (yy - c) * np.cos(angle))
    return np.clip(width / 2.0 + 0.5 - dist, 0.0, 1.0)


def synth_dataset(seed: int, n: int, n_classes: int = 2, size: int = 16, noise: float = 0.05) -> Dataset:
    """Oriented bars, class k at angle k*pi/n_classes, plus Gaussian pixel noise."""
    if not 2 <= n_classes <= 8:
        raise ValueError("n_classes must lie in 2..8")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % n_classes
    rng.shuffle(labels)
    templates = np.stack([bar_template(k * np.pi / n_classes, size) for k in range(n_classes)])
    images = templates[labels][:, None]
    if noise > 0:
        images = np.clip(images + rng.normal(0.0, noise, images.shape), 0.0, 1.0)
    return Dataset(images, labels, "synthetic", {"seed": seed, "n": n, "n_classes": n_classes, "size": size})


def augment(image, rng, flip: bool = False, crop_pad: int = 0, force_flip=None, force_offset=None):
    """Random horizontal flip (p=0.5) and reflect-pad + random crop of one [C, H, W] image."""
    image = np.asarray(image, dtype=np.float64)
    do_flip = force_flip if force_flip is not None else (flip and rng.random() < 0.5)
    if do_flip:
        image = image[..., ::-1]
    if crop_pad < 0:
        raise ValueError("crop_pad must be non-negative")
    if crop_pad:
        h, w = image.shape[-2:]
        padded = np.pad(image, [(0, 0)] * (image.ndim - 2) + [(crop_pad, crop_pad)] * 2, mode="reflect")
        if force_offset is not None:
            dy, dx = force_offset
        else:
            dy, dx = rng.integers(0, 2 * crop_pad + 1, size=2)
        image = padded[..., dy : dy + h, dx : dx + w]
    return np.ascontiguousarray(image)


def augment_batch(images, indices, key, flip=False, crop_pad=0):
    """Augment each image with its own stream keyed by ``key`` and its dataset index."""
    out = np.empty_like(images)
    for i, idx in enumerate(indices):
        rng = np.random.default_rng([*key, int(idx)])
        out[i] = augment(images[i], rng, flip, crop_pad)
    return out


def write_manifest(path, files: dict[str, Path]) -> None:
    lines = [f"{key}={Path(p).name} sha256={sha256_file(p)}" for key, p in sorted(files.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path, verify: bool = True) -> dict[str, Path]:
    """Parse ``key=file sha256=<hex>`` lines; files resolve relative to the manifest."""
    base = Path(path).parent
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        head, _, digest = line.partition(" sha256=")
        key, _, name = head.partition("=")
        file = base / name.strip()
        if verify and digest and sha256_file(file) != digest.strip():
            raise DataFormatError(f"{file}: checksum mismatch")
        out[key.strip()] = file
    return out


def load_cifar10_dir(directory, split: str = "train", limit: int | None = None) -> Dataset:
    """Load ``data_batch_{1..5}.bin`` or ``test_batch.bin`` from ``directory``."""
    directory = Path(directory)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    paths = [directory / n for n in names if (directory / n).exists()]
    if not paths:
        raise FileNotFoundError(f"{directory}: no CIFAR-10 {split} batches")
    return load_cifar10_bin(paths, limit, split)


def load_dataset(source, split: str = "train", limit: int | None = None) -> Dataset:
    """Load from a directory (MNIST IDX or CIFAR-10 binary batches) or from a manifest.

    Manifest keys: ``<split>_images``/``<split>_labels`` for IDX, or
    ``<split>_cifar`` (one or more, suffixed) for CIFAR-10 binary batches.
    """
    source = Path(source)
    if source.is_dir():
        if any(source.glob("*_batch*.bin")):
            ds = load_cifar10_dir(source, split, limit)
        else:
            ds = load_mnist_dir(source, split)
    else:
        files = read_manifest(source)
        if f"{split}_images" in files:
            ds = load_idx(files[f"{split}_images"], files[f"{split}_labels"], split)
        else:
            batches = [files[k] for k in sorted(files) if k.startswith(f"{split}_cifar")]
            if not batches:
                raise DataFormatError(f"{source}: no entries for split {split!r}")
            ds = load_cifar10_bin(batches, limit, split)
    if limit is not None and len(ds) > limit:
        ds = ds.subset(np.arange(limit))
    return ds
