"""Datasets, segmentation masks and heatmap files."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_BATCH_RECORDS = 10000
CIFAR_BATCH_BYTES = CIFAR_RECORD * CIFAR_BATCH_RECORDS  # 30730000
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR_CLASSES = ("airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck")


class DataFormatError(ValueError):
    """A data, mask or image file does not follow its documented format."""


@dataclass
class Dataset:
    """Images normalized to [-1, 1] (N x 3 x 32 x 32) with integer labels.

    ``masks`` (N x 32 x 32, 1 = object) is only present for synthetic data.
    """

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    masks: np.ndarray | None = None

    def __post_init__(self):
        self.images = T.as_tensor(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.masks is not None and len(self.masks) != len(self.images):
            raise ValueError("masks must align with images")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        masks = None if self.masks is None else self.masks[idx]
        return Dataset(self.images[idx], self.labels[idx], self.split, masks)

    def head(self, n: int) -> "Dataset":
        return self.subset(np.arange(min(n, len(self))))


def bytes_to_unit(b) -> np.ndarray:
    return np.asarray(b, dtype=T.DTYPE) / T.DTYPE(255)


def normalize_bytes(b) -> np.ndarray:
    """Pixel bytes -> [-1, 1] via byte/255 then 2v - 1."""
    return (T.DTYPE(2) * bytes_to_unit(b) - T.DTYPE(1)).astype(T.DTYPE)


def denormalize_to_bytes(x) -> np.ndarray:
    return np.rint((np.asarray(x, dtype=np.float64) + 1) / 2 * 255).clip(0, 255).astype(np.uint8)


def unit_to_normalized(u) -> np.ndarray:
    return (T.DTYPE(2) * np.asarray(u, dtype=T.DTYPE) - T.DTYPE(1)).astype(T.DTYPE)


def load_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse one CIFAR-10 binary batch file into (pixel bytes N x 3 x 32 x 32, labels)."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) != CIFAR_BATCH_BYTES:
        raise DataFormatError(f"{path}: expected {CIFAR_BATCH_BYTES} bytes, got {len(raw)}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(CIFAR_BATCH_RECORDS, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataFormatError(f"{path}: record {bad} has label {labels[bad]} outside 0..9")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def load_cifar10(directory, train_limit: int | None = None, test_limit: int | None = None) -> tuple[Dataset, Dataset]:
    directory = Path(directory)
    missing = [f for f in CIFAR_TRAIN_FILES + (CIFAR_TEST_FILE,) if not (directory / f).is_file()]
    if missing:
        raise FileNotFoundError(f"{directory}: missing CIFAR-10 files {', '.join(missing)}")
    pix, labs = [], []
    for f in CIFAR_TRAIN_FILES:
        p, l = load_cifar_batch(directory / f)
        pix.append(p)
        labs.append(l)
        if train_limit is not None and sum(map(len, labs)) >= train_limit:
            break
    train_pix, train_lab = np.concatenate(pix), np.concatenate(labs)
    test_pix, test_lab = load_cifar_batch(directory / CIFAR_TEST_FILE)
    if train_limit is not None:
        train_pix, train_lab = train_pix[:train_limit], train_lab[:train_limit]
    if test_limit is not None:
        test_pix, test_lab = test_pix[:test_limit], test_lab[:test_limit]
    return (
        Dataset(normalize_bytes(train_pix), train_lab, "train"),
        Dataset(normalize_bytes(test_pix), test_lab, "test"),
    )


def default_data_dir(explicit=None) -> Path | None:
    if explicit:
        return Path(explicit)
    env = os.environ.get("RGLAB_DATA_DIR")
    return Path(env) if env else None


# Ten well-separated RGB colours in [-1, 1].
_CLASS_COLORS = np.array(
    [
        [0.9, -0.8, -0.8],
        [-0.8, 0.9, -0.8],
        [-0.8, -0.8, 0.9],
        [0.9, 0.9, -0.8],
        [0.9, -0.8, 0.9],
        [-0.8, 0.9, 0.9],
        [0.9, 0.9, 0.9],
        [0.9, 0.2, -0.8],
        [0.2, -0.8, 0.9],
        [-0.8, 0.2, 0.2],
    ],
    dtype=T.DTYPE,
)


def synthetic_dataset(n: int, seed: int = 0, split: str = "train", noise: float = 0.3) -> Dataset:
    """Class-coloured discs on a noisy background, with object masks.

    Labels are assigned round-robin; every disc has a random centre and
    radius and never covers the whole image.
    """
    if n < 10:
        raise ValueError("synthetic_dataset needs n >= 10")
    rng = np.random.default_rng([seed, 7])
    labels = np.arange(n) % 10
    yy, xx = np.mgrid[0:32, 0:32]
    images = np.empty((n, 3, 32, 32), dtype=T.DTYPE)
    masks = np.empty((n, 32, 32), dtype=np.uint8)
    for i in range(n):
        r = rng.uniform(6, 10)
        cy, cx = rng.uniform(r, 32 - r, size=2)
        disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        bg = rng.normal(0, noise, size=(3, 32, 32))
        fg = _CLASS_COLORS[labels[i]][:, None, None] + rng.normal(0, noise / 3, size=(3, 32, 32))
        images[i] = np.clip(np.where(disc, fg, bg), -1, 1)
        masks[i] = disc
    return Dataset(images, labels, split, masks)


# ---------------------------------------------------------------------------
# PGM / PPM
# ---------------------------------------------------------------------------


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


def encode_pnm(pixels: np.ndarray) -> bytes:
    """Binary PGM (H x W) or PPM (H x W x 3) of uint8 pixels."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    magic = b"P6" if pixels.ndim == 3 else b"P5"
    h, w = pixels.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + pixels.tobytes()


def _pnm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError("truncated PNM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # one whitespace byte ends the header


def decode_pgm(buf: bytes) -> np.ndarray:
    (magic, w, h, maxval), start = _pnm_tokens(buf, 4)
    if magic != b"P5":
        raise DataFormatError(f"expected binary PGM (P5), got {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise DataFormatError(f"expected maxval 255, got {maxval}")
    body = buf[start:start + w * h]
    if len(body) != w * h:
        raise DataFormatError(f"PGM payload has {len(body)} bytes, expected {w * h}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def save_mask(mask, path) -> None:
    mask = np.asarray(mask)
    if mask.shape != (32, 32):
        raise DataFormatError(f"mask must be 32x32, got {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise DataFormatError("mask values must be 0 or 1")
    atomic_write_bytes(path, encode_pnm(mask.astype(np.uint8) * 255))


def load_mask(path) -> np.ndarray:
    """Read a 32x32 P5 mask with values {0, 255}; returns uint8 {0, 1} (1 = object)."""
    pix = decode_pgm(Path(path).read_bytes())
    if pix.shape != (32, 32):
        raise DataFormatError(f"{path}: mask must be 32x32, got {pix.shape[1]}x{pix.shape[0]}")
    bad = ~np.isin(pix, (0, 255))
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise DataFormatError(f"{path}: value {pix[r, c]} at row {r}, col {c} is not 0 or 255")
    return (pix == 255).astype(np.uint8)


def load_mask_dir(directory) -> dict[int, np.ndarray]:
    """Masks named ``<test index>.pgm`` in a directory, keyed by test-set index."""
    out = {}
    for p in sorted(Path(directory).glob("*.pgm")):
        if p.stem.isdigit():
            out[int(p.stem)] = load_mask(p)
    return out


def heatmap_pixels(values, color: bool = False) -> np.ndarray:
    """Channel-sum, cap to [p0.5, p99.5], and scale to 8-bit pixels.

    Grayscale maps the capped range linearly onto [0, 255]; a zero-width
    range renders as all zeros.  ``color`` gives a diverging blue-white-red
    image centred on zero instead.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 3:
        values = values.sum(axis=0)
    if values.ndim != 2:
        raise T.ShapeError(f"heatmap needs a CHW or HW map, got shape {values.shape}")
    lo, hi = T.percentile(values, 0.5), T.percentile(values, 99.5)
    capped = np.clip(values, lo, hi)
    if not color:
        if hi <= lo:
            return np.zeros(values.shape, dtype=np.uint8)
        return np.rint((capped - lo) / (hi - lo) * 255).astype(np.uint8)
    scale = max(abs(lo), abs(hi))
    t = capped / scale if scale > 0 else np.zeros_like(capped)
    fade = np.rint(255 * (1 - np.abs(t))).astype(np.uint8)
    full = np.full_like(fade, 255)
    r = np.where(t >= 0, full, fade)
    b = np.where(t <= 0, full, fade)
    return np.stack([r, fade, b], axis=-1)


def render_heatmap(values, path, color: bool = False) -> np.ndarray:
    pixels = heatmap_pixels(values, color)
    atomic_write_bytes(path, encode_pnm(pixels))
    return pixels


def save_raw(values, path) -> None:
    """Flat little-endian float32 dump."""
    atomic_write_bytes(path, np.ascontiguousarray(values, dtype="<f4").tobytes())


def load_raw(path, shape) -> np.ndarray:
    return np.frombuffer(Path(path).read_bytes(), dtype="<f4").reshape(shape).astype(T.DTYPE)
