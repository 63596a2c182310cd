"""Datasets: class-folder ingestion of PPM/PGM images and a procedural
lesion generator used for desk-scale experiments."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".ppm", ".pgm", ".pnm")

# class-specific lesion colours (RGB in [0,1])
PALETTE = np.array([
    [0.55, 0.27, 0.07],
    [0.95, 0.85, 0.10],
    [0.95, 0.50, 0.10],
    [0.92, 0.92, 0.92],
    [0.08, 0.08, 0.08],
    [0.80, 0.10, 0.10],
    [0.50, 0.20, 0.65],
    [0.15, 0.35, 0.85],
])
BACKGROUND = np.array([0.2, 0.5, 0.2])


@dataclass
class Sample:
    image: np.ndarray  # [3, H, W] in [0, 1]
    label: int
    source_path: str = "synthetic"
    lesions: list = field(default_factory=list)  # (row, col, radius) per disc


@dataclass
class Dataset:
    samples: list
    class_names: list
    skipped: int = 0

    def __post_init__(self):
        if len(set(self.class_names)) != len(self.class_names):
            raise DataError("class names must be unique")
        k = len(self.class_names)
        for s in self.samples:
            if not 0 <= s.label < k:
                raise DataError(f"label {s.label} outside [0, {k})")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def images(self, dtype=np.float32) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, 3, 1, 1), dtype=dtype)
        return np.stack([s.image for s in self.samples]).astype(dtype)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], list(self.class_names))


# -- synthetic lesions ----------------------------------------------------------

def disc_mask(size: int, lesions) -> np.ndarray:
    rows, cols = np.mgrid[0:size, 0:size]
    mask = np.zeros((size, size), dtype=bool)
    for r, c, rad in lesions:
        mask |= (rows - r) ** 2 + (cols - c) ** 2 <= rad * rad
    return mask


def synthetic_image(k: int, index: int, size: int, seed: int):
    """One image of class ``k``: noisy green background plus (3+k) discs of
    radius (2+k). Deterministic in (seed, k, index)."""
    rng = np.random.default_rng([seed, k, index])
    img = BACKGROUND[:, None, None] + rng.normal(0.0, 0.05, size=(3, size, size))
    radius = 2 + k
    lesions = []
    for _ in range(3 + k):
        r = int(rng.integers(radius, size - radius))
        c = int(rng.integers(radius, size - radius))
        lesions.append((r, c, radius))
    mask = disc_mask(size, lesions)
    img[:, mask] = PALETTE[k][:, None]
    return np.clip(img, 0.0, 1.0), lesions


def generate_synthetic(k: int = 7, n_per_class: int = 50, size: int = 64, seed: int = 1) -> Dataset:
    if not 1 <= k <= len(PALETTE):
        raise DataError(f"synthetic data supports 1..{len(PALETTE)} classes, got {k}")
    if size < 32:
        raise DataError(f"synthetic image size must be >= 32, got {size}")
    samples = []
    for label in range(k):
        for i in range(n_per_class):
            img, lesions = synthetic_image(label, i, size, seed)
            samples.append(Sample(img, label, "synthetic", lesions))
    return Dataset(samples, [f"class{i}" for i in range(k)])


# -- image files ------------------------------------------------------------------

def _read_token(buf: bytes, pos: int):
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("header", "truncated PNM header")
    return buf[start:pos], pos


def read_pnm(path) -> np.ndarray:
    """Decode binary PPM (P6) or PGM (P5) into a float ``[3, H, W]`` array in [0, 1]."""
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise FormatError("magic", f"{path}: unsupported image type {magic!r}")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise FormatError("header", f"{path}: bad header field {tok!r}") from None
    width, height, maxval = fields
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise FormatError("header", f"{path}: invalid dimensions or maxval")
    pos += 1  # single whitespace byte after maxval
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    raw = buf[pos:pos + count * dtype.itemsize]
    if len(raw) != count * dtype.itemsize:
        raise FormatError("length", f"{path}: pixel data truncated")
    arr = np.frombuffer(raw, dtype=dtype).astype(np.float64) / maxval
    arr = arr.reshape(height, width, channels).transpose(2, 0, 1)
    if channels == 1:
        arr = np.repeat(arr, 3, axis=0)
    return arr


def to_bytes(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """Write a ``[3, H, W]`` float image in [0, 1] as binary PPM."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = np.repeat(image[None], 3, axis=0)
    _, h, w = image.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + to_bytes(image).transpose(1, 2, 0).tobytes())


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of ``[..., H, W]`` (half-pixel centres, edge clamped)."""
    h, w = image.shape[-2:]
    if (h, w) == (height, width):
        return image.copy()

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(h, height)
    c0, c1, fc = axis(w, width)
    top = image[..., r0, :] * (1 - fr)[:, None] + image[..., r1, :] * fr[:, None]
    return top[..., c0] * (1 - fc) + top[..., c1] * fc


def _decode(path):
    try:
        return read_pnm(path), None
    except (FormatError, OSError) as exc:
        return None, exc


def load_image_folder(root, size: int = 64, workers: int = 1) -> Dataset:
    """Load ``root/<class>/*.ppm``; class names are the sorted subdirectory names.

    Files decode on up to ``workers`` threads; sample order is always
    class-major, then file name.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DataError(f"no class subdirectories under {root}")
    listing = [(label, f) for label, d in enumerate(class_dirs)
               for f in sorted(d.iterdir()) if f.suffix.lower() in IMAGE_SUFFIXES]
    paths = [f for _, f in listing]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            decoded = list(pool.map(_decode, paths))
    else:
        decoded = [_decode(f) for f in paths]
    samples, skipped = [], 0
    loaded = [0] * len(class_dirs)
    for (label, f), (img, exc) in zip(listing, decoded):
        if img is None:
            log.warning("skipping unreadable image %s: %s", f, exc)
            skipped += 1
            continue
        samples.append(Sample(resize_bilinear(img, size, size), label, str(f)))
        loaded[label] += 1
    for d, n in zip(class_dirs, loaded):
        if n == 0:
            raise DataError(f"class {d.name!r} has no readable images")
    return Dataset(samples, [d.name for d in class_dirs], skipped=skipped)


def write_image_folder(ds: Dataset, root) -> None:
    """Write a dataset as ``root/<class>/<index>.ppm``."""
    root = Path(root)
    counters = {}
    for s in ds.samples:
        name = ds.class_names[s.label]
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        i = counters.get(name, 0)
        counters[name] = i + 1
        write_ppm(d / f"{i:05d}.ppm", s.image)
