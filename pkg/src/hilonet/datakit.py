"""Image records, deterministic folder loading, synthetic corpora, and
the binary checkpoint codec.

Pixels are float arrays shaped [3, H, W] in [0, 1]. Folder listings are
sorted lexicographically so every load order is reproducible.

Checkpoint layout (little-endian throughout):

    magic "FIFB" | version u32 | config_len u32 | config JSON utf-8
    | entry_count u32 | entries | crc32 u32

    entry: name_len u16 | name utf-8 | dtype tag 4 bytes ("f32\\0")
           | ndim u8 | extents u32 * ndim | payload f32 * prod(extents)

The trailing CRC covers every preceding byte, so truncation or a single
flipped bit surfaces as ChecksumError before anything is parsed.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ChecksumError, DataError, VersionError

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FIFB"
CHECKPOINT_VERSION = 1
_DTYPE_TAG = b"f32\x00"

RAW_MAGIC = b"RAWF"
RAW_VERSION = 1

IMAGE_EXTENSIONS = (".png", ".raw")


@dataclass
class ImageRecord:
    """One image: source path, [3, H, W] pixels in [0, 1], optional label."""

    path: str
    pixels: np.ndarray
    label: int | None = None

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


@dataclass
class Dataset:
    records: list[ImageRecord] = field(default_factory=list)
    class_names: list[str] | None = None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


# ---------------------------------------------------------------------------
# image codecs


def _check_pixels(pixels: np.ndarray, path: str) -> np.ndarray:
    if pixels.ndim != 3 or pixels.shape[0] != 3:
        raise DataError(f"{path}: pixels shaped {pixels.shape}, expected [3, H, W]")
    lo, hi = float(pixels.min()), float(pixels.max())
    if lo < -1e-6 or hi > 1.0 + 1e-6:
        raise DataError(f"{path}: pixel range [{lo:.4g}, {hi:.4g}] outside [0, 1]")
    return np.clip(pixels, 0.0, 1.0)


def load_image(path: str) -> np.ndarray:
    """Read a PNG or raw image into [3, H, W] floats in [0, 1]."""
    ext = os.path.splitext(path)[1].lower()
    if ext == ".png":
        try:
            with Image.open(path) as im:
                if im.mode == "L":
                    arr = np.asarray(im, dtype=np.float64) / 255.0
                    pixels = np.stack([arr, arr, arr])
                else:
                    arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
                    pixels = arr.transpose(2, 0, 1)
        except OSError as exc:
            raise DataError(f"{path}: cannot read PNG: {exc}") from None
        return _check_pixels(pixels, path)
    if ext == ".raw":
        return _load_raw(path)
    raise DataError(f"{path}: unsupported image extension {ext!r}")


def save_image(pixels: np.ndarray, path: str) -> None:
    """Write [3, H, W] floats in [0, 1] as 8-bit PNG or exact raw floats."""
    ext = os.path.splitext(path)[1].lower()
    if ext == ".png":
        u8 = np.clip(np.rint(np.clip(pixels, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(u8.transpose(1, 2, 0), mode="RGB").save(path)
    elif ext == ".raw":
        _save_raw(pixels, path)
    else:
        raise DataError(f"{path}: unsupported image extension {ext!r}")


def save_gray_png(values: np.ndarray, path: str) -> None:
    """Write a 2-d array as grayscale PNG, min-max scaled to 0..255."""
    v = np.asarray(values, dtype=np.float64)
    span = v.max() - v.min()
    scaled = (v - v.min()) / span if span > 0 else np.zeros_like(v)
    Image.fromarray(np.rint(scaled * 255.0).astype(np.uint8), mode="L").save(path)


def _save_raw(pixels: np.ndarray, path: str) -> None:
    c, h, w = pixels.shape
    payload = np.ascontiguousarray(pixels, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(RAW_MAGIC)
        f.write(struct.pack("<IIII", RAW_VERSION, c, h, w))
        f.write(payload)


def _load_raw(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    head = 4 + 16
    if len(blob) < head or blob[:4] != RAW_MAGIC:
        raise DataError(f"{path}: not a raw image file")
    version, c, h, w = struct.unpack("<IIII", blob[4:head])
    if version != RAW_VERSION:
        raise VersionError(f"{path}: raw image version {version}, expected {RAW_VERSION}")
    expected = c * h * w * 4
    if len(blob) != head + expected:
        raise DataError(f"{path}: payload is {len(blob) - head} bytes, expected {expected}")
    pixels = np.frombuffer(blob, dtype="<f4", offset=head).reshape(c, h, w).astype(np.float64)
    return _check_pixels(pixels, path)


# ---------------------------------------------------------------------------
# folder loading


def load_image_dir(root: str) -> Dataset:
    """Load a directory of images, deterministically.

    A flat folder yields unlabeled records. A folder of subdirectories
    is treated as one class per subdirectory, labels assigned by sorted
    subdirectory name. Unsupported files are skipped with a warning;
    an empty result is an error.
    """
    if not os.path.isdir(root):
        raise DataError(f"{root}: not a directory")
    subdirs = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    records: list[ImageRecord] = []
    if subdirs:
        class_names = subdirs
        for label, sub in enumerate(class_names):
            for name in sorted(os.listdir(os.path.join(root, sub))):
                path = os.path.join(root, sub, name)
                if not os.path.isfile(path):
                    continue
                if not name.lower().endswith(IMAGE_EXTENSIONS):
                    log.warning("skipping unsupported file %s", path)
                    continue
                records.append(ImageRecord(path, load_image(path), label))
    else:
        class_names = None
        for name in sorted(os.listdir(root)):
            path = os.path.join(root, name)
            if not os.path.isfile(path):
                continue
            if not name.lower().endswith(IMAGE_EXTENSIONS):
                log.warning("skipping unsupported file %s", path)
                continue
            records.append(ImageRecord(path, load_image(path), None))
    if not records:
        raise DataError(f"{root}: no readable images found")
    return Dataset(records, class_names)


def stack_pixels(records: list[ImageRecord]) -> np.ndarray:
    """[B, 3, H, W] batch; extents must agree across the records."""
    first = records[0]
    for r in records:
        if r.pixels.shape != first.pixels.shape:
            raise DataError(f"{r.path}: extents {r.pixels.shape[1:]} differ from "
                            f"{first.pixels.shape[1:]} ({first.path})")
    return np.stack([r.pixels for r in records])


def write_corpus(dataset: Dataset, root: str, fmt: str = "png") -> None:
    """Materialize a dataset on disk; labeled sets get class subfolders."""
    os.makedirs(root, exist_ok=True)
    for i, rec in enumerate(dataset.records):
        if dataset.class_names is not None and rec.label is not None:
            sub = os.path.join(root, dataset.class_names[rec.label])
            os.makedirs(sub, exist_ok=True)
            path = os.path.join(sub, f"{i:05d}.{fmt}")
        else:
            path = os.path.join(root, f"{i:05d}.{fmt}")
        save_image(rec.pixels, path)


# ---------------------------------------------------------------------------
# synthetic corpora


def _gradient(rng, size: int) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    a, b = rng.uniform(-1.0, 1.0, 2)
    g = a * y + b * x
    span = g.max() - g.min()
    g = (g - g.min()) / span if span > 0 else np.zeros_like(g)
    return 0.1 + 0.8 * g


def _blob(rng, size: int) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size]
    cy, cx = rng.uniform(size * 0.25, size * 0.75, 2)
    sigma = rng.uniform(size / 5.0, size / 3.0)
    return 0.1 + 0.8 * np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2.0 * sigma * sigma))

def _slow_wave(rng, size: int) -> np.ndarray:
    fy, fx = rng.integers(0, 3, 2)
    if fy == 0 and fx == 0:
        fx = 1
    phase = rng.uniform(0.0, 2.0 * np.pi)
    y, x = np.mgrid[0:size, 0:size]
    return 0.5 + 0.4 * np.sin(2.0 * np.pi * (fy * y + fx * x) / size + phase)


# The high-band makers keep the background dark and the bright fraction
# small. With DC counted in the energy total, a pattern oscillating
# around mid-gray can never push more than half its energy past the
# cutoff (a 50/50 two-level image lands on the 0.5 boundary exactly), so
# genuinely high-rated texture needs contrast against a low mean.


def _checkerboard(rng, size: int) -> np.ndarray:
    cell = int(rng.integers(1, 3))
    y, x = np.mgrid[0:size, 0:size]
    dots = ((y // cell) % 2 == 0) & ((x // cell) % 2 == 0)
    return 0.05 + 0.85 * dots.astype(np.float64)


def _stripes(rng, size: int) -> np.ndarray:
    period = int(rng.integers(3, 5))
    offset = int(rng.integers(0, period))
    axis = int(rng.integers(0, 2))
    y, x = np.mgrid[0:size, 0:size]
    t = x if axis == 0 else y
    return 0.05 + 0.85 * ((t + offset) % period == 0).astype(np.float64)


def _noise(rng, size: int) -> np.ndarray:
    return 0.05 + 0.85 * (rng.random((size, size)) < 0.2).astype(np.float64)


def _colorize(rng, pattern: np.ndarray) -> np.ndarray:
    weights = rng.uniform(0.8, 1.0, 3)
    return np.stack([pattern * w for w in weights])


LOW_BAND, HIGH_BAND = 0, 1


def synth_corpus(n: int, size: int, seed: int = 0) -> Dataset:
    """Images with a known dominant band: label 0 for low-frequency
    content (gradients, blobs, slow waves), 1 for high (checkerboards,
    fine stripes, binary noise)."""
    rng = np.random.default_rng(seed)
    low_makers = (_gradient, _blob, _slow_wave)
    high_makers = (_checkerboard, _stripes, _noise)
    records = []
    for i in range(n):
        label = i % 2
        makers = low_makers if label == LOW_BAND else high_makers
        maker = makers[int(rng.integers(0, len(makers)))]
        pixels = _colorize(rng, maker(rng, size))
        records.append(ImageRecord(f"synth://{i:05d}", pixels, label))
    return Dataset(records, ["low_band", "high_band"])


def synth_cls_corpus(n_per_class: int, size: int, seed: int = 0) -> Dataset:
    """A trivially separable 3-class set: gradients, stripes, checkerboards."""
    rng = np.random.default_rng(seed)
    makers = (_gradient, _stripes, _checkerboard)
    names = ["gradient", "stripes", "checker"]
    records = []
    for label, maker in enumerate(makers):
        for i in range(n_per_class):
            pixels = _colorize(rng, maker(rng, size))
            records.append(ImageRecord(f"synth://{names[label]}/{i:05d}", pixels, label))
    return Dataset(records, names)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str, weights: dict[str, np.ndarray], config: dict) -> None:
    """Write weights and a config blob; entries are sorted by name and
    stored as little-endian float32."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(blob)))
    chunks.append(blob)
    chunks.append(struct.pack("<I", len(weights)))
    for name in sorted(weights):
        # asarray with order="C", not ascontiguousarray: the latter
        # silently promotes 0-d arrays to shape (1,)
        arr = np.asarray(weights[name], dtype="<f4", order="C")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(_DTYPE_TAG)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.tobytes())
    body = b"".join(chunks)
    body += struct.pack("<I", zlib.crc32(body))
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(body)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise DataError(f"{self.path}: unexpected end of checkpoint data")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint back as (weights, config).

    CRC is validated over the whole body before parsing, so corruption
    and truncation both raise ChecksumError; an unknown format version
    raises VersionError.
    """
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise DataError(f"{path}: cannot read checkpoint: {exc}") from None
    if len(blob) < 8:
        raise ChecksumError(f"{path}: too short to be a checkpoint")
    stored = struct.unpack("<I", blob[-4:])[0]
    actual = zlib.crc32(blob[:-4])
    if stored != actual:
        raise ChecksumError(f"{path}: CRC mismatch (stored {stored:#010x}, "
                            f"computed {actual:#010x})")
    r = _Reader(blob[:-4], path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad magic, not a checkpoint file")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: checkpoint version {version}, "
                           f"supported {CHECKPOINT_VERSION}")
    try:
        config = json.loads(r.take(r.u32()).decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: config blob is not valid JSON: {exc}") from None
    count = r.u32()
    weights: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = struct.unpack("<H", r.take(2))[0]
        name = r.take(name_len).decode("utf-8")
        tag = r.take(4)
        if tag != _DTYPE_TAG:
            raise DataError(f"{path}: entry {name}: unknown dtype tag {tag!r}")
        ndim = struct.unpack("<B", r.take(1))[0]
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim)) if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        payload = r.take(4 * n)
        weights[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    if r.off != len(r.blob):
        raise DataError(f"{path}: {len(r.blob) - r.off} trailing bytes after entries")
    return weights, config
