"""Image I/O, folder-per-class datasets, stratified splits and batching."""
from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, FormatError, LoadError, SplitError
from .loss import one_hot
from .tensor import Shape2D, _bilinear

_WHITESPACE = b" \t\r\n\v\f"


def _read_header_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(buf):
        ch = buf[pos:pos + 1]
        if ch == b"#":
            end = buf.find(b"\n", pos)
            pos = len(buf) if end < 0 else end + 1
        elif ch in _WHITESPACE:
            pos += 1
        else:
            break
    start = pos
    while pos < len(buf) and buf[pos:pos + 1] not in _WHITESPACE and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("truncated PPM header", start)
    return buf[start:pos], pos


def decode_ppm(buf: bytes) -> np.ndarray:
    """Decode a binary P6 image into a float32 CHW array scaled to [0, 1]."""
    if buf[:2] != b"P6":
        raise FormatError(f"bad magic {buf[:2]!r}, expected b'P6'", 0)
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        tok, end = _read_header_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise FormatError(f"non-numeric {name} {tok!r}", end - len(tok)) from None
        pos = end
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"invalid image extent {width}x{height}", 2)
    if not 0 < maxval <= 65535:
        raise FormatError(f"maxval {maxval} outside 1..65535", pos)
    if pos >= len(buf) or buf[pos:pos + 1] not in _WHITESPACE:
        raise FormatError("missing whitespace after maxval", pos)
    pos += 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * 3 * dtype.itemsize
    if len(buf) - pos < need:
        raise FormatError(f"truncated payload: {len(buf) - pos} of {need} bytes", len(buf))
    pix = np.frombuffer(buf, dtype=dtype, count=width * height * 3, offset=pos)
    img = pix.reshape(height, width, 3).transpose(2, 0, 1).astype(np.float32)
    return img / np.float32(maxval)


def encode_ppm(img, maxval=255) -> bytes:
    """Encode a CHW image with values in [0, 1] as binary P6."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a 3xHxW image, got {img.shape}")
    if not 0 < maxval <= 65535:
        raise ValueError("maxval must be in 1..65535")
    dtype = ">u2" if maxval > 255 else "u1"
    q = np.rint(np.clip(img, 0.0, 1.0).astype(np.float64) * maxval).astype(dtype)
    header = f"P6\n{img.shape[2]} {img.shape[1]}\n{maxval}\n".encode("ascii")
    return header + q.transpose(1, 2, 0).tobytes()


def read_image(path) -> np.ndarray:
    path = Path(path)
    try:
        return decode_ppm(path.read_bytes())
    except FormatError as exc:
        raise LoadError(f"cannot decode {path}: {exc}") from exc


# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """Labelled images. ``items`` holds ``(path, class_index)`` pairs in sorted path order."""

    items: list
    classes: list
    root: Path | None = None
    _arrays: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.items)

    @property
    def num_classes(self):
        return len(self.classes)

    @property
    def labels(self):
        return np.array([c for _, c in self.items], dtype=np.intp)

    def image(self, i) -> np.ndarray:
        ref = self.items[i][0]
        if isinstance(ref, np.ndarray):
            return ref
        return read_image(ref)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.items[i] for i in indices], self.classes, self.root)

    @classmethod
    def from_arrays(cls, images, labels, classes) -> "Dataset":
        """In-memory dataset; mainly for tests and toy problems."""
        items = [(np.asarray(img, dtype=np.float32), int(y)) for img, y in zip(images, labels)]
        return cls(items, list(classes))


def load_image_dataset(root) -> Dataset:
    """Load ``root/<class_name>/*.ppm``. Images are decoded on access."""
    root = Path(root)
    if not root.is_dir():
        raise LoadError(f"dataset root {root} is not a directory")
    classes = sorted(d.name for d in root.iterdir() if d.is_dir())
    if len(classes) < 2:
        raise LoadError(f"{root} needs at least 2 class directories, found {len(classes)}")
    items = []
    for idx, name in enumerate(classes):
        files = sorted(p for p in (root / name).iterdir() if p.is_file())
        if not files:
            raise LoadError(f"class directory {name!r} contains no images")
        for f in files:
            try:
                head = f.open("rb").read(2)
            except OSError as exc:
                raise LoadError(f"cannot read {f}: {exc}") from exc
            if head != b"P6":
                raise LoadError(f"cannot decode {f}: not a binary PPM file")
            items.append((f, idx))
    return Dataset(items, classes, root)


@dataclass
class Split:
    train: Dataset
    val: Dataset
    holdout: Dataset | None = None


def stratified_split(ds: Dataset, val_fraction, seed=0, holdout_fraction=0.0) -> Split:
    """Per-class seeded shuffle; the first ``round(n_c * val_fraction)`` items go to val.

    Rounding is half-to-even and each class keeps at least one item on each side.
    """
    if not 0 < val_fraction < 1:
        raise SplitError("val_fraction must be in (0, 1)")
    if not 0 <= holdout_fraction < 1 - val_fraction:
        raise SplitError("holdout_fraction must be in [0, 1 - val_fraction)")
    labels = ds.labels
    train_idx, val_idx, hold_idx = [], [], []
    for c, name in enumerate(ds.classes):
        members = np.flatnonzero(labels == c)
        if len(members) < 2:
            raise SplitError(f"class {name!r} has {len(members)} items; need at least 2 to split")
        perm = members[np.random.default_rng([seed, c]).permutation(len(members))]
        n_val = min(max(round(len(members) * val_fraction), 1), len(members) - 1)
        n_hold = round(len(members) * holdout_fraction) if holdout_fraction else 0
        n_hold = min(n_hold, len(members) - n_val - 1)
        val_idx.extend(perm[:n_val])
        hold_idx.extend(perm[n_val:n_val + n_hold])
        train_idx.extend(perm[n_val + n_hold:])
    holdout = ds.subset(sorted(hold_idx)) if holdout_fraction else None
    return Split(ds.subset(sorted(train_idx)), ds.subset(sorted(val_idx)), holdout)


def load_batch(ds: Dataset, indices, size: Shape2D) -> np.ndarray:
    imgs = [ds.image(i) for i in indices]
    return np.stack([_bilinear(im, size.height, size.width) for im in imgs]).astype(np.float32, copy=False)


def epoch_order(n, seed, epoch, shuffle=True) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, 0xBA7C, epoch]).permutation(n)


def batch_iterator(ds: Dataset, batch_size, seed=0, size: Shape2D | None = None,
                   epoch=0, shuffle=True) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images NCHW, one-hot labels)``; the final short batch is kept."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if size is None:
        h, w = ds.image(0).shape[1:]
        size = Shape2D(h, w)
    order = epoch_order(len(ds), seed, epoch, shuffle)
    labels = ds.labels
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield load_batch(ds, idx, size), one_hot(labels[idx], ds.num_classes)


# ---------------------------------------------------------------------------
# synthetic data


def _class_pattern(k, num_classes, size: Shape2D, rng) -> np.ndarray:
    h, w = size.height, size.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy = (yy + 0.5) / h
    xx = (xx + 0.5) / w
    hue = k / num_classes
    bg = np.array(colorsys.hsv_to_rgb(hue, 0.55, 0.75))
    fg = np.array(colorsys.hsv_to_rgb((hue + 0.5) % 1.0, 0.7, 0.95))
    # class-specific geometry: stripe orientation/frequency plus a blob at a class-dependent spot
    angle = np.pi * k / num_classes
    freq = 2 + (k % 3)
    phase = rng.uniform(0, 2 * np.pi)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
    theta = 2 * np.pi * k / num_classes
    cy = 0.5 + 0.25 * np.sin(theta) + rng.uniform(-0.05, 0.05)
    cx = 0.5 + 0.25 * np.cos(theta) + rng.uniform(-0.05, 0.05)
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.12 ** 2))
    mix = np.clip(0.35 * stripes + 0.65 * blob, 0, 1)
    img = bg[:, None, None] * (1 - mix) + fg[:, None, None] * mix
    img = img + rng.normal(0.0, 0.05, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def gen_synthetic_dataset(out, classes=4, per_class=250, size=Shape2D(32, 32), seed=0):
    """Write a folder-per-class PPM dataset of parametric patterns.

    Class ``k`` has a hue-``k`` background, stripes at a class-specific
    orientation and a blob at a class-specific location, plus Gaussian noise
    (sigma 0.05). Output is byte-identical for a given seed.
    """
    if not 2 <= classes <= 10:
        raise ConfigError("classes must be in [2, 10]")
    if per_class < 1:
        raise ConfigError("per_class must be >= 1")
    out = Path(out)
    try:
        for k in range(classes):
            d = out / f"class_{k:02d}"
            d.mkdir(parents=True, exist_ok=True)
            for i in range(per_class):
                rng = np.random.default_rng([seed, k, i])
                img = _class_pattern(k, classes, size, rng)
                (d / f"img_{i:05d}.ppm").write_bytes(encode_ppm(img))
    except OSError as exc:
        raise LoadError(f"cannot write synthetic dataset to {out}: {exc}") from exc
    return out


def count_images(root) -> int:
    return sum(1 for _, _, files in os.walk(root) for f in files if f.endswith(".ppm"))
