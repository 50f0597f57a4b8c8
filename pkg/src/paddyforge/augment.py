"""Training-time augmentation policies, mixup and test-time augmentation.

Every random transform takes an explicit ``numpy.random.Generator``; callers
derive one generator per example so batches stay reproducible.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Shape2D, _bilinear


class AugPolicy(str, enum.Enum):
    NONE = "none"
    MINIMAL = "minimal"
    FULL = "full"


JITTER = 0.10
SCALE_RANGE = (0.75, 1.33)
MAX_TRANSLATE = 0.10
MAX_SHEAR_DEG = 10.0
CROP_PAD = 4
DEFAULT_MIXUP_ALPHA = 0.4
DEFAULT_TTA_COPIES = 4


def horizontal_flip(img):
    return np.ascontiguousarray(img[..., ::-1])


def adjust_lighting(img, brightness=0.0, contrast=1.0):
    """``clamp(contrast * (img - mean) + mean + brightness, 0, 1)``."""
    if contrast <= 0:
        raise ValueError("contrast factor must be positive")
    mean = img.mean(dtype=np.float64)
    out = contrast * (img - mean) + mean + brightness
    return np.clip(out, 0.0, 1.0).astype(img.dtype, copy=False)


def _sample_bilinear_zero(img, ys, xs):
    """Bilinear lookup at float pixel coordinates; neighbours outside the image count as zero."""
    c, h, w = img.shape
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    fy = (ys - y0).astype(img.dtype)
    fx = (xs - x0).astype(img.dtype)
    out = np.zeros((c,) + ys.shape, dtype=img.dtype)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yi, xi = y0 + dy, x0 + dx
            ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            vals = img[:, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            out += np.where(ok, vals * (wy * wx), 0)
    return out


def affine_transform(img, scale_x=1.0, scale_y=1.0, shear=0.0, translate=(0.0, 0.0)):
    """Scale/shear about the image centre, then shift by ``translate = (dx, dy)`` pixels.

    Output pixels are inverse-mapped and bilinearly sampled; samples that fall
    outside the source are zero.
    """
    if scale_x <= 0 or scale_y <= 0:
        raise ValueError("scales must be positive")
    c, h, w = img.shape
    fwd = np.array([[scale_x, np.tan(np.radians(shear)) * scale_y], [0.0, scale_y]])
    inv = np.linalg.inv(fwd)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    px = xx - cx - translate[0]
    py = yy - cy - translate[1]
    sx = inv[0, 0] * px + inv[0, 1] * py + cx
    sy = inv[1, 0] * px + inv[1, 1] * py + cy
    out = _sample_bilinear_zero(img, sy, sx)
    return np.clip(out, 0.0, 1.0)


def random_crop(img, out: Shape2D, pad=0, rng=None):
    c, h, w = img.shape
    ph, pw = h + 2 * pad, w + 2 * pad
    if out.height > ph or out.width > pw:
        raise ShapeError(f"crop {out} larger than padded input {ph}x{pw}")
    rng = rng or np.random.default_rng()
    oy = int(rng.integers(0, ph - out.height + 1))
    ox = int(rng.integers(0, pw - out.width + 1))
    padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad))) if pad else img
    return np.ascontiguousarray(padded[:, oy:oy + out.height, ox:ox + out.width])


def center_crop(img, out: Shape2D):
    """Take the largest centred region with the aspect ratio of ``out`` and resize to ``out``."""
    c, h, w = img.shape
    target = out.height / out.width
    if h / w > target:
        ch, cw = max(1, round(w * target)), w
    else:
        ch, cw = h, max(1, round(h / target))
    y0, x0 = (h - ch) // 2, (w - cw) // 2
    region = img[:, y0:y0 + ch, x0:x0 + cw]
    return _bilinear(region, out.height, out.width)


def augment_image(img, policy, rng):
    """Apply one random draw of ``policy`` to a CHW image."""
    policy = AugPolicy(policy)
    if policy is AugPolicy.NONE:
        return img
    if rng.random() < 0.5:
        img = horizontal_flip(img)
    img = adjust_lighting(img, rng.uniform(-JITTER, JITTER), rng.uniform(1 - JITTER, 1 + JITTER))
    if policy is AugPolicy.FULL:
        lo, hi = np.log(SCALE_RANGE[0]), np.log(SCALE_RANGE[1])
        sx, sy = np.exp(rng.uniform(lo, hi, size=2))
        shear = rng.uniform(-MAX_SHEAR_DEG, MAX_SHEAR_DEG)
        h, w = img.shape[1:]
        t = rng.uniform(-MAX_TRANSLATE, MAX_TRANSLATE, size=2) * (w, h)
        img = affine_transform(img, sx, sy, shear, tuple(t))
        img = random_crop(img, Shape2D(h, w), CROP_PAD, rng)
    return np.clip(img, 0.0, 1.0).astype(np.float32, copy=False)


def augment_batch(x, policy, seed, epoch, start_index):
    """Augment an NCHW batch; example ``i`` uses the stream keyed by ``(seed, epoch, start_index + i)``."""
    policy = AugPolicy(policy)
    if policy is AugPolicy.NONE:
        return x
    return np.stack([
        augment_image(img, policy, np.random.default_rng([seed, 0xA6, epoch, start_index + i]))
        for i, img in enumerate(x)
    ])


@dataclass
class MixupBatch:
    x: np.ndarray
    y: np.ndarray
    lam: np.ndarray
    partner: np.ndarray


def mixup_batch(x, y, rng, alpha=DEFAULT_MIXUP_ALPHA, lam=None) -> MixupBatch:
    """Blend each example with a partner from a seeded permutation of the batch.

    ``lam`` may force the weights (scalar or one per example); otherwise each
    example draws ``lam ~ Beta(alpha, alpha)``.
    """
    n = x.shape[0]
    if n < 2:
        raise ConfigError("mixup needs a batch of at least 2 examples")
    partner = rng.permutation(n)
    if lam is None:
        lam = rng.beta(alpha, alpha, size=n)
    lam = np.broadcast_to(np.asarray(lam, dtype=x.dtype), (n,)).copy()
    lx = lam.reshape((n,) + (1,) * (x.ndim - 1))
    ly = lam.reshape(n, 1).astype(y.dtype)
    x_mix = lx * x + (1 - lx) * x[partner]
    y_mix = ly * y + (1 - ly) * y[partner]
    return MixupBatch(x_mix, y_mix, lam, partner)


def tta_predict(net, img, policy=AugPolicy.MINIMAL, k=DEFAULT_TTA_COPIES, rng=None):
    """Mean softmax prediction over the centre-cropped image and ``k`` augmented copies."""
    if k < 1:
        raise ConfigError("TTA needs k >= 1 augmented copies")
    policy = AugPolicy(policy)
    base = center_crop(np.asarray(img, dtype=np.float32), net.input_size)
    if policy is AugPolicy.NONE:
        # augmented copies would be identical to the base image
        return net.predict_proba(base[None])[0]
    rng = rng or np.random.default_rng(0)
    copies = [base] + [augment_image(base, policy, rng) for _ in range(k)]
    return net.predict_proba(np.stack(copies)).mean(axis=0)


def average_predictions(preds):
    preds = np.asarray(preds, dtype=np.float64)
    return preds.sum(axis=0) / preds.shape[0]
