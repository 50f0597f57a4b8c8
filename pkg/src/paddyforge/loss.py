"""Softmax, cross-entropy and their fused gradient.

All functions take either a single length-K vector or a ``[batch, K]`` matrix.
Batch losses are reduced by the mean over examples.
"""
import numpy as np

from .errors import NumericError, ShapeError

LOG_FLOOR = 1e-12


def softmax(z):
    z = np.asarray(z)
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax received non-finite logits")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(q, p):
    """Mean over examples of ``-sum_k p_k log(max(q_k, 1e-12))``."""
    q = np.asarray(q)
    p = np.asarray(p)
    if q.shape != p.shape:
        raise ShapeError(f"prediction shape {q.shape} != target shape {p.shape}")
    per_example = -np.sum(p * np.log(np.maximum(q, LOG_FLOOR)), axis=-1)
    return float(np.mean(per_example))


def softmax_xent_grad(z, p):
    """Gradient of ``cross_entropy(softmax(z), p)`` with respect to the logits."""
    z = np.asarray(z)
    p = np.asarray(p)
    if z.shape != p.shape:
        raise ShapeError(f"logit shape {z.shape} != target shape {p.shape}")
    g = softmax(z) - p
    if g.ndim == 2:
        g = g / g.shape[0]
    return g


def one_hot(labels, num_classes, dtype=np.float32):
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out
