"""Tensor helpers.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 in C (row-major)
order. The helpers here add the shape validation the layers rely on.
"""

import math
import sys

import numpy as np

from platenet.errors import ShapeError

DTYPE = np.float32
MAX_RANK = 4


def check_shape(shape):
    """Validate and normalise a shape to a tuple of ints."""
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    shape = tuple(int(d) for d in shape)
    if not 1 <= len(shape) <= MAX_RANK:
        raise ShapeError(f"rank must be between 1 and {MAX_RANK}, got shape {shape}")
    if any(d < 1 for d in shape):
        raise ShapeError(f"all extents must be >= 1, got shape {shape}")
    count = math.prod(shape)
    if count * np.dtype(DTYPE).itemsize > sys.maxsize:
        raise ShapeError(f"element count {count} exceeds the addressable range")
    return shape


def zeros(shape):
    return np.zeros(check_shape(shape), dtype=DTYPE)


def as_tensor(values):
    return np.ascontiguousarray(values, dtype=DTYPE)


def map_elementwise(t, f):
    """Apply a scalar function to every element, keeping the shape.

    ``f`` may be a numpy ufunc (applied vectorised) or any real -> real callable.
    """
    t = np.asarray(t)
    if isinstance(f, np.ufunc):
        out = f(t)
    else:
        out = np.fromiter((f(x) for x in t.ravel()), dtype=t.dtype, count=t.size)
    return np.ascontiguousarray(out, dtype=t.dtype).reshape(t.shape)


def reshape(t, new_shape):
    new_shape = check_shape(new_shape)
    if math.prod(new_shape) != t.size:
        raise ShapeError(f"cannot reshape {t.shape} ({t.size} elements) to {new_shape}")
    return np.ascontiguousarray(t).reshape(new_shape)


def accumulate(dst, src, scale=1.0):
    """Return ``dst + scale * src``; shapes must match exactly (no broadcasting)."""
    if dst.shape != src.shape:
        raise ShapeError(f"shape mismatch: {dst.shape} vs {src.shape}")
    if scale == 0:
        return dst.copy()
    return dst + dst.dtype.type(scale) * src
