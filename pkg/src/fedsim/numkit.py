"""Dense float64 numeric primitives shared across the package.

Vectors are 1-D ``numpy.ndarray`` objects and matrices 2-D arrays, always
float64.  Parameter containers stay opaque to this module: anything that
exposes ``segment_arrays()`` / ``replace_segments()`` can be flattened into a
single vector and restored, without this module knowing about model layout.

Flat layout (version 1): segments are concatenated in the owner's canonical
order -- embedding, blocks in order, head, then adapters in attach order.
The version constant is bumped if that order ever changes.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateInputError, DimensionError, InputError

FLAT_LAYOUT_VERSION = 1


def as_vector(values) -> np.ndarray:
    """Coerce ``values`` to a 1-D float64 array."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"expected a 1-D vector, got shape {v.shape}")
    return v


def weighted_sum(items: Iterable) -> np.ndarray:
    """Weighted mean ``sum(w_i * v_i) / sum(w_i)`` over (vector, weight) pairs.

    Weights must be nonnegative with a positive total.  A single item is
    returned unchanged (identity), regardless of its weight.
    """
    pairs = [(as_vector(v), float(w)) for v, w in items]
    if not pairs:
        raise DegenerateInputError("weighted_sum needs at least one item")
    length = pairs[0][0].shape[0]
    for v, w in pairs:
        if v.shape[0] != length:
            raise DimensionError(
                f"vector length mismatch: {v.shape[0]} != {length}"
            )
        if w < 0.0:
            raise InputError(f"negative weight {w!r}")
    total = sum(w for _, w in pairs)
    if total <= 0.0:
        raise DegenerateInputError("weights sum to zero")
    if len(pairs) == 1:
        return pairs[0][0].copy()
    acc = np.zeros(length, dtype=np.float64)
    for v, w in pairs:
        acc += w * v
    out = acc / total
    if not np.isfinite(out).all():
        raise InputError("non-finite value in weighted_sum result")
    return out


def cosine_similarity(a, b) -> float:
    """Cosine similarity of two equal-length vectors, clamped to [-1, 1]."""
    a = as_vector(a)
    b = as_vector(b)
    if a.shape[0] != b.shape[0]:
        raise DimensionError(
            f"vector length mismatch: {a.shape[0]} != {b.shape[0]}"
        )
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def _segments_of(params) -> list:
    if hasattr(params, "segment_arrays"):
        return list(params.segment_arrays())
    return [np.asarray(a, dtype=np.float64) for a in params]


def flatten(params) -> np.ndarray:
    """Concatenate all parameter segments into one flat float64 vector."""
    arrays = _segments_of(params)
    if not arrays:
        return np.zeros(0, dtype=np.float64)
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])


def unflatten(vec, shape_of):
    """Inverse of :func:`flatten` for a template with the same layout.

    Returns whatever the template produces from ``replace_segments`` (a new
    parameter container), or a plain list of arrays when the template is a
    bare sequence of arrays.
    """
    vec = as_vector(vec)
    templates = _segments_of(shape_of)
    total = sum(t.size for t in templates)
    if vec.shape[0] != total:
        raise DimensionError(
            f"flat length {vec.shape[0]} != parameter count {total}"
        )
    out = []
    offset = 0
    for t in templates:
        out.append(vec[offset:offset + t.size].reshape(t.shape).copy())
        offset += t.size
    if hasattr(shape_of, "replace_segments"):
        return shape_of.replace_segments(out)
    return out


def split_flat(vec, sizes: Sequence[int]) -> list[np.ndarray]:
    """Split a flat vector into consecutive chunks of the given sizes."""
    vec = as_vector(vec)
    if sum(sizes) != vec.shape[0]:
        raise DimensionError(
            f"flat length {vec.shape[0]} != sum of segment sizes {sum(sizes)}"
        )
    out = []
    offset = 0
    for s in sizes:
        out.append(vec[offset:offset + s].copy())
        offset += s
    return out
