"""Point-set operations: farthest point sampling, grouping, shared convolution
and channel-wise max pooling.

All functions accept a single cloud ``(N, 3)`` or a batch ``(B, N, 3)`` and
return arrays with the matching leading shape. Ties are always broken toward
the lowest index so that results are bit-reproducible.
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class GroupedSet:
    """Local regions built around sampled centers.

    Attributes
    ----------
    centers : ndarray of int, shape (..., C)
        Indices of the centers into the parent cloud.
    neighbors : ndarray of int, shape (..., C, K)
        Indices of the grouped points into the parent cloud.
    offsets : ndarray of float, shape (..., C, K, 3)
        ``points[neighbors] - points[centers]``.
    """

    centers: np.ndarray
    neighbors: np.ndarray
    offsets: np.ndarray

    @property
    def k(self):
        return self.neighbors.shape[-1]


def _as_batch(points):
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 2:
        return points[None], True
    if points.ndim != 3:
        raise ValueError(f"expected (N, d) or (B, N, d) points, got shape {points.shape}")
    return points, False


def _gather_rows(values, index):
    """values (B, N, ...) gathered at index (B, ...) along axis 1."""
    b = np.arange(values.shape[0]).reshape((-1,) + (1,) * (index.ndim - 1))
    return values[b, index]


def sample_fps(points, count):
    """Farthest point sampling.

    The first center is the point of largest norm; every following center is
    the point farthest from the centers chosen so far.

    Parameters
    ----------
    points : array-like, shape (N, d) or (B, N, d)
    count : int
        Number of centers C, ``C <= N``.

    Returns
    -------
    ndarray of int, shape (C,) or (B, C)
    """
    pts, single = _as_batch(points)
    n_batch, n_points, _ = pts.shape
    if count > n_points:
        raise ValueError(f"cannot sample {count} centers from {n_points} points")
    if count < 0:
        raise ValueError("count must be non-negative")
    out = np.empty((n_batch, count), dtype=np.int64)
    if count == 0:
        return out[0] if single else out
    rows = np.arange(n_batch)
    current = np.argmax(np.einsum("bnd,bnd->bn", pts, pts), axis=1)
    min_d2 = np.full((n_batch, n_points), np.inf)
    for i in range(count):
        out[:, i] = current
        diff = pts - pts[rows, current][:, None, :]
        min_d2 = np.minimum(min_d2, np.einsum("bnd,bnd->bn", diff, diff))
        # chosen points never win again, even among duplicates
        min_d2[rows, current] = -1.0
        current = np.argmax(min_d2, axis=1)
    return out[0] if single else out


def _pairwise_d2(pts, centers):
    cpts = _gather_rows(pts, centers)
    diff = cpts[:, :, None, :] - pts[:, None, :, :]
    return np.einsum("bcnd,bcnd->bcn", diff, diff)


def _grouped(pts, centers, neighbors, single):
    offsets = _gather_rows(pts, neighbors) - _gather_rows(pts, centers)[:, :, None, :]
    if single:
        return GroupedSet(centers[0], neighbors[0], offsets[0])
    return GroupedSet(centers, neighbors, offsets)


def _center_batch(centers, single):
    centers = np.asarray(centers, dtype=np.int64)
    return centers[None] if single else centers


def group_knn(points, centers, k):
    """Group the ``k`` nearest points (Euclidean) around every center."""
    pts, single = _as_batch(points)
    n_points = pts.shape[1]
    if k > n_points:
        raise ValueError(f"k={k} exceeds the number of points {n_points}")
    if k < 1:
        raise ValueError("k must be positive")
    cidx = _center_batch(centers, single)
    d2 = _pairwise_d2(pts, cidx)
    neighbors = np.argsort(d2, axis=-1, kind="stable")[..., :k]
    return _grouped(pts, cidx, neighbors, single)


def group_ball(points, centers, radius, k):
    """Ball query: up to ``k`` points within ``radius``, nearest first.

    Groups with fewer than ``k`` members are padded with the center index.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    pts, single = _as_batch(points)
    if k < 1:
        raise ValueError("k must be positive")
    cidx = _center_batch(centers, single)
    d2 = _pairwise_d2(pts, cidx)
    order = np.argsort(d2, axis=-1, kind="stable")
    width = min(k, pts.shape[1])
    order = order[..., :width]
    inside = np.take_along_axis(d2, order, axis=-1) <= radius * radius
    pad = np.broadcast_to(cidx[..., None], order.shape)
    neighbors = np.where(inside, order, pad)
    if width < k:
        extra = np.broadcast_to(cidx[..., None], cidx.shape + (k - width,))
        neighbors = np.concatenate([neighbors, extra], axis=-1)
    return _grouped(pts, cidx, neighbors, single)


def conv_group(features, weight, bias=None, relu=True):
    """Apply one shared layer to every grouped feature vector.

    ``features`` has shape ``(..., K, d)`` and ``weight`` ``(d, d')``; the same
    weights are applied to each (center, neighbor) row.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.shape[-1] != weight.shape[0]:
        raise ValueError(
            f"feature dim {features.shape[-1]} does not match weight rows {weight.shape[0]}")
    out = features @ weight
    if bias is not None:
        out = out + bias
    if relu:
        out = np.maximum(out, 0.0)
    return out


def pool_max(h):
    """Channel-wise max over the neighbor axis (``-2``).

    Returns the pooled features ``(..., d')`` and the argmax slot of each
    channel; ``np.argmax`` keeps the first (lowest) slot on ties.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-2] < 1:
        raise ValueError("cannot pool over an empty group")
    idx = np.argmax(h, axis=-2)
    pooled = np.take_along_axis(h, idx[..., None, :], axis=-2)[..., 0, :]
    return pooled, idx
