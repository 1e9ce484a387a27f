"""Input validation helpers shared by the estimators."""

import numpy as np

from .exceptions import DimensionError, NonFiniteError


def check_cloud(points, min_points=1, dim=3):
    """Validate one cloud and return it as a float64 ``(N, dim)`` array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise DimensionError(f"expected a ({'N'}, {dim}) point array, got shape {arr.shape}")
    if arr.shape[0] < min_points:
        raise DimensionError(f"cloud has {arr.shape[0]} points, need at least {min_points}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("cloud contains non-finite coordinates")
    return arr


def check_clouds(X, min_points=1, dim=3):
    """Validate a stack of equally sized clouds ``(M, N, dim)``.

    A single ``(N, dim)`` cloud is promoted to a batch of one. Lists of clouds
    with different sizes are rejected.
    """
    try:
        arr = np.asarray(X, dtype=np.float64)
    except ValueError as exc:
        raise DimensionError(f"clouds must share a point count: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[2] != dim:
        raise DimensionError(f"expected (M, N, {dim}) clouds, got shape {arr.shape}")
    if arr.shape[0] < 1:
        raise DimensionError("no clouds given")
    if arr.shape[1] < min_points:
        raise DimensionError(f"clouds have {arr.shape[1]} points, need at least {min_points}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("clouds contain non-finite coordinates")
    return arr


def check_salience(values, n_points=None):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 1:
        raise DimensionError(f"salience must be a non-empty vector, got shape {arr.shape}")
    if n_points is not None and arr.size != n_points:
        raise DimensionError(f"salience has {arr.size} values for {n_points} points")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("salience contains non-finite values")
    return arr


def check_random_state(seed):
    """Return a numpy Generator for ``seed`` (int, None or Generator)."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
