"""Consistency of hidden semantics: plane-level C_p and part-level IoU."""

import warnings
from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionError
from .pointops import group_knn
from .saliency import DEFAULT_SALIENT, salient_points, tier
from .validation import check_cloud

DEFAULT_TAU = 0.15
DEFAULT_KN = 16


@dataclass
class NormalField:
    normals: np.ndarray
    k: int
    degenerate: np.ndarray


def _orient_up(normals):
    """Flip the whole field so that its mean normal has z >= 0."""
    return -normals if normals[:, 2].sum() < 0 else normals


def estimate_normals(cloud, k_n=DEFAULT_KN):
    """PCA normals from the ``k_n`` nearest neighbors of every point.

    The normal is the eigenvector of the smallest covariance eigenvalue. The
    field is flipped as a whole so that its mean normal points toward +z.
    Neighborhoods whose covariance has rank < 2 get (0, 0, 1) and are flagged.
    """
    cloud = check_cloud(cloud)
    if k_n < 3:
        raise ValueError("k_n must be at least 3")
    if len(cloud) < k_n:
        raise DimensionError(f"need at least k_n={k_n} points, got {len(cloud)}")
    grouped = group_knn(cloud, np.arange(len(cloud)), k_n)
    nb = grouped.offsets - grouped.offsets.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb) / k_n
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    degenerate = evals[:, 1] <= 1e-12 * np.maximum(evals[:, 2], np.finfo(float).tiny)
    normals = np.where(degenerate[:, None], np.array([0.0, 0.0, 1.0]), normals)
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return NormalField(_orient_up(normals), k_n, degenerate)


def orient_to_principal(normals):
    """Flip normals into the hemisphere of their dominant direction."""
    normals = np.asarray(normals, dtype=np.float64)
    _, evecs = np.linalg.eigh(normals.T @ normals)
    axis = evecs[:, -1]
    return np.where((normals @ axis < 0)[:, None], -normals, normals)


def normal_variance(normals):
    """Trace of the covariance matrix of a set of unit vectors."""
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    if len(normals) < 1:
        raise ValueError("need at least one normal")
    centred = normals - normals.mean(axis=0)
    return float(np.einsum("ij,ij->", centred, centred) / len(normals))


def plane_consistency(normals, tau=DEFAULT_TAU, orient=False):
    """Normal variance of a salient set and whether it falls below ``tau``.

    With ``orient=True`` the normals are first flipped into their principal
    hemisphere, removing the PCA sign ambiguity.
    """
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    if orient:
        normals = orient_to_principal(normals)
    var = normal_variance(normals)
    return var, var < tau


def iou_counts(salient, segment):
    a = np.unique(np.asarray(salient, dtype=np.int64))
    b = np.unique(np.asarray(segment, dtype=np.int64))
    n_cor = len(np.intersect1d(a, b, assume_unique=True))
    return n_cor, len(a), len(b)


def part_iou(salient, segment, n_points=None):
    """``n_cor / (n_cls + n_seg - n_cor)`` for two index sets.

    Two empty sets give 0 with a ``RuntimeWarning``.
    """
    if n_points is not None:
        for name, idx in (("salient", salient), ("segment", segment)):
            idx = np.asarray(idx)
            if idx.size and (idx.min() < 0 or idx.max() >= n_points):
                raise ValueError(f"{name} indices outside [0, {n_points})")
    n_cor, n_cls, n_seg = iou_counts(salient, segment)
    union = n_cls + n_seg - n_cor
    if union == 0:
        warnings.warn("IoU of two empty sets is undefined; returning 0", RuntimeWarning)
        return 0.0
    return n_cor / union


def cloud_plane_variance(cloud, salience, tiers=DEFAULT_SALIENT, k_n=DEFAULT_KN, normals=None):
    """Normal variance of the salient points of one cloud."""
    idx = salient_points(tier(salience), tiers)
    if normals is None:
        normals = estimate_normals(cloud, k_n).normals
    var, _ = plane_consistency(normals[idx], orient=True)
    return var


def class_cp(clouds, labels, salience, tau=DEFAULT_TAU, tiers=DEFAULT_SALIENT,
             k_n=DEFAULT_KN, class_names=None, normals=None):
    """Per-class plane consistency ``C_p = n_p / n_t``.

    Parameters
    ----------
    clouds : array (M, N, 3)
    labels : array (M,)
    salience : array (M, N)
        Per-point salience of the inspected layer.
    normals : array (M, N, 3), optional
        Precomputed normals; estimated with ``k_n`` neighbors otherwise.

    Returns
    -------
    list of dict with ``name, n_p, n_t, c_p``
    """
    labels = np.asarray(labels)
    if normals is None:
        normals = [estimate_normals(c, k_n).normals for c in clouds]
    variances = np.array([cloud_plane_variance(c, s, tiers, k_n, nrm)
                          for c, s, nrm in zip(clouds, salience, normals)])
    rows = []
    names = class_names if class_names is not None else None
    for ci in np.unique(labels):
        mask = labels == ci
        n_t = int(mask.sum())
        if n_t == 0:
            raise ValueError(f"class {ci} has no objects")
        n_p = int(np.sum(variances[mask] < tau))
        name = names[int(ci)] if names is not None else str(ci)
        rows.append({"name": name, "n_p": n_p, "n_t": n_t, "c_p": n_p / n_t})
    return rows


def layer_part_table(labels, part_labels, salience_by_layer, tiers=DEFAULT_SALIENT,
                     class_names=None):
    """Best-matching ground-truth part per class and layer.

    For every class and layer the IoU between the salient points and each
    part's point set is averaged over the class's clouds; the part with the
    highest mean IoU is reported.
    """
    labels = np.asarray(labels)
    part_labels = np.asarray(part_labels)
    if part_labels.ndim != 2:
        raise ValueError("part labels are required, shape (M, N)")
    rows = []
    for ci in np.unique(labels):
        members = np.flatnonzero(labels == ci)
        parts = np.unique(part_labels[members])
        for layer, sal in salience_by_layer.items():
            ious = np.zeros(len(parts))
            for m in members:
                idx = salient_points(tier(sal[m]), tiers)
                for pi, part in enumerate(parts):
                    ious[pi] += part_iou(idx, np.flatnonzero(part_labels[m] == part))
            ious /= len(members)
            best = int(np.argmax(ious))
            name = class_names[int(ci)] if class_names is not None else str(ci)
            rows.append({"class": name, "layer": layer, "part_id": int(parts[best]),
                         "iou": float(ious[best])})
    return rows


def consistency_report(layer, tau, classes, parts=(), config=None):
    report = {"layer": layer, "tau": tau, "classes": list(classes), "parts": list(parts)}
    if config is not None:
        report["config"] = config
    return report
