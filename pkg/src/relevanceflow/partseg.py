"""Unsupervised part segmentation from consistent salient regions.

A detector is the class-level bounding box of one layer's salient region.
It qualifies when the region's centroid barely moves across the clouds of a
class. Qualified detectors, ordered by stability, cut a cloud into parts;
points outside every box take the part of their nearest assigned point.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .relflow import RelevanceFlow
from .saliency import DEFAULT_SALIENT, salient_points, tier
from .validation import check_cloud, check_clouds

DEFAULT_MARGIN = 0.02
DEFAULT_Q = 0.05


@dataclass(frozen=True)
class PartDetector:
    layer: str
    tiers: frozenset
    class_id: int
    box_min: np.ndarray
    box_max: np.ndarray
    margin: float
    # per-axis standard deviation of the salient centroid across the class
    centroid_std: np.ndarray

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be non-negative")
        if np.any(self.box_min > self.box_max):
            raise ValueError("box_min must not exceed box_max")

    @property
    def stability(self):
        return float(np.max(self.centroid_std))

    def contains(self, points):
        lo = self.box_min - self.margin
        hi = self.box_max + self.margin
        return np.all((points >= lo) & (points <= hi), axis=1)

    def to_dict(self):
        return {"layer": self.layer, "tiers": sorted(self.tiers), "class_id": self.class_id,
                "box_min": self.box_min.tolist(), "box_max": self.box_max.tolist(),
                "margin": self.margin, "centroid_std": self.centroid_std.tolist()}


@dataclass
class Segmentation:
    labels: np.ndarray
    # False when no detector box contained any point
    fired: bool


def detector_candidates(clouds, salience_by_layer, class_id=0, tiers_list=(DEFAULT_SALIENT,),
                        margin=DEFAULT_MARGIN):
    """One candidate detector per layer and tier set for a single class.

    Parameters
    ----------
    clouds : array (M, N, 3)
        Clouds of one class.
    salience_by_layer : dict
        ``layer -> (M, N)`` salience.
    """
    clouds = check_clouds(clouds)
    out = []
    for layer, sal in salience_by_layer.items():
        for tiers in tiers_list:
            tiers = frozenset([tiers] if isinstance(tiers, str) else tiers)
            centroids, mins, maxs = [], [], []
            for cloud, s in zip(clouds, sal):
                region = cloud[salient_points(tier(s), tiers)]
                if len(region) == 0:
                    continue
                centroids.append(region.mean(axis=0))
                mins.append(region.min(axis=0))
                maxs.append(region.max(axis=0))
            if not centroids:
                continue
            out.append(PartDetector(layer, tiers, class_id, np.median(mins, axis=0),
                                    np.median(maxs, axis=0), margin,
                                    np.std(centroids, axis=0)))
    return out


def build_detectors(model, layers, clouds, labels, q=DEFAULT_Q, tiers_list=(DEFAULT_SALIENT,),
                    margin=DEFAULT_MARGIN, epsilon=1e-6, salience_by_layer=None):
    """Qualified detectors per class, most stable first.

    Returns a dict ``class index -> list of PartDetector``; a class without a
    qualified detector maps to an empty list.
    """
    clouds = check_clouds(clouds)
    labels = np.asarray(labels)
    if salience_by_layer is None:
        salience_by_layer = RelevanceFlow(model, epsilon=epsilon).fit().explain(clouds, layers)
    out = {}
    for ci in np.unique(labels):
        mask = labels == ci
        per_class = {layer: salience_by_layer[layer][mask] for layer in layers}
        cands = detector_candidates(clouds[mask], per_class, int(ci), tiers_list, margin)
        qualified = [d for d in cands if np.all(d.centroid_std < q)]
        out[int(ci)] = sorted(qualified, key=lambda d: d.stability)
    return out


def box_labels(cloud, detectors):
    """Index of the first detector whose box contains each point, else ``-1``."""
    cloud = check_cloud(cloud)
    labels = np.full(len(cloud), -1, dtype=np.int64)
    for part, det in enumerate(detectors):
        labels[(labels < 0) & det.contains(cloud)] = part
    return labels


def segment(cloud, detectors):
    """Assign every point to the first detector box containing it.

    Remaining points copy the part of their nearest assigned point. If no box
    contains any point every label is ``-1`` and a warning is issued.
    """
    cloud = check_cloud(cloud)
    if not detectors:
        raise ValueError("segment needs at least one detector")
    labels = box_labels(cloud, detectors)
    assigned = labels >= 0
    if not assigned.any():
        warnings.warn("no detector fired on this cloud", RuntimeWarning, stacklevel=2)
        return Segmentation(labels, False)
    if not assigned.all():
        _, nearest = cKDTree(cloud[assigned]).query(cloud[~assigned])
        labels[~assigned] = labels[assigned][nearest]
    return Segmentation(labels, True)


def matched_part_iou(pred, truth):
    """IoU of every ground-truth part under the best one-to-one matching.

    Returns ``(parts, ious)``; unmatched parts score 0.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction has shape {pred.shape}, ground truth {truth.shape}")
    parts = np.unique(truth)
    guesses = np.unique(pred[pred >= 0])
    iou = np.zeros((len(parts), len(guesses)))
    for i, p in enumerate(parts):
        in_p = truth == p
        for j, g in enumerate(guesses):
            in_g = pred == g
            iou[i, j] = np.sum(in_p & in_g) / np.sum(in_p | in_g)
    scores = np.zeros(len(parts))
    if len(guesses):
        rows, cols = linear_sum_assignment(iou, maximize=True)
        scores[rows] = iou[rows, cols]
    return parts, scores


def miou(predictions, truths, labels, class_names=None):
    """Per-class and overall mean IoU under optimal part matching.

    Returns a dict with ``classes`` rows ``{class, miou, parts}`` (``parts``
    maps ground-truth part id to its mean matched IoU) and ``miou``, the mean
    over classes.
    """
    predictions = np.asarray(predictions)
    truths = np.asarray(truths)
    labels = np.asarray(labels)
    if predictions.shape != truths.shape or len(labels) != len(truths):
        raise ValueError("predictions, ground truth and labels do not match")
    rows = []
    for ci in np.unique(labels):
        per_part = {}
        cloud_means = []
        for m in np.flatnonzero(labels == ci):
            parts, scores = matched_part_iou(predictions[m], truths[m])
            cloud_means.append(scores.mean())
            for p, s in zip(parts, scores):
                per_part.setdefault(int(p), []).append(s)
        name = class_names[int(ci)] if class_names is not None else str(ci)
        rows.append({"class": name, "miou": float(np.mean(cloud_means)),
                     "parts": {str(p): float(np.mean(v)) for p, v in sorted(per_part.items())}})
    return {"classes": rows, "miou": float(np.mean([r["miou"] for r in rows]))}


class UnsupervisedPartSegmenter(BaseEstimator):
    """Part segmentation driven only by a classifier's hidden semantics.

    Parameters
    ----------
    model : PointNetClassifier
    layers : list of str, optional
        Candidate layers; defaults to every layer with point support.
    q : float
        Centroid stability threshold per axis.
    margin : float
        Box margin in normalized units.
    tiers : tuple of str
    epsilon : float
    """

    def __init__(self, model=None, layers=None, q=DEFAULT_Q, margin=DEFAULT_MARGIN,
                 tiers=("pink", "red"), epsilon=1e-6):
        self.model = model
        self.layers = layers
        self.q = q
        self.margin = margin
        self.tiers = tiers
        self.epsilon = epsilon

    def _point_layers(self, X):
        _, trace = self.model.forward(X[:1])
        return [e.name for e in trace if e.sites is not None]

    def fit(self, X, y):
        check_is_fitted(self.model, "network_")
        X = check_clouds(X)
        self.layers_ = list(self.layers) if self.layers else self._point_layers(X)
        self.detectors_ = build_detectors(self.model, self.layers_, X, y, self.q,
                                          (frozenset(self.tiers),), self.margin, self.epsilon)
        return self

    def predict(self, X, y=None):
        """Part labels ``(M, N)``; ``y`` selects the detectors, else the predicted class."""
        check_is_fitted(self, "detectors_")
        X = check_clouds(X)
        if y is None:
            y = np.searchsorted(self.model.classes_, self.model.predict(X))
        out = np.full(X.shape[:2], -1, dtype=np.int64)
        for m, (cloud, ci) in enumerate(zip(X, np.asarray(y))):
            dets = self.detectors_.get(int(ci), [])
            if dets:
                out[m] = segment(cloud, dets).labels
        return out

    def score(self, X, y, parts):
        """Overall mIoU against ground-truth part labels."""
        return miou(self.predict(X, y), parts, y)["miou"]
