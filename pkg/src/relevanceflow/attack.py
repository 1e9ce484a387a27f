"""Salient-region relocation attack.

The ``N`` most salient points are taken as region centers. Each center's
``K`` nearest neighbors are translated together so that their centroid lands
on the centroid of the non-salient (blue tier) points. The attack succeeds
when the predicted class changes.
"""

import time
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .pointops import group_knn
from .relflow import RelevanceFlow
from .saliency import BLUE, tier
from .validation import check_cloud, check_clouds, check_salience

MODES = ("salient", "random")
DEFAULT_N = (1, 5, 10, 15, 20)
DEFAULT_K = (10, 20, 40)


@dataclass(frozen=True)
class AttackConfig:
    """Attack parameters; ``seed`` drives center choice in random mode."""

    n_regions: int = 5
    n_neighbors: int = 40
    mode: str = "salient"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_regions < 0:
            raise ValueError("n_regions must be non-negative")
        if self.n_neighbors < 1:
            raise ValueError("n_neighbors must be positive")


@dataclass
class CraftedSample:
    points: np.ndarray
    centers: np.ndarray
    moved: np.ndarray
    destination: np.ndarray
    # True when the map had no blue points and the cloud centroid was used
    fallback: bool


def select_centers(salience, cfg, index=0):
    """Region centers: top-``N`` by salience, or ``N`` random points.

    Salient ties go to the lowest index. Random centers come from a
    generator seeded with ``(cfg.seed, index)``, so the first ``N`` centers
    are shared across every ``N``.
    """
    n = len(salience)
    count = min(cfg.n_regions, n)
    if cfg.mode == "salient":
        order = np.lexsort((np.arange(n), -salience))
    else:
        order = np.random.default_rng([cfg.seed, index]).permutation(n)
    return order[:count]


def craft_sample(cloud, salience, cfg, index=0, centers=None):
    """Relocate the regions around the chosen centers.

    Parameters
    ----------
    cloud : array (N, 3)
    salience : array (N,)
        Input-layer salience; also defines the blue-tier destination.
    cfg : AttackConfig
    index : int
        Position of the cloud in its dataset, used to seed random mode.
    centers : array of int, optional
        Overrides center selection.
    """
    cloud = check_cloud(cloud)
    salience = check_salience(salience, len(cloud))
    n = len(cloud)
    if cfg.n_regions * cfg.n_neighbors > n:
        warnings.warn(f"N*K = {cfg.n_regions * cfg.n_neighbors} exceeds the cloud size {n}",
                      RuntimeWarning, stacklevel=2)
    if centers is None:
        centers = select_centers(salience, cfg, index)
    centers = np.asarray(centers, dtype=np.int64)
    blue = tier(salience).tiers == BLUE
    fallback = not blue.any()
    destination = cloud.mean(axis=0) if fallback else cloud[blue].mean(axis=0)
    out = cloud.copy()
    moved = np.zeros(n, dtype=bool)
    if len(centers):
        k = min(cfg.n_neighbors, n)
        regions = group_knn(cloud, centers, k).neighbors
        for region in regions:
            members = region[~moved[region]]
            if len(members) == 0:
                continue
            out[members] = cloud[members] + (destination - cloud[members].mean(axis=0))
            moved[members] = True
    return CraftedSample(out, centers, moved, destination, fallback)


def attack_once(model, cloud, salience, cfg, index=0, original=None):
    """Attack one cloud and time crafting plus the forward pass.

    ``original`` is the class index predicted on the clean cloud; it is
    computed when omitted.
    """
    if original is None:
        original = int(np.argmax(model.decision_function(cloud[None])[0]))
    start = time.perf_counter()
    crafted = craft_sample(cloud, salience, cfg, index)
    new = int(np.argmax(model.decision_function(crafted.points[None])[0]))
    elapsed = time.perf_counter() - start
    return {"success": new != original, "time": elapsed, "original": original, "new": new,
            "fallback": crafted.fallback}


@dataclass
class AttackCell:
    n_regions: int
    n_neighbors: int
    mode: str
    success: np.ndarray
    seconds: float
    fallbacks: int

    @property
    def rate(self):
        return float(self.success.mean()) if len(self.success) else 0.0


class AttackReport:
    """Sweep results with per-class breakdown.

    ``to_dict`` is fully deterministic; wall-clock timings are returned
    separately by ``timing_dict``.
    """

    def __init__(self, model_name, cells, labels, correct, class_names, config=None):
        self.model_name = model_name
        self.cells = cells
        self.labels = np.asarray(labels)
        self.correct = np.asarray(correct, dtype=bool)
        self.class_names = list(class_names)
        self.config = config or {}

    def cell(self, n_regions, n_neighbors, mode):
        for c in self.cells:
            if (c.n_regions, c.n_neighbors, c.mode) == (n_regions, n_neighbors, mode):
                return c
        raise KeyError((n_regions, n_neighbors, mode))

    def _per_class(self, cell, with_time):
        rows = []
        per_sample = cell.seconds / max(len(cell.success), 1)
        for ci, name in enumerate(self.class_names):
            mask = self.labels == ci
            if not mask.any():
                continue
            row = {"class": name, "accuracy": float(self.correct[mask].mean()),
                   "rate": float(cell.success[mask].mean())}
            if with_time:
                row["time"] = per_sample
            rows.append(row)
        return rows

    def to_dict(self):
        grid = []
        for c in self.cells:
            grid.append({"N": c.n_regions, "K": c.n_neighbors, "mode": c.mode, "rate": c.rate,
                         "attempts": len(c.success), "successes": int(c.success.sum()),
                         "fallbacks": c.fallbacks, "per_class": self._per_class(c, False)})
        return {"model": self.model_name, "grid": grid, "config": self.config}

    def timing_dict(self):
        grid = []
        for c in self.cells:
            grid.append({"N": c.n_regions, "K": c.n_neighbors, "mode": c.mode,
                         "mean_time_s": c.seconds / max(len(c.success), 1),
                         "per_class": self._per_class(c, True)})
        return {"model": self.model_name, "grid": grid}

    def spearman_by_k(self, mode="salient"):
        """Spearman correlation between ``N`` and success rate at each ``K``.

        A constant rate column has no rank order and yields NaN.
        """
        out = {}
        for k in sorted({c.n_neighbors for c in self.cells if c.mode == mode}):
            cells = sorted((c for c in self.cells if c.mode == mode and c.n_neighbors == k),
                           key=lambda c: c.n_regions)
            rates = [c.rate for c in cells]
            if len(set(rates)) < 2:
                out[k] = float("nan")
                continue
            out[k] = float(spearmanr([c.n_regions for c in cells], rates).statistic)
        return out

    def summary(self):
        """Plain-text table of rate and time per grid cell."""
        timing = {(g["N"], g["K"], g["mode"]): g["mean_time_s"]
                  for g in self.timing_dict()["grid"]}
        lines = [f"{'mode':8s} {'N':>3s} {'K':>4s} {'rate':>7s} {'time/s':>9s}"]
        for c in self.cells:
            t = timing[(c.n_regions, c.n_neighbors, c.mode)]
            lines.append(f"{c.mode:8s} {c.n_regions:3d} {c.n_neighbors:4d} "
                         f"{100 * c.rate:6.1f}% {t:9.4f}")
        return "\n".join(lines)


def sweep(model, X, y, n_list=DEFAULT_N, k_list=DEFAULT_K, modes=MODES, seed=0,
          epsilon=1e-6, class_names=None, salience=None, config=None):
    """Evaluate every ``(N, K, mode)`` cell on the clouds ``X``.

    Input-layer salience and clean predictions are computed once. Each
    cell's time is the wall clock for crafting every sample plus one batched
    forward pass.
    """
    if not len(n_list) or not len(k_list) or not len(modes):
        raise ValueError("attack grids must be non-empty")
    X = check_clouds(X)
    y = np.asarray(y)
    if salience is None:
        salience = RelevanceFlow(model, "input", epsilon).fit().transform(X)
    original = np.argmax(model.decision_function(X), axis=1)
    true_idx = np.searchsorted(model.classes_, y)
    cells = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for mode in modes:
            for k in k_list:
                for n in n_list:
                    cfg = AttackConfig(n, k, mode, seed)
                    start = time.perf_counter()
                    crafted = [craft_sample(c, s, cfg, i) for i, (c, s) in enumerate(zip(X, salience))]
                    new = np.argmax(model.decision_function(np.stack([c.points for c in crafted])),
                                    axis=1)
                    seconds = time.perf_counter() - start
                    cells.append(AttackCell(n, k, mode, new != original, seconds,
                                            sum(c.fallback for c in crafted)))
    names = class_names if class_names is not None else [str(c) for c in model.classes_]
    arch = getattr(model, "arch", type(model).__name__)
    return AttackReport(arch, cells, true_idx, original == true_idx, names, config)


class SalientRegionAttack(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`craft_sample`.

    Parameters
    ----------
    model : PointNetClassifier
    n_regions : int
    n_neighbors : int
    mode : {"salient", "random"}
    epsilon : float
        Stabilizer of the relevance flow that ranks the points.
    random_state : int
    """

    def __init__(self, model=None, n_regions=5, n_neighbors=40, mode="salient", epsilon=1e-6,
                 random_state=0):
        self.model = model
        self.n_regions = n_regions
        self.n_neighbors = n_neighbors
        self.mode = mode
        self.epsilon = epsilon
        self.random_state = random_state

    def fit(self, X=None, y=None):
        if self.model is None:
            raise ValueError("SalientRegionAttack needs a fitted model")
        check_is_fitted(self.model, "network_")
        self.config_ = AttackConfig(self.n_regions, self.n_neighbors, self.mode,
                                    self.random_state)
        self.flow_ = RelevanceFlow(self.model, "input", self.epsilon).fit()
        return self

    def transform(self, X):
        """Adversarial versions of ``X`` with unchanged point counts."""
        check_is_fitted(self, "config_")
        X = check_clouds(X)
        salience = self.flow_.transform(X)
        return np.stack([craft_sample(c, s, self.config_, i).points
                         for i, (c, s) in enumerate(zip(X, salience))])

    def score(self, X, y=None):
        """Fraction of clouds whose predicted class changes."""
        X = check_clouds(X)
        before = self.model.predict(X)
        after = self.model.predict(self.transform(X))
        return float(np.mean(before != after))
