"""Desk-scale point cloud classifiers and their scikit-learn style wrapper."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import netcore
from .exceptions import VersionMismatchError
from .netcore import Dense, Group, Input, MaxPool, Network, Sample
from .validation import check_clouds

ARCHS = ("pointnet_lite", "pointnet2_lite")
WEIGHTS_FORMAT = 1


def pointnet_lite(n_classes, convs=(32, 64, 128), fcs=(64,)):
    """Shared per-point MLP, global max pool, fully connected head."""
    layers = [Input("input", 3)]
    prev, dim = "input", 3
    for j, width in enumerate(convs, 1):
        layers.append(Dense(f"conv{j}", [prev], dim, width))
        prev, dim = f"conv{j}", width
    layers.append(MaxPool("pool", [prev]))
    prev = "pool"
    for k, width in enumerate(list(fcs) + [n_classes], 1):
        last = k == len(fcs) + 1
        layers.append(Dense(f"fc{k}", [prev], dim, width, relu=not last, kind="FullyConnected"))
        prev, dim = f"fc{k}", width
    return Network(layers, n_classes,
                   config={"arch": "pointnet_lite", "convs": list(convs), "fcs": list(fcs)})


def pointnet2_lite(n_classes, sa1=(128, 32, (32, 32, 64)), sa2=(32, 16, (64, 64, 128)),
                   sa3=(128,), fcs=(64,), radius=None):
    """Two sample-and-group stages, a group-all stage, fully connected head.

    ``radius`` switches the first stage from kNN grouping to ball query.
    """
    layers = [Input("input", 3)]
    xyz, feat, dim = "input", None, 0
    for s, (count, k, convs) in enumerate((sa1, sa2), 1):
        tag = f"SA{s}"
        layers.append(Sample(f"{tag}-sample", [xyz], count))
        inputs = [xyz, f"{tag}-sample"] + ([feat] if feat else [])
        layers.append(Group(f"{tag}-group", inputs, k=k, radius=radius if s == 1 else None))
        prev, dim = f"{tag}-group", 3 + dim
        for j, width in enumerate(convs, 1):
            layers.append(Dense(f"{tag}-conv{j}", [prev], dim, width))
            prev, dim = f"{tag}-conv{j}", width
        layers.append(MaxPool(f"{tag}-pool", [prev]))
        xyz, feat = f"{tag}-sample", f"{tag}-pool"
    layers.append(Group("SA3-group", [xyz, feat]))
    prev, dim = "SA3-group", 3 + dim
    for j, width in enumerate(sa3, 1):
        layers.append(Dense(f"SA3-conv{j}", [prev], dim, width))
        prev, dim = f"SA3-conv{j}", width
    layers.append(MaxPool("SA3-pool", [prev]))
    prev = "SA3-pool"
    for k, width in enumerate(list(fcs) + [n_classes], 1):
        last = k == len(fcs) + 1
        layers.append(Dense(f"fc{k}", [prev], dim, width, relu=not last, kind="FullyConnected"))
        prev, dim = f"fc{k}", width
    config = {"arch": "pointnet2_lite", "sa1": [sa1[0], sa1[1], list(sa1[2])],
              "sa2": [sa2[0], sa2[1], list(sa2[2])], "sa3": list(sa3), "fcs": list(fcs),
              "radius": radius}
    return Network(layers, n_classes, config=config)


def build_network(arch, n_classes, **kwargs):
    if arch == "pointnet_lite":
        return pointnet_lite(n_classes, **kwargs)
    if arch == "pointnet2_lite":
        return pointnet2_lite(n_classes, **kwargs)
    raise ValueError(f"unknown architecture {arch!r}; choose from {ARCHS}")


def _network_from_config(config, n_classes):
    config = dict(config)
    arch = config.pop("arch")
    if arch == "pointnet2_lite":
        for key in ("sa1", "sa2"):
            count, k, convs = config[key]
            config[key] = (count, k, tuple(convs))
    return build_network(arch, n_classes, **config)


class PointNetClassifier(ClassifierMixin, BaseEstimator):
    """Point cloud classifier trained from scratch with manual backprop.

    Parameters
    ----------
    arch : {"pointnet_lite", "pointnet2_lite"}
    arch_params : dict, optional
        Layer widths forwarded to the architecture builder.
    epochs : int
        Passes over the training set; ``0`` keeps the initial weights.
    learning_rate : float
        Adam step size.
    batch_size : int
    random_state : int
        Seeds weight initialisation and shuffling.
    dataset_id : str, optional
        Recorded in the weights file metadata.
    """

    def __init__(self, arch="pointnet_lite", arch_params=None, epochs=20,
                 learning_rate=2e-3, batch_size=32, random_state=0, dataset_id=None):
        self.arch = arch
        self.arch_params = arch_params
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.random_state = random_state
        self.dataset_id = dataset_id

    def fit(self, X, y):
        X = check_clouds(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"{len(X)} clouds but {len(y)} labels")
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes to train a classifier")
        self.network_ = build_network(self.arch, len(self.classes_), **(self.arch_params or {}))
        self.n_points_in_ = X.shape[1]
        _, self.loss_history_ = netcore.train(
            self.network_, X, y_enc, epochs=self.epochs, lr=self.learning_rate,
            batch_size=self.batch_size, seed=self.random_state)
        return self

    def forward(self, X):
        """Logits ``(M, n_classes)`` and the :class:`~relevanceflow.netcore.ForwardTrace`."""
        check_is_fitted(self, "network_")
        return self.network_.forward(check_clouds(X))

    def decision_function(self, X, batch_size=64):
        check_is_fitted(self, "network_")
        X = check_clouds(X)
        return np.concatenate([self.network_.forward(X[i:i + batch_size])[0]
                               for i in range(0, len(X), batch_size)])

    def predict_proba(self, X):
        return netcore.softmax(self.decision_function(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    @property
    def layer_names(self):
        check_is_fitted(self, "network_")
        return self.network_.layer_names

    def save(self, path):
        check_is_fitted(self, "network_")
        meta = {
            "format_version": WEIGHTS_FORMAT,
            "network": self.network_.config,
            "classes": self.classes_.tolist(),
            "n_points": int(self.n_points_in_),
            "estimator": self.get_params(),
            "training": {"seed": self.random_state, "epochs": self.epochs,
                         "dataset": self.dataset_id},
        }
        netcore.save_weights(path, self.network_.params, meta)

    @classmethod
    def load(cls, path):
        params, meta = netcore.load_weights(path)
        if meta.get("format_version") != WEIGHTS_FORMAT:
            raise VersionMismatchError(
                f"{path}: metadata format {meta.get('format_version')} != {WEIGHTS_FORMAT}")
        est = cls(**meta["estimator"])
        est.classes_ = np.array(meta["classes"])
        est.network_ = _network_from_config(meta["network"], len(est.classes_))
        expected = est.network_.param_shapes()
        if set(expected) != set(params) or any(params[k].shape != expected[k] for k in expected):
            raise VersionMismatchError(f"{path}: tensors do not match the recorded architecture")
        est.network_.params = params
        est.n_points_in_ = meta["n_points"]
        est.loss_history_ = []
        return est
