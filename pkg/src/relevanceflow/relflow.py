"""Relevance Flow: per-layer relevance propagation through a recorded trace.

The prediction is decomposed into a one-hot relevance vector at the logits,
then pushed backwards layer by layer:

* fully connected / shared conv: ``R_i = sum_j a_i w_ij / (sum_i a_i w_ij) R_j``
* sample: relevance is copied back to the sampled rows
* group: offsets ``a_i - a_center`` split their relevance between the
  neighbor (weight +1) and the center (weight -1)
* max pool: all relevance goes to the argmax slot

ReLU is transparent (recorded activations are post-ReLU). Biases take no
share, so with ``eps=0`` every rule conserves the total exactly.
"""

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import DegenerateDenominatorError
from .validation import check_clouds

GROUP_MODES = ("conserving", "literal")


def init_relevance(logits):
    """One-hot vector at the argmax of ``logits`` (lowest index on ties)."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    out = np.zeros_like(logits)
    np.put_along_axis(out, np.argmax(logits, axis=-1)[..., None], 1.0, axis=-1)
    return out


def _stabilize(denom, eps):
    return denom + eps * np.where(denom >= 0, 1.0, -1.0)


def _safe_ratio(num, denom, relevance, eps, what):
    """``num / denom * relevance`` with zero wherever ``relevance`` is zero."""
    if eps == 0:
        bad = (denom == 0) & (relevance != 0)
        if np.any(bad):
            raise DegenerateDenominatorError(
                f"{what}: {int(bad.sum())} zero denominators carry relevance; use eps > 0")
    else:
        denom = _stabilize(denom, eps)
    live = relevance != 0
    out = np.zeros(np.broadcast(num, denom, relevance).shape)
    np.divide(num * relevance, denom, out=out, where=live & (denom != 0))
    return out


def prop_fc_conv(r_next, a, w, eps=0.0):
    """Relevance of the inputs ``a (..., d)`` of a linear map ``w (d, d')``."""
    a = np.asarray(a, dtype=np.float64)
    r_next = np.asarray(r_next, dtype=np.float64)
    z = a @ w
    if eps == 0:
        bad = (z == 0) & (r_next != 0)
        if np.any(bad):
            raise DegenerateDenominatorError(
                f"linear rule: {int(bad.sum())} zero pre-activations carry relevance; use eps > 0")
        denom = z
    else:
        denom = _stabilize(z, eps)
    s = np.zeros_like(z)
    np.divide(r_next, denom, out=s, where=(r_next != 0) & (denom != 0))
    return a * (s @ w.T)


def prop_sample(r_next, indices, n_source):
    """Copy relevance of sampled rows ``(B, C, d)`` back to ``(B, n_source, d)``."""
    r_next = np.asarray(r_next, dtype=np.float64)
    indices = np.asarray(indices)
    single = r_next.ndim == 2
    if single:
        r_next, indices = r_next[None], indices[None]
    out = np.zeros((r_next.shape[0], n_source) + r_next.shape[2:])
    b = np.arange(r_next.shape[0])[:, None]
    np.add.at(out, (b, indices), r_next)
    return out[0] if single else out


def prop_group(r_next, a_neighbors, a_center, mode="conserving", eps=0.0):
    """Split relevance of grouped offsets between neighbors and their center.

    Parameters
    ----------
    r_next : array (..., C, K, d)
        Relevance of the offsets ``a_neighbors - a_center``.
    a_neighbors : array (..., C, K, d)
    a_center : array (..., C, d)
    mode : {"conserving", "literal"}
        ``conserving`` gives the neighbor ``a_i / (a_i - a_c) R`` and the center
        ``-a_c / (a_i - a_c) R``. ``literal`` gives the center
        ``a_c / (a_c - a_i) R`` and the neighbor the remainder.

    Returns
    -------
    r_neighbors : array (..., C, K, d)
    r_center : array (..., C, d), summed over each center's K neighbors
    """
    if mode not in GROUP_MODES:
        raise ValueError(f"group mode must be one of {GROUP_MODES}, got {mode!r}")
    r_next = np.asarray(r_next, dtype=np.float64)
    a_i = np.asarray(a_neighbors, dtype=np.float64)
    a_c = np.broadcast_to(np.asarray(a_center, dtype=np.float64)[..., None, :], a_i.shape)
    if mode == "conserving":
        diff = a_i - a_c
        r_nbr = _safe_ratio(a_i, diff, r_next, eps, "group rule")
        r_ctr = _safe_ratio(-a_c, diff, r_next, eps, "group rule")
    else:
        r_ctr = _safe_ratio(a_c, a_c - a_i, r_next, eps, "group rule")
        r_nbr = r_next - r_ctr
    return r_nbr, r_ctr.sum(axis=-2)


def prop_maxpool(r_next, argmax, k):
    """Place each channel's relevance ``(..., d)`` at its argmax among ``k`` slots."""
    r_next = np.asarray(r_next, dtype=np.float64)
    out = np.zeros(r_next.shape[:-1] + (k,) + r_next.shape[-1:])
    np.put_along_axis(out, np.asarray(argmax)[..., None, :], r_next[..., None, :], axis=-2)
    return out


@dataclass
class RelevanceMap:
    """Relevance of every layer output visited by one flow (batched)."""

    relevance: dict
    initial: np.ndarray
    eps: float
    group_mode: str
    stop_layer: str
    layers: list = field(default_factory=list)

    def __getitem__(self, name):
        return self.relevance[name]

    def totals(self):
        """Total relevance per sample of every visited layer."""
        return {name: r.reshape(r.shape[0], -1).sum(axis=1) for name, r in self.relevance.items()}


@dataclass
class PointSalience:
    """Per-point salience in [0, 1] of one layer, ``(B, N)``.

    For layers without point support (pooled globals, fully connected) the
    values are the normalized relevance vector and ``global_layer`` is set.
    """

    values: np.ndarray
    layer: str
    global_layer: bool = False


def _accumulate(store, name, value):
    store[name] = store[name] + value if name in store else value


def layer_contributions(entry, r, trace, eps=1e-6, group_mode="conserving"):
    """Relevance handed by one layer to each of its inputs.

    Parameters
    ----------
    entry : TraceEntry
    r : ndarray
        Relevance of ``entry``'s output.

    Returns
    -------
    list of (input name, ndarray)
        One item per edge; an input reached twice appears twice.
    """
    kind = entry.kind
    if kind in ("SharedConv", "FullyConnected"):
        a = trace.activation(entry.inputs[0])
        return [(entry.inputs[0], prop_fc_conv(r, a, entry.meta["weight"], eps))]
    if kind == "MaxPool":
        k = trace.activation(entry.inputs[0]).shape[-2]
        return [(entry.inputs[0], prop_maxpool(r, entry.meta["argmax"], k))]
    if kind == "Sample":
        n_source = trace.activation(entry.inputs[0]).shape[1]
        return [(entry.inputs[0], prop_sample(r, entry.meta["indices"], n_source))]
    if kind == "Input":
        return []
    if kind != "Group":
        raise ValueError(f"no relevance rule for layer kind {kind!r}")
    xyz_name = entry.inputs[0]
    xyz = trace.activation(xyz_name)
    if entry.meta["group_all"]:
        out = [(xyz_name, r[..., :3])]
        if len(entry.inputs) > 1:
            out.append((entry.inputs[1], r[..., 3:]))
        return out
    nbr = entry.meta["neighbors"]
    b = np.arange(xyz.shape[0])
    a_nbr = xyz[b[:, None, None], nbr]
    center_name = entry.inputs[1]
    r_nbr, r_ctr = prop_group(r[..., :3], a_nbr, trace.activation(center_name), group_mode, eps)
    bb = np.broadcast_to(b[:, None, None], nbr.shape)
    r_xyz = np.zeros(xyz.shape)
    np.add.at(r_xyz, (bb, nbr), r_nbr)
    out = [(xyz_name, r_xyz), (center_name, r_ctr)]
    if len(entry.inputs) > 2:
        r_feat = np.zeros(trace.activation(entry.inputs[2]).shape)
        np.add.at(r_feat, (bb, nbr), r[..., 3:])
        out.append((entry.inputs[2], r_feat))
    return out


def relevance_flow(trace, stop_layer="input", eps=1e-6, group_mode="conserving", target=None):
    """Propagate relevance from the logits down to ``stop_layer``.

    Parameters
    ----------
    trace : ForwardTrace
    stop_layer : str
        Name of the layer whose output relevance is wanted; ``"input"`` runs
        the full flow.
    eps : float
        Sign-matched denominator stabilizer; ``0`` makes every rule exactly
        conserving and raises on zero denominators.
    target : array of int, optional
        Class to explain per sample; defaults to the predicted class.

    Returns
    -------
    RelevanceMap, PointSalience
    """
    if stop_layer not in trace:
        raise KeyError(f"layer {stop_layer!r} not in trace; layers are {trace.names}")
    if group_mode not in GROUP_MODES:
        raise ValueError(f"group mode must be one of {GROUP_MODES}, got {group_mode!r}")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    logits = trace.logits
    if target is None:
        r0 = init_relevance(logits)
    else:
        r0 = np.zeros_like(logits)
        np.put_along_axis(r0, np.asarray(target).reshape(-1, 1), 1.0, axis=-1)
    entries = list(trace)
    store = {entries[-1].name: r0}
    done = {}
    visited = []
    for entry in reversed(entries):
        if entry.name not in store:
            continue
        r = store.pop(entry.name)
        done[entry.name] = r
        visited.append(entry.name)
        if entry.name == stop_layer:
            break
        for name, contribution in layer_contributions(entry, r, trace, eps, group_mode):
            _accumulate(store, name, contribution)
    rmap = RelevanceMap(done, r0, eps, group_mode, stop_layer, visited)
    return rmap, layer_salience(trace, rmap, stop_layer)


def _minmax(values):
    lo = values.min(axis=-1, keepdims=True)
    span = values.max(axis=-1, keepdims=True) - lo
    out = np.zeros_like(values)
    np.divide(values - lo, span, out=out, where=span > 0)
    return out


def point_relevance(trace, rmap, layer):
    """Signed relevance of ``layer`` summed over channels onto input points ``(B, N)``.

    Each row's relevance is shared evenly among the points of its receptive
    field; points reached through several groups accumulate every share.
    """
    entry = trace[layer]
    r = rmap[layer]
    if entry.sites is None:
        raise ValueError(f"layer {layer!r} has no point support")
    per_row = r.sum(axis=-1)
    sites = np.broadcast_to(entry.sites, per_row.shape + entry.sites.shape[-1:])
    share = np.broadcast_to((per_row / sites.shape[-1])[..., None], sites.shape)
    out = np.zeros((per_row.shape[0], trace.n_points))
    b = np.broadcast_to(np.arange(per_row.shape[0]).reshape((-1,) + (1,) * (sites.ndim - 1)),
                        sites.shape)
    np.add.at(out, (b, sites), share)
    return out


def layer_salience(trace, rmap, layer):
    """Clamped, min-max normalized salience of a visited layer."""
    if layer not in rmap.relevance:
        raise KeyError(f"layer {layer!r} was not reached by this flow")
    if trace[layer].sites is None:
        values = rmap[layer].reshape(rmap[layer].shape[0], -1)
        return PointSalience(_minmax(np.maximum(values, 0.0)), layer, global_layer=True)
    values = point_relevance(trace, rmap, layer)
    return PointSalience(_minmax(np.maximum(values, 0.0)), layer)


class RelevanceFlow(TransformerMixin, BaseEstimator):
    """Map clouds to per-point salience of one layer of a fitted classifier.

    Parameters
    ----------
    model : PointNetClassifier
        A fitted classifier.
    layer : str
        Layer whose hidden semantics are visualised; ``"input"`` is the full flow.
    epsilon : float
    group_mode : {"conserving", "literal"}
    batch_size : int
    """

    def __init__(self, model=None, layer="input", epsilon=1e-6, group_mode="conserving",
                 batch_size=32):
        self.model = model
        self.layer = layer
        self.epsilon = epsilon
        self.group_mode = group_mode
        self.batch_size = batch_size

    def fit(self, X=None, y=None):
        if self.model is None:
            raise ValueError("RelevanceFlow needs a fitted model")
        check_is_fitted(self.model, "network_")
        if self.layer not in self.model.layer_names:
            raise ValueError(f"unknown layer {self.layer!r}; choose from {self.model.layer_names}")
        if self.group_mode not in GROUP_MODES:
            raise ValueError(f"group_mode must be one of {GROUP_MODES}")
        self.layers_ = list(self.model.layer_names)
        return self

    def _batches(self, X):
        X = check_clouds(X)
        for i in range(0, len(X), self.batch_size):
            yield X[i:i + self.batch_size]

    def explain(self, X, layers=None):
        """Salience of several layers from one full flow per batch.

        Returns a dict ``layer -> (M, N)`` array plus the predicted class
        indices ``(M,)`` under the key ``"__predicted__"``.
        """
        check_is_fitted(self, "layers_")
        layers = [self.layer] if layers is None else list(layers)
        deepest = min(layers, key=self.layers_.index)
        out = {name: [] for name in layers}
        predicted = []
        for xb in self._batches(X):
            logits, trace = self.model.network_.forward(xb)
            rmap, _ = relevance_flow(trace, deepest, self.epsilon, self.group_mode)
            for name in layers:
                out[name].append(layer_salience(trace, rmap, name).values)
            predicted.append(np.argmax(logits, axis=1))
        result = {name: np.concatenate(v) for name, v in out.items()}
        result["__predicted__"] = np.concatenate(predicted)
        return result

    def transform(self, X):
        return self.explain(X)[self.layer]
