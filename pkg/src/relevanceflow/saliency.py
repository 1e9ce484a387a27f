"""Three-tier saliency maps.

Salience values are split at ``m + d/3`` and ``m + 2d/3`` (``m`` the minimum,
``d`` the range) into blue (insignificant), pink (significant) and red (most
significant) points.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionError, ParseError
from .netcore import atomic_write_bytes
from .validation import check_cloud, check_salience

TIERS = ("blue", "pink", "red")
BLUE, PINK, RED = 0, 1, 2
TIER_COLORS = {BLUE: (0, 0, 255), PINK: (255, 105, 180), RED: (255, 0, 0)}
DEFAULT_SALIENT = frozenset({"pink", "red"})


@dataclass
class SaliencyMap:
    salience: np.ndarray
    tiers: np.ndarray
    layer: str
    boundaries: tuple

    def __len__(self):
        return len(self.salience)

    def tier_names(self):
        return [TIERS[t] for t in self.tiers]

    def to_dict(self):
        return {
            "layer": self.layer,
            "boundaries": [float(b) for b in self.boundaries],
            "points": [{"i": i, "salience": float(s), "tier": TIERS[t]}
                       for i, (s, t) in enumerate(zip(self.salience, self.tiers))],
        }


def tier(salience, layer=""):
    """Assign every point to blue, pink or red.

    A constant salience vector has zero range and every point lands in red.
    """
    values = check_salience(salience)
    lo = values.min()
    span = values.max() - lo
    # 3 (v - m) against d and 2d avoids rounding in the boundaries themselves
    scaled = 3.0 * (values - lo)
    tiers = np.where(scaled < span, BLUE, np.where(scaled < 2.0 * span, PINK, RED))
    return SaliencyMap(values, tiers.astype(np.int64), layer, (lo + span / 3, lo + 2 * span / 3))


def _tier_codes(tiers):
    if isinstance(tiers, str):
        tiers = {tiers}
    if not tiers:
        raise ValueError("tier set must not be empty")
    unknown = set(tiers) - set(TIERS)
    if unknown:
        raise ValueError(f"unknown tiers {sorted(unknown)}; choose from {TIERS}")
    return [TIERS.index(t) for t in tiers]


def salient_points(smap, tiers=DEFAULT_SALIENT):
    """Sorted indices of the points whose tier is in ``tiers``."""
    return np.flatnonzero(np.isin(smap.tiers, _tier_codes(tiers)))


def export_ply(cloud, smap, path):
    """Write an ASCII PLY with one colored vertex per point."""
    if len(cloud) == 0:
        raise DimensionError("cannot export an empty cloud")
    cloud = check_cloud(cloud)
    if len(cloud) != len(smap):
        raise DimensionError(f"{len(cloud)} points but {len(smap)} salience values")
    lines = ["ply", "format ascii 1.0", f"comment layer {smap.layer or 'unnamed'}",
             f"element vertex {len(cloud)}", "property float x", "property float y",
             "property float z", "property uchar red", "property uchar green",
             "property uchar blue", "end_header"]
    for (x, y, z), t in zip(cloud, smap.tiers):
        r, g, b = TIER_COLORS[int(t)]
        lines.append(f"{x:.9g} {y:.9g} {z:.9g} {r} {g} {b}")
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("ascii"))


def read_ply(path):
    """Read an ASCII PLY written by :func:`export_ply`.

    Returns ``(points, colors)``; tiers can be recovered with
    :func:`tiers_from_colors`.
    """
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "ply":
        raise ParseError(path, 1, "not a PLY file")
    n_vertex, header_end = None, None
    for i, line in enumerate(lines):
        if line.startswith("element vertex"):
            n_vertex = int(line.split()[-1])
        if line == "end_header":
            header_end = i
            break
    if n_vertex is None or header_end is None:
        raise ParseError(path, 1, "incomplete PLY header")
    body = lines[header_end + 1:header_end + 1 + n_vertex]
    if len(body) != n_vertex:
        raise ParseError(path, header_end + 1 + len(body), "missing vertex lines")
    rows = np.array([line.split() for line in body], dtype=float)
    return rows[:, :3], rows[:, 3:6].astype(np.int64)


def tiers_from_colors(colors):
    lookup = {rgb: t for t, rgb in TIER_COLORS.items()}
    return np.array([lookup[tuple(int(c) for c in row)] for row in colors], dtype=np.int64)


def export_json(smap, path):
    data = json.dumps(smap.to_dict(), indent=1, sort_keys=True) + "\n"
    atomic_write_bytes(os.fspath(path), data.encode("utf-8"))
