"""Synthetic labelled-part shapes.

Every shape is assembled from surface primitives (plane patch, box,
cylinder, sphere), jittered, then centred and scaled into the unit sphere.
Part ids are known by construction, so plane and part metrics have exact
ground truth.
"""

from dataclasses import dataclass, field

import numpy as np

from .validation import check_random_state

PRIMITIVES = ("plane", "box", "cylinder", "sphere")


@dataclass
class Primitive:
    """One surface primitive.

    ``size`` is (sx, sy) for a plane, (sx, sy, sz) for a box, (radius, height)
    for an open cylinder and (radius,) for a sphere. ``center`` places the
    primitive's centre; planes lie in z = center[2].
    """

    kind: str
    size: tuple
    center: tuple = (0.0, 0.0, 0.0)
    part_id: int = 0
    n_points: int = 0


@dataclass
class ShapeRecipe:
    name: str
    parts: list
    jitter: float = 0.01
    # relative spread of random per-sample scaling of every size
    size_jitter: float = 0.15
    random_yaw: bool = True
    extra: dict = field(default_factory=dict)

    @property
    def n_points(self):
        return sum(p.n_points for p in self.parts)


def _sample_plane(rng, size, n):
    sx, sy = size
    xy = rng.uniform(-0.5, 0.5, size=(n, 2)) * (sx, sy)
    return np.column_stack([xy, np.zeros(n)])


def _sample_box(rng, size, n):
    sx, sy, sz = size
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 3)) * (sx, sy, sz)
    axis = face // 2
    sign = np.where(face % 2 == 0, -0.5, 0.5)
    u[np.arange(n), axis] = sign * np.array([sx, sy, sz])[axis]
    return u


def _sample_cylinder(rng, size, n):
    r, h = size
    theta = rng.uniform(0, 2 * np.pi, n)
    z = rng.uniform(-0.5, 0.5, n) * h
    return np.column_stack([r * np.cos(theta), r * np.sin(theta), z])


def _sample_sphere(rng, size, n):
    (r,) = size
    v = rng.normal(size=(n, 3))
    return r * v / np.linalg.norm(v, axis=1, keepdims=True)


_SAMPLERS = {"plane": _sample_plane, "box": _sample_box,
             "cylinder": _sample_cylinder, "sphere": _sample_sphere}


def normalize(points):
    """Centre on the bounding-box centre and scale to max norm 1."""
    centred = points - (points.max(axis=0) + points.min(axis=0)) / 2
    return centred / np.linalg.norm(centred, axis=1).max()


def validate_recipe(recipe):
    if not recipe.parts:
        raise ValueError(f"recipe {recipe.name!r} has no parts")
    for p in recipe.parts:
        if p.kind not in PRIMITIVES:
            raise ValueError(f"unknown primitive {p.kind!r}")
        if p.n_points < 1:
            raise ValueError(f"part of {recipe.name!r} has no points")
        if any(s <= 0 for s in p.size):
            raise ValueError(f"non-positive primitive size {p.size}")
    if recipe.jitter < 0 or recipe.size_jitter < 0:
        raise ValueError("jitter must be non-negative")


def generate_one(recipe, rng):
    """One cloud from ``recipe``; returns ``(points, part_labels)``."""
    scale = 1 + recipe.size_jitter * rng.uniform(-1, 1, size=3)
    chunks, labels = [], []
    for part in recipe.parts:
        size = np.asarray(part.size, dtype=float)
        if part.kind == "box":
            size = size * scale
        elif part.kind == "plane":
            size = size * scale[:2]
        elif part.kind == "cylinder":
            size = size * (scale[0], scale[2])
        pts = _SAMPLERS[part.kind](rng, tuple(size), part.n_points)
        centre = np.asarray(part.center, dtype=float) * scale
        chunks.append(pts + centre)
        labels.append(np.full(part.n_points, part.part_id, dtype=np.int64))
    points = np.concatenate(chunks)
    labels = np.concatenate(labels)
    if recipe.random_yaw:
        a = rng.uniform(0, 2 * np.pi)
        c, s = np.cos(a), np.sin(a)
        points = points @ np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    points = normalize(points)
    if recipe.jitter > 0:
        points = normalize(points + rng.normal(scale=recipe.jitter, size=points.shape))
    return points, labels


def generate(recipe, count, seed=0):
    """``count`` clouds from ``recipe``; a list of ``(points, part_labels)``."""
    if count < 1:
        raise ValueError("count must be at least 1")
    validate_recipe(recipe)
    rng = check_random_state(seed)
    return [generate_one(recipe, rng) for _ in range(count)]


def _split(n, weights):
    w = np.asarray(weights, dtype=float)
    counts = np.floor(n * w / w.sum()).astype(int)
    counts[0] += n - counts.sum()
    return [int(c) for c in counts]


def table(n_points=512, jitter=0.01):
    top, legs = _split(n_points, [1, 1])
    leg = _split(legs, [1, 1, 1, 1])
    parts = [Primitive("plane", (1.6, 1.0), (0, 0, 0.35), 0, top)]
    for (x, y), n in zip([(-0.7, -0.4), (0.7, -0.4), (-0.7, 0.4), (0.7, 0.4)], leg):
        parts.append(Primitive("box", (0.08, 0.08, 0.7), (x, y, 0.0), 1, n))
    return ShapeRecipe("table", parts, jitter)


def lamp(n_points=512, jitter=0.01):
    pole, shade = _split(n_points, [3, 5])
    return ShapeRecipe("lamp", [
        Primitive("cylinder", (0.05, 1.2), (0, 0, -0.3), 0, pole),
        Primitive("cylinder", (0.35, 0.4), (0, 0, 0.5), 1, shade),
    ], jitter)


def plane_sheet(n_points=512, jitter=0.01):
    return ShapeRecipe("plane-sheet", [Primitive("plane", (1.6, 1.2), (0, 0, 0), 0, n_points)],
                       jitter)


def ball(n_points=512, jitter=0.01):
    return ShapeRecipe("ball", [Primitive("sphere", (1.0,), (0, 0, 0), 0, n_points)], jitter)


RECIPES = {"table": table, "lamp": lamp, "plane-sheet": plane_sheet, "ball": ball}
DEFAULT_CLASSES = tuple(RECIPES)


def make_dataset(classes=DEFAULT_CLASSES, n_train=200, n_test=50, n_points=512,
                 jitter=0.01, seed=0):
    """Train/test splits of the built-in recipes.

    Returns a dict with ``X_train, y_train, parts_train, X_test, y_test,
    parts_test`` and ``classes``; labels are indices into ``classes``.
    """
    out = {k: [] for k in ("X_train", "y_train", "parts_train",
                           "X_test", "y_test", "parts_test")}
    for ci, name in enumerate(classes):
        if name not in RECIPES:
            raise ValueError(f"unknown class {name!r}; choose from {sorted(RECIPES)}")
        recipe = RECIPES[name](n_points, jitter)
        clouds = generate(recipe, n_train + n_test, seed=[seed, ci])
        for split, chunk in (("train", clouds[:n_train]), ("test", clouds[n_train:])):
            for pts, labels in chunk:
                out[f"X_{split}"].append(pts)
                out[f"y_{split}"].append(ci)
                out[f"parts_{split}"].append(labels)
    data = {k: np.asarray(v) for k, v in out.items()}
    data["classes"] = list(classes)
    return data
