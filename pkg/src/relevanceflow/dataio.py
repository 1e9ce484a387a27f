"""Text point clouds, dataset manifests and JSON reports.

Clouds are stored as whitespace separated ``x y z [part_id]`` lines. A
dataset directory holds one ``.xyz`` file per cloud plus ``manifest.json``.
Every writer goes through a temporary file and an atomic rename.
"""

import json
import math
import os

import numpy as np

from .exceptions import ParseError, SchemaError, VersionMismatchError
from .netcore import atomic_write_bytes

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = 1
REPORT_FORMAT = 1


def read_xyz(path):
    """Read a cloud file.

    Returns
    -------
    points : ndarray (N, 3)
    part_ids : ndarray (N,) of int or None
        Present when every line carries a fourth column.
    """
    rows, parts = [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) not in (3, 4):
                raise ParseError(path, lineno, f"expected 3 or 4 columns, got {len(fields)}")
            try:
                xyz = [float(f) for f in fields[:3]]
                part = int(fields[3]) if len(fields) == 4 else None
            except ValueError:
                raise ParseError(path, lineno, f"not a number in {line!r}") from None
            if not all(math.isfinite(v) for v in xyz):
                raise ParseError(path, lineno, "non-finite coordinate")
            if parts and (part is None) != (parts[-1] is None):
                raise ParseError(path, lineno, "mixed 3- and 4-column lines")
            rows.append(xyz)
            parts.append(part)
    points = np.array(rows, dtype=np.float64).reshape(-1, 3)
    part_ids = None
    if parts and parts[0] is not None:
        part_ids = np.array(parts, dtype=np.int64)
    return points, part_ids


def write_xyz(path, points, part_ids=None):
    """Write a cloud with full float64 precision, optionally with part ids."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if part_ids is not None:
        part_ids = np.asarray(part_ids, dtype=np.int64)
        if len(part_ids) != len(points):
            raise ValueError(f"{len(points)} points but {len(part_ids)} part ids")
        lines = [f"{x!r} {y!r} {z!r} {p}" for (x, y, z), p in zip(points.tolist(), part_ids)]
    else:
        lines = [f"{x!r} {y!r} {z!r}" for x, y, z in points.tolist()]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("ascii"))


def write_dataset(root, data, seed):
    """Write a dataset dict from :func:`relevanceflow.datagen.make_dataset`.

    Files are named ``<split>/<class>_<index>.xyz``.
    """
    os.makedirs(root, exist_ok=True)
    classes = list(data["classes"])
    splits = {}
    counts = {}
    for split in ("train", "test"):
        X, y, parts = data[f"X_{split}"], data[f"y_{split}"], data[f"parts_{split}"]
        os.makedirs(os.path.join(root, split), exist_ok=True)
        entries = []
        seen = {}
        for cloud, label, part in zip(X, y, parts):
            name = classes[int(label)]
            idx = seen.get(name, 0)
            seen[name] = idx + 1
            rel = f"{split}/{name}_{idx:04d}.xyz"
            write_xyz(os.path.join(root, rel), cloud, part)
            entries.append({"file": rel, "label": int(label)})
        splits[split] = entries
        counts[split] = {c: seen.get(c, 0) for c in classes}
    manifest = {"format_version": MANIFEST_FORMAT, "classes": classes, "counts": counts,
                "seed": seed, "splits": splits}
    _write_json(os.path.join(root, MANIFEST_NAME), manifest)
    return manifest


def read_manifest(root):
    """Load and validate ``manifest.json``; every listed file must exist."""
    path = os.path.join(root, MANIFEST_NAME)
    with open(path) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(path, exc.lineno, exc.msg) from None
    version = manifest.get("format_version")
    if version != MANIFEST_FORMAT:
        raise VersionMismatchError(f"{path}: format_version {version} != {MANIFEST_FORMAT}")
    for key in ("classes", "splits", "seed"):
        if key not in manifest:
            raise SchemaError(f"{path}: missing key {key!r}")
    for split, entries in manifest["splits"].items():
        for entry in entries:
            if not os.path.isfile(os.path.join(root, entry["file"])):
                raise SchemaError(f"{path}: {split} lists missing file {entry['file']}")
            if not 0 <= entry["label"] < len(manifest["classes"]):
                raise SchemaError(f"{path}: bad label {entry['label']} for {entry['file']}")
    return manifest


def load_split(root, split, manifest=None):
    """Stack one split into ``(X, y, parts)`` arrays; clouds must share a size."""
    manifest = manifest or read_manifest(root)
    X, y, parts = [], [], []
    for entry in manifest["splits"][split]:
        points, part_ids = read_xyz(os.path.join(root, entry["file"]))
        X.append(points)
        y.append(entry["label"])
        parts.append(part_ids if part_ids is not None else np.full(len(points), -1))
    if len({len(p) for p in X}) > 1:
        raise SchemaError(f"{root}: clouds in split {split!r} differ in size")
    return np.stack(X), np.array(y, dtype=np.int64), np.stack(parts)


def _check_unit(value, where):
    if not isinstance(value, (int, float)) or not 0.0 <= value <= 1.0:
        raise SchemaError(f"{where} must lie in [0, 1], got {value!r}")


def _check_consistency(report):
    for key in ("layer", "tau", "classes"):
        if key not in report:
            raise SchemaError(f"consistency report misses {key!r}")
    for row in report["classes"]:
        if row["n_p"] > row["n_t"]:
            raise SchemaError(f"class {row['name']}: n_p > n_t")
        _check_unit(row["c_p"], f"c_p of {row['name']}")
    for row in report.get("parts", []):
        _check_unit(row["iou"], f"iou of {row['class']}/{row['layer']}")


def _check_attack(report):
    if "grid" not in report:
        raise SchemaError("attack report misses 'grid'")
    for cell in report["grid"]:
        for key in ("N", "K", "mode", "rate"):
            if key not in cell:
                raise SchemaError(f"attack grid cell misses {key!r}")
        _check_unit(cell["rate"], f"rate at N={cell['N']} K={cell['K']}")
        for row in cell.get("per_class", []):
            _check_unit(row["rate"], f"rate of {row['class']}")
            _check_unit(row["accuracy"], f"accuracy of {row['class']}")


def _check_segmentation(report):
    for row in report.get("classes", []):
        _check_unit(row["miou"], f"miou of {row['class']}")


SCHEMAS = {"consistency": _check_consistency, "attack": _check_attack,
           "segmentation": _check_segmentation, "generic": lambda report: None}


def _write_json(path, obj):
    data = json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n"
    atomic_write_bytes(os.fspath(path), data.encode("utf-8"))


def write_report(obj, path, kind="generic"):
    """Validate ``obj`` against the schema for ``kind`` and write it as JSON.

    Output is canonical (sorted keys, fixed indentation) so equal reports are
    byte-identical.
    """
    if kind not in SCHEMAS:
        raise ValueError(f"unknown report kind {kind!r}; choose from {sorted(SCHEMAS)}")
    SCHEMAS[kind](obj)
    obj = dict(obj)
    obj.setdefault("format_version", REPORT_FORMAT)
    try:
        _write_json(path, obj)
    except ValueError as exc:
        raise SchemaError(f"report is not valid JSON: {exc}") from None
