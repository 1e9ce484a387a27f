"""Command line entry point: ``relflow <subcommand> ...``.

Exit status is 0 on success, 1 on usage errors and 2 on runtime errors.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import attack, dataio, datagen, evalmetrics, partseg
from .exceptions import RelevanceFlowError
from .models import ARCHS, PointNetClassifier
from .relflow import GROUP_MODES, RelevanceFlow
from .saliency import TIERS, export_json, export_ply, tier

logger = logging.getLogger("relevanceflow")

SEED_ENV = "RELFLOW_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _tiers(text):
    tiers = [t.strip() for t in text.split(",") if t.strip()]
    bad = set(tiers) - set(TIERS)
    if not tiers or bad:
        raise argparse.ArgumentTypeError(f"tiers must be a comma list from {TIERS}")
    return tiers


def _int_list(text):
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}")


def build_parser():
    parser = _Parser(prog="relflow", description="Relevance flow through point cloud classifiers.")
    parser.add_argument("--seed", type=int, default=None,
                        help=f"random seed (default: ${SEED_ENV} or 0)")
    parser.add_argument("--threads", type=int, default=None, help="cap numerical threads")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", default=",".join(datagen.DEFAULT_CLASSES))
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--points", type=int, default=512)
    p.add_argument("--jitter", type=float, default=0.01)

    p = sub.add_parser("train", help="train a classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="weights file")
    p.add_argument("--arch", choices=ARCHS, default="pointnet_lite")
    p.add_argument("--arch-params", type=json.loads, default=None, help="JSON dict of widths")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--batch-size", type=int, default=32)

    def model_args(p, data_required=True):
        p.add_argument("--model", required=True, help="weights file")
        p.add_argument("--data", required=data_required)
        p.add_argument("--split", default="test")
        p.add_argument("--eps", type=float, default=1e-6)
        p.add_argument("--group-mode", choices=GROUP_MODES, default="conserving")
        p.add_argument("--out", required=True)

    p = sub.add_parser("explain", help="salience map of one cloud")
    model_args(p, data_required=False)
    p.add_argument("--input", help="XYZ cloud file (alternative to --data/--index)")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--layer", default="input")

    p = sub.add_parser("eval-plane", help="plane-level consistency per class")
    model_args(p)
    p.add_argument("--tau", type=float, default=evalmetrics.DEFAULT_TAU)
    p.add_argument("--layers", default=None, help="comma list (default: all point layers)")
    p.add_argument("--k-normals", type=int, default=evalmetrics.DEFAULT_KN)
    p.add_argument("--tiers", type=_tiers, default=["pink", "red"])

    p = sub.add_parser("eval-part", help="part-level IoU per class and layer")
    model_args(p)
    p.add_argument("--layers", default=None)
    p.add_argument("--tiers", type=_tiers, default=["pink", "red"])

    p = sub.add_parser("segment", help="unsupervised part segmentation")
    model_args(p)
    p.add_argument("--fit-split", default="train")
    p.add_argument("--layers", default=None)
    p.add_argument("--q", type=float, default=partseg.DEFAULT_Q)
    p.add_argument("--margin", type=float, default=partseg.DEFAULT_MARGIN)
    p.add_argument("--tiers", type=_tiers, default=["pink", "red"])
    p.add_argument("--export-dir", default=None, help="write x y z part_id files here")

    p = sub.add_parser("attack", help="salient-region relocation attack")
    model_args(p)
    p.add_argument("--regions", type=int, default=5)
    p.add_argument("--neighbors", type=int, default=40)
    p.add_argument("--mode", choices=attack.MODES + ("both",), default="both")
    p.add_argument("--sweep", action="store_true", help="run the full N x K grid")
    p.add_argument("--n-list", type=_int_list, default=list(attack.DEFAULT_N))
    p.add_argument("--k-list", type=_int_list, default=list(attack.DEFAULT_K))
    return parser


def resolve_config(args):
    """Validated, fully resolved run configuration."""
    config = {k: v for k, v in vars(args).items() if k not in ("verbose",)}
    if config["seed"] is None:
        env = os.environ.get(SEED_ENV)
        try:
            config["seed"] = int(env) if env is not None else 0
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}")
    if config["threads"] is not None and config["threads"] < 1:
        raise UsageError("--threads must be positive")
    for key in ("layers",):
        if isinstance(config.get(key), str):
            config[key] = [v for v in config[key].split(",") if v]
    if config.get("tau") is not None and not config["tau"] > 0:
        raise UsageError("--tau must be positive")
    if config["command"] == "attack" and (config["regions"] < 0 or config["neighbors"] < 1):
        raise UsageError("--regions must be >= 0 and --neighbors >= 1")
    return config


def _point_layers(model, X):
    _, trace = model.forward(X[:1])
    return [e.name for e in trace if e.sites is not None]


def _load(config):
    model = PointNetClassifier.load(config["model"])
    manifest = dataio.read_manifest(config["data"])
    X, y, parts = dataio.load_split(config["data"], config["split"], manifest)
    return model, manifest, X, y, parts


def cmd_gen(config):
    classes = [c for c in config["classes"].split(",") if c]
    data = datagen.make_dataset(classes, config["n_train"], config["n_test"], config["points"],
                                config["jitter"], config["seed"])
    dataio.write_dataset(config["out"], data, config["seed"])
    print(f"wrote {len(data['X_train'])} train / {len(data['X_test'])} test clouds to {config['out']}")


def cmd_train(config):
    manifest = dataio.read_manifest(config["data"])
    X, y, _ = dataio.load_split(config["data"], "train", manifest)
    model = PointNetClassifier(config["arch"], config["arch_params"], config["epochs"],
                               config["lr"], config["batch_size"], config["seed"],
                               dataset_id=f"{os.path.basename(os.path.normpath(config['data']))}"
                                          f"@seed{manifest['seed']}")
    model.fit(X, y)
    model.save(config["out"])
    if manifest["splits"].get("test"):
        Xt, yt, _ = dataio.load_split(config["data"], "test", manifest)
        print(f"test accuracy {model.score(Xt, yt):.4f}")
    print(f"saved {config['out']}")


def cmd_explain(config):
    model = PointNetClassifier.load(config["model"])
    if config["input"]:
        cloud, _ = dataio.read_xyz(config["input"])
    elif config["data"]:
        X, _, _ = dataio.load_split(config["data"], config["split"])
        if not 0 <= config["index"] < len(X):
            raise UsageError(f"--index must lie in [0, {len(X)})")
        cloud = X[config["index"]]
    else:
        raise UsageError("explain needs --input or --data")
    flow = RelevanceFlow(model, config["layer"], config["eps"], config["group_mode"]).fit()
    salience = flow.transform(cloud[None])[0]
    if salience.shape != (len(cloud),):
        raise UsageError(f"layer {config['layer']!r} has no per-point support")
    smap = tier(salience, config["layer"])
    if config["out"].endswith(".json"):
        export_json(smap, config["out"])
    else:
        export_ply(cloud, smap, config["out"])
    print(f"wrote {config['out']}")


def cmd_eval_plane(config):
    model, manifest, X, y, _ = _load(config)
    layers = config["layers"] or _point_layers(model, X)
    sal = RelevanceFlow(model, epsilon=config["eps"], group_mode=config["group_mode"]).fit() \
        .explain(X, layers)
    normals = [evalmetrics.estimate_normals(c, config["k_normals"]).normals for c in X]
    names = manifest["classes"]
    per_layer = []
    for layer in layers:
        rows = evalmetrics.class_cp(X, y, sal[layer], config["tau"], set(config["tiers"]),
                                    config["k_normals"], names, normals)
        per_layer.append(evalmetrics.consistency_report(layer, config["tau"], rows))
    best = {}
    for rep in per_layer:
        for row in rep["classes"]:
            if row["name"] not in best or row["c_p"] > best[row["name"]]["c_p"]:
                best[row["name"]] = dict(row, layer=rep["layer"])
    report = {"layer": "max", "tau": config["tau"], "classes": list(best.values()),
              "layers": per_layer, "config": config}
    dataio.write_report(report, config["out"], "consistency")
    for row in report["classes"]:
        print(f"{row['name']:12s} C_p {row['c_p']:.3f} ({row['n_p']}/{row['n_t']}) at {row['layer']}")


def cmd_eval_part(config):
    model, manifest, X, y, parts = _load(config)
    layers = config["layers"] or _point_layers(model, X)
    sal = RelevanceFlow(model, epsilon=config["eps"], group_mode=config["group_mode"]).fit() \
        .explain(X, layers)
    rows = evalmetrics.layer_part_table(y, parts, {k: sal[k] for k in layers},
                                        set(config["tiers"]), manifest["classes"])
    report = {"layer": "all", "tau": None, "classes": [], "parts": rows, "config": config}
    dataio.write_report(report, config["out"], "consistency")
    for row in rows:
        print(f"{row['class']:12s} {row['layer']:12s} part {row['part_id']} IoU {row['iou']:.3f}")


def cmd_segment(config):
    model, manifest, X, y, parts = _load(config)
    Xf, yf, _ = dataio.load_split(config["data"], config["fit_split"], manifest)
    seg = partseg.UnsupervisedPartSegmenter(model, config["layers"], config["q"], config["margin"],
                                            tuple(config["tiers"]), config["eps"]).fit(Xf, yf)
    pred = seg.predict(X, y)
    result = partseg.miou(pred, parts, y, manifest["classes"])
    baseline = partseg.miou(np.zeros_like(parts), parts, y, manifest["classes"])
    detectors = {manifest["classes"][c]: [d.to_dict() for d in dets]
                 for c, dets in sorted(seg.detectors_.items())}
    report = dict(result, baseline=baseline, detectors=detectors, config=config)
    dataio.write_report(report, config["out"], "segmentation")
    if config["export_dir"]:
        os.makedirs(config["export_dir"], exist_ok=True)
        for i, (cloud, labels) in enumerate(zip(X, pred)):
            dataio.write_xyz(os.path.join(config["export_dir"], f"{i:04d}.xyz"), cloud, labels)
    for row, base in zip(result["classes"], baseline["classes"]):
        print(f"{row['class']:12s} mIoU {row['miou']:.3f} (single part {base['miou']:.3f})")


def cmd_attack(config):
    model, manifest, X, y, _ = _load(config)
    modes = attack.MODES if config["mode"] == "both" else (config["mode"],)
    n_list = config["n_list"] if config["sweep"] else [config["regions"]]
    k_list = config["k_list"] if config["sweep"] else [config["neighbors"]]
    report = attack.sweep(model, X, y, n_list, k_list, modes, config["seed"], config["eps"],
                          manifest["classes"], config=config)
    dataio.write_report(report.to_dict(), config["out"], "attack")
    root, ext = os.path.splitext(config["out"])
    dataio.write_report(report.timing_dict(), f"{root}.timing{ext or '.json'}")
    print(report.summary())


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "explain": cmd_explain,
            "eval-plane": cmd_eval_plane, "eval-part": cmd_eval_part,
            "segment": cmd_segment, "attack": cmd_attack}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        config = resolve_config(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=config["threads"]):
            COMMANDS[config["command"]](config)
    except UsageError as exc:
        print(f"relflow {config['command']}: error: {exc}", file=sys.stderr)
        return 1
    except (RelevanceFlowError, OSError, ValueError, KeyError) as exc:
        print(f"relflow {config['command']}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
