"""Command-line entry point: ``grcseg {gen,train,eval,verify,inspect}``.

Exit codes: 0 ok, 1 usage or configuration error, 2 data error,
3 numeric divergence, 4 verification failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from importlib import resources

import numpy as np

from . import __version__
from .errors import ConfigurationError, DivergenceError, GRCError, ParseError
from .lidar_io import (IGNORE_LABEL, WEATHER_KINDS, SensorModel, corrupt_weather, distribution_shift,
                       generate_scene, histogram, load_class_map, load_presets, parse_kitti_bin,
                       random_scene_spec, read_scan, write_histogram_csv, write_kitti_bin,
                       write_kitti_label)
from .model import ABLATIONS, ModelConfig
from .rangeview import spherical_project, write_pgm
from .rng import STREAM_SCENE, STREAM_WEATHER, make_rng
from .train import (TrainSettings, confusion_matrix, iou_from_confusion, load_checkpoint,
                    train_loop, write_metrics_csv)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED, EXIT_VERIFY = 0, 1, 2, 3, 4

# report column names for the shipped presets
COLUMN_NAMES = {"fog_dense": "D-fog", "fog_light": "L-fog", "rain": "Rain", "snow": "Snow"}

log = logging.getLogger("grcseg")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _packaged(name):
    return resources.files("grcseg").joinpath("data", name).read_text()


def sub_seed(seed: int, *stream) -> int:
    """Derived 32-bit seed for one scene or corruption draw."""
    return int(make_rng(seed, *stream).integers(2 ** 32))


def _reject_unknown(doc: dict, allowed, where):
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {unknown}")


# -------------------------------------------------------------------- gen

def load_scene_config(path=None) -> dict:
    doc = json.loads(_packaged("desk_scenes.json") if path is None else open(path).read())
    _reject_unknown(doc, ("version", "n_classes", "extent", "seed", "sensor"), "scene config")
    _reject_unknown(doc.get("sensor", {}), [f.name for f in fields(SensorModel)], "scene config sensor")
    return doc


def cmd_gen(args):
    doc = load_scene_config(args.spec)
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    sensor = SensorModel(**doc.get("sensor", {}))
    n_classes = int(doc.get("n_classes", 5))
    os.makedirs(args.out, exist_ok=True)
    if not os.access(args.out, os.W_OK):
        raise OSError(f"output directory {args.out} is not writable")
    files = []
    for i in range(args.count):
        scene_seed = sub_seed(seed, STREAM_SCENE, 1, i)
        cloud = generate_scene(random_scene_spec(scene_seed, n_classes, sensor, float(doc.get("extent", 25.0))))
        stem = f"{i:06d}"
        with open(os.path.join(args.out, stem + ".bin"), "wb") as fh:
            fh.write(write_kitti_bin(cloud))
        with open(os.path.join(args.out, stem + ".label"), "wb") as fh:
            fh.write(write_kitti_label(cloud.labels))
        files.append({"bin": stem + ".bin", "label": stem + ".label", "points": len(cloud),
                      "scene_seed": scene_seed})
    manifest = {"version": 1, "count": args.count, "seed": seed, "n_classes": n_classes,
                "sensor": asdict(sensor), "extent": float(doc.get("extent", 25.0)), "files": files}
    with open(os.path.join(args.out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    print(f"wrote {args.count} scenes to {args.out}")
    return EXIT_OK


# ------------------------------------------------------------- data loading

def load_dataset(data_dir, class_map_path=None):
    """Labelled clouds from ``data_dir`` (``*.bin`` with sibling ``*.label``)."""
    if not os.path.isdir(data_dir):
        raise DataError(f"data directory {data_dir} does not exist")
    class_map = None
    if class_map_path:
        class_map, _ = load_class_map(class_map_path)
    stems = sorted(f[:-4] for f in os.listdir(data_dir) if f.endswith(".bin"))
    if not stems:
        raise DataError(f"no .bin scans in {data_dir}")
    clouds = []
    for stem in stems:
        label = os.path.join(data_dir, stem + ".label")
        if not os.path.exists(label):
            raise DataError(f"{stem}.bin has no matching .label file")
        try:
            clouds.append(read_scan(os.path.join(data_dir, stem + ".bin"), label, class_map))
        except ParseError as exc:
            raise DataError(f"{stem}: {exc}") from None
    return clouds


def _check_class_range(clouds, n_classes):
    for i, c in enumerate(clouds):
        bad = (c.labels != IGNORE_LABEL) & (c.labels >= n_classes)
        if bad.any():
            raise DataError(f"scene {i} has label {int(c.labels[bad][0])} but the model has "
                            f"{n_classes} classes")


# ------------------------------------------------------------------ train

TRAIN_KEYS = ("version", "seed", "model", "train")


def load_train_config(path=None) -> dict:
    doc = json.loads(_packaged("desk_train.json") if path is None else open(path).read())
    if not isinstance(doc, dict):
        raise ConfigurationError("training config must be a JSON object")
    _reject_unknown(doc, TRAIN_KEYS, "training config")
    _reject_unknown(doc.get("model", {}), [f.name for f in fields(ModelConfig)], "training config model")
    _reject_unknown(doc.get("train", {}), [f.name for f in fields(TrainSettings) if f.name != "checkpoint_dir"],
                    "training config train")
    return doc


def cmd_train(args):
    doc = load_train_config(args.config)
    model_doc = dict(doc.get("model", {}))
    ablation = args.ablation or "full"
    cfg = ModelConfig.for_ablation(ablation, **model_doc).validate()
    train_doc = dict(doc.get("train", {}))
    if args.steps is not None:
        train_doc["steps"] = args.steps
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    clouds = load_dataset(args.data, args.class_map)
    _check_class_range(clouds, cfg.n_classes)
    settings = TrainSettings(**train_doc, checkpoint_dir=args.out)
    os.makedirs(args.out, exist_ok=True)
    _attach_log_file(os.path.join(args.out, "train.log"))
    log.info("training ablation=%s steps=%d seed=%d scenes=%d", ablation, settings.steps, seed, len(clouds))
    rows = []
    try:
        train_loop(cfg, clouds, settings, seed=seed, on_step=rows.append)
    except DivergenceError as exc:
        write_metrics_csv(os.path.join(args.out, "metrics.csv"), rows)
        print(f"diverged: {exc}; last checkpoint: {exc.checkpoint}", file=sys.stderr)
        return EXIT_DIVERGED
    write_metrics_csv(os.path.join(args.out, "metrics.csv"), rows)
    print(f"trained {ablation} for {settings.steps} steps; final loss {rows[-1]['loss']:.4f}; "
          f"checkpoint {os.path.join(args.out, 'model.grcw')}")
    return EXIT_OK


# handlers attached by the current ``main`` call, detached when it returns
_handlers: list = []


def _attach_log_file(path):
    handler = logging.FileHandler(path, mode="w")
    _handlers.append(handler)
    handler.setLevel(logging.INFO)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(min(root.level, logging.INFO))


# ------------------------------------------------------------------- eval

def evaluate_columns(model, clouds, presets_to_run, presets, seed):
    """Per-column confusion matrices; ``None`` in ``presets_to_run`` means clean."""
    C = model.cfg.n_classes
    confs = {}
    for k, name in enumerate(presets_to_run):
        conf = np.zeros((C, C), dtype=np.int64)
        for i, cloud in enumerate(clouds):
            if name is not None:
                cloud = corrupt_weather(cloud, name, seed=sub_seed(seed, STREAM_WEATHER, k, i), presets=presets)
            conf += confusion_matrix(model.predict(cloud), cloud.labels, C, model.cfg.ignore_label)
        confs[name] = conf
    return confs


def _column(name, conf):
    iou, m = iou_from_confusion(conf)
    total = int(conf.sum())
    return {"preset": name, "miou": m, "accuracy": float(np.trace(conf) / total),
            "iou": [None if np.isnan(x) else float(x) for x in iou], "points": total}


def build_report(checkpoint, model, clouds, preset, seed, presets):
    if preset == "all":
        run = list(WEATHER_KINDS)
    elif preset == "none":
        run = [None]
    else:
        run = [preset]
    confs = evaluate_columns(model, clouds, run, presets, seed)
    columns, order = {}, []
    for name in run:
        label = "Clean" if name is None else COLUMN_NAMES.get(name, name)
        columns[label] = _column(name, confs[name])
        order.append(label)
    if len(run) > 1:
        columns["All"] = _column("all", sum(confs.values()))
        order.append("All")
    return {"schema_version": 1, "checkpoint": str(checkpoint), "n_classes": model.cfg.n_classes,
            "n_scenes": len(clouds), "seed": seed, "columns": columns, "order": order}


def format_table(report):
    order = report["order"]
    head = "metric   " + "".join(f"{c:>9}" for c in order)
    miou = "mIoU     " + "".join(f"{100 * report['columns'][c]['miou']:9.1f}" for c in order)
    acc = "accuracy " + "".join(f"{100 * report['columns'][c]['accuracy']:9.1f}" for c in order)
    return "\n".join([head, miou, acc])


def cmd_eval(args):
    if not os.path.exists(args.checkpoint) or not os.path.exists(args.checkpoint + ".json"):
        raise DataError(f"checkpoint {args.checkpoint} (and its .json sidecar) not found")
    presets = load_presets(args.presets)
    if args.preset not in ("all", "none") and args.preset not in presets:
        raise UsageError(f"unknown preset {args.preset!r}; choose from all, none, {', '.join(presets)}")
    if args.preset == "all":
        missing = [k for k in WEATHER_KINDS if k not in presets]
        if missing:
            raise UsageError(f"preset file lacks {missing}")
    model, _, _ = load_checkpoint(args.checkpoint)
    clouds = load_dataset(args.data, args.class_map)
    _check_class_range(clouds, model.cfg.n_classes)
    report = build_report(args.checkpoint, model, clouds, args.preset, args.seed, presets)
    if args.report:
        with open(args.report, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        print(format_table(report))
    return EXIT_OK


# ----------------------------------------------------------------- verify

def cmd_verify(args):
    from .verify import run_suite

    checks = run_suite(args.suite)
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


# ---------------------------------------------------------------- inspect

def cmd_inspect(args):
    try:
        with open(args.scan, "rb") as fh:
            cloud = parse_kitti_bin(fh.read())
    except FileNotFoundError:
        raise DataError(f"scan {args.scan} not found") from None
    except ParseError as exc:
        raise DataError(f"{args.scan}: {exc}") from None
    os.makedirs(args.out, exist_ok=True)
    outputs = {}
    for fld in ("distance", "reflectance"):
        counts, edges = histogram(cloud, fld, args.bins)
        path = os.path.join(args.out, f"{fld}_hist.csv")
        write_histogram_csv(path, counts, edges)
        outputs[fld] = path
    img = spherical_project(cloud, args.height, args.width, args.fov_up, args.fov_down)
    scale = float(img.reflectance.max()) or 1.0
    write_pgm(os.path.join(args.out, "reflectance.pgm"), img.reflectance, scale)
    if args.preset:
        presets = load_presets(args.presets)
        if args.preset not in presets:
            raise UsageError(f"unknown preset {args.preset!r}")
        other = corrupt_weather(cloud, args.preset, seed=sub_seed(args.seed, STREAM_WEATHER, 0, 0),
                                presets=presets)
        shift = {"version": 1, "preset": args.preset}
        for fld in ("distance", "reflectance"):
            top = float(getattr(cloud, fld).max())
            counts, edges = histogram(other, fld, args.bins, upper=top)
            write_histogram_csv(os.path.join(args.out, f"{fld}_hist_{args.preset}.csv"), counts, edges)
            shift[f"{fld}_shift"] = distribution_shift(cloud, other, fld)
        with open(os.path.join(args.out, f"shift_{args.preset}.json"), "w") as fh:
            json.dump(shift, fh, indent=2, sort_keys=True)
        print(f"W1 shift under {args.preset}: distance {shift['distance_shift']:.4f}, "
              f"reflectance {shift['reflectance_shift']:.4f}")
    print(f"{len(cloud)} points; histograms and {args.height}x{args.width} reflectance.pgm in {args.out}")
    return EXIT_OK


# ----------------------------------------------------------------- parser

def build_parser():
    p = _Parser(prog="grcseg", allow_abbrev=False,
                description="Dual-branch LiDAR segmentation: data generation, training, evaluation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", allow_abbrev=False, help="write synthetic labelled scenes (.bin/.label + manifest)")
    g.add_argument("--spec", help="scene generator JSON (default: shipped desk_scenes.json)")
    g.add_argument("--count", type=int, required=True, help="number of scenes to write")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, help="overrides the seed in the spec file")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", allow_abbrev=False, help="train a model and write checkpoint + metrics.csv")
    t.add_argument("--config", help="training JSON with model/train sections (default: shipped desk_train.json)")
    t.add_argument("--data", required=True, help="directory of .bin/.label scans")
    t.add_argument("--out", required=True, help="output directory for model.grcw, metrics.csv, train.log")
    t.add_argument("--ablation", choices=sorted(ABLATIONS), help="model row (default: full)")
    t.add_argument("--steps", type=int, help="overrides train.steps")
    t.add_argument("--seed", type=int, help="overrides the config seed")
    t.add_argument("--class-map", help="JSON map from raw label ids to class ids")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", allow_abbrev=False, help="mIoU per corruption preset and overall")
    e.add_argument("--checkpoint", required=True, help="model.grcw written by train")
    e.add_argument("--data", required=True, help="directory of clean .bin/.label scans")
    e.add_argument("--preset", default="all", help="all (every weather preset), none (clean) or one preset name")
    e.add_argument("--presets", help="alternative corruption preset JSON")
    e.add_argument("--seed", type=int, default=0, help="seed for the corruption draws")
    e.add_argument("--report", help="also write the JSON report here")
    e.add_argument("--json", action="store_true", help="print JSON instead of the table")
    e.add_argument("--class-map", help="JSON map from raw label ids to class ids")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", allow_abbrev=False, help="run oracle and invariant suites")
    v.add_argument("--suite", default="all", choices=["grad", "kl", "projection", "fusion", "all"])
    v.set_defaults(func=cmd_verify)

    i = sub.add_parser("inspect", allow_abbrev=False, help="histograms and range-view PGM for one scan")
    i.add_argument("--scan", required=True, help="KITTI .bin scan")
    i.add_argument("--out", required=True, help="output directory")
    i.add_argument("--bins", type=int, default=50, help="histogram bins")
    i.add_argument("--height", type=int, default=64, help="range image rows")
    i.add_argument("--width", type=int, default=512, help="range image columns")
    i.add_argument("--fov-up", type=float, default=3.0, help="upper vertical field of view, degrees")
    i.add_argument("--fov-down", type=float, default=-25.0, help="lower vertical field of view, degrees")
    i.add_argument("--preset", help="also corrupt the scan and report histogram shifts")
    i.add_argument("--presets", help="alternative corruption preset JSON")
    i.add_argument("--seed", type=int, default=0, help="seed for the corruption draw")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    level = getattr(logging, os.environ.get("GRCSEG_LOG_LEVEL", "WARNING").upper(), logging.WARNING)
    console = logging.StreamHandler()
    console.setLevel(level)
    console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.addHandler(console)
    _handlers.append(console)
    root.setLevel(level)
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, GRCError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        while _handlers:
            h = _handlers.pop()
            root.removeHandler(h)
            h.close()


if __name__ == "__main__":
    sys.exit(main())
