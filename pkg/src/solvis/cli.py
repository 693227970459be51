"""Command-line entry point: analyze, simulate, train, validate, serve, emulate."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__
from .classifier import (FEATURE_NAMES, FeaturedCase, SvmModel, augment_rows, classify, featurize,
                         in_sample_validate, kfold_validate, read_manifest, write_feature_dump)
from .config import DEFAULT_CONFIG, Config
from .errors import ConfigError, SolvisError
from .labels import Label
from .raster import BinaryMask, read_mask, read_png, write_png

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_FAIL1 = 10
EXIT_FAIL2 = 11
LABEL_EXIT = {Label.PASS: EXIT_OK, Label.FAIL1: EXIT_FAIL1, Label.FAIL2: EXIT_FAIL2}

log = logging.getLogger("solvis")


class UsageError(Exception):
    pass


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {path}")
    return p


def _config(args) -> Config:
    config = Config.load(_existing(args.config)) if args.config else DEFAULT_CONFIG
    items = {}
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        items[key.strip()] = value.strip()
    if items:
        config = config.with_items(items)
    print(f"config hash: {config.hash()}")
    return config


def _progress(total: int, what: str):
    start = time.monotonic()

    def report(done: int) -> None:
        if done == total or done % 25 == 0:
            log.info("%s %d/%d (%.0f s)", what, done, total, time.monotonic() - start)

    return report


# -- analyze ---------------------------------------------------------------------

def cmd_analyze(args, config: Config) -> int:
    from .classifier import assemble_features, extract_rois
    from .sa import ground_truth_from_mask

    white = read_png(_existing(args.white))
    check = read_png(_existing(args.check))
    model = SvmModel.load(_existing(args.model))
    white_roi, check_roi = extract_rois(white, check, config)
    truth = None
    if args.ground_truth:
        truth = ground_truth_from_mask(_grid_mask(args.ground_truth, check_roi.mask.shape, config), check_roi)
    features = assemble_features(white_roi, check_roi, truth, config)
    label = classify(model, features)
    print(label.value)
    for name, value in zip(FEATURE_NAMES, features.to_array()):
        print(f"  {name:22s} {value:.6g}")
    return LABEL_EXIT[label]


def _grid_mask(path: str, shape: tuple[int, int], config: Config) -> BinaryMask:
    """Ground-truth mask in crop coordinates; full-frame captures are cropped like frames."""
    mask = read_mask(_existing(path))
    if mask.shape != shape:
        side = config["crop.side"]
        if min(mask.shape) < side:
            raise UsageError(f"ground-truth mask {mask.width}x{mask.height} is smaller than the crop")
        top, left = (mask.height - side) // 2, (mask.width - side) // 2
        mask = BinaryMask(mask.bits[top:top + side, left:left + side])
    return mask


# -- simulate --------------------------------------------------------------------

def _write_scene(scene, out: Path, stem: str) -> dict:
    from .synthgen import params_dict

    white, check, grid = f"{stem}_white.png", f"{stem}_check.png", f"{stem}_grid.png"
    write_png(scene.white, out / white)
    write_png(scene.check, out / check)
    write_png(scene.grid.mask, out / grid)
    return {"white": white, "check": check, "grid": grid, "label": scene.label.value,
            "params": params_dict(scene.params)}


def _parse_counts(text: str) -> dict[Label, int]:
    counts = {}
    for part in text.split(","):
        name, sep, value = part.partition("=")
        if not sep:
            raise UsageError(f"--counts expects Label=N pairs, got {part!r}")
        try:
            counts[Label.parse(name)] = int(value)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    return counts


def cmd_simulate(args, config: Config) -> int:
    from . import synthgen as sg
    from .classifier import write_manifest

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.dataset:
        counts = _parse_counts(args.counts) if args.counts else sg.DEFAULT_MIX
        cases = sg.generate_dataset(counts, args.seed, out, config)
        print(f"wrote {len(cases)} cases ({2 * len(cases)} images) and manifest.csv to {out}")
        return EXIT_OK
    start = sg.category_preset(args.preset, args.seed)
    if args.turbidity is not None:
        start = replace(start, turbidity=args.turbidity)
    if args.series:
        series = sg.dissolution_series(start, args.series, args.schedule, args.interval_min)
        rows, meta = [], []
        for k, (p, minutes) in enumerate(zip(series.steps, series.timestamps)):
            info = _write_scene(sg.render_scene(p, config), out, f"step{k:03d}")
            info["minutes"] = minutes
            meta.append(info)
            rows.append({"case_id": f"step{k:03d}", "white_png": info["white"], "check_png": info["check"],
                         "label": info["label"], "scenario": args.preset, "augmentation": "identity"})
        write_manifest(out / "manifest.csv", rows)
        (out / "series.json").write_text(json.dumps(meta, indent=2) + "\n")
        print(f"wrote {len(rows)}-step series to {out}")
        return EXIT_OK
    info = _write_scene(sg.render_scene(start, config), out, f"preset{args.preset}")
    (out / f"preset{args.preset}.json").write_text(json.dumps(info, indent=2) + "\n")
    print(f"{info['label']}: wrote {info['white']}, {info['check']}, {info['grid']} to {out}")
    return EXIT_OK


# -- train / validate ------------------------------------------------------------

def _manifest_cases(args, config: Config) -> list[FeaturedCase]:
    rows = read_manifest(_existing(args.manifest))
    if args.augment:
        rows = augment_rows(rows)
    return featurize(rows, config, _progress(len(rows), "features"))


def cmd_train(args, config: Config) -> int:
    cases = _manifest_cases(args, config)
    model, report = in_sample_validate(cases, config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    if args.features:
        write_feature_dump(args.features, cases)
    print(f"trained on {len(cases)} cases; model written to {out}")
    print(f"[{report.mode}]")
    print(report.confusion.format())
    return EXIT_OK


def cmd_validate(args, config: Config) -> int:
    if args.folds < 2:
        raise UsageError(f"--folds must be at least 2, got {args.folds}")
    cases = _manifest_cases(args, config)
    report = kfold_validate(cases, args.folds, args.seed, config)
    print(f"[{report.mode}] {args.folds}-fold validation over {len(cases)} cases")
    print("fold  accuracy")
    for i, acc in enumerate(report.fold_accuracy, 1):
        print(f"{i:>4}  {100 * acc:7.2f}%")
    print(f"mean  {100 * report.mean_accuracy:7.2f}%")
    print(report.confusion.format())
    return EXIT_OK


# -- serve / emulate -------------------------------------------------------------

def cmd_serve(args, config: Config) -> int:
    from .orchestrator.server import connect, run_series, trend_rows, write_trend_csv
    from .plot import write_trend_svg
    from .sa import ground_truth_from_mask

    model = SvmModel.load(_existing(args.model))
    side = config["crop.side"]
    truth = ground_truth_from_mask(_grid_mask(args.ground_truth, (side, side), config)) if args.ground_truth else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    display = connect(args.display, config["protocol.timeout"])
    camera = connect(args.camera, config["protocol.timeout"])
    try:
        entries = run_series(display, camera, model, args.count, args.interval, config, truth,
                             out_dir=out / "records")
    finally:
        display.close()
        camera.close()
    minutes = args.minutes_per_step
    write_trend_csv(out / "trend.csv", entries, minutes)
    rows = trend_rows(entries, minutes)
    write_trend_svg(out / "trend.svg", [float(r["minutes"]) for r in rows],
                    {"superposition ratio": [float(r["superposition_ratio"]) if r["status"] == "ok" else None
                                             for r in rows],
                     "particle pixels": [float(r["particle_pixel_count"]) if r["status"] == "ok" else None
                                         for r in rows]},
                    title="dissolution trend")
    for r in rows:
        print(f"{r['step']:>4} {r['minutes']:>8} {r['status']:7s} {r['label']:6s} {r['error']}")
    failed = sum(1 for e in entries if not e.ok)
    print(f"{len(entries) - failed} records, {failed} failures; trend written to {out}")
    return EXIT_OK if failed < len(entries) else EXIT_RUNTIME


def cmd_emulate(args, config: Config) -> int:
    from . import synthgen as sg
    from .orchestrator.emulators import Behavior, Bench, CameraEmulator, DisplayEmulator, scene_source

    sessions = frozenset(int(s) for s in args.fault_sessions.split(",")) if args.fault_sessions else None
    behavior = Behavior(args.delay, args.drop, args.corrupt, args.wrong_order, sessions)
    start = sg.category_preset(args.preset, args.seed)
    if args.turbidity is not None:
        start = replace(start, turbidity=args.turbidity)
    scenes = list(sg.dissolution_series(start, args.series).steps) if args.series else [start]
    max_payload = config["protocol.max_payload"]
    bench = Bench()
    emulators = []
    if args.role in ("display", "rig"):
        emulators.append(DisplayEmulator(bench, args.host, args.display_port, behavior, max_payload))
    if args.role in ("camera", "rig"):
        emulators.append(CameraEmulator(bench if args.role == "rig" else None, scene_source(scenes, config),
                                        args.host, args.camera_port, behavior, max_payload))
    for emu in emulators:
        emu.start()
        print(f"{type(emu).__name__} listening on {emu.endpoint}", flush=True)
    try:
        deadline = time.monotonic() + args.duration if args.duration else None
        while deadline is None or time.monotonic() < deadline:
            time.sleep(0.2)
    except KeyboardInterrupt:
        pass
    finally:
        for emu in emulators:
            emu.stop()
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="solvis", description="Image-based solubility analysis.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", parents=[common], help="classify one white/check image pair")
    p.add_argument("--white", required=True)
    p.add_argument("--check", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--ground-truth", help="calibration capture of the grid (PNG mask)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate", parents=[common], help="render synthetic scenes")
    what = p.add_mutually_exclusive_group()
    what.add_argument("--dataset", action="store_true", help="labelled dataset with manifest")
    what.add_argument("--series", type=int, metavar="N", help="N-step dissolution series")
    p.add_argument("--preset", choices=("A", "B", "C", "D"), default="A")
    p.add_argument("--turbidity", type=float, help="override the preset's turbidity")
    p.add_argument("--schedule", choices=("linear", "exponential"), default="linear")
    p.add_argument("--interval-min", type=float, default=5.0)
    p.add_argument("--counts", help="label mix, e.g. Fail1=20,Fail2=104,Pass=29")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    for name, func, help_text in (("train", cmd_train, "train a model from a manifest"),
                                  ("validate", cmd_validate, "k-fold validation on a manifest")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--manifest", required=True)
        p.add_argument("--augment", action="store_true", help="add h/v/hv flips of every case")
        if name == "train":
            p.add_argument("--out", required=True, help="model file to write")
            p.add_argument("--features", help="also write a feature CSV")
        else:
            p.add_argument("--folds", type=int, default=4)
            p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=func)

    p = sub.add_parser("serve", parents=[common], help="run measurements against display and camera units")
    p.add_argument("--display", required=True, metavar="HOST:PORT")
    p.add_argument("--camera", required=True, metavar="HOST:PORT")
    p.add_argument("--model", required=True)
    p.add_argument("--ground-truth")
    p.add_argument("--interval", type=float, default=0.0, help="seconds between measurements")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--minutes-per-step", type=float, help="label trend rows with nominal minutes")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("emulate", parents=[common], help="run display/camera emulators")
    p.add_argument("role", choices=("display", "camera", "rig"))
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--display-port", type=int, default=9101)
    p.add_argument("--camera-port", type=int, default=9102)
    p.add_argument("--preset", choices=("A", "B", "C", "D"), default="A")
    p.add_argument("--turbidity", type=float)
    p.add_argument("--series", type=int, metavar="N")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delay", type=float, default=0.0)
    p.add_argument("--drop", action="store_true")
    p.add_argument("--corrupt", action="store_true")
    p.add_argument("--wrong-order", action="store_true")
    p.add_argument("--fault-sessions", help="comma-separated measurement indices the faults apply to")
    p.add_argument("--duration", type=float, help="stop after this many seconds")
    p.set_defaults(func=cmd_emulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _config(args)
        return args.func(args, config)
    except (UsageError, ConfigError) as exc:
        print(f"solvis {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"solvis {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SolvisError, OSError, ValueError) as exc:
        print(f"solvis {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
