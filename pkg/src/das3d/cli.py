"""Command-line entry point: ``das3d <subcommand>``.

Exit codes: 0 success, 1 configuration or input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .camgeom import CameraIntrinsics
from .decode import decode_maps
from .numgrid import NonFiniteError
from .harness.checkpoint import load_checkpoint, load_maps, save_checkpoint
from .harness.config import ConfigError, RunConfig, load_config
from .harness.evaluate import (REPORT_FIELDS, distribution_csv, evaluate, export_distribution,
                               report_csv, fmt_value)
from .harness.scenes import SceneConfigError, gen_dataset, load_dataset, save_dataset
from .harness.train import NumericalError, train

log = logging.getLogger("das3d")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2

# short sweep keys -> dotted config paths
SWEEP_ALIASES = {
    "update_layers": "train.update.n_layers",
    "update_mode": "train.update.mode",
    "pose_loss": "train.loss.pose_loss_kind",
    "steps": "train.steps",
    "lr": "train.lr",
    "label_noise": "train.label_noise.kind",
}


def _scenes(cfg: RunConfig, data: str | None):
    if data:
        try:
            return load_dataset(data)
        except FileNotFoundError as exc:
            raise ConfigError(str(exc)) from exc
    return gen_dataset(cfg.scene, cfg.n_scenes, cfg.seed)


def cmd_gen(args) -> int:
    cfg = load_config(args.config)
    scenes = gen_dataset(cfg.scene, cfg.n_scenes, cfg.seed)
    save_dataset(args.out, scenes)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    scenes = _scenes(cfg, args.data)
    result = train(scenes, cfg.train, cfg.seed)
    save_checkpoint(args.out, cfg, result)
    last = result.history[-1]
    print(f"trained {cfg.train.steps} steps on {len(scenes)} scenes; final total {last['total']:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = _checkpoint(args.ckpt)
    scenes = _scenes(ck.cfg, args.data)
    try:
        report = evaluate(ck.predictor(), scenes, ck.stack, ck.cfg.eval)
    except KeyError as exc:
        raise ConfigError(str(exc)) from exc
    text = report_csv(report)
    _write(args.report, text)
    m = report.mean()
    print(f"MPJPE {fmt_value(m['MPJPE'])} mm, PCK_rel {fmt_value(m['PCK_rel'])}, PCK_abs {fmt_value(m['PCK_abs'])}")
    return EXIT_OK


def cmd_decode(args) -> int:
    try:
        maps = load_maps(args.maps)
        raw = json.loads(Path(args.intr).read_text())
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read decode inputs: {exc}") from exc
    intr = CameraIntrinsics.from_dict(raw.get("camera", raw))
    dets = decode_maps(maps, intr, args.threshold, args.nms_radius)
    _write(args.out, json.dumps({"detections": [d.to_dict() for d in dets]}, indent=1) + "\n")
    print(f"{len(dets)} detections")
    return EXIT_OK


def cmd_export_dist(args) -> int:
    ck = _checkpoint(args.ckpt)
    table = export_distribution(ck.flow, args.lo, args.hi, args.step)
    _write(args.out, distribution_csv(table))
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = load_config(args.config)
    key, values = _parse_sweep(args.sweep)
    scenes = _scenes(base, args.data)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("variant",) + REPORT_FIELDS[1:])
    for value in values:
        cfg = set_path(base, key, value)
        result = train(scenes, cfg.train, cfg.seed)
        model = result.model
        report = evaluate(lambda i, s: model.scene_maps(i), scenes, result.stack, cfg.eval)
        m = report.mean()
        w.writerow([f"{args.sweep.split('=')[0]}={value}"] + [fmt_value(m[k]) for k in REPORT_FIELDS[1:]])
        print(f"{key}={value}: MPJPE {fmt_value(m['MPJPE'])}")
    _write(args.out, buf.getvalue())
    return EXIT_OK


def _checkpoint(path):
    try:
        return load_checkpoint(path)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load checkpoint {path}: {exc}") from exc


def _write(path: str | None, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _parse_sweep(spec: str) -> tuple[str, list[str]]:
    if "=" not in spec:
        raise ConfigError("--sweep needs key=v1,v2,...")
    key, vals = spec.split("=", 1)
    values = [v for v in vals.split(",") if v]
    if not values:
        raise ConfigError("--sweep lists no values")
    return SWEEP_ALIASES.get(key, key), values


def _coerce(old, text: str):
    if isinstance(old, bool):
        if text.lower() not in ("true", "false", "1", "0"):
            raise ConfigError(f"expected a boolean, got {text!r}")
        return text.lower() in ("true", "1")
    if isinstance(old, int):
        return int(text)
    if isinstance(old, float):
        return float(text)
    return text


def set_path(cfg: RunConfig, dotted: str, text: str) -> RunConfig:
    """Copy of ``cfg`` with the field at ``dotted`` (e.g. train.update.n_layers) set."""
    parts = dotted.split(".")

    def rec(obj, names):
        name = names[0]
        if not hasattr(obj, "__dataclass_fields__") or name not in obj.__dataclass_fields__:
            raise ConfigError(f"unknown sweep key {dotted!r}")
        old = getattr(obj, name)
        try:
            new = rec(old, names[1:]) if len(names) > 1 else _coerce(old, text)
            return replace(obj, **{name: new})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad sweep value {text!r} for {dotted}: {exc}") from exc

    return rec(cfg, parts)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="das3d", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate synthetic scenes")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train and write a checkpoint")
    t.add_argument("--config", required=True)
    t.add_argument("--data", help="scene directory (default: generate from config)")
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data")
    e.add_argument("--report", default="-")
    e.set_defaults(fn=cmd_eval)

    d = sub.add_parser("decode", help="decode a prediction-map bundle")
    d.add_argument("--maps", required=True, help="bundle .bin or .json")
    d.add_argument("--intr", required=True, help="intrinsics JSON {f, cx, cy}")
    d.add_argument("--out", default="-")
    d.add_argument("--threshold", type=float, default=0.05)
    d.add_argument("--nms-radius", type=float, default=150.0)
    d.set_defaults(fn=cmd_decode)

    x = sub.add_parser("export-dist", help="export the learned flow's (z1, z2) marginal")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--out", default="-")
    x.add_argument("--lo", type=float, default=-3.0)
    x.add_argument("--hi", type=float, default=3.0)
    x.add_argument("--step", type=float, default=0.1)
    x.set_defaults(fn=cmd_export_dist)

    a = sub.add_parser("ablate", help="paired runs over one config field")
    a.add_argument("--config", required=True)
    a.add_argument("--sweep", required=True, help="key=v1,v2 (e.g. update_layers=0,1,2,3)")
    a.add_argument("--data")
    a.add_argument("--out", default="-")
    a.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, SceneConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, NonFiniteError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
