"""Command-line entry point: gen-data, train, reconstruct, eval, report.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import config as C
from .data import generate_dataset, load_dataset
from .encoder import MODES
from .extraction import MiseConfig, SlidingWindowConfig, TiledField, mise_extract, write_mesh
from .extraction.meshio import read_mesh
from .geometry import FormatError, SceneSpec, read_point_cloud, read_voxels
from .metrics import evaluate
from .training import CKPT_FILE, NumericalError, load_checkpoint, train_loop

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _jobs(value: int | None) -> int:
    return value if value else (os.cpu_count() or 1)


def _parse_override(text: str):
    if "=" not in text:
        raise UsageError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = C.tomllib.loads(f"v = {raw}")["v"]
    except C.tomllib.TOMLDecodeError:
        value = raw
    return key.strip(), value


def _load(args) -> C.RunConfig:
    cfg = C.load_config(args.config)
    for item in args.set or []:
        C.set_path(cfg, *_parse_override(item))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.data.seed = cfg.train.seed = cfg.model.seed = cfg.eval.seed = args.seed
    return cfg


# ----------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = _load(args)
    if args.n is not None:
        cfg.data.n_train, cfg.data.n_val = args.n, 0
    if args.task:
        cfg.data.task = args.task
    out = Path(args.out)
    manifest = generate_dataset(cfg.data, out, jobs=_jobs(args.jobs))
    C.write_resolved(cfg, out)
    print(f"wrote {len(manifest['shards'])} shards to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load(args)
    if args.mode:
        if args.mode not in MODES:
            raise UsageError(f"invalid mode {args.mode!r}; valid modes: {', '.join(MODES)}")
        cfg.model.encoder.mode = args.mode
    if args.max_steps is not None:
        cfg.train.max_steps = args.max_steps
    data_dir = Path(args.data)
    if not data_dir.exists():
        raise FileNotFoundError(f"dataset directory not found: {data_dir}")
    ds = load_dataset(data_dir)
    cfg.train.task = ds.config.task
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resume = None
    if args.resume:
        ck_path = out / CKPT_FILE
        resume = load_checkpoint(ck_path)
        cfg.model = C.ModelConfig.from_dict(resume.model_config)
    C.write_resolved(cfg, out)
    t0 = time.perf_counter()
    res = train_loop(cfg.model, ds.train, ds.val, cfg.train, out_dir=out, resume=resume)
    last = res.val_history[-1][1] if res.val_history else float("nan")
    print(f"trained to step {res.checkpoint.step}; final loss "
          f"{res.losses[-1] if res.losses else float('nan'):.6f}; val IoU {last:.4f}; "
          f"wall {time.perf_counter() - t0:.1f} s")
    return EXIT_OK


def _parse_mise_res(text: str | None, base: MiseConfig) -> MiseConfig:
    if not text:
        return base
    try:
        lo, hi = (int(v) for v in text.split(":")) if ":" in text else (base.initial_resolution, int(text))
    except ValueError:
        raise UsageError(f"--mise-res must be FINAL or INITIAL:FINAL, got {text!r}") from None
    return MiseConfig(lo, hi, base.threshold, base.batch_points)


def cmd_reconstruct(args) -> int:
    cfg = _load(args)
    ck = load_checkpoint(args.checkpoint)
    model = ck.build_model()
    if args.mode and args.mode != model.cfg.encoder.mode:
        raise UsageError(f"checkpoint was trained in mode {model.cfg.encoder.mode!r}, not {args.mode!r}")
    mise = _parse_mise_res(args.mise_res, cfg.mise)
    mise.validate()
    path = Path(args.input)
    if not path.exists():
        raise FileNotFoundError(f"input not found: {path}")
    t0 = time.perf_counter()
    if model.cfg.input_kind == "voxels":
        if args.sliding_window:
            raise UsageError("--sliding-window needs a point-cloud model")
        inputs = read_voxels(path).occupancy
        field = model.evaluator(inputs)
        bounds = ((0.0,) * 3, (1.0,) * 3)
    else:
        pts = read_point_cloud(path).points
        if len(pts) == 0:
            raise ValueError(f"{path}: point cloud is empty")
        if args.sliding_window:
            sw = cfg.sliding
            if args.stride is not None:
                sw.stride = args.stride
            if args.margin is not None:
                sw.margin = args.margin
            lo, hi = np.zeros(3), np.ones(3)
            if args.bounds == "auto":
                lo, hi = pts.min(axis=0), pts.max(axis=0)
            field = TiledField(model, pts, sw, (lo, hi))
            bounds = field.bounds
        else:
            field = model.evaluator(pts)
            bounds = ((0.0,) * 3, (1.0,) * 3)
    res = mise_extract(field, mise, bounds=bounds)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_mesh(out, res.mesh, args.format)
    C.write_resolved(cfg, out.parent)
    print(f"mesh {out}: {len(res.mesh.vertices)} vertices, {len(res.mesh.triangles)} triangles, "
          f"{res.calls} evaluations, wall {time.perf_counter() - t0:.2f} s")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load(args)
    ec = cfg.eval
    if args.fscore_threshold is not None:
        ec.fscore_threshold = args.fscore_threshold
    if args.single_surface:
        ec.single_surface = True
    if args.n_points is not None:
        ec.n_points = ec.n_iou_samples = args.n_points
    pred_path = Path(args.pred)
    if not pred_path.exists():
        raise FileNotFoundError(f"predicted mesh not found: {pred_path}")
    pred = read_mesh(pred_path)
    truth_path = Path(args.truth)
    if not truth_path.exists():
        raise FileNotFoundError(f"ground truth not found: {truth_path}")
    if truth_path.suffix == ".json":
        truth = SceneSpec.from_json(truth_path.read_text())
    else:
        truth = read_mesh(truth_path)
    report = evaluate(pred, truth, ec.fscore_threshold, ec.n_points, ec.n_iou_samples, ec.seed,
                      ec.single_surface, workers=_jobs(args.jobs))
    text = report.to_json()
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
        C.write_resolved(cfg, out.parent)
    else:
        print(text)
    print(report.table())
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import render_report

    runs = {}
    for item in args.run:
        label, _, path = item.rpartition("=")
        runs[label or Path(path).name] = Path(path)
    for p in render_report(runs, args.out):
        print(f"wrote {p}")
    return EXIT_OK


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="convocc", description="Convolutional occupancy networks on synthetic scenes.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="TOML run configuration")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override")
        if seed:
            sp.add_argument("--seed", type=int)
        sp.add_argument("--jobs", type=int, default=None, help="worker processes (default: all cores)")

    g = sub.add_parser("gen-data", help="generate dataset shards")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, help="number of scenes (all in the training split)")
    g.add_argument("--task", choices=["object_points", "object_voxels", "scene_points"])
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--mode", help=f"encoder mode ({', '.join(MODES)})")
    t.add_argument("--max-steps", type=int)
    t.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.cock")
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("reconstruct", help="extract a mesh from a checkpoint and an input")
    common(r, seed=False)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--input", required=True, help="point cloud (COPC1/PLY/XYZ) or voxel grid (COVX1)")
    r.add_argument("--out", required=True)
    r.add_argument("--format", choices=["ply", "off"])
    r.add_argument("--mode", help="expected encoder mode of the checkpoint")
    r.add_argument("--mise-res", help="FINAL or INITIAL:FINAL lattice resolution")
    r.add_argument("--sliding-window", action="store_true")
    r.add_argument("--stride", type=float)
    r.add_argument("--margin", type=int)
    r.add_argument("--bounds", choices=["unit", "auto"], default="unit")
    r.set_defaults(fn=cmd_reconstruct)

    e = sub.add_parser("eval", help="score a mesh against a scene or mesh")
    common(e)
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True, help="scene JSON or mesh")
    e.add_argument("--fscore-threshold", type=float, choices=[0.01, 0.015])
    e.add_argument("--single-surface", action="store_true")
    e.add_argument("--n-points", type=int)
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    rp = sub.add_parser("report", help="plot training curves and export CSV")
    rp.add_argument("--run", action="append", required=True, metavar="[LABEL=]RUN_DIR")
    rp.add_argument("--out", required=True)
    rp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "fn", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return args.fn(args)
    except UsageError as e:
        print(f"convocc: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except C.ConfigError as e:
        print(f"convocc: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"convocc: numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, FormatError, OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"convocc: error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
