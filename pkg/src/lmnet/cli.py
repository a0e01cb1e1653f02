"""Command-line surface.

Verbs: encode, train, infer, synth, bench, eval, render, dump-config.
Every command is deterministic given its inputs, config and seed;
re-runs produce byte-identical files except timing reports.

Exit codes: 0 success, 2 usage, 3 I/O, 4 file/config format,
5 numerical divergence, 1 any other package error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import dataset as ds
from . import pipeline, render
from .config import PipelineConfig, dump_config, load_config
from .errors import (
    DivergenceError,
    FormatError,
    InvalidArgumentError,
    LMNetError,
)
from .geometry import encode_frontal_view
from .mapfile import load_map, save_map
from .network import build, load_weights, save_weights
from .postprocess import evaluate, read_detections_jsonl, write_detections_jsonl

EXIT_CODES = {
    "success": 0,
    "error": 1,
    "usage": 2,
    "io": 3,
    "format": 4,
    "divergence": 5,
}


def _load_cfg(args) -> PipelineConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    return PipelineConfig()


def cmd_dump_config(args) -> int:
    text = dump_config(PipelineConfig())
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_encode(args) -> int:
    cfg = _load_cfg(args)
    points = ds.crop_range(ds.read_kitti_bin(args.input))
    fvmap = encode_frontal_view(points, cfg.projection)
    save_map(fvmap, args.out)
    if args.render:
        for path in render.render_map(fvmap, args.render):
            print(f"wrote {path}")
    print(f"wrote {args.out} ({int(fvmap.validity.sum())} valid cells)")
    return 0


def cmd_render(args) -> int:
    cfg = _load_cfg(args)
    fvmap = load_map(args.map, cfg.projection if args.config else None)
    for path in render.render_map(fvmap, args.out):
        print(f"wrote {path}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    train_cfg = cfg.train
    if args.seed is not None:
        train_cfg = type(train_cfg)(**{**train_cfg.__dict__, "seed": args.seed})
    stems = ds.dataset_stems(args.dataset)
    if not stems:
        raise FormatError(f"{args.dataset}: no velodyne/*.bin files found")
    params = (
        load_weights(args.init_weights) if args.init_weights else build(train_cfg.seed)
    )
    params, history = pipeline.train_on_directory(
        params, args.dataset, cfg.projection, train_cfg, cfg.augment
    )
    save_weights(params, args.weights_out)
    csv_path = args.loss_csv or f"{args.weights_out}.loss.csv"
    lines = ["epoch,loss"] + [
        f"{epoch + 1},{value:.6f}" for epoch, value in enumerate(history)
    ]
    Path(csv_path).write_text("\n".join(lines) + "\n")
    print(f"wrote {args.weights_out} and {csv_path}")
    print(f"first epoch loss {history[0]:.4f}, last {history[-1]:.4f}")
    return 0


def _iter_inputs(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(path.glob("*.bin"))
    return [path]


def cmd_infer(args) -> int:
    cfg = _load_cfg(args)
    params = load_weights(args.weights)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=args.threads):
        for input_path in _iter_inputs(Path(args.input)):
            points = ds.read_kitti_bin(input_path)
            result = pipeline.run_frame(points, params, cfg.projection, cfg.nms)
            stem = input_path.stem
            write_detections_jsonl(result.detections, out_dir / f"{stem}.jsonl")
            ds.write_kitti_label(
                [c.box for c in result.detections],
                out_dir / f"{stem}.txt",
                scores=[c.confidence for c in result.detections],
            )
            if args.render:
                render.render_objectness(
                    result.objectness,
                    result.fvmap.validity,
                    out_dir / f"{stem}.objectness.ppm",
                )
            print(f"{stem}: {len(result.detections)} detections")
    return 0


def cmd_synth(args) -> int:
    cfg = _load_cfg(args)
    out_dir = Path(args.out)
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        raise InvalidArgumentError(
            f"{out_dir} is not empty; pass --force to write into it"
        )
    synth_cfg = cfg.synth
    base_seed = args.seed if args.seed is not None else synth_cfg.seed
    for i in range(args.count):
        scene = ds.synth_scene(synth_cfg, seed=base_seed + i)
        ds.write_scene(scene, out_dir, f"{i:06d}")
    print(f"wrote {args.count} scenes to {out_dir}")
    return 0


def cmd_bench(args) -> int:
    cfg = _load_cfg(args)
    params = load_weights(args.weights) if args.weights else build(seed=0)
    points = ds.read_kitti_bin(args.input)
    report = bench_mod.run_benchmark(
        points,
        params,
        cfg.projection,
        cfg.nms,
        repetitions=args.repetitions,
        warmup=args.warmup,
        threads=args.threads,
        compare_naive=args.compare_naive,
    )
    print(report.table())
    if args.out:
        Path(args.out).write_text(report.to_json())
        print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    det_dir, label_dir = Path(args.detections), Path(args.labels)
    stems = sorted(p.stem for p in label_dir.glob("*.txt"))
    if not stems:
        raise FormatError(f"{label_dir}: no label files found")
    detections, ground_truth = {}, {}
    for stem in stems:
        calib = Path(args.calib or (label_dir.parent / "calib")) / f"{stem}.txt"
        ground_truth[stem] = ds.read_kitti_label(label_dir / f"{stem}.txt", calib)
        jsonl = det_dir / f"{stem}.jsonl"
        if jsonl.exists():
            detections[stem] = read_detections_jsonl(jsonl)
        elif (det_dir / f"{stem}.txt").exists():
            boxes = ds.read_kitti_label(det_dir / f"{stem}.txt", calib)
            from .postprocess import Candidate

            detections[stem] = [Candidate(b, b.label, 1.0, (0, 0), 0) for b in boxes]
        else:
            detections[stem] = []
    metrics = evaluate(detections, ground_truth, iou_threshold=args.iou)
    import json

    text = json.dumps(metrics, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lmnet",
        description="Frontal-view LiDAR 3D multi-class detection pipeline",
        epilog="exit codes: 0 ok, 2 usage, 3 i/o, 4 format, 5 divergence, 1 other",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dump-config", help="print the default config as JSON")
    p.add_argument("--out", help="write to a file instead of stdout")
    p.set_defaults(func=cmd_dump_config)

    p = sub.add_parser("encode", help="project a point cloud into a map file")
    p.add_argument("input", help="KITTI-style .bin point cloud")
    p.add_argument("--out", required=True, help="output .lmfv map file")
    p.add_argument("--render", help="also write per-channel PGMs at this prefix")
    p.add_argument("--config")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("render", help="render a map file's channels as PGMs")
    p.add_argument("map", help=".lmfv map file")
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--config")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("dataset", help="directory with velodyne/, label_2/, calib/")
    p.add_argument("--weights-out", required=True)
    p.add_argument("--loss-csv", help="per-epoch loss CSV (default <weights>.loss.csv)")
    p.add_argument("--init-weights", help="resume from an existing weight file")
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run detection on clouds")
    p.add_argument("input", help="a .bin file or a directory of them")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--render", action="store_true", help="write objectness PPMs")
    p.add_argument("--threads", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", help="time the single-frame pipeline")
    p.add_argument("input", help=".bin point cloud")
    p.add_argument("--weights", help="weight file (random weights if omitted)")
    p.add_argument("--repetitions", type=int, default=10)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--threads", type=int)
    p.add_argument(
        "--compare-naive",
        action="store_true",
        help="also time the direct convolution path and report the speedup",
    )
    p.add_argument("--out", help="write the JSON report here")
    p.add_argument("--config")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("eval", help="precision/recall/AP against labels")
    p.add_argument("--detections", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--calib", help="calib dir (default: sibling of labels)")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--out", help="write metrics JSON here")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_CODES["format"]
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_CODES["divergence"]
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_CODES["io"]
    except InvalidArgumentError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_CODES["usage"]
    except LMNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CODES["error"]


if __name__ == "__main__":
    sys.exit(main())
