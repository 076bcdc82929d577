"""Command-line entry point: ``priormap <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error (bad input files, missing
stage artifacts, invalid config), 3 numeric failure (NaN/Inf in training).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .config import RunConfig, config_from_dict, load_config
from .errors import DataError, NumericError, ShapeError, StageError
from .grid import EgoPose, load_polylines, save_polylines
from .nn.tensor_io import load_tensor
from .render import colorize, overlay_sd, write_ppm
from .sdmap import (extract_sd_window, filter_categories, format_stats, graph_stats, parse_osm,
                    project_latlon)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    if getattr(args, "workdir", None):
        cfg = dataclasses.replace(cfg, workdir=args.workdir)
    return cfg


def _say(msg: str) -> None:
    print(msg, flush=True)


def _epoch_printer(stage: str):
    def show(row):
        extra = " ".join(f"{k}={v:.4f}" for k, v in row.items() if k not in ("epoch",))
        _say(f"[{stage}] epoch {row['epoch']}: {extra}")
    return show


# commands ----------------------------------------------------------------------------

def cmd_extract_sdmap(args) -> int:
    osm_path, traj_path = Path(args.osm), Path(args.trajectory)
    for p in (osm_path, traj_path):
        if not p.exists():
            raise FileNotFoundError(f"no such file: {p}")
    graph = filter_categories(parse_osm(osm_path.read_text()), args.include_service)
    try:
        traj = json.loads(traj_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{traj_path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    poses = traj.get("poses", [])
    cfg = _config(args)
    grid = cfg.grid.build()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if poses:
        origin = tuple(traj.get("origin") or (poses[0]["lat"], poses[0]["lon"]))
    for i, pose in enumerate(poses):
        try:
            x, y = project_latlon(pose["lat"], pose["lon"], *origin)
            ego = EgoPose(x, y, float(pose.get("heading", 0.0)))
        except (KeyError, TypeError) as exc:
            raise DataError(f"{traj_path}: pose {i} needs numeric lat, lon, heading") from exc
        sd = extract_sd_window(graph, ego, origin, grid)
        save_polylines(out / f"sd_{i:04d}.json", sd.polylines)
    stats = graph_stats(graph)
    text = format_stats(stats) + f"poses: {len(poses)}\n"
    (out / "stats.txt").write_text(text)
    _say(text.rstrip())
    return EXIT_OK


def cmd_gen_world(args) -> int:
    cfg = _config(args)
    counts = pipeline.generate_data(cfg, cfg.workdir)
    _say(f"wrote {counts['train']} train and {counts['eval']} eval scenes to {cfg.workdir}/data")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    stage = "baseline" if args.baseline else "fusion"
    pipeline.train_stage(cfg, cfg.workdir, baseline=args.baseline,
                         callback=_epoch_printer(stage))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    pipeline.pretrain_stage(cfg, cfg.workdir, callback=_epoch_printer("mae"))
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _config(args)
    pipeline.finetune_stage(cfg, cfg.workdir, callback=_epoch_printer("finetune"))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    pipeline.eval_stage(cfg, cfg.workdir, gt_vs_gt=args.gt_vs_gt)
    _say((Path(cfg.workdir) / "eval" / "report.txt").read_text().rstrip())
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    pipeline.ablation(cfg, cfg.workdir, callback=lambda r: _say(f"[ablate] {r.label} "
                                                                  f"mIoU={r.miou:.4f}"))
    _say((Path(cfg.workdir) / "ablation" / "report.txt").read_text().rstrip())
    return EXIT_OK


def cmd_run(args) -> int:
    """All stages in order: data, baseline, S, MAE, fine-tune, eval."""
    cfg = _config(args)
    pipeline.generate_data(cfg, cfg.workdir)
    train = pipeline.load_samples(cfg, cfg.workdir, "train")
    pipeline.train_stage(cfg, cfg.workdir, baseline=True, train=train,
                         callback=_epoch_printer("baseline"))
    pipeline.train_stage(cfg, cfg.workdir, train=train, callback=_epoch_printer("fusion"))
    pipeline.pretrain_stage(cfg, cfg.workdir, train=train, callback=_epoch_printer("mae"))
    pipeline.finetune_stage(cfg, cfg.workdir, train=train, callback=_epoch_printer("finetune"))
    pipeline.eval_stage(cfg, cfg.workdir)
    _say((Path(cfg.workdir) / "eval" / "report.txt").read_text().rstrip())
    return EXIT_OK


def _load_labels(path: Path, layer: str) -> tuple[np.ndarray, Path | None]:
    if path.is_dir():
        f = path / f"{layer}.pmtn"
        if not f.exists():
            raise FileNotFoundError(f"no {layer}.pmtn in scene directory {path}")
        return load_tensor(f), path / "sd.json"
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    return load_tensor(path), None


def cmd_render(args) -> int:
    labels, sd_path = _load_labels(Path(args.input), args.layer)
    if labels.ndim == 3:
        labels = np.argmax(labels, axis=-1)
    if labels.ndim != 2:
        raise DataError(f"cannot render a rank-{labels.ndim} tensor")
    image = colorize(np.rint(labels).astype(np.int64))
    if args.overlay_sd:
        sd_file = Path(args.sd) if args.sd else sd_path
        if sd_file is None or not sd_file.exists():
            raise FileNotFoundError("--overlay-sd needs --sd or a scene directory with sd.json")
        cfg = _config(args)
        grid = cfg.grid.build()
        if grid.shape != labels.shape:
            raise ShapeError(f"raster {labels.shape} does not match config grid {grid.shape}")
        image = overlay_sd(image, load_polylines(sd_file), grid)
    write_ppm(args.out, image)
    _say(f"wrote {args.out}")
    return EXIT_OK


# parser --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="priormap", description="SD/HD map prior BEV segmentation pipeline")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def staged(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON run configuration (defaults if omitted)")
        sp.add_argument("--workdir", help="override the configured working directory")
        sp.set_defaults(fn=fn)
        return sp

    sp = sub.add_parser("extract-sdmap", help="SD-map windows from OSM XML along a trajectory")
    sp.add_argument("osm")
    sp.add_argument("trajectory", help='JSON {"origin": [lat, lon], "poses": '
                                       '[{"lat", "lon", "heading"}]}')
    sp.add_argument("out_dir")
    sp.add_argument("--include-service", action="store_true")
    sp.add_argument("--config")
    sp.set_defaults(fn=cmd_extract_sdmap)

    staged("gen-world", cmd_gen_world, "generate synthetic train/eval datasets")
    sp = staged("train", cmd_train, "train the SD-prior fusion model")
    sp.add_argument("--baseline", action="store_true", help="train the no-prior baseline")
    staged("pretrain", cmd_pretrain, "pretrain the HD-prior masked autoencoder")
    staged("finetune", cmd_finetune, "fine-tune fusion + MAE end to end")
    sp = staged("eval", cmd_eval, "evaluate trained models; writes reports and figures")
    sp.add_argument("--gt-vs-gt", action="store_true", help="score GT against itself")
    staged("ablate", cmd_ablate, "fusion-mode / attention-depth / downsample sweeps")
    staged("run", cmd_run, "every stage in order")

    sp = sub.add_parser("render", help="render a label raster or scene to a PPM image")
    sp.add_argument("input", help=".pmtn label raster or a scene directory")
    sp.add_argument("out")
    sp.add_argument("--layer", choices=("gt", "obs"), default="gt")
    sp.add_argument("--overlay-sd", action="store_true")
    sp.add_argument("--sd", help="SD polyline JSON (defaults to the scene's sd.json)")
    sp.add_argument("--config")
    sp.set_defaults(fn=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, ShapeError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
