"""Stage orchestration on a working directory: data, training, refinement, evaluation.

Layout under ``workdir``::

    data/train, data/eval        synthetic datasets (scene directories + manifest)
    checkpoints/<stage>/         .pmtn parameter files + manifest.json
    logs/<stage>.csv             per-epoch training logs
    eval/report.json, .txt       EvalReports for every available model
    eval/figures/*.png           training curves and qualitative panels
    config/<stage>.json          resolved configuration snapshot of each run
"""

from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig
from .errors import StageError
from .fusion import FusionModel, FusionSample, predict_fusion, train_fusion
from .grid import GridSpec
from .mae import MaeModel, finetune, predict_refined, pretrain_mae
from .metrics import EvalReport, evaluate, format_table
from .nn.tensor_io import load_checkpoint, save_checkpoint
from .sdmap import rasterize_sd
from .synth import gen_world, load_dataset, sample_dataset, save_dataset

STAGES = ("baseline", "fusion", "mae", "finetune")
MODEL_LABELS = {"baseline": "Baseline (no prior)", "fusion": "S (SD prior)",
                "finetune": "S+H (SD + HD prior)"}


def write_snapshot(cfg: RunConfig, workdir, stage: str) -> Path:
    path = Path(workdir) / "config" / f"{stage}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cfg.to_json() + "\n")
    return path


def write_log(rows: Sequence[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


def read_log(path) -> list[dict]:
    with Path(path).open() as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# data ------------------------------------------------------------------------------

def world_specs(cfg: RunConfig):
    train = cfg.world
    evals = dataclasses.replace(cfg.world, seed=cfg.world.seed + cfg.dataset.eval_world_offset)
    return train, evals


def generate_data(cfg: RunConfig, workdir) -> dict:
    """Train and eval datasets from two independently seeded worlds."""
    grid = cfg.grid.build()
    d = cfg.dataset
    out = {}
    for split, spec, n in zip(("train", "eval"), world_specs(cfg),
                              (d.train_scenes, d.eval_scenes)):
        scenes = sample_dataset(gen_world(spec), n, grid, d.sigma_translation_m,
                                d.sigma_rotation_rad, seed=spec.seed,
                                include_service=d.include_service, sd_margin_m=d.sd_margin_m)
        save_dataset(Path(workdir) / "data" / split, scenes, spec, {"split": split})
        out[split] = len(scenes)
    write_snapshot(cfg, workdir, "gen-world")
    return out


def to_samples(scenes, small_grid: GridSpec) -> list[FusionSample]:
    return [FusionSample(s.obs, s.gt, rasterize_sd(s.sd, small_grid)) for s in scenes]


def load_samples(cfg: RunConfig, workdir, split: str) -> list[FusionSample]:
    path = Path(workdir) / "data" / split
    if not (path / "manifest.json").exists():
        raise StageError(f"missing {split} dataset at {path}; run the gen-world stage first")
    scenes, _ = load_dataset(path)
    small = cfg.fusion.build(cfg.grid.build()).small_grid
    return to_samples(scenes, small)


# checkpoints -----------------------------------------------------------------------

def checkpoint_dir(workdir, stage: str) -> Path:
    return Path(workdir) / "checkpoints" / stage


def save_model(model, workdir, stage: str, cfg: RunConfig, prefix: str = "") -> None:
    named = {prefix + k: p.value for k, p in model.named_parameters()}
    save_checkpoint(checkpoint_dir(workdir, stage), named, {"stage": stage})


def _require(workdir, stage: str, needed_by: str) -> Path:
    path = checkpoint_dir(workdir, stage)
    if not (path / "manifest.json").exists():
        raise StageError(f"{needed_by} needs the '{stage}' checkpoint ({path}); "
                         f"run that stage first")
    return path


def build_fusion(cfg: RunConfig, baseline: bool = False, seed: int | None = None) -> FusionModel:
    fcfg = cfg.fusion.build(cfg.grid.build())
    if baseline:
        fcfg = dataclasses.replace(fcfg, mode="none")
    return FusionModel(fcfg, seed=cfg.seed if seed is None else seed)


def build_mae(cfg: RunConfig) -> MaeModel:
    return MaeModel(cfg.mae.build(), cfg.grid.build().shape, seed=cfg.seed + 2)


def _load_into(model, tensors: dict, prefix: str = "") -> None:
    model.load_state_dict({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})


def load_fusion(cfg: RunConfig, workdir, stage: str, needed_by: str) -> FusionModel:
    tensors, _ = load_checkpoint(_require(workdir, stage, needed_by))
    model = build_fusion(cfg, baseline=(stage == "baseline"))
    _load_into(model, tensors, "fusion." if stage == "finetune" else "")
    return model


def load_mae(cfg: RunConfig, workdir, stage: str, needed_by: str) -> MaeModel:
    tensors, _ = load_checkpoint(_require(workdir, stage, needed_by))
    model = build_mae(cfg)
    _load_into(model, tensors, "mae." if stage == "finetune" else "")
    return model


# stages ----------------------------------------------------------------------------

def train_stage(cfg: RunConfig, workdir, baseline: bool = False, train=None,
                callback=None) -> list[dict]:
    stage = "baseline" if baseline else "fusion"
    samples = load_samples(cfg, workdir, "train") if train is None else train
    model = build_fusion(cfg, baseline)
    t = cfg.train
    log = train_fusion(samples, model, t.epochs, t.lr, seed=cfg.seed + 1,
                       batch_size=t.batch_size, class_weights=t.class_weights, callback=callback)
    save_model(model, workdir, stage, cfg)
    write_log(log, Path(workdir) / "logs" / f"{stage}.csv")
    write_snapshot(cfg, workdir, stage)
    return log


def pretrain_stage(cfg: RunConfig, workdir, train=None, callback=None) -> list[dict]:
    samples = load_samples(cfg, workdir, "train") if train is None else train
    model = build_mae(cfg)
    p = cfg.pretrain
    log = pretrain_mae([s.gt for s in samples], cfg.mask.build(cfg.seed + 3), model, p.epochs,
                       p.lr, seed=cfg.seed + 4, batch_size=p.batch_size,
                       class_weights=p.class_weights, callback=callback)
    save_model(model, workdir, "mae", cfg)
    write_log(log, Path(workdir) / "logs" / "mae.csv")
    write_snapshot(cfg, workdir, "mae")
    return log


def finetune_stage(cfg: RunConfig, workdir, train=None, callback=None) -> list[dict]:
    fusion = load_fusion(cfg, workdir, "fusion", "finetune")
    mae = load_mae(cfg, workdir, "mae", "finetune")
    samples = load_samples(cfg, workdir, "train") if train is None else train
    f = cfg.finetune
    log = finetune(fusion, mae, samples, f.epochs, f.lr, seed=cfg.seed + 5,
                   batch_size=f.batch_size, class_weights=f.class_weights,
                   freeze_fusion=f.freeze_fusion, callback=callback)
    named = {**{"fusion." + k: p.value for k, p in fusion.named_parameters()},
             **{"mae." + k: p.value for k, p in mae.named_parameters()}}
    save_checkpoint(checkpoint_dir(workdir, "finetune"), named, {"stage": "finetune"})
    write_log(log, Path(workdir) / "logs" / "finetune.csv")
    write_snapshot(cfg, workdir, "finetune")
    return log


def predictions(cfg: RunConfig, workdir, stage: str, samples) -> list[np.ndarray]:
    """Eval-mode logits of the model trained by ``stage``."""
    if stage == "finetune":
        return predict_refined(samples, load_fusion(cfg, workdir, "finetune", "eval"),
                               load_mae(cfg, workdir, "finetune", "eval"))
    return predict_fusion(samples, load_fusion(cfg, workdir, stage, "eval"))


def available_models(workdir) -> list[str]:
    return [s for s in ("baseline", "fusion", "finetune")
            if (checkpoint_dir(workdir, s) / "manifest.json").exists()]


def eval_stage(cfg: RunConfig, workdir, gt_vs_gt: bool = False, samples=None,
               stages: Sequence[str] | None = None) -> list[EvalReport]:
    """Evaluate every trained model on the eval split and write the reports.

    With ``gt_vs_gt`` the ground truth is scored against itself, which checks
    the metric plumbing (every metric is perfect).
    """
    grid = cfg.grid.build()
    samples = load_samples(cfg, workdir, "eval") if samples is None else samples
    gts = [s.gt for s in samples]
    out_dir = Path(workdir) / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    reports, logits_by = [], {}
    if gt_vs_gt:
        reports.append(evaluate(gts, gts, grid, label="GT vs GT",
                                with_ap=cfg.eval.average_precision))
    else:
        stages = available_models(workdir) if stages is None else list(stages)
        if not stages:
            raise StageError("eval needs at least one trained model; run train first")
        for stage in stages:
            logits = predictions(cfg, workdir, stage, samples)
            logits_by[stage] = logits
            preds = [np.argmax(lg, axis=-1) for lg in logits]
            reports.append(evaluate(preds, gts, grid, pred_logits=logits,
                                    label=MODEL_LABELS[stage],
                                    with_ap=cfg.eval.average_precision))
    (out_dir / "report.json").write_text(
        json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n")
    (out_dir / "report.txt").write_text(format_table(reports))
    write_snapshot(cfg, workdir, "eval")
    if cfg.eval.figures:
        from . import plotting

        plotting.write_figures(workdir, samples, logits_by, grid)
    return reports


def ablation(cfg: RunConfig, workdir, callback=None) -> list[EvalReport]:
    """Fusion-mode, attention-depth and downsample-factor sweeps on a small split."""
    a = cfg.ablation
    small_data = dataclasses.replace(cfg.dataset, train_scenes=a.train_scenes,
                                     eval_scenes=a.eval_scenes)
    base = dataclasses.replace(cfg, dataset=small_data,
                               train=dataclasses.replace(cfg.train, epochs=a.epochs))
    grid = base.grid.build()
    d = base.dataset
    tr_spec, ev_spec = world_specs(base)
    tr_scenes = sample_dataset(gen_world(tr_spec), d.train_scenes, grid, d.sigma_translation_m,
                               d.sigma_rotation_rad, seed=tr_spec.seed,
                               include_service=d.include_service, sd_margin_m=d.sd_margin_m)
    ev_scenes = sample_dataset(gen_world(ev_spec), d.eval_scenes, grid, d.sigma_translation_m,
                               d.sigma_rotation_rad, seed=ev_spec.seed,
                               include_service=d.include_service, sd_margin_m=d.sd_margin_m)
    variants = [(f"mode={m}", {"mode": m}) for m in a.modes]
    variants += [(f"layers={n}", {"attention": dataclasses.replace(base.fusion.attention,
                                                                   num_layers=n)})
                 for n in a.attention_layers]
    variants += [(f"d={f}", {"downsample_factor": f}) for f in a.downsample_factors]
    reports = []
    for label, change in variants:
        vcfg = dataclasses.replace(base, fusion=dataclasses.replace(base.fusion, **change))
        small = vcfg.fusion.build(grid).small_grid
        train, evals = to_samples(tr_scenes, small), to_samples(ev_scenes, small)
        model = build_fusion(vcfg)
        t = vcfg.train
        train_fusion(train, model, t.epochs, t.lr, seed=vcfg.seed + 1, batch_size=t.batch_size,
                     class_weights=t.class_weights)
        logits = predict_fusion(evals, model)
        rep = evaluate([np.argmax(lg, -1) for lg in logits], [s.gt for s in evals], grid,
                       pred_logits=logits, label=label, with_ap=cfg.eval.average_precision)
        reports.append(rep)
        if callback is not None:
            callback(rep)
    out_dir = Path(workdir) / "ablation"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(
        json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n")
    (out_dir / "report.txt").write_text(format_table(reports))
    write_snapshot(cfg, workdir, "ablate")
    return reports
