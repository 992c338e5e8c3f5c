"""Ablation harness: trains and scores the variants of one study at desk scale."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from ..config import FusionConfig
from ..data import DatasetError
from ..fusionnet import train_stage2
from ..metrics import METRIC_HEADERS, evaluate_batch, format_table, mean_report
from ..metrics.report import default_threads
from ..reconstructor import parameter_count, train_stage1
from .checkpoint import save_checkpoint
from .commands import (PathLike, _start, fuse_pair, load_reconstructor, schedule_for, select_pairs,
                       stage1_images)

log = logging.getLogger(__name__)

MODES = ("loss-weights", "time-steps", "no-diffusion", "no-amff", "no-msff")

# (label, alpha, beta, gradient weight)
LOSS_GRID = (
    ("Only L_int", 1.0, 0.0, 0.0),
    ("Only L_ssim", 0.0, 1.0, 0.0),
    ("L_int+L_ssim", 1.0, 1.0, 0.0),
    ("alpha=1.0, beta=1.0", 1.0, 1.0, 1.0),
    ("alpha=1.5, beta=1.0", 1.5, 1.0, 1.0),
    ("alpha=2.0, beta=1.0", 2.0, 1.0, 1.0),
    ("alpha=1.5, beta=0.5", 1.5, 0.5, 1.0),
)
TIME_STEP_SETS = ((5,), (10,), (20,), (50,), (5, 10), (5, 10, 20), (5, 10, 20, 50))


@dataclass(frozen=True)
class Variant:
    label: str
    config: FusionConfig
    plain_stage1: bool = False  # Stage I trained as a plain autoencoder


def variants_for(mode: str, base: FusionConfig) -> list[Variant]:
    if mode == "loss-weights":
        return [Variant(lbl, base.replace(loss={"alpha": a, "beta": b, "gamma": g}))
                for lbl, a, b, g in LOSS_GRID]
    if mode == "time-steps":
        return [Variant("(" + ",".join(map(str, s)) + ")", base.replace(fusion={"time_steps": s}))
                for s in TIME_STEP_SETS]
    if mode == "no-diffusion":
        return [Variant("w/o Dif.", base.replace(fusion={"diffusion": False}), plain_stage1=True),
                Variant("Proposed", base)]
    if mode == "no-amff":
        return [Variant("w/o AMFF", base.replace(fusion={"use_amff": False})), Variant("Proposed", base)]
    if mode == "no-msff":
        return [Variant("w/o MSFF", base.replace(fusion={"use_msff": False})), Variant("Proposed", base)]
    raise ValueError(f"unknown ablation mode {mode!r}; expected one of {', '.join(MODES)}")


def _slug(label: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in label).strip("_").lower() or "variant"


@dataclass
class VariantResult:
    label: str
    per_task: dict
    parameters: int

    def averaged(self):
        """Mean over the task means (the tables average the three test sets)."""
        return mean_report([mean_report(rs, t) for t, rs in self.per_task.items()], self.label)


def run_ablation(config: FusionConfig, mode: str, out_dir: PathLike, data: Optional[PathLike] = None,
                 recon_path: Optional[PathLike] = None) -> Path:
    variants = variants_for(mode, config)
    out, manifest = _start(f"ablate {mode}", config, out_dir)
    train = select_pairs(config, data, "train", config.data.train_pairs_per_task)
    test = select_pairs(config, data, "test", config.data.test_pairs_per_task)
    if not train or not test:
        raise DatasetError("ablation needs both training and test pairs")

    recons = {}

    def reconstructor(plain: bool):
        if plain not in recons:
            if recon_path is not None and not plain:
                recons[plain] = load_reconstructor(config, recon_path)
            else:
                log.info("training %s Stage I", "plain" if plain else "diffusion")
                recons[plain] = train_stage1(stage1_images(train), config, schedule=schedule_for(config),
                                             diffusion=not plain).model
                name = "recon_plain.ckpt" if plain else "recon.ckpt"
                save_checkpoint(out / name, recons[plain], "reconstructor", config)
                manifest.add_artifact(out / name, out)
        return recons[plain]

    results = []
    for v in variants:
        log.info("ablation %s: variant %s", mode, v.label)
        recon = reconstructor(v.plain_stage1)
        schedule = schedule_for(v.config)
        fusion = train_stage2(recon, [(p.a, p.b) for p in train], v.config, schedule=schedule).model
        ckpt = out / "variants" / f"{_slug(v.label)}.ckpt"
        save_checkpoint(ckpt, fusion, "fusion", v.config)
        manifest.add_artifact(ckpt, out)
        triplets = []
        for p in test:
            _, image = fuse_pair(recon, fusion, v.config, p, v.config.run.seed, schedule)
            triplets.append((p.pair_id, p.a, p.b, image))
        per_task: dict = {}
        for p, r in zip(test, evaluate_batch(triplets, threads=default_threads())):
            per_task.setdefault(p.task, []).append(r)
        results.append(VariantResult(v.label, per_task, parameter_count(fusion)))

    table_path, csv_path = out / f"ablation_{mode}.txt", out / f"ablation_{mode}.csv"
    table_path.write_text(render(mode, results), encoding="utf-8")
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", "task", *METRIC_HEADERS, "params"])
        for res in results:
            rows = [(t, mean_report(rs, t)) for t, rs in res.per_task.items()] + [("mean", res.averaged())]
            for task, rep in rows:
                writer.writerow([res.label, task, *(f"{x:.6f}" for x in rep.values()), res.parameters])
    manifest.add_artifact(table_path, out)
    manifest.add_artifact(csv_path, out)
    manifest.write(out)
    return table_path


def render(mode: str, results: list[VariantResult]) -> str:
    if mode in ("loss-weights", "time-steps"):
        header = "Experiments" if mode == "loss-weights" else "Time steps"
        title = ("Different loss weights" if mode == "loss-weights" else "Different time-step combinations")
        return format_table([(r.label, r.averaged()) for r in results],
                            title=f"{title} (averaged over test sets)", label_header=header)
    rows, params = [], []
    tasks = list(results[0].per_task)
    for task in tasks:
        for r in results:
            rows.append((f"{task} {r.label}", mean_report(r.per_task[task], r.label)))
            params.append(str(r.parameters))
    extra = {"Params": params} if mode in ("no-amff", "no-msff") else None
    return "".join(
        format_table(rows[i:i + len(results)], label_header="Modality / Experiments",
                     extra={"Params": params[i:i + len(results)]} if extra else None)
        for i in range(0, len(rows), len(results)))
