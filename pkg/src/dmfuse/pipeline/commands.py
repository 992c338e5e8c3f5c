"""The six CLI commands as plain functions; each writes its outputs plus ``manifest.json``."""
from __future__ import annotations

import csv
import hashlib
import logging
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from ..config import FusionConfig, digest, portable, save
from ..data import MANIFEST_NAME, DatasetError, ImagePair, load_pairs, write_phantom_dataset
from ..diffusion import make_linear_schedule
from ..fusionnet import FusionNet, forward_fuse, init_fusion, train_stage2
from ..imaging import YCbCrImage, is_color, luma, read_png, rgb_to_ycbcr, write_png, ycbcr_to_rgb
from ..metrics import evaluate_batch, format_table, mean_report, write_csv
from ..metrics.report import default_threads
from ..reconstructor import Reconstructor, init_reconstructor, train_stage1
from .checkpoint import load_checkpoint, save_checkpoint
from .manifest import RunManifest

log = logging.getLogger(__name__)

PathLike = Union[str, Path]
RECON_CKPT = "recon.ckpt"
FUSION_CKPT = "fusion.ckpt"


def schedule_for(config: FusionConfig):
    s = config.schedule
    return make_linear_schedule(s.T, s.beta_start, s.beta_end)


def fuse_seed(seed: int, pair_id: str) -> int:
    """Per-pair inference noise seed; independent of processing order."""
    return int.from_bytes(hashlib.sha256(f"{seed}/fuse/{pair_id}".encode()).digest()[:8], "little") >> 1


def resolve_manifest(config: FusionConfig, data: Optional[PathLike]) -> Path:
    path = Path(data if data is not None else config.data.root)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise DatasetError(f"dataset not resolvable: {path} does not exist (run `dmfuse phantom` first)")
    return path


def select_pairs(config: FusionConfig, data: Optional[PathLike], split: str, per_task: Optional[int]) -> list[ImagePair]:
    """Pairs of ``split`` for the configured tasks, at most ``per_task`` of each, manifest order."""
    pairs = load_pairs(resolve_manifest(config, data), split=split)
    chosen, counts = [], {}
    for p in pairs:
        if p.task not in config.data.tasks:
            continue
        if per_task is not None and counts.get(p.task, 0) >= per_task:
            continue
        counts[p.task] = counts.get(p.task, 0) + 1
        chosen.append(p)
    return chosen


def _seeds(config: FusionConfig) -> dict:
    s = config.run.seed
    return {"run": s, "stage1_init": s, "stage1_sampling": s + 1, "stage2_init": s, "stage2_sampling": s + 2}


def _start(command: str, config: FusionConfig, out_dir: PathLike) -> tuple[Path, RunManifest]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save(portable(config), out / "config.ini")
    manifest = RunManifest(command=command, config_digest=digest(config), seeds=_seeds(config))
    manifest.add_artifact(out / "config.ini", out)
    return out, manifest


def _write_rows(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{v:.8g}" if isinstance(v, float) else v for v in row])


def load_reconstructor(config: FusionConfig, path: PathLike) -> Reconstructor:
    model = load_checkpoint(path, init_reconstructor(config), "reconstructor", config)
    model.eval()
    return model


def load_fusion(config: FusionConfig, path: PathLike) -> FusionNet:
    model = load_checkpoint(path, init_fusion(config), "fusion", config)
    model.eval()
    return model


# ----------------------------
# phantom
# ----------------------------
def cmd_phantom(config: FusionConfig, out_dir: PathLike) -> Path:
    out, manifest = _start("phantom", config, out_dir)
    d = config.data
    tsv = write_phantom_dataset(out, seed=config.run.seed, size=d.resolution, tasks=d.tasks,
                                train_per_task=d.train_pairs_per_task, test_per_task=d.test_pairs_per_task)
    manifest.add_artifact(tsv, out)
    for png in sorted(out.glob("*/*/*.png")):
        manifest.add_artifact(png, out)
    manifest.write(out)
    return tsv


# ----------------------------
# Stage I / Stage II
# ----------------------------
def stage1_images(pairs: Sequence[ImagePair]) -> list[np.ndarray]:
    """Luma of every source image: MRI from each pair plus CT / PET / SPECT."""
    images = []
    for p in pairs:
        images.append(np.asarray(p.a, dtype=np.float64))
        images.append(luma(p.b))
    return images


def cmd_train_recon(config: FusionConfig, out_dir: PathLike, data: Optional[PathLike] = None,
                    diffusion: bool = True) -> Path:
    out, manifest = _start("train-recon", config, out_dir)
    pairs = select_pairs(config, data, "train", config.data.train_pairs_per_task)
    if not pairs:
        raise DatasetError("dataset empty: no training pairs for the configured tasks")
    result = train_stage1(stage1_images(pairs), config, schedule=schedule_for(config), diffusion=diffusion)
    ckpt = out / RECON_CKPT
    save_checkpoint(ckpt, result.model, "reconstructor", config)
    curve = out / "stage1_loss.csv"
    _write_rows(curve, ["step", "loss"], [(i, v) for i, v in enumerate(result.losses)])
    manifest.add_artifact(ckpt, out)
    manifest.add_curve("stage1", curve, out)
    manifest.notes["train_images"] = len(pairs) * 2
    manifest.write(out)
    return ckpt


def cmd_train_fusion(config: FusionConfig, out_dir: PathLike, recon_path: PathLike,
                     data: Optional[PathLike] = None) -> Path:
    out, manifest = _start("train-fusion", config, out_dir)
    recon = load_reconstructor(config, recon_path)
    pairs = select_pairs(config, data, "train", config.data.train_pairs_per_task)
    if not pairs:
        raise DatasetError("empty pairs: no training pairs for the configured tasks")
    result = train_stage2(recon, [(p.a, p.b) for p in pairs], config, schedule=schedule_for(config))
    ckpt = out / FUSION_CKPT
    save_checkpoint(ckpt, result.model, "fusion", config)
    curve = out / "stage2_loss.csv"
    keys = ("step", "l_int", "l_ssim", "l_grad", "total")
    _write_rows(curve, keys, [[row[k] for k in keys] for row in result.curves])
    manifest.add_artifact(ckpt, out)
    manifest.add_curve("stage2", curve, out)
    manifest.notes["train_pairs"] = len(pairs)
    manifest.write(out)
    return ckpt


# ----------------------------
# inference
# ----------------------------
def fuse_pair(recon: Reconstructor, fusion: FusionNet, config: FusionConfig, pair: ImagePair,
              seed: int, schedule=None) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(network luma, output image)``; colour B gets its Cb/Cr reattached."""
    res = config.resolution
    if pair.a.shape[:2] != (res, res) or pair.b.shape[:2] != (res, res):
        raise DatasetError(f"pair {pair.pair_id}: size {pair.a.shape[:2]} / {pair.b.shape[:2]} "
                           f"does not match configured resolution {res}")
    schedule = schedule or schedule_for(config)
    fused = forward_fuse(recon, fusion, pair.a, luma(pair.b), config.time_steps, schedule,
                         seed=fuse_seed(seed, pair.pair_id), diffusion=config.fusion.diffusion)
    if is_color(pair.b):
        ycc = rgb_to_ycbcr(pair.b)
        return fused, ycbcr_to_rgb(YCbCrImage(fused, ycc.cb, ycc.cr))
    return fused, fused


def fused_path(out_dir: PathLike, pair: ImagePair) -> Path:
    return Path(out_dir) / pair.task / f"{pair.pair_id}_F.png"


def _single_pair(path_a: PathLike, path_b: PathLike) -> ImagePair:
    try:
        a, b = read_png(path_a), read_png(path_b)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"unreadable input: {exc}") from exc
    if a.ndim == 3:
        raise DatasetError(f"{path_a}: modality A must be grayscale")
    stem = Path(path_a).stem
    pid = stem[:-2] if stem.endswith("_A") else stem
    return ImagePair(pid, a, b, "custom", "custom")


def cmd_fuse(config: FusionConfig, out_dir: PathLike, recon_path: PathLike, fusion_path: PathLike,
             data: Optional[PathLike] = None, split: str = "test",
             pair: Optional[tuple[PathLike, PathLike]] = None) -> list[Path]:
    out, manifest = _start("fuse", config, out_dir)
    recon = load_reconstructor(config, recon_path)
    fusion = load_fusion(config, fusion_path)
    if pair is not None:
        pairs = [_single_pair(*pair)]
    else:
        pairs = select_pairs(config, data, split, config.data.test_pairs_per_task if split == "test" else None)
    schedule = schedule_for(config)
    written = []
    for p in pairs:
        _, image = fuse_pair(recon, fusion, config, p, config.run.seed, schedule)
        path = fused_path(out, p)
        write_png(path, image)
        manifest.add_artifact(path, out)
        written.append(path)
    manifest.notes["pairs"] = len(written)
    manifest.write(out)
    return written


# ----------------------------
# evaluation
# ----------------------------
def task_table(per_task: dict, title: str = "") -> str:
    rows = [(task, mean_report(reports, task)) for task, reports in per_task.items()]
    pooled = [r for reports in per_task.values() for r in reports]
    if len(per_task) > 1:
        rows.append(("all", mean_report(pooled, "all")))
    return format_table(rows, title=title, label_header="Task")


def cmd_eval(config: FusionConfig, out_dir: PathLike, fused_dir: PathLike,
             data: Optional[PathLike] = None, split: str = "test") -> Path:
    out, manifest = _start("eval", config, out_dir)
    fused_dir = Path(fused_dir)
    pairs = load_pairs(resolve_manifest(config, data), split=split)
    expected = {fused_path(fused_dir, p): p for p in pairs}
    missing = sorted(str(path) for path in expected if not path.exists())
    extra = sorted(str(p) for p in fused_dir.glob("*/*_F.png") if p not in expected)
    if missing or extra:
        lines = [f"missing fused image for pair: {m}" for m in missing]
        lines += [f"fused image with no matching pair: {e}" for e in extra]
        raise DatasetError("unmatched files:\n  " + "\n  ".join(lines))
    if not pairs:
        raise DatasetError(f"no pairs in split {split!r}")
    triplets = [(p.pair_id, p.a, p.b, read_png(path)) for path, p in expected.items()]
    reports = evaluate_batch(triplets, threads=default_threads())
    per_task: dict = {}
    for p, r in zip(expected.values(), reports):
        per_task.setdefault(p.task, []).append(r)
    per_pair = out / "metrics_per_pair.csv"
    write_csv(per_pair, reports)
    means = out / "metrics_mean.csv"
    rows = [mean_report(rs, task) for task, rs in per_task.items()]
    if len(per_task) > 1:
        rows.append(mean_report(reports, "all"))
    write_csv(means, rows, mean_label=None)
    table = out / "metrics_table.txt"
    table.write_text(task_table(per_task, title=f"Objective evaluation ({split} split)"), encoding="utf-8")
    for path in (per_pair, means, table):
        manifest.add_artifact(path, out)
    manifest.notes["pairs"] = len(reports)
    manifest.write(out)
    return table
