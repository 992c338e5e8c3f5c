"""Synthetic multimodal phantoms, on-disk pair layout and manifests.

Phantoms stand in for registered MRI/CT and MRI/PET/SPECT slices.  Every
pair is a pure function of its :class:`PhantomSpec`; randomness comes from a
Philox-4x64 counter stream whose raw 64-bit words are turned into uniforms
and normals by the explicit formulas in :class:`PhiloxStream`, so the bytes
do not depend on any library's distribution code.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np
from scipy import ndimage

from .config import TASKS
from .imaging import as_color, as_gray, is_color, read_png, write_png

STRUCTURAL_DENSE = "structural-dense"
STRUCTURAL_FUNCTIONAL = "structural-functional"

TASK_KIND = {
    "mri-ct": STRUCTURAL_DENSE,
    "mri-pet": STRUCTURAL_FUNCTIONAL,
    "mri-spect": STRUCTURAL_FUNCTIONAL,
}

MANIFEST_NAME = "manifest.tsv"


class DatasetError(ValueError):
    pass


class PhiloxStream:
    """Uniform / normal variates from Philox-4x64-10 keyed by a 64-bit seed.

    ``uniform``: top 53 bits of each raw word times ``2**-53``.
    ``normal``: Box-Muller on consecutive uniform pairs, cosine branch only.
    """

    def __init__(self, seed: int):
        self._bits = np.random.Philox(key=int(seed) & 0xFFFFFFFFFFFFFFFF)

    def raw(self, n: int) -> np.ndarray:
        return self._bits.random_raw(n).astype(np.uint64)

    def uniform(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape)) if shape != () else 1
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return u.reshape(shape) if shape != () else u[0]

    def uniform_in(self, lo: float, hi: float, shape=()):
        return lo + (hi - lo) * self.uniform(shape)

    def normal(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape)) if shape != () else 1
        u = self.uniform((2 * n,))
        u1 = 1.0 - u[0::2]  # (0, 1]
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u[1::2])
        return z.reshape(shape) if shape != () else z[0]


@dataclass(frozen=True)
class PhantomSpec:
    seed: int
    size: int = 64
    task: str = "mri-ct"
    blob_density: float = 1.0
    edge_density: float = 1.0

    @property
    def kind(self) -> str:
        return TASK_KIND[self.task]


def _smooth_noise(rng: PhiloxStream, size: int, sigma: float) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.normal((size, size)), sigma, mode="wrap")
    field -= field.mean()
    return field / (field.std() + 1e-12)


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _anatomy(rng: PhiloxStream, size: int):
    """Polar coordinates normalised by a wobbly head outline: ``rho < 1`` is inside."""
    c = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    yy, xx = np.meshgrid(c, c, indexing="ij")
    rx, ry = rng.uniform_in(0.70, 0.84), rng.uniform_in(0.78, 0.90)
    theta = np.arctan2(yy, xx)
    wobble = np.ones_like(theta)
    for k in (2, 3, 5):
        wobble += rng.uniform_in(-0.03, 0.03) * np.cos(k * theta + rng.uniform_in(0, 2 * math.pi))
    rho = np.sqrt((xx / rx) ** 2 + (yy / ry) ** 2) / wobble
    return xx, yy, rho


def _blobs(rng: PhiloxStream, xx, yy, rho, count: int, sigma_range, amp_range, max_rho: float):
    out = np.zeros_like(xx)
    placed = 0
    while placed < count:
        cx, cy = rng.uniform_in(-0.8, 0.8), rng.uniform_in(-0.8, 0.8)
        iy = int(np.clip((cy + 1) / 2 * xx.shape[0], 0, xx.shape[0] - 1))
        ix = int(np.clip((cx + 1) / 2 * xx.shape[1], 0, xx.shape[1] - 1))
        if rho[iy, ix] > max_rho:
            continue
        s = rng.uniform_in(*sigma_range)
        a = rng.uniform_in(*amp_range)
        out = np.maximum(out, a * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s)))
        placed += 1
    return out


def _mri(rng: PhiloxStream, size: int, xx, yy, rho, edge_density: float) -> np.ndarray:
    inside = _smoothstep((1.0 - rho) / 0.06)
    tex = _smooth_noise(rng, size, max(size / 48.0, 0.8))
    warp = _smooth_noise(rng, size, size / 10.0)
    freq = rng.uniform_in(3.0, 4.5) * edge_density
    gyri = 0.5 + 0.5 * np.cos(2 * math.pi * freq * (rho + 0.12 * warp))
    gyri = _smoothstep((gyri - 0.25) / 0.5)
    ventricles = _blobs(rng, xx, yy, rho, 2, (0.06, 0.12), (0.5, 0.7), 0.35)
    img = 0.30 + 0.08 * tex + 0.28 * gyri - ventricles * 0.45
    cortex = _smoothstep((rho - 0.82) / 0.1) * 0.15
    return np.clip(inside * (img + cortex), 0.0, 1.0)


def _ct(rng: PhiloxStream, size: int, xx, yy, rho, blob_density: float) -> np.ndarray:
    inside = _smoothstep((1.0 - rho) / 0.04)
    ring = _smoothstep((rho - 0.86) / 0.04) * inside
    count = max(1, int(round(3 * blob_density)))
    calc = _blobs(rng, xx, yy, rho, count, (0.025, 0.05), (0.85, 1.0), 0.7)
    tissue = 0.16 * inside
    img = np.maximum(tissue, np.maximum(ring * rng.uniform_in(0.96, 1.0), calc))
    return np.clip(img, 0.0, 1.0)


def _colormap(v: np.ndarray, task: str) -> np.ndarray:
    if task == "mri-pet":
        r = np.clip(2.2 * v, 0, 1)
        g = np.clip(2.0 * v - 0.6, 0, 1)
        b = np.clip(3.0 * v - 2.0, 0, 1)
    else:
        r = np.clip(2.0 * v - 0.5, 0, 1)
        g = np.clip(2.2 * v - 0.2, 0, 1) * np.clip(2.5 - 2.0 * v, 0, 1)
        b = np.clip(1.5 - 2.5 * np.abs(v - 0.3) * 2.0, 0, 1) * np.clip(3 * v, 0, 1)
    return np.stack([r, g, b], axis=-1)


def _functional(rng: PhiloxStream, size: int, task: str, xx, yy, rho, blob_density: float) -> np.ndarray:
    inside = _smoothstep((1.0 - rho) / 0.15)
    count = max(2, int(round(5 * blob_density)))
    uptake = np.zeros_like(xx)
    for _ in range(count):
        uptake = np.maximum(uptake, _blobs(rng, xx, yy, rho, 1, (0.10, 0.22), (0.6, 1.0), 0.8))
    background = 0.25 + 0.05 * _smooth_noise(rng, size, size / 6.0)
    v = np.clip(inside * np.maximum(background, uptake), 0.0, 1.0)
    return np.clip(_colormap(v, task) * inside[..., None], 0.0, 1.0)


def gen_phantom_pair(spec: PhantomSpec):
    """``(A, B)``: MRI-like grayscale A and a CT-like gray or PET/SPECT-like RGB B."""
    if spec.size < 16 or spec.size % 16:
        raise ValueError(f"phantom size must be a positive multiple of 16, got {spec.size}")
    if spec.task not in TASK_KIND:
        raise ValueError(f"unknown task {spec.task!r}")
    rng = PhiloxStream(spec.seed)
    xx, yy, rho = _anatomy(rng, spec.size)
    a = _mri(rng, spec.size, xx, yy, rho, spec.edge_density)
    if spec.kind == STRUCTURAL_DENSE:
        b = _ct(rng, spec.size, xx, yy, rho, spec.blob_density)
    else:
        b = _functional(rng, spec.size, spec.task, xx, yy, rho, spec.blob_density)
    return as_gray(a), (as_color(b) if b.ndim == 3 else as_gray(b))


def pair_seed(seed: int, task: str, split: str, index: int) -> int:
    h = hashlib.sha256(f"{seed}/{task}/{split}/{index}".encode()).digest()
    return int.from_bytes(h[:8], "little")


# ----------------------------
# Manifests
# ----------------------------
@dataclass(frozen=True)
class PairRecord:
    pair_id: str
    path_a: str
    path_b: str
    task: str
    split: str
    digest_a: str
    digest_b: str

    def to_line(self) -> str:
        return "\t".join([self.pair_id, self.path_a, self.path_b, self.task, self.split,
                          self.digest_a, self.digest_b])


@dataclass
class ImagePair:
    pair_id: str
    a: np.ndarray
    b: np.ndarray
    task: str
    split: str

    @property
    def color(self) -> bool:
        return is_color(self.b)


def file_digest(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path: Union[str, Path], records: Iterable[PairRecord]) -> None:
    lines = [r.to_line() for r in records]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_manifest(path: Union[str, Path]) -> list[PairRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 7:
            raise DatasetError(f"{path}:{lineno}: expected 7 tab-separated fields, got {len(parts)}")
        records.append(PairRecord(*parts))
    return records


def write_phantom_dataset(root: Union[str, Path], *, seed: int = 0, size: int = 64,
                          tasks: Iterable[str] = TASKS, train_per_task: int = 30,
                          test_per_task: int = 50) -> Path:
    """Render phantoms to ``<root>/<task>/<split>/<pair_id>_{A,B}.png`` plus ``manifest.tsv``."""
    root = Path(root)
    records = []
    for task in tasks:
        for split, count in (("train", train_per_task), ("test", test_per_task)):
            for i in range(count):
                pid = f"{task}-{split}-{i:03d}"
                a, b = gen_phantom_pair(PhantomSpec(seed=pair_seed(seed, task, split, i), size=size, task=task))
                rel_a = Path(task) / split / f"{pid}_A.png"
                rel_b = Path(task) / split / f"{pid}_B.png"
                write_png(root / rel_a, a)
                write_png(root / rel_b, b)
                records.append(PairRecord(pid, rel_a.as_posix(), rel_b.as_posix(), task, split,
                                          file_digest(root / rel_a), file_digest(root / rel_b)))
    root.mkdir(parents=True, exist_ok=True)
    manifest = root / MANIFEST_NAME
    write_manifest(manifest, records)
    return manifest


def load_pairs(manifest_path: Union[str, Path], *, split: Optional[str] = None,
               verify: bool = True) -> list[ImagePair]:
    """Decode every pair listed in a manifest, checking digests and dimensions."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DatasetError(f"manifest not found: {manifest_path}")
    base = manifest_path.parent
    pairs = []
    for rec in read_manifest(manifest_path):
        if split is not None and rec.split != split:
            continue
        images = []
        for rel, expected in ((rec.path_a, rec.digest_a), (rec.path_b, rec.digest_b)):
            path = base / rel
            if not path.exists():
                raise DatasetError(f"pair {rec.pair_id}: missing file {path}")
            if verify and file_digest(path) != expected:
                raise DatasetError(f"pair {rec.pair_id}: digest mismatch for {path}")
            images.append(read_png(path))
        a, b = images
        if a.shape[:2] != b.shape[:2]:
            raise DatasetError(f"pair {rec.pair_id}: dimension mismatch {a.shape[:2]} vs {b.shape[:2]}")
        if a.ndim == 3:
            raise DatasetError(f"pair {rec.pair_id}: modality A must be grayscale")
        pairs.append(ImagePair(rec.pair_id, a, b, rec.task, rec.split))
    return pairs
