"""Stage I denoising encoder-decoder and its training loop.

The network maps a noised image ``I_t`` and its step ``t`` to the previous
step image ``I_{t-1}``.  Its five decoder blocks double as the feature
extractor for the fusion network: :meth:`Reconstructor.forward` returns the
prediction together with the decoder activations, coarse to fine.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import FusionConfig
from .diffusion import NoiseSchedule, coupled_pair, make_linear_schedule, stage1_loss

log = logging.getLogger(__name__)

NUM_SCALES = 5


def norm_groups(channels: int) -> int:
    return math.gcd(channels, 8)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer steps, ``(N,) -> (N, dim)``."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(norm_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(norm_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


@dataclass(frozen=True)
class FeaturePyramid:
    """Decoder activations, ``levels[0]`` coarsest (``H/16``) to ``levels[4]`` full resolution."""

    levels: tuple[torch.Tensor, ...]

    def __post_init__(self):
        if len(self.levels) != NUM_SCALES:
            raise ValueError(f"a pyramid has exactly {NUM_SCALES} levels, got {len(self.levels)}")
        for coarse, fine in zip(self.levels, self.levels[1:]):
            if fine.shape[-2] != 2 * coarse.shape[-2] or fine.shape[-1] != 2 * coarse.shape[-1]:
                raise ValueError("pyramid levels must double in size from coarse to fine")

    def __getitem__(self, i):
        return self.levels[i]

    def __len__(self):
        return NUM_SCALES

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(lvl.shape[1] for lvl in self.levels)

    @property
    def sizes(self) -> tuple[tuple[int, int], ...]:
        return tuple(tuple(lvl.shape[-2:]) for lvl in self.levels)


def encoder_channels(config: FusionConfig) -> tuple[int, ...]:
    """Channel width per scale, finest first."""
    return tuple(config.model.base_width * m for m in config.model.multipliers)


def pyramid_channels(config: FusionConfig) -> tuple[int, ...]:
    """Channel width of the decoder taps, coarsest first."""
    return tuple(reversed(encoder_channels(config)))


class Reconstructor(nn.Module):
    def __init__(self, config: FusionConfig):
        super().__init__()
        w = config.model.base_width
        if w <= 0:
            raise ValueError("base width must be positive")
        chans = encoder_channels(config)
        self.resolution = config.data.resolution
        self.emb_dim = 4 * w
        self.time_mlp = nn.Sequential(nn.Linear(self.emb_dim, self.emb_dim), nn.SiLU(),
                                      nn.Linear(self.emb_dim, self.emb_dim))
        self.head = nn.Conv2d(1, chans[0], 3, padding=1)

        self.down = nn.ModuleList()
        prev = chans[0]
        for ch in chans:
            self.down.append(ResBlock(prev, ch, self.emb_dim))
            prev = ch
        self.mid = ResBlock(prev, prev, self.emb_dim)

        # D_1 (coarsest) ... D_5 (full resolution)
        self.up = nn.ModuleList()
        for ch in reversed(chans):
            self.up.append(ResBlock(prev + ch, ch, self.emb_dim))
            prev = ch
        self.out_norm = nn.GroupNorm(norm_groups(prev), prev)
        self.out = nn.Conv2d(prev, 1, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor):
        if x.dim() != 4 or x.shape[1] != 1:
            raise ValueError(f"expected (N, 1, H, W) input, got {tuple(x.shape)}")
        if x.shape[-2] % 16 or x.shape[-1] % 16:
            raise ValueError(f"spatial size must be divisible by 16, got {tuple(x.shape[-2:])}")
        t = torch.as_tensor(t).reshape(-1).expand(x.shape[0])
        emb = self.time_mlp(timestep_embedding(t, self.emb_dim).to(x.dtype))

        h = self.head(x)
        skips = []
        for i, block in enumerate(self.down):
            h = block(h, emb)
            skips.append(h)
            if i < NUM_SCALES - 1:
                h = F.avg_pool2d(h, 2)
        h = self.mid(h, emb)

        taps = []
        for i, block in enumerate(self.up):
            h = block(torch.cat([h, skips.pop()], dim=1), emb)
            taps.append(h)
            if i < NUM_SCALES - 1:
                h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
        return self.out(F.silu(self.out_norm(h))), FeaturePyramid(tuple(taps))


ReconstructorWeights = Reconstructor


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameter_vector(module: nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()])


def init_reconstructor(config: FusionConfig, seed: int = 0) -> Reconstructor:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Reconstructor(config)
    return model


def _prepare(model: Reconstructor, noisy):
    as_numpy = not isinstance(noisy, torch.Tensor)
    x = torch.as_tensor(np.asarray(noisy) if as_numpy else noisy)
    x = x.to(next(model.parameters()).dtype)
    squeeze = x.dim()
    if x.dim() == 2:
        x = x[None, None]
    elif x.dim() == 3:
        x = x[:, None]
    if tuple(x.shape[-2:]) != (model.resolution, model.resolution):
        raise ValueError(f"input size {tuple(x.shape[-2:])} does not match configured "
                         f"resolution {model.resolution}")
    return x, as_numpy, squeeze


def predict_previous(model: Reconstructor, noisy, t: int):
    """``I'_{t-1} = U(I_t, t)``; numpy in, numpy out, tensors stay tensors."""
    x, as_numpy, ndim = _prepare(model, noisy)
    with torch.no_grad():
        out, _ = model(x, torch.tensor([int(t)]))
    if ndim == 2:
        out = out[0, 0]
    elif ndim == 3:
        out = out[:, 0]
    return out.numpy().astype(np.float64) if as_numpy else out


def extract_features(model: Reconstructor, noisy, t: int) -> FeaturePyramid:
    x, _, _ = _prepare(model, noisy)
    with torch.no_grad():
        _, pyramid = model(x, torch.tensor([int(t)]))
    return pyramid


# ----------------------------
# Stage I training
# ----------------------------
@dataclass
class Stage1Result:
    model: Reconstructor
    losses: list[float] = field(default_factory=list)


def train_stage1(dataset: Sequence[np.ndarray], config: FusionConfig, *,
                 schedule: Optional[NoiseSchedule] = None, steps: Optional[int] = None,
                 seed: Optional[int] = None, diffusion: bool = True,
                 model: Optional[Reconstructor] = None,
                 callback: Optional[Callable[[int, float], None]] = None) -> Stage1Result:
    """Fit the reconstructor on single-channel images.

    Each step draws a batch of images and steps ``t ~ U{1..T}``, builds the
    coupled ``(I_t, I_{t-1})`` pair and minimises the mean absolute error of
    the predicted predecessor.  ``diffusion=False`` trains a plain
    autoencoder on clean inputs at ``t = 0`` (the no-diffusion ablation).
    """
    if len(dataset) == 0:
        raise ValueError("Stage I needs a non-empty dataset")
    res = config.data.resolution
    images = torch.stack([torch.as_tensor(np.asarray(im, dtype=np.float32)) for im in dataset])[:, None]
    if tuple(images.shape[-2:]) != (res, res):
        raise ValueError(f"dataset images are {tuple(images.shape[-2:])}, config expects {res}x{res}")
    schedule = schedule or make_linear_schedule(config.schedule.T, config.schedule.beta_start,
                                                config.schedule.beta_end)
    seed = config.run.seed if seed is None else seed
    steps = config.stage1.steps if steps is None else steps
    model = model if model is not None else init_reconstructor(config, seed)
    model.train()
    if steps == 0:
        return Stage1Result(model, [])

    gen = torch.Generator().manual_seed(seed + 1)
    opt = torch.optim.Adam(model.parameters(), lr=config.stage1.lr)
    sched = (torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps) if config.stage1.cosine and steps
             else None)
    batch = min(config.stage1.batch_size, len(images))
    losses = []
    for step in range(steps):
        idx = torch.randint(len(images), (batch,), generator=gen)
        clean = images[idx]
        if diffusion:
            t = torch.randint(1, schedule.T + 1, (batch,), generator=gen)
            noisy, target = coupled_pair(clean, t, schedule, gen)
        else:
            t = torch.zeros(batch, dtype=torch.long)
            noisy, target = clean, clean
        pred, _ = model(noisy, t)
        loss = stage1_loss(pred, target)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"Stage I loss became non-finite at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if sched is not None:
            sched.step()
        value = float(loss.detach())
        losses.append(value)
        if callback is not None:
            callback(step, value)
        if step % 500 == 0:
            log.info("stage1 step %d loss %.5f", step, value)
    model.eval()
    return Stage1Result(model, losses)
