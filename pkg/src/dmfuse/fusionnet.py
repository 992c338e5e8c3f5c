"""Stage II fusion network over frozen multi-step diffusion features.

Data flow for one image pair::

    A_t, B_t  --reconstructor-->  5-level pyramids per step t
    per modality and scale:  f = phi3(phi1(concat over t))
    per scale:               F = AMFF(f_A, f_B)
    coarse-to-fine ladder:   M5 = MSFF(F1..F5)
    head:                    fused luma = sigmoid(phi3(phi3(M5)))
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
from .diffusion import NoiseSchedule, make_linear_schedule, validate_steps
from .imaging import luma
from .losses import total_loss
from .reconstructor import NUM_SCALES, FeaturePyramid, Reconstructor, pyramid_channels

log = logging.getLogger(__name__)


def upsample(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


def channel_shuffle(x: torch.Tensor, groups: int) -> torch.Tensor:
    """Group-transpose channel permutation: ``(g, C/g) -> (C/g, g)``."""
    n, c = x.shape[:2]
    if groups < 1 or c % groups:
        raise ValueError(f"{c} channels cannot be split into {groups} groups")
    rest = x.shape[2:]
    return x.reshape(n, groups, c // groups, *rest).transpose(1, 2).reshape(n, c, *rest)


class Conv3(nn.Module):
    """3x3 convolution followed by LeakyReLU (zero maps to zero)."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x):
        return F.leaky_relu(self.conv(x), 0.2)


class NoisyFeatureFusion(nn.Module):
    """phi3(phi1([H_t1, ..., H_tn])) for one modality at one scale."""

    def __init__(self, channels: int, n_steps: int):
        super().__init__()
        self.phi1 = nn.Conv2d(channels * n_steps, channels, 1)
        self.phi3 = Conv3(channels, channels)

    def forward(self, stacks: Sequence[torch.Tensor]):
        return self.phi3(self.phi1(torch.cat(list(stacks), dim=1)))


@dataclass
class AttentionMaps:
    spatial: torch.Tensor  # (N, 1, h, w)
    channel: torch.Tensor  # (N, C, 1, 1)
    pixel: torch.Tensor  # (N, 2C, h, w)


class SpatialAttention(nn.Module):
    def __init__(self, kernel: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel, padding=kernel // 2)

    def forward(self, x):
        pooled = torch.cat([x.mean(1, keepdim=True), x.amax(1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, channels, 1)

    def forward(self, x):
        return torch.sigmoid(self.fc2(F.relu(self.fc1(x.mean((2, 3), keepdim=True)))))


class AMFF(nn.Module):
    """Attention-guided fusion of two same-shape modality features.

    SA and CA gate each input, mixed by two learnable scalars; the gated maps
    are concatenated, channel-shuffled, passed through a group convolution and
    a 1x1 pixel-attention gate, then projected back to ``channels``.
    ``force_gates`` replaces every sigmoid gate by ones (diagnostic probe).
    """

    def __init__(self, channels: int, groups: int = 4, reduction: int = 4, sa_kernel: int = 7):
        super().__init__()
        self.channels = channels
        self.groups = math.gcd(groups, 2 * channels)
        self.sa = SpatialAttention(sa_kernel)
        self.ca = ChannelAttention(channels, reduction)
        self.mix = nn.Parameter(torch.tensor([0.5, 0.5]))
        self.group_conv = nn.Conv2d(2 * channels, 2 * channels, 3, padding=1, groups=self.groups)
        self.pa = nn.Conv2d(2 * channels, 2 * channels, 1)
        self.proj = nn.Conv2d(2 * channels, channels, 1)
        self.force_gates = False

    def weight_map(self, x):
        if self.force_gates:
            sa = torch.ones_like(x[:, :1])
            ca = torch.ones_like(x[:, :, :1, :1])
        else:
            sa, ca = self.sa(x), self.ca(x)
        return self.mix[0] * sa + self.mix[1] * ca

    def pixel_gate(self, z):
        if self.force_gates:
            return torch.ones_like(z)
        s = self.group_conv(channel_shuffle(z, self.groups))
        return torch.sigmoid(self.pa(F.leaky_relu(s, 0.2)))

    def attention_maps(self, fa, fb) -> AttentionMaps:
        z = torch.cat([fa * self.weight_map(fa), fb * self.weight_map(fb)], dim=1)
        return AttentionMaps(self.sa(fa), self.ca(fa), self.pixel_gate(z))

    def forward(self, fa, fb):
        if fa.shape != fb.shape:
            raise ValueError(f"AMFF inputs differ in shape: {tuple(fa.shape)} vs {tuple(fb.shape)}")
        z = torch.cat([fa * self.weight_map(fa), fb * self.weight_map(fb)], dim=1)
        return self.proj(z * self.pixel_gate(z))


class MSFF(nn.Module):
    """Coarse-to-fine ladder over five fused scales.

    ``M1 = Up(phi(F1))``, ``M2 = Up(phi(M1 + F2))`` and for the remaining
    stages ``M_i = Up(phi(M_{i-1} + F_i + Up(phi'(M_{i-2}))))``; the last stage
    skips its outer upsampling so the result sits at input resolution.
    """

    def __init__(self, channels: Sequence[int]):
        super().__init__()
        c = list(channels) + [channels[-1]]
        self.stage = nn.ModuleList(Conv3(c[i], c[i + 1]) for i in range(NUM_SCALES))
        # phi' for stages 3..5 maps M_{i-2} (c[i-1] channels) onto stage i's width c[i]
        self.skip = nn.ModuleList(Conv3(c[i - 1], c[i]) for i in range(2, NUM_SCALES))

    def forward(self, fused: Sequence[torch.Tensor]):
        if len(fused) != NUM_SCALES:
            raise ValueError("MSFF needs five scales")
        for coarse, fine in zip(fused, fused[1:]):
            if fine.shape[-1] != 2 * coarse.shape[-1] or fine.shape[-2] != 2 * coarse.shape[-2]:
                raise ValueError("MSFF inputs must form a factor-2 ladder")
        m = [upsample(self.stage[0](fused[0]))]
        m.append(upsample(self.stage[1](m[0] + fused[1])))
        for i in range(2, NUM_SCALES):
            h = self.stage[i](m[i - 1] + fused[i] + upsample(self.skip[i - 2](m[i - 2])))
            m.append(upsample(h) if i < NUM_SCALES - 1 else h)
        return m[-1]


class FusionHead(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = Conv3(channels, channels)
        self.conv2 = nn.Conv2d(channels, 1, 3, padding=1)

    def forward(self, m5):
        return torch.sigmoid(self.conv2(self.conv1(m5)))


class FusionNet(nn.Module):
    def __init__(self, config: FusionConfig):
        super().__init__()
        self.channels = pyramid_channels(config)
        self.n_steps = len(config.fusion.time_steps)
        self.use_amff = config.fusion.use_amff
        self.use_msff = config.fusion.use_msff
        self.noise_fusion = config.fusion.diffusion
        # without MSFF only the finest scale feeds the head
        scales = range(NUM_SCALES) if self.use_msff else [NUM_SCALES - 1]
        self.scales = list(scales)
        m = config.model

        def per_scale(factory):
            return nn.ModuleDict({str(i): factory(self.channels[i]) for i in self.scales})

        if self.noise_fusion:
            self.noisy_a = per_scale(lambda c: NoisyFeatureFusion(c, self.n_steps))
            self.noisy_b = per_scale(lambda c: NoisyFeatureFusion(c, self.n_steps))
        if self.use_amff:
            self.amff = per_scale(lambda c: AMFF(c, m.amff_groups, m.ca_reduction, m.sa_kernel))
        if self.use_msff:
            self.msff = MSFF(self.channels)
        self.head = FusionHead(self.channels[-1])

    def set_probe(self, force_gates: bool) -> None:
        if self.use_amff:
            for block in self.amff.values():
                block.force_gates = force_gates

    def fuse_noisy(self, pyramids: Sequence[FeaturePyramid], scale: int, modality: str):
        stacks = [p[scale] for p in pyramids]
        shapes = {tuple(s.shape) for s in stacks}
        if len(shapes) != 1:
            raise ValueError(f"pyramid shape mismatch at scale {scale}: {sorted(shapes)}")
        if not self.noise_fusion:
            return stacks[0]
        if len(stacks) != self.n_steps:
            raise ValueError(f"expected {self.n_steps} pyramids, got {len(stacks)}")
        block = (self.noisy_a if modality == "A" else self.noisy_b)[str(scale)]
        return block(stacks)

    def fuse_scale(self, fa, fb, scale: int):
        if not self.use_amff:
            return fa + fb
        return self.amff[str(scale)](fa, fb)

    def forward(self, pyr_a: Sequence[FeaturePyramid], pyr_b: Sequence[FeaturePyramid]):
        fused = {i: self.fuse_scale(self.fuse_noisy(pyr_a, i, "A"), self.fuse_noisy(pyr_b, i, "B"), i)
                 for i in self.scales}
        m5 = self.msff([fused[i] for i in range(NUM_SCALES)]) if self.use_msff else fused[NUM_SCALES - 1]
        return self.head(m5)


FusionWeights = FusionNet


def init_fusion(config: FusionConfig, seed: int = 0) -> FusionNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return FusionNet(config)


# functional entry points mirroring the module's operations
def fuse_noisy_features(pyramids: Sequence[FeaturePyramid], weights: FusionNet, scale: int,
                        modality: str = "A") -> torch.Tensor:
    return weights.fuse_noisy(pyramids, scale, modality)


def amff(fa, fb, weights: FusionNet, scale: int) -> torch.Tensor:
    return weights.fuse_scale(fa, fb, scale)


def msff(fused: Sequence[torch.Tensor], weights: FusionNet) -> torch.Tensor:
    return weights.msff(fused)


def fusion_head(m5: torch.Tensor, weights: FusionNet) -> torch.Tensor:
    return weights.head(m5)


# ----------------------------
# Feature extraction + end-to-end fusion
# ----------------------------
def step_pyramids(recon: Reconstructor, a: torch.Tensor, b: torch.Tensor, steps: Sequence[int],
                  schedule: NoiseSchedule, generator: Optional[torch.Generator],
                  diffusion: bool = True):
    """Noise both ``(N, 1, H, W)`` batches at every step and run one frozen reconstructor pass.

    Returns two lists of pyramids (one per step) for A and B.
    """
    if a.shape != b.shape:
        raise ValueError(f"source resolution mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if not diffusion:
        steps = (0,)
    n = a.shape[0]
    inputs, ts = [], []
    ab = torch.tensor(schedule.alpha_bars, dtype=a.dtype)
    for t in steps:
        schedule.check_step(t, allow_zero=True)
        for img in (a, b):
            if t == 0:
                inputs.append(img)
            else:
                noise = torch.randn(img.shape, generator=generator, dtype=img.dtype)
                inputs.append(ab[t].sqrt() * img + (1 - ab[t]).sqrt() * noise)
            ts.append(torch.full((n,), t, dtype=torch.long))
    with torch.no_grad():
        _, pyr = recon(torch.cat(inputs), torch.cat(ts))
    pyr_a, pyr_b = [], []
    for k in range(len(steps)):
        lo_a, lo_b = 2 * k * n, (2 * k + 1) * n
        pyr_a.append(FeaturePyramid(tuple(lvl[lo_a:lo_a + n] for lvl in pyr.levels)))
        pyr_b.append(FeaturePyramid(tuple(lvl[lo_b:lo_b + n] for lvl in pyr.levels)))
    return pyr_a, pyr_b


def _batch(images, dtype) -> torch.Tensor:
    return torch.stack([torch.as_tensor(np.asarray(im), dtype=dtype) for im in images])[:, None]


def forward_fuse(recon: Reconstructor, fusion: FusionNet, ia, ib_luma, steps: Sequence[int],
                 schedule: NoiseSchedule, seed: int = 0, diffusion: Optional[bool] = None) -> np.ndarray:
    """Fuse one registered pair (``H x W`` luma arrays) into a fused luma image in [0, 1]."""
    ia = np.asarray(ia, dtype=np.float64)
    ib = np.asarray(ib_luma, dtype=np.float64)
    if ia.shape != ib.shape:
        raise ValueError(f"resolution mismatch: {ia.shape} vs {ib.shape}")
    steps = validate_steps(steps, schedule)
    diffusion = fusion.noise_fusion if diffusion is None else diffusion
    dtype = next(fusion.parameters()).dtype
    gen = torch.Generator().manual_seed(seed)
    a, b = _batch([ia], dtype), _batch([ib], dtype)
    pyr_a, pyr_b = step_pyramids(recon, a, b, steps, schedule, gen, diffusion)
    with torch.no_grad():
        out = fusion(pyr_a, pyr_b)
    return out[0, 0].numpy().astype(np.float64)


# ----------------------------
# Stage II training
# ----------------------------
@dataclass
class Stage2Result:
    model: FusionNet
    curves: list[dict] = field(default_factory=list)


def train_stage2(recon: Reconstructor, pairs: Sequence, config: FusionConfig, *,
                 schedule: Optional[NoiseSchedule] = None, steps: Optional[int] = None,
                 seed: Optional[int] = None, model: Optional[FusionNet] = None,
                 callback: Optional[Callable[[int, dict], None]] = None) -> Stage2Result:
    """Train the fusion network with the reconstructor frozen.

    ``pairs`` holds ``(A, B)`` tuples; colour B images are reduced to luma.
    Tasks are mixed freely inside a batch and noise is redrawn every step.
    """
    if len(pairs) == 0:
        raise ValueError("Stage II needs at least one training pair")
    schedule = schedule or make_linear_schedule(config.schedule.T, config.schedule.beta_start,
                                                config.schedule.beta_end)
    seed = config.run.seed if seed is None else seed
    steps = config.stage2.steps if steps is None else steps
    time_steps = validate_steps(config.fusion.time_steps, schedule)
    for p in recon.parameters():
        p.requires_grad_(False)
    recon.eval()

    model = model if model is not None else init_fusion(config, seed)
    dtype = next(model.parameters()).dtype
    a_all = _batch([np.asarray(a) for a, _ in pairs], dtype)
    b_all = _batch([luma(b) for _, b in pairs], dtype)
    if a_all.shape != b_all.shape:
        raise ValueError("every pair must share one resolution")

    gen = torch.Generator().manual_seed(seed + 2)
    opt = torch.optim.Adam(model.parameters(), lr=config.stage2.lr)
    sched = (torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps) if config.stage2.cosine and steps
             else None)
    batch = min(config.stage2.batch_size, len(pairs))
    lc = config.loss
    curves = []
    model.train()
    for step in range(steps):
        idx = torch.randperm(len(pairs), generator=gen)[:batch]
        a, b = a_all[idx], b_all[idx]
        pyr_a, pyr_b = step_pyramids(recon, a, b, time_steps, schedule, gen, config.fusion.diffusion)
        fused = model(pyr_a, pyr_b)
        parts = total_loss(fused[:, 0], a[:, 0], b[:, 0], lc.alpha, lc.beta, lc.patch_size, lc.stride,
                           lc.gamma)
        if not torch.isfinite(parts.total):
            raise FloatingPointError(f"Stage II loss became non-finite at step {step}")
        opt.zero_grad(set_to_none=True)
        parts.total.backward()
        opt.step()
        if sched is not None:
            sched.step()
        row = {"step": step, **parts.as_floats()}
        curves.append(row)
        if callback is not None:
            callback(step, row)
        if step % 250 == 0:
            log.info("stage2 step %d total %.5f", step, row["total"])
    model.eval()
    return Stage2Result(model, curves)
