"""Acceptance criteria, one test per criterion; each prints a PASS/FAIL line.

Criteria 6 and 7 train at desk scale and take several minutes each on one core;
deselect them with ``-m "not slow"``.
"""
import json
import math
import time

import numpy as np
import pytest
import torch

from dmfuse.config import FusionConfig
from dmfuse.data import MANIFEST_NAME, PhantomSpec, gen_phantom_pair, load_pairs, pair_seed
from dmfuse.diffusion import forward_jump, forward_step, make_linear_schedule, stage1_loss
from dmfuse.fusionnet import AMFF, MSFF, FusionHead, forward_fuse, init_fusion, train_stage2
from dmfuse.imaging import luma, read_png
from dmfuse.losses import gradient_loss, intensity_loss, ssim_std_loss, total_loss
from dmfuse.metrics import (METRIC_HEADERS, average_gradient, evaluate_pair, q_abf, scd, spatial_frequency,
                            standard_deviation)
from dmfuse.metrics.indicators import msssim
from dmfuse.pipeline.ablation import MODES, variants_for
from dmfuse.pipeline.cli import main
from dmfuse.pipeline.manifest import read_run_manifest
from dmfuse.reconstructor import init_reconstructor, parameter_vector, predict_previous, train_stage1
from test_metrics import bf_ag, bf_qabf, bf_scd, bf_sd, bf_sf, rand_triplets, structured

SCHED = make_linear_schedule()
TASKS = ("mri-ct", "mri-pet", "mri-spect")


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, detail
    return emit


def fd_relative_error(loss_fn, params, per_tensor=3, seed=0, eps=1e-6):
    """Central differences on sampled coordinates of every tensor; returns ||num - ana|| / ||ana||."""
    for p in params:
        p.grad = None
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    num, ana = [], []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for j in rng.choice(flat.numel(), min(per_tensor, flat.numel()), replace=False):
                old = flat[j].item()
                flat[j] = old + eps
                up = loss_fn().item()
                flat[j] = old - eps
                down = loss_fn().item()
                flat[j] = old
                num.append((up - down) / (2 * eps))
                ana.append(p.grad.view(-1)[j].item())
    num, ana = np.array(num), np.array(ana)
    return float(np.linalg.norm(num - ana) / np.linalg.norm(ana))


# ---------------------------------------------------------------- 1
def test_c1_configuration_fidelity(report):
    cfg = FusionConfig()
    ok = cfg.loss.alpha == 1.5 and cfg.loss.beta == 0.5 and cfg.time_steps == (5, 10, 20)
    report(1, ok, f"alpha={cfg.loss.alpha} beta={cfg.loss.beta} steps={cfg.time_steps}")


# ---------------------------------------------------------------- 2
def test_c2_diffusion_moments(report):
    t0 = time.time()
    n = 20000
    rng = np.random.default_rng(0)
    worst = 0.0
    for t in (1, 5, 20, 100, 500, 1000):
        clean = np.array([0.0, 0.3, 1.0])
        draws = forward_jump(np.broadcast_to(clean, (n, 3)), t, SCHED, rng.standard_normal((n, 3)))
        ab = SCHED.alpha_bars[t]
        var = 1 - ab
        z_mean = np.abs(draws.mean(0) - math.sqrt(ab) * clean) / math.sqrt(var / n)
        z_var = np.abs(draws.var(0, ddof=1) - var) / (var * math.sqrt(2 / (n - 1)))
        worst = max(worst, z_mean.max(), z_var.max())
    x = np.full(n, 0.6)
    for s in range(1, 21):
        x = forward_step(x, s, SCHED, rng.standard_normal(n))
    ab = SCHED.alpha_bars[20]
    z_it = max(abs(x.mean() - math.sqrt(ab) * 0.6) / math.sqrt((1 - ab) / n),
               abs(x.var(ddof=1) - (1 - ab)) / ((1 - ab) * math.sqrt(2 / (n - 1))))
    elapsed = time.time() - t0
    ok = worst < 3 and z_it < 3 and elapsed < 60
    report(2, ok, f"max |z| jump={worst:.2f} iterated={z_it:.2f} (<3), {elapsed:.1f}s")


# ---------------------------------------------------------------- 3
def test_c3_loss_exactness(report):
    rng = np.random.default_rng(0)
    a, b, f = rng.random((3, 64, 64))
    const = np.full((64, 64), 0.25)
    zero_cases = [
        intensity_loss(a, a, a), intensity_loss(np.maximum(a, b), a, b), intensity_loss(const, const, const),
        ssim_std_loss(a, a, a), ssim_std_loss(const, const, const),
        gradient_loss(a, a, a), gradient_loss(const, const, const),
    ]
    worst_zero = max(abs(v) for v in zero_cases)
    worst_sum = 0.0
    for alpha, beta, gamma in ((1.5, 0.5, 1.0), (1.0, 1.0, 0.0), (0.0, 2.0, 1.0), (3.0, 0.0, 1.0)):
        parts = total_loss(f, a, b, alpha, beta, gamma=gamma)
        worst_sum = max(worst_sum, abs(parts.total - (alpha * parts.l_int + beta * parts.l_ssim
                                                      + gamma * parts.l_grad)))
    ok = worst_zero <= 1e-6 and worst_sum <= 1e-12
    report(3, ok, f"identity cases max={worst_zero:.2e} (<=1e-6), recomposition={worst_sum:.2e} (<=1e-12)")


# ---------------------------------------------------------------- 4
def test_c4_differentiability(report):
    t0 = time.time()
    torch.manual_seed(0)
    cfg = FusionConfig().replace(data={"resolution": 32}, model={"base_width": 2})
    recon = init_reconstructor(cfg).double()
    x = torch.rand(2, 1, 32, 32, dtype=torch.float64)
    target = torch.rand(2, 1, 32, 32, dtype=torch.float64)
    t = torch.tensor([5, 20])
    e1 = fd_relative_error(lambda: stage1_loss(recon(x, t)[0], target), list(recon.parameters()))

    errors = [e1]
    for size in (8, 16):
        torch.manual_seed(size)
        chans = (8, 8, 4, 4, 2) if size == 16 else (2,)
        n = len(chans)
        amffs = [AMFF(c).double() for c in chans]
        ms = MSFF(chans).double() if n == 5 else None
        head = FusionHead(chans[-1]).double()
        fa = [torch.randn(1, c, size >> (n - 1 - i), size >> (n - 1 - i), dtype=torch.float64)
              for i, c in enumerate(chans)]
        fb = [torch.randn_like(v) for v in fa]
        a = torch.rand(1, size, size, dtype=torch.float64)
        b = torch.rand(1, size, size, dtype=torch.float64)

        def loss(amffs=amffs, ms=ms, head=head, fa=fa, fb=fb, a=a, b=b, size=size):
            fused = [m(p, q) for m, p, q in zip(amffs, fa, fb)]
            top = ms(fused) if ms is not None else fused[-1]
            return total_loss(head(top)[:, 0], a, b, 1.5, 0.5, size // 2, size // 2).total

        params = [p for m in amffs + ([ms] if ms is not None else []) + [head] for p in m.parameters()]
        errors.append(fd_relative_error(loss, params, per_tensor=2, seed=size))
    elapsed = time.time() - t0
    ok = max(errors) <= 1e-3 and elapsed < 300
    report(4, ok, f"relative FD error stage1={errors[0]:.1e} fusion8={errors[1]:.1e} "
                  f"fusion16={errors[2]:.1e} (<=1e-3), {elapsed:.1f}s")


# ---------------------------------------------------------------- 5
def test_c5_metric_oracles(report):
    t0 = time.time()
    worst = 0.0
    for a, b, f in rand_triplets(100, 16, seed=11):
        pairs = [(spatial_frequency(f), bf_sf(f)), (standard_deviation(f), bf_sd(f)),
                 (average_gradient(f), bf_ag(f)), (scd(a, b, f), bf_scd(a, b, f)),
                 (q_abf(a, b, f), bf_qabf(a, b, f))]
        worst = max(worst, max(abs(u - v) for u, v in pairs))
    x = structured(64)
    rep = evaluate_pair(x, x, x)
    ident = (abs(rep.q_w - 1) <= 1e-9 and abs(rep.viff - 1) <= 1e-6 and abs(rep.msssim - 1) <= 1e-6
             and rep.scd == 0)
    elapsed = time.time() - t0
    ok = worst <= 1e-9 and ident and elapsed < 120
    report(5, ok, f"oracle max diff={worst:.1e} (<=1e-9), identity q_w={rep.q_w:.9f} viff={rep.viff:.7f} "
                  f"msssim={rep.msssim:.7f} scd={rep.scd}, {elapsed:.1f}s")


# ---------------------------------------------------------------- 6 / 7
def smoke_images():
    imgs = []
    for i in range(8):
        task = TASKS[i % 3]
        a, b = gen_phantom_pair(PhantomSpec(seed=pair_seed(0, task, "train", i), size=64, task=task))
        imgs += [a, luma(b)]
    return imgs


@pytest.fixture(scope="module")
def stage1():
    cfg = FusionConfig()
    imgs = smoke_images()
    t0 = time.time()
    result = train_stage1(imgs, cfg, schedule=SCHED)
    return cfg, imgs, result, time.time() - t0


@pytest.mark.slow
def test_c6_stage1_smoke(report, stage1):
    cfg, imgs, result, elapsed = stage1
    losses = np.array(result.losses)
    first, last = losses[:100].mean(), losses[-100:].mean()
    rng = np.random.default_rng(0)
    scores = []
    for im in imgs:
        noisy = forward_jump(im, 5, SCHED, rng.standard_normal(im.shape))
        scores.append(msssim(im, np.clip(predict_previous(result.model, noisy, 5), 0, 1)))
    ok = (len(losses) == 2000 and len(imgs) == 16 and last <= 0.5 * first and min(scores) >= 0.8
          and elapsed <= 900)
    report(6, ok, f"loss {first:.4f} -> {last:.4f} (ratio {last / first:.3f} <= 0.5), "
                  f"MS-SSIM@t=5 mean={np.mean(scores):.3f} min={min(scores):.3f} (>=0.8), {elapsed:.0f}s")


@pytest.mark.slow
def test_c7_stage2_overfit(report, stage1):
    cfg, _, s1, _ = stage1
    pairs = []
    for i in range(4):
        task = TASKS[i % 3]
        pairs.append(gen_phantom_pair(PhantomSpec(seed=pair_seed(0, task, "train", 100 + i), size=64, task=task)))
    t0 = time.time()
    result = train_stage2(s1.model, pairs, cfg, schedule=SCHED)
    elapsed = time.time() - t0
    final = float(np.mean([r["total"] for r in result.curves[-100:]]))
    worst_int, margins = 0.0, []
    for a, b in pairs:
        bl = luma(b)
        f = forward_fuse(s1.model, result.model, a, bl, cfg.time_steps, SCHED, seed=0)
        worst_int = max(worst_int, intensity_loss(f, a, bl))
        margins.append(q_abf(a, bl, f) - q_abf(a, bl, 0.5 * (a + bl)))
    ok = (len(result.curves) == 1000 and final < 0.15 and worst_int <= 0.05 and min(margins) > 0
          and elapsed <= 900)
    report(7, ok, f"final total={final:.4f} (<0.15), max intensity={worst_int:.4f} (<=0.05), "
                  f"min q_abf margin over 0.5(A+B)={min(margins):+.4f} (>0), {elapsed:.0f}s")


# ---------------------------------------------------------------- 8-10 (CLI at tiny scale)
TINY = """[data]
resolution = 32
train_pairs_per_task = 2
test_pairs_per_task = 2
root = {root}

[model]
base_width = 4

[stage1]
steps = 20
batch_size = 4

[stage2]
steps = 10
batch_size = 3
"""


def run_all(base, ablate_modes=(), ini=None):
    """Every command into ``base``; a rerun passes the first run's config so only out-dirs differ."""
    if ini is None:
        ini = base / "tiny.ini"
        ini.write_text(TINY.format(root=base / "data"))
    c = ["--config", str(ini)]
    data = base / "data"
    codes = [
        main(["phantom", *c, "--out-dir", str(data)]),
        main(["train-recon", *c, "--out-dir", str(base / "recon")]),
        main(["train-fusion", *c, "--out-dir", str(base / "fusion"), "--recon", str(base / "recon/recon.ckpt")]),
        main(["fuse", *c, "--out-dir", str(base / "fused"), "--recon", str(base / "recon/recon.ckpt"),
              "--fusion", str(base / "fusion/fusion.ckpt")]),
        main(["eval", *c, "--out-dir", str(base / "eval"), "--fused", str(base / "fused")]),
    ]
    for mode in ablate_modes:
        codes.append(main(["ablate", *c, "--mode", mode, "--out-dir", str(base / f"ablate-{mode}"),
                           "--recon", str(base / "recon/recon.ckpt")]))
    return c, codes


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    mp = pytest.MonkeyPatch()
    mp.setenv("SOURCE_DATE_EPOCH", "1700000000")
    base = tmp_path_factory.mktemp("accept")
    c, codes = run_all(base, MODES)
    yield base, c, codes
    mp.undo()


def test_c8_unified_fusion(report, cli_run):
    from dmfuse.config import load
    from dmfuse.pipeline.commands import fuse_pair, load_fusion, load_reconstructor
    base, c, codes = cli_run
    config = load(c[1])
    recon = load_reconstructor(config, base / "recon/recon.ckpt")
    fusion = load_fusion(config, base / "fusion/fusion.ckpt")
    before = parameter_vector(fusion).clone()
    tasks, worst, gray_ok = set(), 0.0, True
    for pair in load_pairs(base / "data" / MANIFEST_NAME, split="test"):
        net, _ = fuse_pair(recon, fusion, config, pair, config.run.seed)
        written = read_png(base / "fused" / pair.task / f"{pair.pair_id}_F.png")
        tasks.add(pair.task)
        if pair.task == "mri-ct":
            gray_ok &= written.ndim == 2
        else:
            gray_ok &= written.ndim == 3
        worst = max(worst, float(np.max(np.abs(luma(written) - net))))
    same = torch.equal(before, parameter_vector(fusion))
    ok = all(code == 0 for code in codes[:5]) and tasks == set(TASKS) and same and gray_ok and worst <= 1 / 255
    report(8, ok, f"one checkpoint fused {sorted(tasks)}, weights unchanged={same}, "
                  f"max |luma(out) - net|={worst * 255:.3f}/255 (<=1/255)")


def test_c9_ablation_harness(report, cli_run):
    base, c, codes = cli_run
    problems = []
    for mode, code in zip(MODES, codes[5:]):
        if code != 0:
            problems.append(f"{mode} exit {code}")
            continue
        table = (base / f"ablate-{mode}" / f"ablation_{mode}.txt").read_text()
        header = next(line for line in table.splitlines() if METRIC_HEADERS[0] in line)
        pos = [header.index(h) for h in METRIC_HEADERS]
        if pos != sorted(pos):
            problems.append(f"{mode} column order")
        for v in variants_for(mode, FusionConfig()):
            if v.label not in table:
                problems.append(f"{mode} missing {v.label}")
    # structural checks of the substitutions
    cfg = FusionConfig().replace(data={"resolution": 32}, model={"base_width": 2})
    no_amff = init_fusion(cfg.replace(fusion={"use_amff": False}))
    fa, fb = torch.randn(1, 4, 8, 8), torch.randn(1, 4, 8, 8)
    if hasattr(no_amff, "amff") or not torch.equal(no_amff.fuse_scale(fa, fb, 2), fa + fb):
        problems.append("w/o AMFF is not addition")
    no_msff = init_fusion(cfg.replace(fusion={"use_msff": False}))
    if hasattr(no_msff, "msff") or no_msff.scales != [4]:
        problems.append("w/o MSFF does not use the final layer only")
    report(9, not problems, "five modes ran, column order kept, substitutions structural"
           if not problems else "; ".join(problems))


def test_c10_determinism(report, cli_run, tmp_path, monkeypatch):
    base, _, _ = cli_run
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    _, codes = run_all(tmp_path, ("no-amff",), ini=base / "tiny.ini")
    diffs = []
    for sub in ("data", "recon", "fusion", "fused", "eval", "ablate-no-amff"):
        m1 = json.loads((base / sub / "manifest.json").read_text())
        m2 = json.loads((tmp_path / sub / "manifest.json").read_text())
        if m1["artifacts"] != m2["artifacts"]:
            diffs.append(sub)
        if (base / sub / "manifest.json").read_bytes() != (tmp_path / sub / "manifest.json").read_bytes():
            diffs.append(f"{sub}/manifest.json")
    n = sum(len(read_run_manifest(base / s / "manifest.json").artifacts)
            for s in ("data", "recon", "fusion", "fused", "eval", "ablate-no-amff"))
    ok = all(code == 0 for code in codes) and not diffs
    report(10, ok, f"{n} artifact digests identical across reruns" if ok else f"differs: {diffs}")
