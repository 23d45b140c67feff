"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 8 and 9 train real models on the synthetic corpus through the CLI
and take tens of minutes on a CPU; everything else runs in seconds.
"""

import math
import time

import mpmath as mp
import numpy as np
import pytest
import torch

from diffseg import checkpoint as ckpt_io
from diffseg.cli import EXIT_OK, main
from diffseg.data import PatchBank, generate_synthetic, load_dataset
from diffseg.diffusion import NoiseSchedule, make_linear_schedule, posterior_params, q_sample
from diffseg.features import extract
from diffseg.metrics import confusion, evaluate_dataset, f1, iou, read_keyvalue, write_report
from diffseg.network import ConditionalUNet, DenoiserConfig
from diffseg.patcher import split, stitch
from diffseg.sampler import SamplerConfig, alpha_bar_at, ancestral_sample, ode_sample
from diffseg.trainer import TrainConfig, init_state, run_training, train_step
from oracles import brute_confusion, conjugate_posterior, gaussian_flow_endpoint, simulate_chain

mp.mp.dps = 50

# Training budget per variant for criteria 8 and 9 (same for all four).
BUDGET_STEPS = 800
CHECKPOINT_EVERY = 200
DESK = ["--preset", "desk"]

DESK_CONFIG = dict(
    batch_size=16,
    denoiser={"base_channels": 16, "channel_multipliers": [1, 2, 4], "attention_heads": 4},
    backbone={"kind": "random", "channel_counts": [16, 32, 64], "seed": 0},
)


def rel_err(a, b):
    return abs(float(a) - float(b)) / abs(float(b))


# ------------------------------------------------------------------ 1

def test_criterion_01_posterior_oracle(acceptance):
    rng = np.random.default_rng(1)
    worst, collapsed, checked = 0.0, True, 0
    start = time.perf_counter()
    for k in range(100):
        n = int(rng.integers(1, 51))
        if k % 2:
            lo = rng.uniform(1e-4, 0.05)
            schedule = make_linear_schedule(n, lo, rng.uniform(lo, 0.5))
        else:
            schedule = NoiseSchedule(rng.uniform(1e-4, 0.6, n))
        betas = [mp.mpf(float(b)) for b in schedule.betas]
        for t in range(1, n + 1):
            x0, xt = rng.uniform(-1, 1), rng.normal()
            mean, var = posterior_params(torch.tensor([x0], dtype=torch.float64),
                                         torch.tensor([xt], dtype=torch.float64), t, schedule)
            m_o, v_o = conjugate_posterior(betas, t, mp.mpf(x0), mp.mpf(xt))
            worst = max(worst, rel_err(mean.item(), m_o))
            if t == 1:
                collapsed &= var == 0.0 and mean.item() == x0
            else:
                worst = max(worst, rel_err(var, v_o))
            checked += 1
    elapsed = time.perf_counter() - start
    ok = worst < 1e-10 and collapsed and elapsed < 10
    acceptance(1, "posterior vs conjugate-Gaussian oracle", ok,
               f"{checked} cases, max rel err {worst:.2e} (< 1e-10), t=1 collapse exact={collapsed}, "
               f"{elapsed:.1f}s")


# ------------------------------------------------------------------ 2

def test_criterion_02_forward_moments(acceptance):
    schedule = make_linear_schedule(1000, 1e-4, 0.02)
    n, x0 = 10_000, 0.7
    gen = torch.Generator().manual_seed(2)
    details, ok = [], True
    for t in (1, 500, 1000):
        noise = torch.randn(n, generator=gen, dtype=torch.float64)
        x = q_sample(torch.full((n,), x0, dtype=torch.float64), t, noise, schedule).numpy()
        ab = float(schedule.alpha_bars[t - 1])
        mean_true, var_true = math.sqrt(ab) * x0, 1 - ab
        z_mean = abs(x.mean() - mean_true) / math.sqrt(var_true / n)
        z_var = abs(x.var(ddof=1) - var_true) / (var_true * math.sqrt(2 / (n - 1)))
        ok &= z_mean < 3 and z_var < 3
        details.append(f"t={t}: |z_mean|={z_mean:.2f} |z_var|={z_var:.2f}")
    acceptance(2, "forward-process moments (3 SE)", ok, "; ".join(details))


# ------------------------------------------------------------------ 3

def test_criterion_03_chain_vs_closed_form(acceptance):
    rng = np.random.default_rng(3)
    n, x0 = 100_000, -0.4
    details, ok = [], True
    for name, schedule in (("linear(1e-4,0.02)", make_linear_schedule(1000, 1e-4, 0.02)),
                           ("linear(0.05,0.3),N=5", make_linear_schedule(5, 0.05, 0.3))):
        worst = 0.0
        for t in range(1, 6):
            x = simulate_chain(x0, schedule.betas, t, n, rng)
            ab = float(schedule.alpha_bars[t - 1])
            mean_true, var_true = math.sqrt(ab) * x0, float(schedule.one_minus_alpha_bars[t - 1])
            z_mean = abs(x.mean() - mean_true) / math.sqrt(var_true / n)
            z_var = abs(x.var(ddof=1) - var_true) / (var_true * math.sqrt(2 / (n - 1)))
            ok &= z_mean < 3 and z_var < 3
            worst = max(worst, z_mean, z_var)
        details.append(f"{name}: max |z| over t=1..5 = {worst:.2f}")
    acceptance(3, "stepwise chain vs closed form (3 SE)", ok, "; ".join(details))


# ------------------------------------------------------------------ 4

MU, SD = 0.5, 0.3
TOY = make_linear_schedule(50, 0.002, 0.4)


def bayes_denoiser(x, t, y, pyramid):
    ab = float(alpha_bar_at(TOY, float(t)))
    return MU + math.sqrt(ab) * SD ** 2 / (ab * SD ** 2 + 1 - ab) * (x - math.sqrt(ab) * MU)


def test_criterion_04_toy_sampler(acceptance):
    """Each of the 10^4 batch elements is an independent chain (one seeded stream per run)."""
    n = 10_000
    start = time.perf_counter()
    anc = ancestral_sample(bayes_denoiser, None, None, TOY, SamplerConfig(method="ancestral", num_steps=50,
                           seed=41, clip_denoised=False), shape=(n,), dtype=torch.float64)
    ode = ode_sample(bayes_denoiser, None, None, TOY, SamplerConfig(num_steps=5, seed=42, clip_denoised=False),
                     shape=(n,), dtype=torch.float64)
    gap = abs(ode.mean().item() - anc.mean().item())

    start_noise = torch.randn((n,), generator=torch.Generator().manual_seed(43), dtype=torch.float64).numpy()
    exact = gaussian_flow_endpoint(start_noise, MU, SD, float(TOY.alpha_bars[-1]))
    errs, ses = [], []
    for k in (1, 2, 5, 10):
        out = ode_sample(bayes_denoiser, None, None, TOY, SamplerConfig(num_steps=k, seed=43, clip_denoised=False),
                         shape=(n,), dtype=torch.float64).numpy()
        d = np.abs(out - exact)
        errs.append(d.mean())
        ses.append(d.std(ddof=1) / math.sqrt(n))
    monotone = all(errs[i + 1] <= errs[i] + ses[i] for i in range(3))
    elapsed = time.perf_counter() - start
    ok = gap < 0.05 * SD and monotone and elapsed < 120
    acceptance(4, "toy Gaussian: ODE vs ancestral, error vs budget", ok,
               f"|mean gap|={gap:.4f} (< {0.05 * SD:.3f}); MAE to exact flow at 1/2/5/10 steps = "
               + "/".join(f"{e:.4f}" for e in errs) + f"; {elapsed:.1f}s")


# ------------------------------------------------------------------ 5

def test_criterion_05_metrics_oracle(acceptance, tmp_path):
    rng = np.random.default_rng(5)
    mismatches = 0
    pairs = []
    for _ in range(200):
        density = rng.uniform(0, 1, 2)
        pred = (rng.random((8, 8)) < density[0]).astype(np.uint8)
        gt = (rng.random((8, 8)) < density[1]).astype(np.uint8)
        pairs.append((pred, gt))
        c = confusion(pred, gt)
        tp, fp, fn, tn = brute_confusion(pred.tolist(), gt.tolist())
        want_iou = tp / (tp + fp + fn) if tp + fp + fn else 1.0
        want_f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 1.0
        mismatches += (c.tp, c.fp, c.fn, c.tn) != (tp, fp, fn, tn) or iou(c) != want_iou or f1(c) != want_f1
    # emit reports (one per pair plus the micro aggregate) and check the identity on the files
    report = evaluate_dataset(lambda pred: pred, pairs)
    write_report(report, tmp_path)
    kv = read_keyvalue(tmp_path / "metrics.txt")
    keys = ["iou"] + [f"image.{r.image_id}.iou" for r in report.per_image]
    worst = max(abs(float(kv[k.replace("iou", "f1")]) - 2 * float(kv[k]) / (1 + float(kv[k]))) for k in keys)
    ok = mismatches == 0 and worst < 1e-12
    acceptance(5, "metrics vs brute force + report identity", ok,
               f"{mismatches} mismatches over 200 pairs; max |f1 - 2iou/(1+iou)| on {len(keys)} "
               f"emitted rows = {worst:.1e}")


# ------------------------------------------------------------------ 6

def test_criterion_06_patcher_round_trip(acceptance):
    rng = np.random.default_rng(6)
    exact = 0
    for _ in range(20):
        p = int(rng.choice([8, 16, 32, 64]))
        h, w, c = p * int(rng.integers(1, 6)), p * int(rng.integers(1, 6)), int(rng.integers(1, 5))
        x = rng.standard_normal((h, w, c)).astype(rng.choice([np.float32, np.float64]))
        patches, grid = split(x, p)
        exact += np.array_equal(stitch(patches, grid), x) and stitch(patches, grid).dtype == x.dtype
    acceptance(6, "patcher round trip", exact == 20, f"{exact}/20 bit-exact")


# ------------------------------------------------------------------ 7

def test_criterion_07_network(acceptance, tmp_path):
    cfg = TrainConfig(**DESK_CONFIG)
    state = init_state(cfg)
    model, backbone = state.model, state.backbone
    g = torch.Generator().manual_seed(7)
    shapes_ok, live_ok = True, True
    for size in (64, 128):
        y = torch.rand(2, 3, size, size, generator=g)
        xt = torch.randn(2, 1, size, size, generator=g)
        pyr = extract(y, backbone)
        with torch.no_grad():
            out = model(xt, torch.tensor([10, 800]), y, pyr)
            shapes_ok &= out.shape == xt.shape
            live_ok &= not torch.allclose(out, model(xt, torch.tensor([10, 800]), y.flip(-1), pyr))
            live_ok &= not torch.allclose(out, model(xt, torch.tensor([10, 800]), y, pyr.map(torch.zeros_like)))

    m64 = ConditionalUNet(DenoiserConfig.from_dict(model.config.to_dict())).double()
    m64.load_state_dict(model.state_dict())
    y = torch.rand(1, 3, 64, 64, generator=g, dtype=torch.float64)
    xt = torch.randn(1, 1, 64, 64, generator=g, dtype=torch.float64)
    pyr = extract(y.float(), backbone).map(lambda v: v.double())
    t = torch.tensor([300.0], dtype=torch.float64)
    m64.zero_grad()
    m64(xt, t, y, pyr).pow(2).mean().backward()
    params = list(m64.parameters())
    worst, checked = 0.0, 0
    while checked < 5:
        p = params[int(torch.randint(len(params), (1,), generator=g))]
        i = int(torch.randint(p.numel(), (1,), generator=g))
        auto = p.grad.view(-1)[i].item()
        if abs(auto) < 1e-8:
            continue
        h = 1e-6
        with torch.no_grad():
            orig = p.view(-1)[i].item()
            p.view(-1)[i] = orig + h
            up = m64(xt, t, y, pyr).pow(2).mean().item()
            p.view(-1)[i] = orig - h
            down = m64(xt, t, y, pyr).pow(2).mean().item()
            p.view(-1)[i] = orig
        worst = max(worst, abs((up - down) / (2 * h) - auto) / abs(auto))
        checked += 1

    root = tmp_path / "data"
    train_m, _ = generate_synthetic(root, 8, (64, 64), seed=7, test_fraction=0.0)
    bank = PatchBank(list(load_dataset(train_m)), 64, 4, 0)
    before = backbone.parameter_hash()
    schedule = cfg.diffusion.build()
    for k in range(10):
        state, _ = train_step(state, bank.batch(k), schedule, cfg)
    hash_ok = state.backbone.parameter_hash() == before
    ok = shapes_ok and live_ok and worst < 1e-3 and hash_ok
    acceptance(7, "network contract, liveness, gradients, frozen backbone", ok,
               f"shapes={shapes_ok} liveness={live_ok} max FD rel err={worst:.1e} (< 1e-3) "
               f"backbone hash constant={hash_ok}")


# ------------------------------------------------------------------ 8, 9

@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance") / "synthetic"
    assert main(["prepare-synthetic", "--count", "250", "--size", "64x64", "--seed", "0",
                 "--test-fraction", "0.2", "--out-dir", str(root)]) == EXIT_OK
    return root


def train_and_eval(corpus, variant):
    out = corpus.parent / variant
    start = time.perf_counter()
    code = main(["train", "--data", str(corpus), *DESK, "--ablation", variant, "--max-steps", str(BUDGET_STEPS),
                 "--checkpoint-every", str(CHECKPOINT_EVERY), "--seed", "0", "--out-dir", str(out)])
    assert code == EXIT_OK
    ckpt = ckpt_io.latest_checkpoint(out)
    code = main(["eval", "--checkpoint", str(ckpt), "--data", str(corpus), "--split", "test",
                 "--steps", "5", "--out-dir", str(out / "eval")])
    assert code == EXIT_OK
    kv = read_keyvalue(out / "eval" / "metrics.txt")
    return {"iou": float(kv["iou"]), "f1": float(kv["f1"]), "num_images": int(kv["num_images"]),
            "seconds": time.perf_counter() - start, "dir": out}


@pytest.fixture(scope="module")
def full_run(corpus):
    return train_and_eval(corpus, "full")


def test_criterion_08_end_to_end(acceptance, corpus, full_run):
    n_train = len((corpus / "train.manifest").read_text().split("file =")) - 1
    identity = abs(full_run["f1"] - 2 * full_run["iou"] / (1 + full_run["iou"])) < 1e-12
    ok = (full_run["iou"] >= 0.80 and full_run["f1"] >= 0.88 and full_run["num_images"] == 50
          and n_train == 200 and identity and full_run["seconds"] < 4 * 3600)
    acceptance(8, "synthetic end-to-end, full variant via eval", ok,
               f"IoU={full_run['iou']:.4f} (>= 0.80) F1={full_run['f1']:.4f} (>= 0.88) on "
               f"{full_run['num_images']} test images after {BUDGET_STEPS} steps, {full_run['seconds']:.0f}s")


def test_criterion_09_ablation_ordering(acceptance, corpus, full_run):
    results = {"full": full_run}
    start = time.perf_counter()
    for variant in ("A1", "A2", "A3"):
        results[variant] = train_and_eval(corpus, variant)
    elapsed = time.perf_counter() - start + full_run["seconds"]
    reports_ok = all((r["dir"] / "eval" / "metrics.txt").is_file() and (r["dir"] / "eval" / "metrics_table.txt")
                     .is_file() and r["num_images"] == 50 for r in results.values())
    ordering = results["full"]["iou"] >= results["A1"]["iou"] - 0.01
    ok = ordering and reports_ok and elapsed <= 4 * full_run["seconds"]
    summary = " ".join(f"{v}={r['iou']:.4f}/{r['f1']:.4f}" for v, r in results.items())
    acceptance(9, "ablation ordering, matched budgets", ok,
               f"IoU/F1 {summary}; full >= A1 - 0.01: {ordering}; reports={reports_ok}; "
               f"{elapsed:.0f}s total (<= 4x criterion 8)")


# ------------------------------------------------------------------ 10

def test_criterion_10_determinism_and_resume(acceptance, tmp_path):
    start = time.perf_counter()
    train_m, _ = generate_synthetic(tmp_path / "data", 20, (64, 64), seed=10, test_fraction=0.0)
    cfg = TrainConfig(**DESK_CONFIG, max_steps=10, checkpoint_every=5, seed=4, val_fraction=0.0)

    def params(path):
        return ckpt_io.load_checkpoint(path)["model_state"]

    a, _ = run_training(cfg, train_m, tmp_path / "a")
    b, _ = run_training(cfg, train_m, tmp_path / "b")
    same_seed = all(torch.equal(v, params(b)[k]) for k, v in params(a).items())

    run_training(cfg, train_m, tmp_path / "c", stop_at=3)
    c, _ = run_training(cfg, train_m, tmp_path / "c")
    resumed = all(torch.equal(v, params(c)[k]) for k, v in params(a).items())
    elapsed = time.perf_counter() - start
    ok = same_seed and resumed and elapsed < 300
    acceptance(10, "determinism and resume", ok,
               f"same-seed 10-step runs bit-identical={same_seed}; interrupted at 3 and resumed "
               f"to 10 bit-identical={resumed}; {elapsed:.0f}s")
