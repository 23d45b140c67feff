import math

import numpy as np
import pytest
import torch

from diffseg.diffusion import make_linear_schedule
from diffseg.features import RandomConvBackbone, extract
from diffseg.network import ConditionalUNet, DenoiserConfig
from diffseg.sampler import (
    SamplerConfig,
    alpha_bar_at,
    ancestral_sample,
    half_log_snr,
    ode_sample,
    ode_time_grid,
    segment,
    step_from_lambda,
)
from oracles import gaussian_flow_endpoint

MU, SD = 0.5, 0.3
TOY = make_linear_schedule(50, 0.002, 0.4)


def bayes_denoiser(schedule, mu=MU, sd=SD):
    """E[x0 | x_s] for x0 ~ N(mu, sd^2), valid at fractional steps."""

    def fn(x, t, y, pyramid):
        ab = float(alpha_bar_at(schedule, float(t)))
        gain = math.sqrt(ab) * sd ** 2 / (ab * sd ** 2 + 1 - ab)
        return mu + gain * (x - math.sqrt(ab) * mu)

    return fn


def constant_denoiser(m):
    return lambda x, t, y, p: m.expand_as(x).clone()


def first_noise(seed, shape):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


class TestSchedule:
    def test_interpolation_hits_table(self):
        s = make_linear_schedule(100, 1e-3, 0.05)
        assert np.allclose(alpha_bar_at(s, np.arange(1, 101)), s.alpha_bars, rtol=1e-12)
        assert alpha_bar_at(s, 0.0) == 1.0

    def test_lambda_inverse(self):
        s = make_linear_schedule(1000, 1e-4, 0.02)
        steps = np.array([1.0, 3.5, 250.0, 999.25, 1000.0])
        assert np.allclose(step_from_lambda(s, half_log_snr(s, steps)), steps, atol=1e-6)

    def test_grid(self):
        s = make_linear_schedule(1000, 1e-4, 0.02)
        g = ode_time_grid(s, 5)
        assert g[0] == 1000 and g[-2] == 1 and g[-1] == 0 and len(g) == 6
        lams = half_log_snr(s, g[:-1])
        assert np.allclose(np.diff(lams), np.diff(lams)[0], rtol=1e-6)
        assert ode_time_grid(s, 1).tolist() == [1000.0, 0.0]


class TestFixedPoint:
    m = torch.tensor([[[[0.3, -0.7], [1.0, -1.0]]]], dtype=torch.float64)

    @pytest.mark.parametrize("steps", [1, 2, 5, 13])
    def test_ode(self, steps):
        s = make_linear_schedule(100, 1e-3, 0.05)
        out = ode_sample(constant_denoiser(self.m), None, None, s, SamplerConfig(num_steps=steps, seed=4),
                         shape=self.m.shape, dtype=torch.float64)
        assert torch.equal(out, self.m)

    def test_ancestral(self):
        s = make_linear_schedule(100, 1e-3, 0.05)
        out = ancestral_sample(constant_denoiser(self.m), None, None, s,
                               SamplerConfig(method="ancestral", seed=4), shape=self.m.shape, dtype=torch.float64)
        assert torch.equal(out, self.m)

    def test_single_step_schedule(self):
        s = make_linear_schedule(1, 0.5, 0.5)
        seen = []

        def den(x, t, y, p):
            seen.append(x.clone())
            return torch.tanh(x)

        out = ancestral_sample(den, None, None, s, SamplerConfig(method="ancestral", num_steps=1, seed=8),
                               shape=(1, 1, 4, 4), dtype=torch.float64)
        assert len(seen) == 1 and torch.equal(out, torch.tanh(seen[0]))

    def test_one_ode_step_is_single_jump(self):
        s = make_linear_schedule(1000, 1e-4, 0.02)
        den = bayes_denoiser(s)
        out = ode_sample(den, None, None, s, SamplerConfig(num_steps=1, seed=3, clip_denoised=False),
                         shape=(100,), dtype=torch.float64)
        assert torch.allclose(out, den(first_noise(3, (100,)), 1000, None, None), atol=0, rtol=0)


class TestErrors:
    def test_unseeded(self):
        with pytest.raises(ValueError, match="seed"):
            ode_sample(constant_denoiser(torch.zeros(1)), None, None, TOY, SamplerConfig(seed=None), shape=(1,))

    def test_too_many_steps(self):
        with pytest.raises(ValueError):
            ode_sample(constant_denoiser(torch.zeros(1)), None, None, TOY, SamplerConfig(num_steps=51), shape=(1,))

    def test_bad_method(self):
        with pytest.raises(ValueError):
            SamplerConfig(method="euler").validate(TOY)


class TestToyGaussian:
    n = 10_000

    def test_ancestral_mean(self):
        out = ancestral_sample(bayes_denoiser(TOY), None, None, TOY,
                               SamplerConfig(method="ancestral", seed=11, clip_denoised=False),
                               shape=(self.n,), dtype=torch.float64)
        assert abs(out.mean().item() - MU) < 3 * out.std().item() / math.sqrt(self.n)

    def test_ode_matches_ancestral(self):
        anc = ancestral_sample(bayes_denoiser(TOY), None, None, TOY,
                               SamplerConfig(method="ancestral", seed=12, clip_denoised=False),
                               shape=(self.n,), dtype=torch.float64)
        ode = ode_sample(bayes_denoiser(TOY), None, None, TOY,
                         SamplerConfig(num_steps=5, seed=13, clip_denoised=False),
                         shape=(self.n,), dtype=torch.float64)
        assert abs(ode.mean().item() - anc.mean().item()) < 0.05 * SD

    def test_error_shrinks_with_budget(self):
        start = first_noise(14, (self.n,)).numpy()
        exact = gaussian_flow_endpoint(start, MU, SD, float(TOY.alpha_bars[-1]))
        errs, ses = [], []
        for k in (1, 2, 5, 10):
            out = ode_sample(bayes_denoiser(TOY), None, None, TOY,
                             SamplerConfig(num_steps=k, seed=14, clip_denoised=False),
                             shape=(self.n,), dtype=torch.float64).numpy()
            d = np.abs(out - exact)
            errs.append(d.mean())
            ses.append(d.std() / math.sqrt(self.n))
        for i in range(3):
            assert errs[i + 1] <= errs[i] + ses[i], errs

    def test_deterministic(self):
        cfg = SamplerConfig(num_steps=5, seed=21, clip_denoised=False)
        a = ode_sample(bayes_denoiser(TOY), None, None, TOY, cfg, shape=(64,), dtype=torch.float64)
        b = ode_sample(bayes_denoiser(TOY), None, None, TOY, cfg, shape=(64,), dtype=torch.float64)
        assert torch.equal(a, b)


@pytest.fixture(scope="module")
def small_model():
    torch.manual_seed(0)
    cfg = DenoiserConfig(base_channels=8, channel_multipliers=(1, 2, 2), mapper_channels=(8, 16, 32), attention_heads=2)
    return ConditionalUNet(cfg).eval(), RandomConvBackbone((8, 16, 32), seed=0)


class TestSegment:
    def test_single_patch(self, small_model):
        model, bb = small_model
        s = make_linear_schedule(1000, 1e-4, 0.02)
        img = np.random.default_rng(0).random((64, 64, 3)).astype(np.float32)
        cfg = SamplerConfig(num_steps=5, seed=2)
        seg = segment(model, img, bb, s, cfg, patch_size=64)
        y = torch.from_numpy(img).permute(2, 0, 1)[None]
        direct = ode_sample(model, y, extract(y, bb), s, cfg).clamp(-1, 1)[0, 0].numpy()
        assert np.array_equal(seg.continuous, direct)
        assert np.array_equal(seg.binary, (direct > 0).astype(np.uint8))

    def test_output_dims_and_determinism(self, small_model):
        model, bb = small_model
        s = make_linear_schedule(1000, 1e-4, 0.02)
        img = np.random.default_rng(1).random((128, 192, 3)).astype(np.float32)
        cfg = SamplerConfig(num_steps=3, seed=5)
        a = segment(model, img, bb, s, cfg, patch_size=64, batch_size=4)
        b = segment(model, img, bb, s, cfg, patch_size=64, batch_size=4)
        assert a.binary.shape == (128, 192)
        assert set(np.unique(a.binary)) <= {0, 1}
        assert np.array_equal(a.continuous, b.continuous)
        assert a.continuous.min() >= -1 and a.continuous.max() <= 1

    def test_indivisible_image(self, small_model):
        model, bb = small_model
        with pytest.raises(ValueError):
            segment(model, np.zeros((70, 64, 3)), bb, TOY, SamplerConfig(num_steps=2))
