"""Schedule construction, closed-form noising, reverse step, noise loss."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from diffuda.diffusion import (DiffusionBatch, NoiseSchedule, build_schedule,
                               noise_loss, p_sample_step, q_sample)
from diffuda.exceptions import ShapeMismatchError, TimestepRangeError


def running_product_oracle(betas):
    """Independent float64 running product of (1 - beta)."""
    out = []
    prod = 1.0
    for b in betas:
        prod *= 1.0 - float(b)
        out.append(prod)
    return np.array(out)


class TestBuildSchedule:
    def test_single_step(self):
        s = build_schedule(1, 0.5, 0.5)
        assert s.alpha_bars.tolist() == [0.5]

    def test_two_step(self):
        s = NoiseSchedule(T=2, betas=np.array([0.1, 0.2]))
        assert np.allclose(s.alpha_bars, [0.9, 0.72], atol=1e-15)

    def test_linear_1000_matches_product_oracle(self):
        s = build_schedule(1000, 1e-4, 0.02)
        oracle = running_product_oracle(s.betas)
        rel = np.abs(s.alpha_bars - oracle) / oracle
        assert rel.max() < 1e-10
        # frozen oracle endpoint, computed with the loop above
        assert s.alpha_bars[-1] == pytest.approx(4.035829765375676e-05, rel=1e-10)

    def test_betas_linearly_spaced_inclusive(self):
        s = build_schedule(5, 0.1, 0.3)
        assert s.betas[0] == pytest.approx(0.1)
        assert s.betas[-1] == pytest.approx(0.3)
        assert np.allclose(np.diff(s.betas), 0.05)

    def test_invariants(self):
        s = build_schedule(50, 1e-3, 0.05)
        assert np.all((s.betas > 0) & (s.betas < 1))
        assert np.all(s.alphas == 1.0 - s.betas)
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert np.all((s.alpha_bars > 0) & (s.alpha_bars < 1))
        assert np.allclose(s.alpha_bars[1:], s.alpha_bars[:-1] * s.alphas[1:], rtol=1e-15)

    @pytest.mark.parametrize("T,lo,hi", [(0, 0.1, 0.2), (10, 0.0, 0.2),
                                         (10, 0.3, 0.2), (10, 0.1, 1.0)])
    def test_rejects_bad_ranges(self, T, lo, hi):
        with pytest.raises(ValueError):
            build_schedule(T, lo, hi)

    @given(st.integers(1, 200), st.floats(1e-6, 0.4), st.floats(1e-6, 0.4))
    @settings(max_examples=40, deadline=None)
    def test_property_alpha_bar_recurrence(self, T, a, b):
        lo, hi = min(a, b), max(a, b)
        s = build_schedule(T, lo, hi)
        assert np.all(np.diff(s.alpha_bars) < 0) or T == 1
        oracle = running_product_oracle(s.betas)
        assert np.allclose(s.alpha_bars, oracle, rtol=1e-12)


class TestQSample:
    def test_zero_noise(self, two_step_schedule):
        x0 = torch.full((1, 2, 2), 0.7, dtype=torch.float64)
        out = q_sample(x0, 2, torch.zeros_like(x0), two_step_schedule)
        assert torch.allclose(out, math.sqrt(0.72) * x0)

    def test_zero_signal(self, two_step_schedule):
        x0 = torch.zeros(2, 3, 3, dtype=torch.float64)
        out = q_sample(x0, 2, torch.ones_like(x0), two_step_schedule)
        assert torch.allclose(out, torch.full_like(x0, math.sqrt(0.28)))

    def test_scalar_derived_case(self, two_step_schedule):
        # float64 hand oracle: sqrt(0.72)*1 + sqrt(0.28)*0.5
        out = q_sample(torch.tensor(1.0, dtype=torch.float64), 2,
                       torch.tensor(0.5, dtype=torch.float64), two_step_schedule)
        assert float(out) == pytest.approx(1.1131032685303162, abs=1e-10)

    def test_timestep_out_of_range(self, two_step_schedule):
        x = torch.zeros(2, 2)
        with pytest.raises(TimestepRangeError):
            q_sample(x, 3, torch.zeros_like(x), two_step_schedule)
        with pytest.raises(TimestepRangeError):
            q_sample(x, 0, torch.zeros_like(x), two_step_schedule)

    def test_shape_mismatch(self, two_step_schedule):
        with pytest.raises(ShapeMismatchError):
            q_sample(torch.zeros(2, 2), 1, torch.zeros(3, 3), two_step_schedule)

    def test_per_sample_timesteps(self, two_step_schedule):
        x0 = torch.ones(2, 1, 1, 1, dtype=torch.float64)
        eps = torch.zeros_like(x0)
        out = q_sample(x0, torch.tensor([1, 2]), eps, two_step_schedule)
        assert float(out[0]) == pytest.approx(math.sqrt(0.9))
        assert float(out[1]) == pytest.approx(math.sqrt(0.72))

    @given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-4, 4))
    @settings(max_examples=50, deadline=None)
    def test_linearity(self, two_step_schedule, x0v, epsv, a):
        x0 = torch.tensor(x0v, dtype=torch.float64)
        eps = torch.tensor(epsv, dtype=torch.float64)
        lhs = q_sample(a * x0, 1, a * eps, two_step_schedule)
        rhs = a * q_sample(x0, 1, eps, two_step_schedule)
        assert float(lhs) == pytest.approx(float(rhs), abs=1e-12)


class TestPSampleStep:
    def test_zero_denoiser_collapses(self, stub_denoiser):
        s = NoiseSchedule(T=1, betas=np.array([0.1]))  # alpha = 0.9
        x = torch.full((3, 4, 4), 2.0, dtype=torch.float64)
        out = p_sample_step(x, 1, s, stub_denoiser(0.0), torch.zeros_like(x))
        assert torch.allclose(out, x / math.sqrt(0.9))

    def test_t1_zero_z_is_deterministic(self, two_step_schedule, stub_denoiser):
        x = torch.randn(3, 4, 4, dtype=torch.float64)
        a = p_sample_step(x, 1, two_step_schedule, stub_denoiser(0.3), torch.zeros_like(x))
        b = p_sample_step(x, 1, two_step_schedule, stub_denoiser(0.3), torch.zeros_like(x))
        assert torch.equal(a, b)

    def test_scalar_derived_case(self, two_step_schedule, stub_denoiser):
        # float64 hand oracle: (1/sqrt(0.8))*(1 - (0.2/sqrt(0.28))*0.5) + sqrt(0.2)
        out = p_sample_step(torch.tensor(1.0, dtype=torch.float64), 2,
                            two_step_schedule, stub_denoiser(0.5),
                            torch.tensor(1.0, dtype=torch.float64))
        assert float(out) == pytest.approx(1.3539590205677237, abs=1e-10)

    def test_range_and_shape_errors(self, two_step_schedule, stub_denoiser):
        x = torch.zeros(3, 2, 2)
        with pytest.raises(TimestepRangeError):
            p_sample_step(x, 5, two_step_schedule, stub_denoiser(), torch.zeros_like(x))
        with pytest.raises(ShapeMismatchError):
            p_sample_step(x, 1, two_step_schedule, stub_denoiser(), torch.zeros(1, 1))


class TestNoiseLoss:
    def _batch(self, n=4, dtype=torch.float32):
        x0 = torch.zeros(n, 1, 2, 2, dtype=dtype)
        return DiffusionBatch(x0, ["source"] * n)

    def test_perfect_denoiser_zero_loss(self, tiny_schedule):
        class Oracle(torch.nn.Module):
            """Recovers the exact eps by inverting q_sample on x0 = 0."""
            def forward(self, x, t):
                return x / torch.sqrt(1 - torch.as_tensor(
                    tiny_schedule.alpha_bars[t.numpy() - 1],
                    dtype=x.dtype)).reshape(-1, 1, 1, 1)

        g = torch.Generator().manual_seed(0)
        loss = noise_loss(Oracle(), self._batch(), tiny_schedule, g)
        assert float(loss) == pytest.approx(0.0, abs=1e-9)

    def test_zero_denoiser_estimates_unit_variance(self, tiny_schedule, stub_denoiser):
        # E[eps^2] = 1; Monte-Carlo mean over >= 1e4 noise samples
        g = torch.Generator().manual_seed(1)
        x0 = torch.zeros(64, 1, 16, 16)
        batch = DiffusionBatch(x0, ["source"] * 64)
        vals = [float(noise_loss(stub_denoiser(0.0), batch, tiny_schedule, g))
                for _ in range(4)]  # 4 * 64 * 256 = 65536 samples
        assert np.mean(vals) == pytest.approx(1.0, abs=0.05)

    def test_nonnegative(self, tiny_schedule, stub_denoiser):
        g = torch.Generator().manual_seed(2)
        for v in (-1.0, 0.0, 2.0):
            loss = noise_loss(stub_denoiser(v), self._batch(), tiny_schedule, g)
            assert float(loss) >= 0.0

    def test_batch_invariants(self):
        with pytest.raises(ValueError):
            DiffusionBatch(torch.zeros(0, 1, 2, 2), [])
        with pytest.raises(ValueError):
            DiffusionBatch(torch.full((1, 1, 2, 2), 1.5), ["source"])
        with pytest.raises(ShapeMismatchError):
            DiffusionBatch(torch.zeros(2, 1, 2, 2), ["source"])


class TestForwardProcessDistribution:
    def test_stepwise_matches_closed_form(self):
        """Iterating the one-step forward kernel t times agrees with the
        closed form in mean and std (2% over 1e5 scalar samples)."""
        s = build_schedule(1000, 1e-4, 0.02)
        t, n = 50, 100_000
        rng = np.random.default_rng(123)
        x = np.ones(n)
        for step in range(1, t + 1):
            beta = s.betas[step - 1]
            x = np.sqrt(1.0 - beta) * x + np.sqrt(beta) * rng.standard_normal(n)
        expect_mean = np.sqrt(s.alpha_bars[t - 1])
        expect_std = np.sqrt(1.0 - s.alpha_bars[t - 1])
        assert abs(x.mean() - expect_mean) / expect_mean < 0.02
        assert abs(x.std() - expect_std) / expect_std < 0.02


class TestNoiseLossGradient:
    def test_matches_central_finite_differences(self, tiny_schedule):
        """Tiny two-parameter denoiser on a 1-pixel input, float64."""
        class TinyDenoiser(torch.nn.Module):
            def __init__(self):
                super().__init__()
                self.w = torch.nn.Parameter(torch.tensor(0.37, dtype=torch.float64))
                self.b = torch.nn.Parameter(torch.tensor(-0.21, dtype=torch.float64))

            def forward(self, x, t):
                return self.w * x + self.b

        x0 = torch.full((1, 1, 1, 1), 0.5, dtype=torch.float64)
        batch = DiffusionBatch(x0, ["source"])

        def loss_at(w, b):
            net = TinyDenoiser()
            with torch.no_grad():
                net.w.copy_(torch.tensor(w, dtype=torch.float64))
                net.b.copy_(torch.tensor(b, dtype=torch.float64))
            g = torch.Generator().manual_seed(7)
            return float(noise_loss(net, batch, tiny_schedule, g).detach())

        net = TinyDenoiser()
        g = torch.Generator().manual_seed(7)
        loss = noise_loss(net, batch, tiny_schedule, g)
        loss.backward()
        h = 1e-6
        for name, analytic in (("w", float(net.w.grad)), ("b", float(net.b.grad))):
            w0, b0 = 0.37, -0.21
            if name == "w":
                fd = (loss_at(w0 + h, b0) - loss_at(w0 - h, b0)) / (2 * h)
            else:
                fd = (loss_at(w0, b0 + h) - loss_at(w0, b0 - h)) / (2 * h)
            assert abs(analytic - fd) / max(abs(fd), 1e-12) < 1e-3
