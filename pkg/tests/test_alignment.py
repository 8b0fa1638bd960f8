"""Gradient reversal, discriminator loss oracles, combined stage-1 loss."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from diffuda.alignment import (DomainDiscriminator, GradientReversal,
                               discriminator_loss, grl_apply, grl_ramp,
                               stage1_loss)


class TestGRL:
    def test_forward_identity(self):
        x = torch.randn(3, 5)
        assert torch.equal(grl_apply(x, 2.5), x)

    def test_backward_flips_and_scales(self):
        x = torch.randn(4, requires_grad=True)
        grl_apply(x, 1.0).sum().backward()
        assert torch.allclose(x.grad, torch.full_like(x, -1.0))

    def test_zero_coefficient_kills_gradient(self):
        x = torch.randn(4, requires_grad=True)
        grl_apply(x, 0.0).sum().backward()
        assert torch.allclose(x.grad, torch.zeros_like(x))

    @pytest.mark.parametrize("coef", [0.25, 1.0, 3.0])
    def test_matches_negative_fd_of_identity(self, coef):
        """Analytic gradient through the GRL vs -coef x finite differences
        of the same scalar function without the GRL (float64)."""
        x = torch.randn(6, dtype=torch.float64, requires_grad=True)

        def f(v):
            return (v ** 3 + 2.0 * v).sum()

        f(grl_apply(x, coef)).backward()
        h = 1e-6
        for i in range(6):
            xp = x.detach().clone(); xp[i] += h
            xm = x.detach().clone(); xm[i] -= h
            fd = (float(f(xp)) - float(f(xm))) / (2 * h)
            assert abs(float(x.grad[i]) - (-coef * fd)) / max(abs(coef * fd), 1e-12) < 1e-4

    def test_module_wrapper(self):
        layer = GradientReversal(0.5)
        x = torch.randn(3, requires_grad=True)
        layer(x).sum().backward()
        assert torch.allclose(x.grad, torch.full_like(x, -0.5))


class TestDiscriminatorLoss:
    def test_half_probability_1x1(self):
        loss = discriminator_loss(torch.tensor([[0.5]]), torch.tensor([[0.5]]))
        assert float(loss) == pytest.approx(2 * math.log(2), abs=1e-6)

    def test_perfect_discrimination_limit(self):
        loss = discriminator_loss(torch.tensor([[1.0 - 1e-9]]), torch.tensor([[1e-9]]))
        assert float(loss) == pytest.approx(0.0, abs=1e-5)

    def test_2x2_hand_summed_oracle(self):
        ds = torch.tensor([[0.9, 0.8], [0.7, 0.6]], dtype=torch.float64)
        dt = torch.tensor([[0.1, 0.2], [0.3, 0.4]], dtype=torch.float64)
        oracle = -(sum(math.log(v) for v in ds.flatten().tolist())
                   + sum(math.log(1.0 - v) for v in dt.flatten().tolist()))
        assert float(discriminator_loss(ds, dt)) == pytest.approx(oracle, abs=1e-6)
        assert oracle == pytest.approx(2.3920092693535184, abs=1e-12)

    def test_batch_mean_pixel_sum(self):
        one = torch.full((1, 1, 2, 2), 0.5)
        two = torch.cat([one, one])
        # two identical batch elements average to the single-element loss
        assert float(discriminator_loss(two, two)) == pytest.approx(
            float(discriminator_loss(one, one)), abs=1e-6)
        # but doubling the pixel count doubles the loss
        wide = torch.full((1, 1, 2, 4), 0.5)
        assert float(discriminator_loss(wide, wide)) == pytest.approx(
            2 * float(discriminator_loss(one, one)), rel=1e-6)

    def test_extreme_probabilities_clamped(self):
        loss = discriminator_loss(torch.tensor([[0.0]]), torch.tensor([[1.0]]))
        assert torch.isfinite(loss)

    @given(st.floats(0.05, 0.95), st.floats(0.05, 0.95), st.floats(0.01, 0.04))
    @settings(max_examples=40, deadline=None)
    def test_monotonicity(self, ps, pt, delta):
        base = float(discriminator_loss(torch.tensor([[ps]]), torch.tensor([[pt]])))
        better_s = float(discriminator_loss(torch.tensor([[ps + delta]]),
                                            torch.tensor([[pt]])))
        better_t = float(discriminator_loss(torch.tensor([[ps]]),
                                            torch.tensor([[pt - delta]])))
        assert better_s < base
        assert better_t < base


class TestDiscriminatorNet:
    def test_output_shape_and_range(self):
        torch.manual_seed(0)
        d = DomainDiscriminator(6, width=8)
        with torch.no_grad():
            p = d(torch.randn(2, 6, 16, 16))
        assert p.shape == (2, 1, 16, 16)
        assert float(p.min()) > 0.0 and float(p.max()) < 1.0

    def test_single_map(self):
        torch.manual_seed(0)
        d = DomainDiscriminator(6, width=8)
        p = d(torch.randn(6, 8, 8))
        assert p.shape == (1, 8, 8)


class TestStage1Loss:
    def test_zero_weight_recovers_noise_loss(self):
        assert float(stage1_loss(torch.tensor(0.7), torch.tensor(9.9), 0.0)) == pytest.approx(0.7)

    def test_unit_weight(self):
        assert float(stage1_loss(torch.tensor(1.0), torch.tensor(1.0), 1.0)) == pytest.approx(2.0)

    def test_rejects_negative_weight(self):
        with pytest.raises(ValueError):
            stage1_loss(torch.tensor(1.0), torch.tensor(1.0), -0.1)

    def test_adversarial_gradient_signs_oppose(self):
        """Producer gradient through the GRL is the exact negation of the
        discriminator-direction gradient (checked by finite differences on a
        two-parameter toy producer, float64)."""
        torch.manual_seed(1)
        d_w = torch.randn(1, dtype=torch.float64)

        def pipeline(a, b, reverse):
            feat_s = torch.stack([a * 1.0 + b, a * 0.5])
            feat_t = torch.stack([a * 0.2 - b, b * 0.8])
            if reverse:
                feat_s, feat_t = grl_apply(feat_s, 1.0), grl_apply(feat_t, 1.0)
            ds = torch.sigmoid(d_w * feat_s).reshape(1, -1)
            dt = torch.sigmoid(d_w * feat_t).reshape(1, -1)
            return discriminator_loss(ds, dt)

        a0, b0, h = 0.3, -0.6, 1e-6
        a = torch.tensor(a0, dtype=torch.float64, requires_grad=True)
        b = torch.tensor(b0, dtype=torch.float64, requires_grad=True)
        pipeline(a, b, reverse=True).backward()

        def unreversed(av, bv):
            return float(pipeline(torch.tensor(av, dtype=torch.float64),
                                  torch.tensor(bv, dtype=torch.float64),
                                  reverse=False))

        fd_a = (unreversed(a0 + h, b0) - unreversed(a0 - h, b0)) / (2 * h)
        fd_b = (unreversed(a0, b0 + h) - unreversed(a0, b0 - h)) / (2 * h)
        assert float(a.grad) == pytest.approx(-fd_a, rel=1e-4)
        assert float(b.grad) == pytest.approx(-fd_b, rel=1e-4)

    def test_single_step_moves_both_players_as_expected(self):
        """After one step on the combined loss, the discriminator gets
        better at the frozen game while the producer makes it worse."""
        torch.manual_seed(2)
        producer = torch.nn.Conv2d(2, 2, 1)
        disc = torch.nn.Sequential(torch.nn.Conv2d(2, 1, 1))
        x_s = torch.randn(2, 2, 4, 4)
        x_t = torch.randn(2, 2, 4, 4) + 1.0

        def disc_loss_now(p_state, d_state):
            with torch.no_grad():
                f_s, f_t = p_state(x_s), p_state(x_t)
                ds = torch.sigmoid(d_state(f_s)).clamp(1e-7, 1 - 1e-7)
                dt = torch.sigmoid(d_state(f_t)).clamp(1e-7, 1 - 1e-7)
                return float(discriminator_loss(ds, dt))

        base = disc_loss_now(producer, disc)

        def adv_loss():
            f = torch.cat([producer(x_s), producer(x_t)])
            rev = grl_apply(f, 1.0)
            ds = torch.sigmoid(disc(rev[:2]))
            dt = torch.sigmoid(disc(rev[2:]))
            return discriminator_loss(ds, dt)

        # step only the discriminator
        opt_d = torch.optim.SGD(disc.parameters(), lr=1e-2)
        opt_d.zero_grad(); adv_loss().backward(); opt_d.step()
        after_d = disc_loss_now(producer, disc)
        assert after_d < base

        # reset and step only the producer (through the reversal)
        torch.manual_seed(2)
        producer2 = torch.nn.Conv2d(2, 2, 1)
        disc2 = torch.nn.Sequential(torch.nn.Conv2d(2, 1, 1))
        base2 = disc_loss_now(producer2, disc2)

        def adv_loss2():
            f = torch.cat([producer2(x_s), producer2(x_t)])
            rev = grl_apply(f, 1.0)
            ds = torch.sigmoid(disc2(rev[:2]))
            dt = torch.sigmoid(disc2(rev[2:]))
            return discriminator_loss(ds, dt)

        opt_p = torch.optim.SGD(producer2.parameters(), lr=1e-2)
        opt_p.zero_grad(); adv_loss2().backward(); opt_p.step()
        after_p = disc_loss_now(producer2, disc2)
        assert after_p > base2


class TestGrlRamp:
    def test_ramp_reaches_full_strength(self):
        assert grl_ramp(0, 1000, 0.1, 1.0) == 0.0
        assert grl_ramp(50, 1000, 0.1, 1.0) == pytest.approx(0.5)
        assert grl_ramp(100, 1000, 0.1, 1.0) == 1.0
        assert grl_ramp(900, 1000, 0.1, 1.0) == 1.0

    def test_no_ramp(self):
        assert grl_ramp(0, 1000, 0.0, 0.7) == 0.7
