import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vdir.losses import (DivergedLoss, LossReport, LossWeights, adversarial_losses, denoise_loss,
                         discriminator_loss, est_loss, generator_adv_loss, kl_divergence, recon_pixel_loss,
                         total_loss)
from vdir.networks import LatentCode


def kl_monte_carlo(mu, log_var, n, rng):
    """E_q[log q(z) - log p(z)] for scalar Gaussians, written from the densities."""
    sd = math.exp(0.5 * log_var)
    z = mu + sd * rng.standard_normal(n)
    log_q = -0.5 * np.log(2 * np.pi) - np.log(sd) - 0.5 * ((z - mu) / sd) ** 2
    log_p = -0.5 * np.log(2 * np.pi) - 0.5 * z ** 2
    return float(np.mean(log_q - log_p))


def code(mu, log_var, shape=(1, 4, 3, 3)):
    return LatentCode(torch.full(shape, float(mu), dtype=torch.float64),
                      torch.full(shape, float(log_var), dtype=torch.float64))


class TestPixelLosses:
    def test_identical(self):
        x = torch.rand(2, 3, 8, 8)
        assert denoise_loss(x, x) == 0
        assert recon_pixel_loss(x, x) == 0

    def test_constant_offsets(self):
        x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
        assert float(denoise_loss(x, x + 0.1)) == pytest.approx(0.1, abs=1e-12)
        assert float(recon_pixel_loss(x, x - 0.25)) == pytest.approx(0.25, abs=1e-12)

    def test_random_pair_matches_float64_oracle(self, rng):
        a, b = rng.random((2, 3, 16, 16)), rng.random((2, 3, 16, 16))
        oracle = sum(abs(p - q) for p, q in zip(a.ravel().tolist(), b.ravel().tolist())) / a.size
        for fn in (denoise_loss, recon_pixel_loss):
            got = float(fn(torch.tensor(a, dtype=torch.float32), torch.tensor(b, dtype=torch.float32)))
            assert got == pytest.approx(oracle, rel=1e-5)
            assert float(fn(torch.tensor(a), torch.tensor(b))) == pytest.approx(oracle, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            denoise_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5))
        with pytest.raises(ValueError):
            recon_pixel_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 1, 4, 4))


class TestKL:
    @pytest.mark.parametrize("mu,log_var,expected", [(0, 0, 0.0), (1, 0, 0.5), (0, 1, (math.e - 2) / 2)])
    def test_canonical(self, mu, log_var, expected):
        assert float(kl_divergence(code(mu, log_var))) == pytest.approx(expected, abs=1e-12)

    def test_mean_not_sum(self):
        # per-element value regardless of how many elements there are
        a = float(kl_divergence(code(1, 0, (1, 4, 2, 2))))
        b = float(kl_divergence(code(1, 0, (8, 4, 24, 24))))
        assert a == b == 0.5

    def test_matches_monte_carlo(self):
        rng = np.random.default_rng(2024)
        for _ in range(20):
            mu, lv = rng.uniform(-2, 2), rng.uniform(-2, 2)
            analytic = float(kl_divergence(code(mu, lv, (1, 1, 1, 1))))
            mc = kl_monte_carlo(mu, lv, 1_000_000, rng)
            assert abs(analytic - mc) / max(analytic, 0.01) < 0.01, (mu, lv, analytic, mc)

    def test_accepts_tuple(self):
        mu, lv = torch.randn(1, 4, 2, 2), torch.randn(1, 4, 2, 2)
        assert torch.equal(kl_divergence((mu, lv)), kl_divergence(LatentCode(mu, lv)))

    def test_non_finite(self):
        with pytest.raises(DivergedLoss, match="kl"):
            kl_divergence(LatentCode(torch.tensor([float("nan")]), torch.tensor([0.0])))

    @settings(max_examples=200, deadline=None)
    @given(mu=st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=16),
           lv=st.lists(st.floats(-20, 20), min_size=1, max_size=16))
    def test_non_negative(self, mu, lv):
        n = min(len(mu), len(lv))
        for dtype in (torch.float32, torch.float64):
            c = LatentCode(torch.tensor(mu[:n], dtype=dtype), torch.tensor(lv[:n], dtype=dtype))
            assert float(kl_divergence(c)) >= 0


class TestAdversarial:
    def test_zero_logits(self):
        z = torch.zeros(2, 1, 3, 3)
        adv_g, adv_d = adversarial_losses(z, z)
        assert float(adv_d) == pytest.approx(2 * math.log(2), abs=1e-6)
        assert float(adv_g) == pytest.approx(math.log(2), abs=1e-6)

    def test_perfect_discriminator(self):
        _, adv_d = adversarial_losses(torch.full((1, 1, 2, 2), 1e4), torch.full((1, 1, 2, 2), -1e4))
        assert float(adv_d) == 0.0

    @pytest.mark.parametrize("real,fake", [(50.0, -50.0), (-50.0, 50.0), (50.0, 50.0), (-50.0, -50.0)])
    def test_extreme_logits_match_float64_oracle(self, real, fake):
        def softplus(x):
            return float(np.logaddexp(0.0, x))

        adv_g, adv_d = adversarial_losses(torch.full((1, 1, 2, 2), real), torch.full((1, 1, 2, 2), fake))
        assert math.isfinite(float(adv_g)) and math.isfinite(float(adv_d))
        assert float(adv_d) == pytest.approx(softplus(-real) + softplus(fake), rel=1e-6, abs=1e-30)
        assert float(adv_g) == pytest.approx(softplus(-fake), rel=1e-6, abs=1e-30)

    def test_split_helpers_agree(self):
        r, f = torch.randn(2, 1, 3, 3), torch.randn(2, 1, 3, 3)
        adv_g, adv_d = adversarial_losses(r, f)
        assert torch.equal(adv_g, generator_adv_loss(f))
        assert torch.equal(adv_d, discriminator_loss(r, f))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2 ** 31 - 1))
    def test_permutation_invariant(self, seed):
        g = torch.Generator().manual_seed(seed)
        r = torch.randn(1, 1, 4, 4, generator=g, dtype=torch.float64)
        f = torch.randn(1, 1, 4, 4, generator=g, dtype=torch.float64)
        perm = torch.randperm(16, generator=g)
        g1, d1 = adversarial_losses(r, f)
        g2, d2 = adversarial_losses(r.flatten()[perm].view_as(r), f.flatten()[perm].view_as(f))
        assert float(g1) == pytest.approx(float(g2), rel=1e-12)
        assert float(d1) == pytest.approx(float(d2), rel=1e-12)


class TestEstLoss:
    def test_equal(self):
        s = torch.tensor([10.0, 20.0])
        assert est_loss(s, s) == 0

    def test_single(self):
        assert float(est_loss(torch.tensor([30.0]), torch.tensor([25.0]))) == pytest.approx(5 / 255, rel=1e-6)

    def test_batch(self):
        got = est_loss(torch.tensor([10.0, 30.0, 50.0]), torch.tensor([12.0, 30.0, 47.0]))
        assert float(got) == pytest.approx(5 / 3 / 255, rel=1e-6)
        assert float(got) == pytest.approx(0.00654, abs=5e-6)


class TestTotal:
    def test_all_zero(self):
        assert total_loss({}, LossWeights()).total == 0

    def test_beta_example(self):
        rep = total_loss({"denoise": 1.0, "kl": 2.0}, LossWeights(beta=0.01))
        assert rep.total == pytest.approx(1.02, rel=1e-12)

    def test_default_weights_example(self):
        parts = dict(denoise=0.05, kl=0.3, recon_pix=0.04, adv_g=0.7, est=0.01, adv_d=5.0)
        rep = total_loss(parts, LossWeights.awgn())
        assert rep.total == pytest.approx(0.1037, rel=1e-12)
        assert rep.adv_d == 5.0

    def test_sum_identity(self, rng):
        for _ in range(50):
            v = rng.random(6) * 10
            w = LossWeights(*rng.random(3))
            parts = dict(zip(("denoise", "kl", "recon_pix", "adv_g", "adv_d", "est"), v))
            rep = total_loss(parts, w)
            expected = v[0] + w.beta * v[1] + v[2] + w.lambda1 * v[3] + w.lambda2 * v[5]
            assert abs(rep.total - expected) <= 1e-6 * abs(expected)

    def test_denoise_only_weights(self):
        parts = dict(denoise=0.123, kl=4.0, recon_pix=0.5, adv_g=3.0, adv_d=1.0, est=0.2)
        rep = total_loss(parts, LossWeights(beta=0, lambda1=0, lambda2=0, recon=0))
        assert rep.total == 0.123

    @pytest.mark.parametrize("term", ["denoise", "kl", "recon_pix", "adv_g", "adv_d", "est"])
    def test_diverged(self, term):
        with pytest.raises(DivergedLoss, match=term) as exc:
            total_loss({term: float("inf")}, LossWeights())
        assert exc.value.term == term
        with pytest.raises(DivergedLoss):
            total_loss({term: torch.tensor(float("nan"))}, LossWeights())

    def test_weight_presets_and_validation(self):
        assert LossWeights.awgn().lambda2 == 1.0 and LossWeights.real_noise().lambda2 == 0.0
        assert (LossWeights().beta, LossWeights().lambda1) == (0.01, 0.001)
        with pytest.raises(ValueError):
            LossWeights(beta=-1)

    def test_report_json(self):
        import json
        line = LossReport(denoise=0.5, total=0.5).to_json(7, lr=1e-4)
        d = json.loads(line)
        assert list(d)[:8] == ["iter", "denoise", "kl", "recon_pix", "adv_g", "adv_d", "est", "total"]
        assert d["iter"] == 7 and d["lr"] == 1e-4
