import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vdir.networks import (MEAN, SAMPLE, BadSpatialDims, LatentCode, NetworkConfig, VDID, build_networks,
                           count_parameters, estimate_noise_level, forward_decoder, forward_denoiser,
                           forward_discriminator, forward_encoder, power_iterate, sample_latent,
                           spectral_norms, upsample_latent)


def conv_params(cin, cout, k=3):
    return cin * cout * k * k + cout


SMALL = NetworkConfig(n_resblocks_per_rir=1, n_rirblocks=1, base_channels=8, disc_channels=4)


@pytest.fixture(scope="module")
def full_model():
    return build_networks(NetworkConfig(), seed=0)


@pytest.fixture
def small_model():
    return build_networks(SMALL, seed=0)


def zero_(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


class TestParameterCounts:
    def test_encoder(self, full_model):
        # block1, block2 (2 convs), block3 (2 convs), mu and log-variance heads
        oracle = conv_params(3, 64) + 4 * conv_params(64, 64) + 2 * conv_params(64, 4)
        assert oracle == 154_120
        assert count_parameters(full_model.encoder) == oracle

    def test_decoder(self, full_model):
        oracle = conv_params(4, 64) + 3 * conv_params(64, 64) + conv_params(64, 3)
        assert oracle == 114_883
        assert count_parameters(full_model.decoder) == oracle

    def test_denoiser_plus_encoder(self, full_model):
        n, d = 5, 5
        denoiser = conv_params(7, 64) + d * (2 * n + 1) * conv_params(64, 64) + conv_params(64, 64) \
            + conv_params(64, 3)
        assert count_parameters(full_model.denoiser) == denoiser
        total = count_parameters(full_model.denoiser) + count_parameters(full_model.encoder)
        assert 2.1e6 <= total <= 2.3e6

    def test_estimator(self, full_model):
        assert count_parameters(full_model.estimator) == conv_params(4, 64) + conv_params(64, 1)

    def test_discriminator_excludes_power_vectors(self, full_model):
        widths = [64, 128, 256, 512, 512]
        oracle, cin = 0, 3
        for w in widths:
            oracle += conv_params(cin, w) + conv_params(w, w)
            cin = w
        oracle += conv_params(512, 1)
        assert count_parameters(full_model.discriminator) == oracle
        assert len(full_model.discriminator.sn_convs()) == 11


class TestEncoder:
    def test_shape(self, full_model):
        code = forward_encoder(full_model, torch.rand(1, 3, 96, 96))
        assert code.mu.shape == code.log_var.shape == (1, 4, 24, 24)

    def test_bad_dims(self, small_model):
        with pytest.raises(BadSpatialDims, match="BadSpatialDims"):
            forward_encoder(small_model, torch.rand(1, 3, 30, 32))

    def test_zero_weights_give_bias(self, small_model):
        zero_(small_model.encoder)
        with torch.no_grad():
            small_model.encoder.mu.bias.copy_(torch.tensor([0.1, -0.2, 0.3, 0.4]))
            small_model.encoder.log_var.bias.copy_(torch.tensor([-1.0, 0.0, 1.0, 2.0]))
        code = forward_encoder(small_model, torch.rand(2, 3, 16, 16))
        assert torch.equal(code.mu, torch.tensor([0.1, -0.2, 0.3, 0.4]).view(1, 4, 1, 1).expand(2, 4, 4, 4))
        assert torch.equal(code.log_var, torch.tensor([-1.0, 0.0, 1.0, 2.0]).view(1, 4, 1, 1).expand(2, 4, 4, 4))

    def test_log_var_clamped(self):
        code = LatentCode(torch.zeros(1, 4, 2, 2), torch.full((1, 4, 2, 2), -40.0))
        assert code.log_var.min() == -20.0
        code = LatentCode(torch.zeros(1, 4, 2, 2), torch.full((1, 4, 2, 2), 40.0))
        assert code.log_var.max() == 20.0


class TestSampleLatent:
    def test_mean_mode(self):
        code = LatentCode(torch.randn(2, 4, 3, 3), torch.randn(2, 4, 3, 3))
        assert torch.equal(sample_latent(code, MEAN), code.mu)

    def test_vanishing_variance(self):
        code = LatentCode(torch.randn(1, 4, 5, 5), torch.full((1, 4, 5, 5), -40.0))
        c = sample_latent(code, SAMPLE, torch.Generator().manual_seed(0))
        assert torch.max(torch.abs(c - code.mu)) < 1e-3

    def test_standard_normal_statistics(self):
        code = LatentCode(torch.zeros(100_000, 4, 1, 1, dtype=torch.float64),
                          torch.zeros(100_000, 4, 1, 1, dtype=torch.float64))
        c = sample_latent(code, SAMPLE, torch.Generator().manual_seed(1))
        m, s = c.mean(dim=0), c.std(dim=0)
        assert torch.all(m.abs() < 0.02)
        assert torch.all((s > 0.99) & (s < 1.01))

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            sample_latent(LatentCode(torch.zeros(1), torch.zeros(1)), "median")

    def test_reparameterization_gradients_match_finite_differences(self):
        torch.manual_seed(0)
        mu = torch.randn(1, 1, 2, 2, dtype=torch.float64, requires_grad=True)
        log_var = torch.randn(1, 1, 2, 2, dtype=torch.float64, requires_grad=True)
        eps = torch.randn(1, 1, 2, 2, dtype=torch.float64)
        c = sample_latent(LatentCode(mu, log_var), SAMPLE, eps=eps)
        g_mu, g_lv = torch.autograd.grad(c.sum(), [mu, log_var])
        assert torch.equal(g_mu, torch.ones_like(mu))
        np.testing.assert_allclose(g_lv.numpy(), (eps * torch.exp(0.5 * log_var) / 2).detach().numpy(), rtol=1e-12)

        h = 1e-6

        def f(m, lv):
            return (eps * torch.exp(0.5 * lv) + m).detach()

        fd_mu = (f(mu + h, log_var) - f(mu - h, log_var)) / (2 * h)
        fd_lv = (f(mu, log_var + h) - f(mu, log_var - h)) / (2 * h)
        np.testing.assert_allclose(g_mu.numpy(), fd_mu.numpy(), rtol=1e-4)
        np.testing.assert_allclose(g_lv.numpy(), fd_lv.numpy(), rtol=1e-4)


class TestUpsample:
    def test_constant(self):
        c = torch.full((1, 4, 6, 6), 0.7)
        assert torch.equal(upsample_latent(c), torch.full((1, 4, 24, 24), 0.7))

    def test_block_replication(self):
        c = torch.randn(1, 4, 24, 24)
        up = upsample_latent(c)
        assert up.shape == (1, 4, 96, 96)
        for di in range(4):
            for dj in range(4):
                assert torch.equal(up[..., di::4, dj::4], c)

    def test_single_pixel(self):
        c = torch.zeros(1, 1, 5, 5)
        c[0, 0, 2, 3] = 1.0
        nz = torch.nonzero(upsample_latent(c)[0, 0])
        assert set(nz[:, 0].tolist()) == {8, 9, 10, 11}
        assert set(nz[:, 1].tolist()) == {12, 13, 14, 15}
        assert len(nz) == 16


class TestDenoiser:
    def test_zero_residual_identity(self, small_model):
        y = torch.rand(2, 3, 16, 16)
        c_up = torch.randn(2, 4, 16, 16)
        with torch.no_grad():
            small_model.denoiser.tail.weight.zero_()
            small_model.denoiser.tail.bias.zero_()
        assert torch.equal(forward_denoiser(small_model, y, c_up), y)

    def test_initialized_as_identity(self, small_model):
        y = torch.rand(1, 3, 8, 8)
        assert torch.equal(small_model.denoiser(y, torch.randn(1, 4, 8, 8)), y)

    def test_shape_and_smoke(self, full_model):
        torch.manual_seed(0)
        with torch.no_grad():
            torch.nn.init.kaiming_uniform_(full_model.denoiser.tail.weight)
            y = torch.rand(1, 3, 96, 96)
            out = forward_denoiser(full_model, y, torch.randn(1, 4, 96, 96))
            torch.nn.init.zeros_(full_model.denoiser.tail.weight)
        assert out.shape == (1, 3, 96, 96)
        assert torch.isfinite(out).all()
        assert (out - y).abs().max() < 10

    def test_channel_mismatch(self, small_model):
        with pytest.raises(ValueError):
            small_model.denoiser(torch.rand(1, 3, 8, 8), torch.rand(1, 2, 8, 8))
        with pytest.raises(ValueError):
            small_model.denoiser(torch.rand(1, 3, 8, 8), torch.rand(1, 4, 4, 4))


class TestDecoder:
    def test_shape(self, full_model):
        assert forward_decoder(full_model, torch.randn(1, 4, 24, 24)).shape == (1, 3, 96, 96)

    def test_zero_weights_give_bias_image(self, small_model):
        zero_(small_model.decoder)
        with torch.no_grad():
            small_model.decoder.out.bias.copy_(torch.tensor([0.2, 0.4, 0.6]))
        out = forward_decoder(small_model, torch.randn(1, 4, 6, 6))
        assert torch.equal(out, torch.tensor([0.2, 0.4, 0.6]).view(1, 3, 1, 1).expand(1, 3, 24, 24))


class TestDiscriminator:
    def test_shape(self, full_model):
        assert forward_discriminator(full_model, torch.rand(1, 3, 96, 96)).shape == (1, 1, 3, 3)

    def test_bad_dims(self, small_model):
        with pytest.raises(BadSpatialDims):
            forward_discriminator(small_model, torch.rand(1, 3, 48, 64))

    def test_zero_input_zero_bias(self, small_model):
        with torch.no_grad():
            for conv in small_model.discriminator.sn_convs():
                conv.bias.zero_()
        out = forward_discriminator(small_model, torch.zeros(1, 3, 64, 64))
        assert torch.equal(out, torch.zeros_like(out))

    def test_spectral_norm_after_power_iteration(self, full_model):
        power_iterate(full_model.discriminator, 50)
        full_model.discriminator.eval()
        norms = spectral_norms(full_model.discriminator)
        assert len(norms) == 11
        assert all(0.95 <= s <= 1.05 for s in norms), norms

    def test_eval_mode_freezes_power_vectors(self, small_model):
        d = small_model.discriminator.eval()
        u0 = d.convs[0].parametrizations.weight[0]._u.clone()
        d(torch.rand(1, 3, 32, 32))
        assert torch.equal(u0, d.convs[0].parametrizations.weight[0]._u)
        d.train()
        d(torch.rand(1, 3, 32, 32))
        assert not torch.equal(u0, d.convs[0].parametrizations.weight[0]._u)


class TestEstimator:
    def test_zero_weights(self, small_model):
        zero_(small_model.estimator)
        with torch.no_grad():
            small_model.estimator.conv2.bias.fill_(0.1)
        out = estimate_noise_level(small_model, torch.randn(3, 4, 6, 6))
        assert out.shape == (3,)
        assert torch.allclose(out, torch.full((3,), 25.5))


@settings(max_examples=10, deadline=None)
@given(h=st.integers(1, 4), w=st.integers(1, 4), n=st.integers(1, 2))
def test_shape_covariance(h, w, n):
    model = VDID(SMALL)
    H, W = 32 * h, 32 * w
    y = torch.rand(n, 3, H, W)
    with torch.no_grad():
        code = model.encode(y)
        assert code.mu.shape == (n, 4, H // 4, W // 4)
        c = sample_latent(code, SAMPLE, torch.Generator().manual_seed(0))
        assert model.denoiser(y, upsample_latent(c)).shape == y.shape
        assert model.decoder(c).shape == y.shape
        assert model.discriminator(y).shape == (n, 1, H // 32, W // 32)
        assert model.estimator(c).shape == (n,)


def test_mean_mode_forward_is_deterministic(small_model):
    y = torch.rand(2, 3, 32, 32)
    with torch.no_grad():
        a = small_model.denoise(y, MEAN)
        b = small_model.denoise(y, MEAN)
    assert a.numpy().tobytes() == b.numpy().tobytes()


def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(n_resblocks_per_rir=0)
    with pytest.raises(ValueError):
        NetworkConfig(input_channels=2)
