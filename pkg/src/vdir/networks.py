"""Denoiser, variational encoder, decoder, patch discriminator and noise-level estimator.

All modules take channel-first tensors ``(N, C, H, W)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.parametrizations import spectral_norm

LOG_VAR_MIN, LOG_VAR_MAX = -20.0, 20.0
MEAN, SAMPLE = "mean", "sample"


class BadSpatialDims(ValueError):
    pass


@dataclass
class NetworkConfig:
    n_resblocks_per_rir: int = 5
    n_rirblocks: int = 5
    base_channels: int = 64
    latent_channels: int = 4
    latent_stride: int = 4
    input_channels: int = 3
    # Width of the first discriminator stage; later stages double up to 8x.
    disc_channels: int = 64

    def __post_init__(self):
        if self.n_resblocks_per_rir < 1 or self.n_rirblocks < 1:
            raise ValueError("n_resblocks_per_rir and n_rirblocks must be >= 1")
        if self.latent_stride != 4:
            raise ValueError("the encoder downsamples by exactly 4")
        if self.input_channels not in (1, 3):
            raise ValueError("input_channels must be 1 or 3")

    def to_dict(self) -> dict:
        return asdict(self)


def conv3x3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv1 = conv3x3(ch, ch)
        self.conv2 = conv3x3(ch, ch)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class RIRBlock(nn.Module):
    """N residual blocks and a trailing conv wrapped in one skip connection."""

    def __init__(self, ch, n_resblocks):
        super().__init__()
        self.blocks = nn.Sequential(*[ResBlock(ch) for _ in range(n_resblocks)])
        self.conv = conv3x3(ch, ch)

    def forward(self, x):
        return x + self.conv(self.blocks(x))


class Denoiser(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        ch = cfg.base_channels
        self.in_channels = cfg.input_channels
        self.latent_channels = cfg.latent_channels
        self.head = conv3x3(cfg.input_channels + cfg.latent_channels, ch)
        self.body = nn.Sequential(*[RIRBlock(ch, cfg.n_resblocks_per_rir) for _ in range(cfg.n_rirblocks)])
        self.body_conv = conv3x3(ch, ch)
        self.tail = conv3x3(ch, cfg.input_channels)
        # identity mapping at initialization
        nn.init.zeros_(self.tail.weight)
        nn.init.zeros_(self.tail.bias)

    def residual(self, y, c_up):
        if y.shape[1] != self.in_channels or c_up.shape[1] != self.latent_channels:
            raise ValueError(
                f"expected {self.in_channels} image and {self.latent_channels} latent channels, "
                f"got {y.shape[1]} and {c_up.shape[1]}")
        if y.shape[-2:] != c_up.shape[-2:]:
            raise ValueError(f"image {tuple(y.shape[-2:])} and latent {tuple(c_up.shape[-2:])} are not aligned")
        h = self.head(torch.cat([y, c_up], dim=1))
        return self.tail(h + self.body_conv(self.body(h)))

    def forward(self, y, c_up):
        return y - self.residual(y, c_up)


class Encoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        ch, lc = cfg.base_channels, cfg.latent_channels
        self.block1 = conv3x3(cfg.input_channels, ch)
        self.block2 = nn.ModuleList([conv3x3(ch, ch), conv3x3(ch, ch)])
        self.block3 = nn.ModuleList([conv3x3(ch, ch), conv3x3(ch, ch)])
        self.mu = conv3x3(ch, lc)
        self.log_var = conv3x3(ch, lc)

    def forward(self, y):
        h, w = y.shape[-2:]
        if h % 4 or w % 4:
            raise BadSpatialDims(f"BadSpatialDims: encoder input {h}x{w} is not divisible by 4")
        x = F.relu(F.max_pool2d(self.block1(y), 2))
        x = F.relu(F.max_pool2d(self.block2[1](F.relu(self.block2[0](x))), 2))
        x = self.block3[1](F.relu(self.block3[0](x)))
        return self.mu(x), self.log_var(x)


class Decoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        ch = cfg.base_channels
        self.block1 = conv3x3(cfg.latent_channels, ch)
        self.block2 = nn.ModuleList([conv3x3(ch, ch), conv3x3(ch, ch)])
        self.block3 = conv3x3(ch, ch)
        self.out = conv3x3(ch, cfg.input_channels)

    def forward(self, c):
        x = F.relu(upsample_nearest(self.block1(c), 2))
        x = F.relu(upsample_nearest(self.block2[1](F.relu(self.block2[0](x))), 2))
        return self.out(F.relu(self.block3(x)))


class Discriminator(nn.Module):
    """Patch discriminator: five stride-2 stages and a 1-channel logit conv, all spectrally normalized.

    ``strict_shape`` enforces inputs divisible by 32 so each logit covers one
    full 32x32 cell.
    """

    def __init__(self, cfg: NetworkConfig, slope: float = 0.2, strict_shape: bool = True):
        super().__init__()
        base = cfg.disc_channels
        widths = [base, base * 2, base * 4, base * 8, base * 8]
        layers = []
        cin = cfg.input_channels
        for w in widths:
            layers.append(spectral_norm(conv3x3(cin, w, 1)))
            layers.append(spectral_norm(conv3x3(w, w, 2)))
            cin = w
        self.convs = nn.ModuleList(layers)
        self.logits = spectral_norm(conv3x3(cin, 1))
        self.slope = slope
        self.strict_shape = strict_shape

    def forward(self, img):
        h, w = img.shape[-2:]
        if self.strict_shape and (h % 32 or w % 32):
            raise BadSpatialDims(f"BadSpatialDims: discriminator input {h}x{w} is not divisible by 32")
        x = img
        for conv in self.convs:
            x = F.leaky_relu(conv(x), self.slope)
        return self.logits(x)

    def sn_convs(self):
        return list(self.convs) + [self.logits]


class NoiseEstimator(nn.Module):
    """conv-relu-conv on the latent, averaged spatially; output in 0-255 units."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.conv1 = conv3x3(cfg.latent_channels, cfg.base_channels)
        self.conv2 = conv3x3(cfg.base_channels, 1)

    def forward(self, c):
        return self.conv2(F.relu(self.conv1(c))).mean(dim=(1, 2, 3)) * 255.0


class VDID(nn.Module):
    """Container for the five networks sharing one ``NetworkConfig``."""

    def __init__(self, cfg: NetworkConfig | None = None, strict_disc_shape: bool = True):
        super().__init__()
        self.cfg = cfg or NetworkConfig()
        self.denoiser = Denoiser(self.cfg)
        self.encoder = Encoder(self.cfg)
        self.decoder = Decoder(self.cfg)
        self.discriminator = Discriminator(self.cfg, strict_shape=strict_disc_shape)
        self.estimator = NoiseEstimator(self.cfg)

    def generator_parameters(self):
        for net in (self.denoiser, self.encoder, self.decoder, self.estimator):
            yield from net.parameters()

    def encode(self, y):
        mu, log_var = self.encoder(y)
        return LatentCode(mu, log_var)

    def denoise(self, y, mode=MEAN, generator=None):
        code = self.encode(y)
        c = sample_latent(code, mode, generator)
        return self.denoiser(y, upsample_latent(c))


class LatentCode:
    """Encoder output: mean and clamped log-variance maps at quarter resolution."""

    def __init__(self, mu, log_var, sample=None):
        self.mu = mu
        self.log_var = log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX)
        self.sample = sample

    @property
    def std(self):
        return torch.exp(0.5 * self.log_var)


def build_networks(cfg: NetworkConfig | None = None, seed: int | None = None, **kwargs) -> VDID:
    if seed is not None:
        torch.manual_seed(seed)
    return VDID(cfg, **kwargs)


def forward_encoder(model: VDID, y) -> LatentCode:
    return model.encode(y)


def sample_latent(code: LatentCode, mode: str = SAMPLE, generator: torch.Generator | None = None,
                  eps=None):
    """Reparameterized draw ``c = eps * sigma + mu``; ``mode="mean"`` returns ``mu``."""
    if mode == MEAN:
        c = code.mu
    elif mode == SAMPLE:
        if eps is None:
            eps = torch.randn(code.mu.shape, generator=generator, dtype=code.mu.dtype, device=code.mu.device)
        c = eps * code.std + code.mu
    else:
        raise ValueError(f"unknown latent mode {mode!r}")
    code.sample = c
    return c


def upsample_nearest(x, factor):
    return x.repeat_interleave(factor, dim=-2).repeat_interleave(factor, dim=-1)


def upsample_latent(c, factor: int = 4):
    return upsample_nearest(c, factor)


def forward_denoiser(model: VDID, y, c_up):
    return model.denoiser(y, c_up)


def forward_decoder(model: VDID, c):
    return model.decoder(c)


def forward_discriminator(model: VDID, img):
    return model.discriminator(img)


def estimate_noise_level(model: VDID, c):
    return model.estimator(c)


def count_parameters(module: nn.Module) -> int:
    """Number of trainable scalars; spectral-norm power-iteration vectors are buffers and excluded."""
    return sum(p.numel() for p in module.parameters())


def spectral_norms(disc: Discriminator) -> list[float]:
    """Largest singular value of each normalized conv weight, unrolled to (out, in*k*k)."""
    out = []
    with torch.no_grad():
        for conv in disc.sn_convs():
            w = conv.weight.reshape(conv.weight.shape[0], -1)
            out.append(float(torch.linalg.matrix_norm(w, ord=2)))
    return out


def power_iterate(disc: Discriminator, n: int = 50) -> None:
    """Run ``n`` power-iteration updates on every spectral-norm layer."""
    was_training = disc.training
    disc.train()
    with torch.no_grad():
        for _ in range(n):
            for conv in disc.sn_convs():
                conv.weight  # accessing the parametrized weight updates u, v in train mode
    disc.train(was_training)
