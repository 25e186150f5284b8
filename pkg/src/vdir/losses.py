"""Training objective: denoising MAE, Gaussian KL, reconstruction and adversarial terms."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn.functional as F

from .networks import LatentCode


class DivergedLoss(FloatingPointError):
    def __init__(self, term, value):
        super().__init__(f"DivergedLoss: term {term!r} is not finite ({value})")
        self.term = term


@dataclass
class LossWeights:
    beta: float = 0.01
    lambda1: float = 0.001
    lambda2: float = 1.0
    # Weight of the pixel reconstruction term; 0 only in the denoise-only ablation.
    recon: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")

    @classmethod
    def awgn(cls):
        return cls(beta=0.01, lambda1=0.001, lambda2=1.0)

    @classmethod
    def real_noise(cls):
        return cls(beta=0.01, lambda1=0.001, lambda2=0.0)


@dataclass
class LossReport:
    denoise: float = 0.0
    kl: float = 0.0
    recon_pix: float = 0.0
    adv_g: float = 0.0
    adv_d: float = 0.0
    est: float = 0.0
    total: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, iteration: int, **extra) -> str:
        return json.dumps({"iter": iteration, **self.to_dict(), **extra})


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def denoise_loss(x, x_hat):
    _check_shapes(x, x_hat)
    return (x - x_hat).abs().mean()


def recon_pixel_loss(y, y_hat):
    _check_shapes(y, y_hat)
    return (y - y_hat).abs().mean()


def kl_divergence(code: LatentCode | tuple) -> torch.Tensor:
    """KL(N(mu, diag(exp(log_var))) || N(0, I)), averaged over batch and latent elements."""
    if isinstance(code, tuple):
        code = LatentCode(*code)
    mu, log_var = code.mu, code.log_var
    if not (torch.isfinite(mu).all() and torch.isfinite(log_var).all()):
        raise DivergedLoss("kl", "non-finite latent statistics")
    # expm1 keeps exp(v) - 1 - v non-negative near v = 0
    return 0.5 * (mu.pow(2) + torch.expm1(log_var) - log_var).mean()


def adversarial_losses(d_real_logits, d_fake_logits):
    """Non-saturating GAN pair ``(adv_g, adv_d)`` on raw logits."""
    adv_d = F.softplus(-d_real_logits).mean() + F.softplus(d_fake_logits).mean()
    adv_g = F.softplus(-d_fake_logits).mean()
    return adv_g, adv_d


def generator_adv_loss(d_fake_logits):
    return F.softplus(-d_fake_logits).mean()


def discriminator_loss(d_real_logits, d_fake_logits):
    return F.softplus(-d_real_logits).mean() + F.softplus(d_fake_logits).mean()


def est_loss(sigma_true, sigma_pred):
    """L1 between true and estimated noise level, both in 0-255 units, on the /255 scale."""
    return (sigma_true / 255.0 - sigma_pred / 255.0).abs().mean()


def weighted_total(parts: dict, w: LossWeights):
    """Weighted sum of the generator terms; works on floats or tensors."""
    return (parts["denoise"] + w.beta * parts["kl"] + w.recon * parts["recon_pix"]
            + w.lambda1 * parts["adv_g"] + w.lambda2 * parts["est"])


def total_loss(parts: dict, w: LossWeights) -> LossReport:
    """Build a ``LossReport`` from term values; ``adv_d`` is reported but not summed."""
    vals = {}
    for name in ("denoise", "kl", "recon_pix", "adv_g", "adv_d", "est"):
        v = parts.get(name, 0.0)
        v = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not math.isfinite(v):
            raise DivergedLoss(name, v)
        vals[name] = v
    return LossReport(total=weighted_total(vals, w), **vals)
