"""Joint optimization of denoiser, encoder, decoder and estimator with an alternating discriminator."""

from __future__ import annotations

import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .data import AWGN, NoiseSpec, NoisySample, PatchSampler
from .losses import (LossReport, LossWeights, denoise_loss, discriminator_loss, est_loss,
                     generator_adv_loss, kl_divergence, recon_pixel_loss, total_loss, weighted_total)
from .networks import SAMPLE, NetworkConfig, VDID, sample_latent, upsample_latent

log = logging.getLogger(__name__)

FULL, NO_ADV, DENOISE_ONLY = "full", "no_adv", "denoise_only"
ABLATIONS = (FULL, NO_ADV, DENOISE_ONLY)


@dataclass
class TrainConfig:
    noise_spec: NoiseSpec = field(default_factory=NoiseSpec)
    patch_size: int = 96
    batch_size: int = 32
    lr_init: float = 2e-4
    lr_floor: float = 2e-5
    lr_halving_interval: int = 100_000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    max_iters: int = 20_000
    loss_weights: LossWeights = field(default_factory=LossWeights)
    ablation: str = FULL
    seed: int = 0
    network: NetworkConfig = field(default_factory=NetworkConfig)
    grad_clip: Optional[float] = 10.0
    checkpoint_every: int = 5_000
    log_every: int = 100

    def __post_init__(self):
        if isinstance(self.noise_spec, dict):
            self.noise_spec = NoiseSpec(**self.noise_spec)
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if isinstance(self.network, dict):
            self.network = NetworkConfig(**self.network)
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if not 0 < self.lr_floor <= self.lr_init:
            raise ValueError("need 0 < lr_floor <= lr_init")
        if self.patch_size % 32:
            raise ValueError("patch_size must be a multiple of 32 for the patch discriminator")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise_spec"] = self.noise_spec.to_dict()
        return d

    def fingerprint(self) -> str:
        # logging cadence does not change the optimization trajectory
        d = self.to_dict()
        for k in ("max_iters", "checkpoint_every", "log_every"):
            d.pop(k)
        return ckpt.fingerprint(d)

    def effective_weights(self) -> LossWeights:
        w = self.loss_weights
        if self.ablation == DENOISE_ONLY:
            return LossWeights(beta=0.0, lambda1=0.0, lambda2=0.0, recon=0.0)
        if self.ablation == NO_ADV:
            return LossWeights(beta=w.beta, lambda1=0.0, lambda2=w.lambda2, recon=w.recon)
        return w

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        if name == "awgn":
            base = dict(noise_spec=NoiseSpec(kind=AWGN, sigma_range=(5, 70)), patch_size=96,
                        batch_size=32, loss_weights=LossWeights.awgn())
        elif name == "real":
            base = dict(noise_spec=NoiseSpec(kind="heteroscedastic"), patch_size=256,
                        batch_size=4, loss_weights=LossWeights.real_noise())
        elif name == "toy":
            base = dict(noise_spec=NoiseSpec(kind=AWGN, sigma_range=(5, 70)), patch_size=64,
                        batch_size=8, loss_weights=LossWeights.awgn(),
                        network=NetworkConfig(n_resblocks_per_rir=2, n_rirblocks=2,
                                              base_channels=32, disc_channels=32))
        else:
            raise ValueError(f"unknown preset {name!r}")
        base.update(overrides)
        return cls(**base)


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return max(cfg.lr_init * 0.5 ** (iteration // cfg.lr_halving_interval), cfg.lr_floor)


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """``(N, H, W, C)`` array to a channel-first float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.asarray(images, dtype=np.float32).transpose(0, 3, 1, 2)))


def to_image(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().transpose(0, 2, 3, 1)


def compute_terms(model: VDID, x, y, sigma, weights: LossWeights, generator=None, eps=None) -> dict:
    """Forward pass of every generator-side term. Terms with zero weight are skipped."""
    code = model.encode(y)
    c = sample_latent(code, SAMPLE, generator, eps=eps)
    x_hat = model.denoiser(y, upsample_latent(c))
    zero = x.new_zeros(())
    parts = {"denoise": denoise_loss(x, x_hat), "kl": kl_divergence(code),
             "recon_pix": zero, "adv_g": zero, "est": zero}
    y_hat = None
    if weights.recon > 0 or weights.lambda1 > 0:
        y_hat = model.decoder(c)
        parts["recon_pix"] = recon_pixel_loss(y, y_hat)
    if weights.lambda1 > 0:
        parts["adv_g"] = generator_adv_loss(model.discriminator(y_hat))
    if weights.lambda2 > 0 and sigma is not None:
        parts["est"] = est_loss(sigma, model.estimator(c))
    parts["_y_hat"] = y_hat
    parts["_x_hat"] = x_hat
    return parts


class Trainer:
    def __init__(self, cfg: TrainConfig, images: Sequence[np.ndarray], model: VDID | None = None):
        if not images:
            raise ValueError("dataset is empty")
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.model = model if model is not None else VDID(cfg.network)
        # channels-last is ~20% faster for oneDNN convolutions on CPU
        self.model.to(memory_format=torch.channels_last)
        self.weights = cfg.effective_weights()
        self.uses_disc = self.weights.lambda1 > 0
        self.opt_g = torch.optim.Adam(self.model.generator_parameters(), lr=cfg.lr_init,
                                      betas=(cfg.adam_beta1, cfg.adam_beta2))
        self.opt_d = torch.optim.Adam(self.model.discriminator.parameters(), lr=cfg.lr_init,
                                      betas=(cfg.adam_beta1, cfg.adam_beta2))
        self.data_rng = np.random.default_rng(cfg.seed)
        self.torch_rng = torch.Generator().manual_seed(cfg.seed + 1)
        self.sampler = PatchSampler(images, cfg.patch_size, cfg.batch_size, cfg.noise_spec, self.data_rng)
        self.iteration = 0
        self.ema_loss: float | None = None

    def _clip(self, params):
        if self.cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, self.cfg.grad_clip)

    def train_step(self, batch: NoisySample | None = None) -> LossReport:
        if batch is None:
            batch = self.sampler.next_batch()
        self.model.train()
        x = to_tensor(batch.clean).to(memory_format=torch.channels_last)
        y = to_tensor(batch.noisy).to(memory_format=torch.channels_last)
        sigma = torch.from_numpy(batch.sigma) if batch.sigma is not None else None
        lr = lr_at(self.iteration, self.cfg)
        for opt in (self.opt_g, self.opt_d):
            for g in opt.param_groups:
                g["lr"] = lr

        parts = compute_terms(self.model, x, y, sigma, self.weights, self.torch_rng)
        y_hat = parts.pop("_y_hat")
        parts.pop("_x_hat")
        total = weighted_total(parts, self.weights)
        report_parts = dict(parts)
        if not torch.isfinite(total):
            total_loss(report_parts, self.weights)  # raises DivergedLoss naming the term
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        self._clip(list(self.model.generator_parameters()))
        self.opt_g.step()

        adv_d = x.new_zeros(())
        if self.uses_disc:
            self.opt_d.zero_grad(set_to_none=True)
            adv_d = discriminator_loss(self.model.discriminator(y), self.model.discriminator(y_hat.detach()))
            adv_d.backward()
            self._clip(list(self.model.discriminator.parameters()))
            self.opt_d.step()
        report_parts["adv_d"] = adv_d
        report = total_loss(report_parts, self.weights)
        self.iteration += 1
        self.ema_loss = report.denoise if self.ema_loss is None else 0.99 * self.ema_loss + 0.01 * report.denoise
        return report

    # --- checkpointing -----------------------------------------------------

    def rng_state(self) -> dict:
        return {"torch": self.torch_rng.get_state(), "numpy": self.data_rng.bit_generator.state}

    def save(self, path) -> Path:
        return ckpt.save_checkpoint(
            path, self.model, optimizers={"g": self.opt_g, "d": self.opt_d}, iteration=self.iteration,
            train_config=self._fingerprint_payload(), rng_state=self.rng_state())

    def _fingerprint_payload(self) -> dict:
        d = self.cfg.to_dict()
        d["fingerprint"] = self.cfg.fingerprint()
        return d

    def resume(self, path) -> None:
        meta = ckpt.read_header(path)
        stored = meta.get("train_config")
        if stored is None or json.loads(stored).get("fingerprint") != self.cfg.fingerprint():
            raise ckpt.CheckpointError(f"{path}: config fingerprint does not match the current TrainConfig")
        model, _ = ckpt.load_model(path, strict_disc_shape=self.model.discriminator.strict_shape)
        self.model.load_state_dict(model.state_dict())
        self.model.to(memory_format=torch.channels_last)
        state = ckpt.load_training_state(path, {"g": self.opt_g, "d": self.opt_d})
        self.iteration = state["iteration"]
        if state["torch_rng"] is not None:
            self.torch_rng.set_state(state["torch_rng"])
        if state["numpy_rng"] is not None:
            self.data_rng.bit_generator.state = state["numpy_rng"]


def train(cfg: TrainConfig, images: Sequence[np.ndarray], run_dir=None, resume_from=None,
          log_stream=sys.stdout, on_step=None) -> Trainer:
    """Run ``cfg.max_iters`` steps (counting any resumed ones), logging JSON lines and checkpointing."""
    trainer = Trainer(cfg, images)
    if resume_from is not None:
        trainer.resume(resume_from)
    run_dir = Path(run_dir) if run_dir is not None else None
    log_file = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(run_dir / "log.jsonl", "a")
    try:
        while trainer.iteration < cfg.max_iters:
            try:
                report = trainer.train_step()
            except FloatingPointError:
                if run_dir is not None:
                    trainer.save(run_dir / f"ckpt_{trainer.iteration}_diverged.safetensors")
                raise
            it = trainer.iteration
            if on_step is not None:
                on_step(it, report)
            if it % cfg.log_every == 0 or it == cfg.max_iters:
                line = report.to_json(it, lr=lr_at(it - 1, cfg), time=time.time())
                if log_stream is not None:
                    print(line, file=log_stream, flush=True)
                if log_file is not None:
                    log_file.write(line + "\n")
                    log_file.flush()
            if run_dir is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                trainer.save(run_dir / f"ckpt_{it}.safetensors")
        if run_dir is not None:
            trainer.save(run_dir / f"ckpt_{trainer.iteration}.safetensors")
            trainer.save(run_dir / "ckpt_last.safetensors")
    finally:
        if log_file is not None:
            log_file.close()
    return trainer
