"""Learned transform codec: analysis/synthesis nets, a hyperprior that predicts
per-element Gaussian parameters, rounding quantization with its uniform-noise
training relaxation, and stage-1 rate-distortion training."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .entropy import SIGMA_MAX, SIGMA_MIN, FactorizedDensity
from .errors import DataError, TrainingDiverged
from .fields import ScalarField, normalize_frame

__all__ = [
    "TransformConfig",
    "LatentCodec",
    "quantize",
    "relax_quantize",
    "RDTrainConfig",
    "train_stage1",
]


def quantize(x):
    """Round to the nearest integer, ties away from zero.

    Idempotent and shift-equivariant for integer shifts.  Accepts numpy
    arrays (returns int64) and torch tensors (returns integral-valued floats
    in the input dtype).
    """
    if isinstance(x, np.ndarray):
        if not np.all(np.isfinite(x)):
            raise DataError("cannot quantize non-finite values")
        return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64)
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


def relax_quantize(x: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    """Differentiable stand-in for rounding: add iid Uniform(-0.5, 0.5) noise."""
    noise = torch.rand(x.shape, generator=generator, dtype=x.dtype) - 0.5
    return x + noise


@dataclass(frozen=True)
class TransformConfig:
    """Architecture knobs for the codec; defaults are desk scale."""

    latent_channels: int = 16
    hyper_channels: int = 8
    width: int = 32
    downsample: int = 4     # two stride-2 stages
    hyper_downsample: int = 2
    sigma_min: float = SIGMA_MIN
    sigma_max: float = SIGMA_MAX

    @classmethod
    def paper_mode(cls) -> "TransformConfig":
        return cls(latent_channels=64, hyper_channels=32, width=96)


class _Analysis(nn.Module):
    def __init__(self, cfg: TransformConfig):
        super().__init__()
        w, c = cfg.width, cfg.latent_channels
        self.net = nn.Sequential(
            nn.Conv2d(1, w, 5, stride=2, padding=2),
            nn.LeakyReLU(inplace=True),
            nn.Conv2d(w, w, 5, stride=2, padding=2),
            nn.LeakyReLU(inplace=True),
            nn.Conv2d(w, c, 3, stride=1, padding=1),
        )

    def forward(self, x):
        return self.net(x)


class _Synthesis(nn.Module):
    def __init__(self, cfg: TransformConfig):
        super().__init__()
        w, c = cfg.width, cfg.latent_channels
        self.net = nn.Sequential(
            nn.Conv2d(c, w, 3, stride=1, padding=1),
            nn.LeakyReLU(inplace=True),
            nn.ConvTranspose2d(w, w, 5, stride=2, padding=2, output_padding=1),
            nn.LeakyReLU(inplace=True),
            nn.ConvTranspose2d(w, 1, 5, stride=2, padding=2, output_padding=1),
        )

    def forward(self, y):
        return self.net(y)


class _HyperAnalysis(nn.Module):
    def __init__(self, cfg: TransformConfig):
        super().__init__()
        w = cfg.width
        self.net = nn.Sequential(
            nn.Conv2d(cfg.latent_channels, w, 3, stride=1, padding=1),
            nn.LeakyReLU(inplace=True),
            nn.Conv2d(w, cfg.hyper_channels, 5, stride=2, padding=2),
        )

    def forward(self, y):
        return self.net(y)


class _HyperSynthesis(nn.Module):
    def __init__(self, cfg: TransformConfig):
        super().__init__()
        w = cfg.width
        self.net = nn.Sequential(
            nn.ConvTranspose2d(cfg.hyper_channels, w, 5, stride=2, padding=2, output_padding=1),
            nn.LeakyReLU(inplace=True),
            nn.Conv2d(w, 2 * cfg.latent_channels, 3, stride=1, padding=1),
        )

    def forward(self, z):
        return self.net(z)


def _gaussian_bin_likelihood(y: torch.Tensor, mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    upper = torch.special.ndtr((y + 0.5 - mu) / sigma)
    lower = torch.special.ndtr((y - 0.5 - mu) / sigma)
    return (upper - lower).clamp_min(1e-9)


class LatentCodec(nn.Module):
    """Frame transform plus hyperprior entropy model.

    ``analyze``/``synthesize`` map normalized frames to latents and back;
    ``hyper_analyze``/``hyper_synthesize`` produce the hyperlatent and the
    per-element (mu, sigma) used for conditional coding of the latents.
    """

    def __init__(self, cfg: TransformConfig | None = None):
        super().__init__()
        self.cfg = cfg or TransformConfig()
        self.analysis = _Analysis(self.cfg)
        self.synthesis = _Synthesis(self.cfg)
        self.hyper_analysis = _HyperAnalysis(self.cfg)
        self.hyper_synthesis = _HyperSynthesis(self.cfg)
        self.density = FactorizedDensity(self.cfg.hyper_channels)

    def _check_spatial(self, x: torch.Tensor):
        f = self.cfg.downsample
        if x.shape[-1] % f or x.shape[-2] % f:
            raise DataError(f"spatial dims {tuple(x.shape[-2:])} not divisible by {f}")

    def analyze(self, frames: torch.Tensor) -> torch.Tensor:
        """[B, 1, H, W] normalized frames -> [B, C, H/f, W/f] latents."""
        if not torch.all(torch.isfinite(frames)):
            raise DataError("non-finite input to analysis transform")
        self._check_spatial(frames)
        return self.analysis(frames)

    def synthesize(self, latents: torch.Tensor) -> torch.Tensor:
        """[B, C, H', W'] latents (real or integer-valued) -> [B, 1, H, W]."""
        if latents.shape[1] != self.cfg.latent_channels:
            raise DataError(
                f"expected {self.cfg.latent_channels} latent channels, got {latents.shape[1]}"
            )
        return self.synthesis(latents.float())

    def hyper_analyze(self, y: torch.Tensor) -> torch.Tensor:
        if not torch.all(torch.isfinite(y)):
            raise DataError("non-finite input to hyper-analysis")
        return self.hyper_analysis(y)

    def hyper_synthesize(self, z_hat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Integer hyperlatents -> (mu, sigma) with sigma clamped to a safe band."""
        params = self.hyper_synthesis(z_hat.float())
        mu, raw = params.chunk(2, dim=1)
        sigma = torch.nn.functional.softplus(raw).clamp(self.cfg.sigma_min, self.cfg.sigma_max)
        return mu, sigma

    def rd_forward(self, x: torch.Tensor, generator: torch.Generator | None = None) -> dict:
        """Training pass with the additive-noise quantizer relaxation."""
        y = self.analyze(x)
        z = self.hyper_analyze(y)
        y_noisy = relax_quantize(y, generator)
        z_noisy = relax_quantize(z, generator)
        mu, sigma = self.hyper_synthesize(z_noisy)
        x_hat = self.synthesize(y_noisy)
        bits_y = torch.sum(-torch.log2(_gaussian_bin_likelihood(y_noisy, mu, sigma)))
        b, c, h, w = z_noisy.shape
        z_flat = z_noisy.permute(1, 0, 2, 3).reshape(c, -1)
        bits_z = self.density.bits(z_flat)
        return {"x_hat": x_hat, "bits_y": bits_y / x.shape[0], "bits_z": bits_z / x.shape[0]}


@dataclass
class RDTrainConfig:
    """Stage-1 schedule: rate weight, learning-rate decay, crop geometry."""

    total_iters: int = 2000
    lambda_init: float = 1e-5
    lambda_double_at: int | None = None  # default: halfway
    lr_init: float = 1e-3
    lr_decay: tuple[float, int] = (0.5, 1000)
    patch: tuple[int, int] = (32, 32)
    batch: int = 8
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.lambda_double_at is None:
            self.lambda_double_at = max(1, self.total_iters // 2)
        for name in ("total_iters", "lambda_init", "lr_init", "batch"):
            if getattr(self, name) <= 0:
                raise DataError(f"{name} must be positive")


def sample_patches(fields: list[ScalarField], patch: tuple[int, int], batch: int,
                   rng: np.random.Generator, frame_range: tuple[int, int] | None = None) -> torch.Tensor:
    """Random normalized crops [B, 1, ph, pw]; frames smaller than the crop
    are grown by reflection padding first."""
    ph, pw = patch
    out = np.empty((batch, 1, ph, pw), dtype=np.float32)
    for b in range(batch):
        f = fields[rng.integers(len(fields))]
        v = int(rng.integers(f.shape[0]))
        t_lo, t_hi = frame_range or (0, f.shape[1])
        t = int(rng.integers(t_lo, t_hi))
        frame, _ = normalize_frame(f.frame(v, t))
        if frame.shape[0] < ph or frame.shape[1] < pw:
            pad_h = max(0, ph - frame.shape[0])
            pad_w = max(0, pw - frame.shape[1])
            frame = np.pad(frame, ((0, pad_h), (0, pad_w)), mode="reflect")
        y0 = int(rng.integers(frame.shape[0] - ph + 1))
        x0 = int(rng.integers(frame.shape[1] - pw + 1))
        out[b, 0] = frame[y0:y0 + ph, x0:x0 + pw]
    return torch.from_numpy(out)


def train_stage1(fields: ScalarField | list[ScalarField], cfg: RDTrainConfig,
                 codec: LatentCodec | None = None,
                 frame_range: tuple[int, int] | None = None) -> tuple[LatentCodec, dict]:
    """Train the transform and hyperprior jointly on MSE + lambda * (Ry + Rz).

    Returns the trained codec and a history dict with the loss trace.  The
    rate weight doubles once at ``lambda_double_at``; a non-finite loss
    aborts with the trace attached.
    """
    if isinstance(fields, ScalarField):
        fields = [fields]
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    torch.manual_seed(cfg.seed)
    codec = codec or LatentCodec()
    codec.train()
    opt = torch.optim.Adam(codec.parameters(), lr=cfg.lr_init)
    decay_factor, decay_every = cfg.lr_decay
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=decay_every, gamma=decay_factor)
    lam = cfg.lambda_init
    history = {"iter": [], "loss": [], "mse": [], "bits": [], "lambda": [], "lr": []}
    for it in range(1, cfg.total_iters + 1):
        if it == cfg.lambda_double_at + 1:
            lam = cfg.lambda_init * 2.0
        x = sample_patches(fields, cfg.patch, cfg.batch, rng, frame_range)
        out = codec.rd_forward(x, gen)
        mse = torch.mean((x - out["x_hat"]) ** 2)
        bits = out["bits_y"] + out["bits_z"]
        loss = mse + lam * bits
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"loss became non-finite at iteration {it}", history)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if it % cfg.log_every == 0 or it == 1 or it == cfg.total_iters:
            history["iter"].append(it)
            history["loss"].append(float(loss.detach()))
            history["mse"].append(float(mse.detach()))
            history["bits"].append(float(bits.detach()))
            history["lambda"].append(lam)
            history["lr"].append(opt.param_groups[0]["lr"])
    codec.eval()
    return codec, history


def reconstruction_mse(codec: LatentCodec, patches: torch.Tensor) -> float:
    """Round-trip MSE through analyze -> quantize -> synthesize (eval path)."""
    codec.eval()
    with torch.no_grad():
        y = codec.analyze(patches)
        x_hat = codec.synthesize(quantize(y))
        return float(torch.mean((patches - x_hat) ** 2))
