"""Conditioned latent diffusion: noise schedule, forward process, denoiser with
factorized space-time attention, masked training objective, and the reduced-step
ancestral sampler that keeps conditioning frames bit-exact."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, DataError
from .partition import IndexPartition, oplus

__all__ = [
    "NoiseSchedule",
    "build_schedule",
    "forward_sample",
    "LatentMinMax",
    "DenoiserConfig",
    "Denoiser",
    "training_step",
    "train_denoiser",
    "finetune_reduced_steps",
    "subsample_steps",
    "sample_conditioned",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances beta_t and cumulative products alpha_bar_t.

    ``alpha_bars`` is indexed by timestep directly: alpha_bars[0] == 1 and
    alpha_bars[t] covers steps 1..t.
    """

    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        betas = np.ascontiguousarray(self.betas, dtype=np.float64)
        bars = np.ascontiguousarray(self.alpha_bars, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ConfigError("schedule needs at least one step")
        if np.any(betas < 0.0) or np.any(betas >= 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        if bars.shape != (betas.size + 1,) or bars[0] != 1.0:
            raise ConfigError("alpha_bars must have length T+1 with alpha_bars[0] == 1")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", bars)

    @property
    def num_steps(self) -> int:
        return self.betas.size

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.num_steps:
            raise ConfigError(f"timestep {t} outside 0..{self.num_steps}")
        return float(self.alpha_bars[t])


def build_schedule(num_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule with alpha_bar computed by running product."""
    if num_steps < 1:
        raise ConfigError("num_steps must be >= 1")
    if not (0.0 <= beta_start <= beta_end < 1.0):
        raise ConfigError(f"need 0 <= beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if num_steps == 1:
        betas = np.asarray([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    bars = np.empty(num_steps + 1, dtype=np.float64)
    bars[0] = 1.0
    np.cumprod(1.0 - betas, out=bars[1:])
    return NoiseSchedule(betas=betas, alpha_bars=bars)


def forward_sample(y0, t: int, eps, sched: NoiseSchedule):
    """Jump directly to step t of the forward process:
    sqrt(alpha_bar_t) * y0 + sqrt(1 - alpha_bar_t) * eps."""
    if not 1 <= t <= sched.num_steps:
        raise ConfigError(f"timestep {t} outside 1..{sched.num_steps}")
    a = sched.alpha_bar(t)
    return math.sqrt(a) * y0 + math.sqrt(1.0 - a) * eps


@dataclass(frozen=True)
class LatentMinMax:
    """Per-block constants mapping integer latents into [-1, 1] and back."""

    lo: float
    hi: float

    def __post_init__(self):
        if not self.hi > self.lo:
            raise DataError(f"need hi > lo, got [{self.lo}, {self.hi}]")

    @classmethod
    def from_latents(cls, latents: np.ndarray) -> "LatentMinMax":
        lo = float(latents.min())
        hi = float(latents.max())
        if hi == lo:
            hi = lo + 1.0  # constant block still needs an invertible map
        return cls(lo=lo, hi=hi)

    def to_unit(self, latents):
        return (latents - self.lo) * (2.0 / (self.hi - self.lo)) - 1.0

    def from_unit(self, unit) -> np.ndarray:
        """Invert to integer latents (exact for values produced by to_unit)."""
        if not isinstance(unit, np.ndarray):
            unit = unit.detach().cpu().numpy()
        real = (np.asarray(unit, dtype=np.float64) + 1.0) * ((self.hi - self.lo) / 2.0) + self.lo
        return (np.sign(real) * np.floor(np.abs(real) + 0.5)).astype(np.int64)


def _sinusoidal(positions: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1))
    args = positions.float().unsqueeze(-1) * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.nn.functional.pad(emb, (0, 1))
    return emb


class _Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        h = self.norm(tokens)
        out, _ = self.attn(h, h, h, need_weights=False)
        return tokens + out


class _Block(nn.Module):
    """Temporal attention, spatial attention, then a conv feed-forward.

    The feed-forward mixes channels pointwise and space depthwise, which keeps
    the CPU cost dominated by the attention terms rather than dense 3x3 convs.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.temporal = _Attention(dim, heads)
        self.spatial = _Attention(dim, heads)
        self.ff_norm = nn.LayerNorm(dim)
        self.ff = nn.Sequential(
            nn.Conv2d(dim, dim * 2, 1),
            nn.GELU(),
            nn.Conv2d(dim * 2, dim * 2, 3, padding=1, groups=dim * 2),
            nn.GELU(),
            nn.Conv2d(dim * 2, dim, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: [B, N, D, H, W]
        b, n, d, h, w = x.shape
        tokens = x.permute(0, 3, 4, 1, 2).reshape(b * h * w, n, d)
        tokens = self.temporal(tokens)
        tokens = tokens.reshape(b, h, w, n, d).permute(0, 3, 1, 2, 4).reshape(b * n, h * w, d)
        tokens = self.spatial(tokens)
        x = tokens.reshape(b, n, h, w, d)
        ff_in = self.ff_norm(x).permute(0, 1, 4, 2, 3).reshape(b * n, d, h, w)
        x = x.permute(0, 1, 4, 2, 3) + self.ff(ff_in).reshape(b, n, d, h, w)
        return x


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 16
    width: int = 64
    blocks: int = 2
    heads: int = 4

    @classmethod
    def paper_mode(cls) -> "DenoiserConfig":
        return cls(latent_channels=64, width=192, blocks=4, heads=8)


class Denoiser(nn.Module):
    """Noise estimator over latent frame sequences [B, N, C, H, W].

    Each block applies attention along the temporal axis (tokens reshaped to
    (H*W) x N x D) and along the spatial axis (N x (H*W) x D), so the module
    accepts any sequence length and spatial grid.
    """

    def __init__(self, cfg: DenoiserConfig | None = None):
        super().__init__()
        self.cfg = cfg or DenoiserConfig()
        d = self.cfg.width
        self.conv_in = nn.Conv2d(self.cfg.latent_channels, d, 3, padding=1)
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList(_Block(d, self.cfg.heads) for _ in range(self.cfg.blocks))
        self.out_norm = nn.LayerNorm(d)
        self.conv_out = nn.Conv2d(d, self.cfg.latent_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, y: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if y.ndim != 5:
            raise DataError(f"expected [B, N, C, H, W], got shape {tuple(y.shape)}")
        b, n, c, h, w = y.shape
        d = self.cfg.width
        x = self.conv_in(y.reshape(b * n, c, h, w)).reshape(b, n, d, h, w)
        temb = self.time_mlp(_sinusoidal(t.reshape(b), d))
        pos = _sinusoidal(torch.arange(n), d)
        x = x + temb[:, None, :, None, None] + pos[None, :, :, None, None]
        for block in self.blocks:
            x = block(x)
        x = self.out_norm(x.permute(0, 1, 3, 4, 2)).permute(0, 1, 4, 2, 3)
        return self.conv_out(x.reshape(b * n, d, h, w)).reshape(b, n, c, h, w)


def training_step(frames: torch.Tensor, partition: IndexPartition, denoiser: Denoiser,
                  sched: NoiseSchedule, generator: torch.Generator,
                  allowed_steps: np.ndarray | None = None) -> torch.Tensor:
    """One conditioned denoising objective evaluation.

    ``frames`` are min-max normalized quantized latents [B, N, C, H, W].
    Noise is applied to generated-set frames only; the network sees the merge
    with clean conditioning frames; the loss is the mean squared error of the
    noise estimate restricted to generated-set outputs.
    """
    if frames.ndim != 5:
        raise DataError(f"expected [B, N, C, H, W], got {tuple(frames.shape)}")
    b = frames.shape[0]
    if frames.shape[1] != partition.n_frames:
        raise DataError("frame count does not match partition")
    if allowed_steps is None:
        t = torch.randint(1, sched.num_steps + 1, (b,), generator=generator)
    else:
        pick = torch.randint(0, len(allowed_steps), (b,), generator=generator)
        t = torch.from_numpy(np.asarray(allowed_steps, dtype=np.int64))[pick]
    gen_idx = torch.from_numpy(partition.gen_idx0)
    y0_g = frames[:, gen_idx]
    eps = torch.randn(y0_g.shape, generator=generator, dtype=frames.dtype)
    bars = torch.from_numpy(sched.alpha_bars).to(frames.dtype)[t]
    shape = (b, 1, 1, 1, 1)
    y_t_g = torch.sqrt(bars).reshape(shape) * y0_g + torch.sqrt(1.0 - bars).reshape(shape) * eps
    cond = frames[:, torch.from_numpy(partition.cond_idx0)]
    targets = np.concatenate([partition.gen_idx0, partition.cond_idx0])
    inverse = np.empty(partition.n_frames, dtype=np.int64)
    inverse[targets] = np.arange(partition.n_frames)
    y_t = torch.cat([y_t_g, cond], dim=1)[:, torch.from_numpy(inverse)]
    eps_hat = denoiser(y_t, t)
    loss = torch.mean((eps - eps_hat[:, gen_idx]) ** 2)
    if not torch.isfinite(loss):
        raise DataError("diffusion training loss became non-finite")
    return loss


def train_denoiser(denoiser: Denoiser, sched: NoiseSchedule, batch_fn, iters: int,
                   lr: float = 1e-4, seed: int = 0,
                   allowed_steps: np.ndarray | None = None, log_every: int = 100) -> dict:
    """Generic training loop; ``batch_fn(rng)`` yields (frames, partition)."""
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(denoiser.parameters(), lr=lr)
    history = {"iter": [], "loss": []}
    denoiser.train()
    for it in range(1, iters + 1):
        frames, partition = batch_fn(rng)
        loss = training_step(frames, partition, denoiser, sched, gen, allowed_steps)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if it % log_every == 0 or it == 1 or it == iters:
            history["iter"].append(it)
            history["loss"].append(float(loss.detach()))
    denoiser.eval()
    return history


def subsample_steps(num_steps: int, count: int) -> np.ndarray:
    """``count`` evenly spaced timesteps including the top step, descending."""
    if not 1 <= count <= num_steps:
        raise ConfigError(f"need 1 <= count <= {num_steps}, got {count}")
    if count == 1:
        return np.asarray([num_steps], dtype=np.int64)
    spacing = (num_steps - 1) / (count - 1)
    vals = num_steps - spacing * np.arange(count)
    steps = np.floor(vals + 0.5).astype(np.int64)  # half-up keeps steps distinct
    return steps


def finetune_reduced_steps(denoiser: Denoiser, sched: NoiseSchedule, count: int,
                           batch_fn, iters: int, lr: float = 1e-4, seed: int = 0,
                           log_every: int = 100) -> dict:
    """Continue training with timesteps restricted to the subsampled set."""
    steps = subsample_steps(sched.num_steps, count)
    return train_denoiser(denoiser, sched, batch_fn, iters, lr=lr, seed=seed,
                          allowed_steps=steps, log_every=log_every)


@torch.no_grad()
def sample_conditioned(cond_latents: torch.Tensor, partition: IndexPartition,
                       denoiser: Denoiser, sched: NoiseSchedule, steps: np.ndarray,
                       generator: torch.Generator) -> torch.Tensor:
    """Ancestral sampling of generated-set frames given fixed conditioning frames.

    ``steps`` is a descending subset of {1..T}; consecutive entries define the
    retimed transitions, so the full set reproduces plain step-by-step
    denoising.  Output rows at conditioning indices are the input tensors,
    bit for bit.
    """
    steps = np.asarray(steps, dtype=np.int64)
    if steps.size == 0:
        raise ConfigError("empty sampling-step set")
    if np.any(np.diff(steps) >= 0):
        raise ConfigError("sampling steps must be strictly descending")
    if steps[0] > sched.num_steps or steps[-1] < 1:
        raise ConfigError(f"steps outside 1..{sched.num_steps}")
    if len(cond_latents) != partition.n_cond:
        raise DataError(f"{len(cond_latents)} conditioning frames, expected {partition.n_cond}")
    cond = cond_latents.float()
    shape = (partition.n_gen,) + tuple(cond.shape[1:])
    y_g = torch.randn(shape, generator=generator)
    nexts = np.append(steps[1:], 0)
    for t, t_next in zip(steps, nexts):
        a_t = sched.alpha_bar(int(t))
        a_prev = sched.alpha_bar(int(t_next))
        beta_eff = 1.0 - a_t / a_prev
        y_full = oplus(y_g, cond, partition)
        t_tensor = torch.full((1,), int(t), dtype=torch.long)
        eps_hat = denoiser(y_full.unsqueeze(0), t_tensor)[0][torch.from_numpy(partition.gen_idx0)]
        mean = (y_g - beta_eff / math.sqrt(1.0 - a_t) * eps_hat) / math.sqrt(1.0 - beta_eff)
        if t_next > 0:
            var = (1.0 - a_prev) / (1.0 - a_t) * beta_eff
            noise = torch.randn(shape, generator=generator)
            y_g = mean + math.sqrt(var) * noise
        else:
            y_g = mean
    if not torch.all(torch.isfinite(y_g)):
        raise DataError("sampler produced non-finite values")
    return oplus(y_g, cond_latents, partition)
