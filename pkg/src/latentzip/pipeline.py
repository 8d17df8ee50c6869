"""End-to-end compression pipeline.

Encode: normalize frames -> analysis transform -> quantize -> entropy-code the
keyframe latents under the hyperprior -> record min-max constants.  No latents
are stored for generated-set frames.  When an error bound is requested the
encoder runs the full decode path (closed loop) and codes per-tile corrections
against the decoder's own reconstruction.

Decode: decode keyframe latents -> min-max normalize -> conditioned diffusion
sampling -> de-normalize and round -> synthesis transform -> undo frame
normalization -> apply corrections.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
import torch

from . import entropy
from .codec import LatentCodec, quantize
from .container import BlockRecord, CompressedContainer, ContainerHeader, write_container
from .diffusion import (Denoiser, LatentMinMax, NoiseSchedule, sample_conditioned,
                        subsample_steps)
from .errorbound import (CorrectionPayload, ResidualBasis, apply_correction, decode_payload,
                         encode_payload, fit_basis, select_and_quantize)
from .errors import ConfigError, DataError
from .fields import (FrameNormalization, ScalarField, compression_ratio, denormalize_frame,
                     normalize_frame, nrmse)
from .partition import IndexPartition, Strategy, make_partition

__all__ = [
    "PipelineConfig",
    "Models",
    "compress",
    "decompress",
    "decompress_keyframe_hold",
    "evaluate",
    "eval_sweep",
    "sweep_to_csv",
    "encode_all_latents",
    "latent_window_batch_fn",
    "fit_residual_basis",
]


@dataclass(frozen=True)
class PipelineConfig:
    strategy: str = "interpolation"
    interval: int = 3
    k: int = 6
    window: int = 16
    steps: int = 32
    tau: float | None = None          # NRMSE-equivalent bound; None disables correction
    seed: int = 0
    tile: tuple[int, int] = (32, 32)
    workers: int = 1

    def strategy_obj(self) -> Strategy:
        return Strategy(kind=self.strategy, interval=self.interval, k=self.k)

    def effective_window(self) -> int:
        """Window length adjusted so interpolation intervals divide it."""
        if self.window < 2:
            raise ConfigError(f"window must be >= 2, got {self.window}")
        if self.strategy != "interpolation":
            return self.window
        base = max(self.window, self.interval + 1)
        return self.interval * ((base - 1) // self.interval) + 1


@dataclass
class Models:
    codec: LatentCodec
    denoiser: Denoiser
    sched: NoiseSchedule
    basis: ResidualBasis | None = None
    codec_fingerprint: str = ""
    denoiser_fingerprint: str = ""
    basis_fingerprint: str = ""


def _plan_windows(n_frames: int, window: int) -> list[tuple[int, int, int]]:
    """(t_start, length, n_pad) windows covering 0..n_frames with edge padding."""
    plans = []
    t = 0
    while t < n_frames:
        remaining = n_frames - t
        length = min(window, remaining)
        plans.append((t, window, window - length))
        t += length
    return plans


def _block_seed(seed: int, index: int) -> int:
    return (seed * 1000003 + index * 7919 + 12345) & 0x7FFFFFFFFFFFFFFF


def _spatial_pad(frames: np.ndarray, factor: int) -> np.ndarray:
    h, w = frames.shape[-2:]
    ph = (-h) % factor
    pw = (-w) % factor
    if ph == 0 and pw == 0:
        return frames
    mode = "reflect" if min(h, w) > 1 else "edge"
    return np.pad(frames, ((0, 0), (0, ph), (0, pw)), mode=mode)


def _channel_support(latents: np.ndarray) -> np.ndarray:
    """[C, 2] (lo, hi) over a stack of [*, C, H, W] integer latents."""
    axes = tuple(i for i in range(latents.ndim) if i != latents.ndim - 3)
    lo = latents.min(axis=axes)
    hi = latents.max(axis=axes)
    return np.stack([lo, hi], axis=1).astype(np.int32)


def _tau_l2(header_tau: float, var_range: float, tile_elems: int) -> float:
    """Per-tile l2 bound equivalent to an overall NRMSE bound of header_tau."""
    return header_tau * max(var_range, 1e-30) * np.sqrt(tile_elems)


def _iter_tiles(h: int, w: int, tile: tuple[int, int]):
    th, tw = tile
    for y0 in range(0, h, th):
        for x0 in range(0, w, tw):
            yield slice(y0, y0 + th), slice(x0, x0 + tw)


def _latent_geometry(models: Models, header: ContainerHeader) -> tuple[int, int, int, int]:
    """(H', W', Hz, Wz) of the latent and hyperlatent grids after padding."""
    f = models.codec.cfg.downsample
    fh = models.codec.cfg.hyper_downsample
    hp = header.dims[2] + ((-header.dims[2]) % f)
    wp = header.dims[3] + ((-header.dims[3]) % f)
    return hp // f, wp // f, hp // (f * fh), wp // (f * fh)


def _encode_keyframes(models: Models, y: torch.Tensor, y_int: np.ndarray,
                      partition: IndexPartition) -> tuple[list, np.ndarray, np.ndarray]:
    """Entropy-code keyframe latents and hyperlatents; returns codes + supports."""
    cond0 = partition.cond_idx0
    with torch.no_grad():
        z = models.codec.hyper_analyze(y[torch.from_numpy(cond0)])
    z_int = quantize(z.numpy())
    y_support = _channel_support(y_int[cond0])
    z_support = _channel_support(z_int)
    cz = z_int.shape[1]
    z_tables = entropy.TableSet(models.codec.density.to_tables(
        [(int(lo), int(hi)) for lo, hi in z_support]))
    z_ids = np.repeat(np.arange(cz), z_int.shape[2] * z_int.shape[3])
    codes = []
    with torch.no_grad():
        mu_all, sigma_all = models.codec.hyper_synthesize(torch.from_numpy(z_int).float())
    c = y_int.shape[1]
    for j in range(len(cond0)):
        z_code = z_tables.encode(z_int[j].ravel(), z_ids)
        mu = mu_all[j].numpy().astype(np.float64).reshape(c, -1)
        sigma = sigma_all[j].numpy().astype(np.float64).reshape(c, -1)
        y_tables = entropy.gaussian_tables_per_channel(mu, sigma, y_support)
        n = mu.shape[1] * c
        y_code = y_tables.encode(y_int[cond0[j]].ravel(), np.arange(n))
        codes.append((z_code, y_code))
    return codes, y_support, z_support


def _decode_keyframes(models: Models, header: ContainerHeader,
                      block: BlockRecord) -> tuple[IndexPartition, np.ndarray]:
    """Decode the stored keyframe latents of a block back to integers."""
    partition = make_partition(block.n_frames, Strategy(
        kind=header.strategy, interval=header.interval, k=header.k))
    if len(block.keyframe_codes) != partition.n_cond:
        raise DataError("keyframe code count does not match the partition")
    c = header.latent_channels
    cz = header.hyper_channels
    hl, wl, hz, wz = _latent_geometry(models, header)
    z_tables = entropy.TableSet(models.codec.density.to_tables(
        [(int(lo), int(hi)) for lo, hi in block.z_support]))
    z_ids = np.repeat(np.arange(cz), hz * wz)
    cond_ints = np.empty((partition.n_cond, c, hl, wl), dtype=np.int64)
    for j, (z_code, y_code) in enumerate(block.keyframe_codes):
        z_int = z_tables.decode(z_code, cz * hz * wz, z_ids).reshape(cz, hz, wz)
        with torch.no_grad():
            mu, sigma = models.codec.hyper_synthesize(torch.from_numpy(z_int[None]).float())
        mu = mu[0].numpy().astype(np.float64).reshape(c, -1)
        sigma = sigma[0].numpy().astype(np.float64).reshape(c, -1)
        y_tables = entropy.gaussian_tables_per_channel(mu, sigma, block.y_support)
        n = c * hl * wl
        cond_ints[j] = y_tables.decode(y_code, n, np.arange(n)).reshape(c, hl, wl)
    return partition, cond_ints


def _decode_block_frames(models: Models, header: ContainerHeader, block: BlockRecord,
                         block_index: int) -> np.ndarray:
    """Reconstruct all frames of a block (original units, before correction)."""
    partition, cond_ints = _decode_keyframes(models, header, block)
    cond_unit = torch.from_numpy(block.minmax.to_unit(cond_ints.astype(np.float64))).float()
    steps = subsample_steps(models.sched.num_steps, header.steps)
    gen = torch.Generator().manual_seed(_block_seed(header.seed, block_index))
    unit_full = sample_conditioned(cond_unit, partition, models.denoiser, models.sched,
                                   steps, gen)
    y_full = block.minmax.from_unit(unit_full)
    return _synthesize_frames(models, header, block, y_full)


def _decode_block_keyframe_hold(models: Models, header: ContainerHeader, block: BlockRecord,
                                block_index: int) -> np.ndarray:
    """Baseline decode: every generated frame copies its nearest keyframe latent."""
    partition, cond_ints = _decode_keyframes(models, header, block)
    cond = np.asarray(partition.cond)
    y_full = np.empty((block.n_frames,) + cond_ints.shape[1:], dtype=np.int64)
    for i in range(1, block.n_frames + 1):
        nearest = int(np.argmin(np.abs(cond - i)))
        y_full[i - 1] = cond_ints[nearest]
    return _synthesize_frames(models, header, block, y_full)


def _synthesize_frames(models: Models, header: ContainerHeader, block: BlockRecord,
                       y_full: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        synth = models.codec.synthesize(torch.from_numpy(y_full).float())
    h, w = header.dims[2], header.dims[3]
    normed = synth[:, 0, :h, :w].numpy().astype(np.float64)
    frames = np.empty_like(normed)
    for i, norm in enumerate(block.frame_norms):
        frames[i] = denormalize_frame(normed[i], norm)
    return frames


def _encode_block(models: Models, field: ScalarField, header: ContainerHeader,
                  cfg: PipelineConfig, var_idx: int, plan: tuple[int, int, int],
                  block_index: int) -> BlockRecord:
    t_start, length, n_pad = plan
    n_real = length - n_pad
    frames = field.data[var_idx, t_start:t_start + n_real].astype(np.float64)
    if n_pad:
        frames = np.concatenate([frames, np.repeat(frames[-1:], n_pad, axis=0)])
    norms: list[FrameNormalization] = []
    normed = np.empty_like(frames)
    for i in range(length):
        normed[i], norm = normalize_frame(frames[i])
        norms.append(norm)
    padded = _spatial_pad(normed, models.codec.cfg.downsample)
    with torch.no_grad():
        y = models.codec.analyze(torch.from_numpy(padded[:, None]).float())
    y_int = quantize(y.numpy())
    minmax = LatentMinMax.from_latents(y_int)
    partition = make_partition(length, cfg.strategy_obj())
    codes, y_support, z_support = _encode_keyframes(models, y, y_int, partition)
    block = BlockRecord(
        var_idx=var_idx, t_start=t_start, n_frames=length, n_pad=n_pad,
        frame_norms=norms, minmax=minmax, y_support=y_support, z_support=z_support,
        keyframe_codes=codes,
    )
    if header.tau is not None:
        if models.basis is None:
            raise DataError("error bound requested but no residual basis is loaded")
        recon = _decode_block_frames(models, header, block, block_index)
        lo, hi = header.var_ranges[var_idx]
        tile_elems = cfg.tile[0] * cfg.tile[1]
        tau_l2 = _tau_l2(header.tau, hi - lo, tile_elems)
        cast = np.float32 if field.dtype_bits == 32 else np.float64
        corrections = []
        for i in range(n_real):  # padded frames are dropped on decode
            for ys, xs in _iter_tiles(header.dims[2], header.dims[3], cfg.tile):
                target = frames[i, ys, xs]
                payload = select_and_quantize(target, recon[i, ys, xs], models.basis, tau_l2)
                if not payload.is_fallback:
                    fixed = apply_correction(recon[i, ys, xs], payload, models.basis)
                    err = np.linalg.norm(target - fixed.astype(cast).astype(np.float64))
                    if err > tau_l2:
                        # dtype rounding ate the slack; store the tile exactly
                        payload = CorrectionPayload(
                            indices=np.empty(0, np.int64), coeffs=np.empty(0, np.int64),
                            step=1.0, fallback=target.ravel().copy())
                corrections.append(encode_payload(payload))
        block.corrections = corrections
    return block


def compress(field: ScalarField, models: Models, cfg: PipelineConfig) -> CompressedContainer:
    """Compress a scalar field into a container (closed-loop when tau is set)."""
    v, t, h, w = field.shape
    th, tw = cfg.tile
    if h % th or w % tw:
        raise ConfigError(f"tile {cfg.tile} does not divide frame {h}x{w}")
    if cfg.tau is not None and models.basis is not None:
        if models.basis.block_size != th * tw:
            raise ConfigError(
                f"basis block size {models.basis.block_size} != tile elements {th * tw}")
    if not 1 <= cfg.steps <= models.sched.num_steps:
        raise ConfigError(f"steps must be in 1..{models.sched.num_steps}")
    window = cfg.effective_window()
    header = ContainerHeader(
        dims=(v, t, h, w), dtype_bits=field.dtype_bits, var_names=list(field.var_names),
        var_ranges=[(float(field.data[i].min()), float(field.data[i].max())) for i in range(v)],
        window=window, tile=cfg.tile, strategy=cfg.strategy, interval=cfg.interval,
        k=cfg.k, steps=cfg.steps, seed=cfg.seed, tau=cfg.tau,
        latent_channels=models.codec.cfg.latent_channels,
        hyper_channels=models.codec.cfg.hyper_channels,
        codec_fingerprint=models.codec_fingerprint,
        denoiser_fingerprint=models.denoiser_fingerprint,
        basis_fingerprint=models.basis_fingerprint if cfg.tau is not None else "",
    )
    plans = _plan_windows(t, window)
    tasks = [(var_idx, plan) for var_idx in range(v) for plan in plans]

    def encode_one(args):
        index, (var_idx, plan) = args
        return _encode_block(models, field, header, cfg, var_idx, plan, index)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            blocks = list(pool.map(encode_one, enumerate(tasks)))
    else:
        blocks = [encode_one(item) for item in enumerate(tasks)]
    container = CompressedContainer(header=header, blocks=blocks)
    write_container(container)  # populate size accounting
    return container


def _check_fingerprints(container: CompressedContainer, models: Models):
    h = container.header
    pairs = [("transform", h.codec_fingerprint, models.codec_fingerprint),
             ("denoiser", h.denoiser_fingerprint, models.denoiser_fingerprint)]
    if h.tau is not None:
        pairs.append(("basis", h.basis_fingerprint, models.basis_fingerprint))
    for name, want, have in pairs:
        if want and have and want != have:
            raise DataError(f"{name} checkpoint fingerprint mismatch: "
                            f"container wants {want[:12]}, loaded {have[:12]}")


def _reassemble(container: CompressedContainer, models: Models, decode_fn,
                workers: int = 1, apply_corrections: bool = True) -> ScalarField:
    header = container.header
    v, t, h, w = header.dims
    out = np.zeros((v, t, h, w), dtype=np.float64)
    results = {}

    def decode_one(args):
        index, block = args
        return index, decode_fn(models, header, block, index)

    items = list(enumerate(container.blocks))
    if len(items) and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for index, frames in pool.map(decode_one, items):
                results[index] = frames
    else:
        for item in items:
            index, frames = decode_one(item)
            results[index] = frames
    for index, block in items:
        frames = results[index]
        n_real = block.n_frames - block.n_pad
        if apply_corrections and header.tau is not None and block.corrections:
            frames = _apply_block_corrections(models, header, block, frames)
        out[block.var_idx, block.t_start:block.t_start + n_real] = frames[:n_real]
    return ScalarField(data=out, var_names=list(header.var_names),
                       dtype_bits=header.dtype_bits)


def _apply_block_corrections(models: Models, header: ContainerHeader, block: BlockRecord,
                             frames: np.ndarray) -> np.ndarray:
    if models.basis is None:
        raise DataError("container carries corrections but no basis is loaded")
    fixed = frames.copy()
    tiles = list(_iter_tiles(header.dims[2], header.dims[3], header.tile))
    n_real = block.n_frames - block.n_pad
    expected = n_real * len(tiles)
    if len(block.corrections) != expected:
        raise DataError(f"{len(block.corrections)} corrections, expected {expected}")
    pos = 0
    for i in range(n_real):
        for ys, xs in tiles:
            payload = decode_payload(block.corrections[pos])
            pos += 1
            fixed[i, ys, xs] = apply_correction(frames[i, ys, xs], payload,
                                                models.basis).reshape(fixed[i, ys, xs].shape)
    return fixed


def decompress(container: CompressedContainer, models: Models, workers: int = 1) -> ScalarField:
    """Reconstruct the field; deterministic given the container and checkpoints."""
    _check_fingerprints(container, models)
    return _reassemble(container, models, _decode_block_frames, workers=workers)


def decompress_keyframe_hold(container: CompressedContainer, models: Models,
                             workers: int = 1) -> ScalarField:
    """Trivial competitor: generated frames copy their nearest keyframe latent.

    Corrections are not applied (they target the diffusion reconstruction), so
    comparisons against this baseline should use containers without a bound.
    """
    _check_fingerprints(container, models)
    return _reassemble(container, models, _decode_block_keyframe_hold, workers=workers,
                       apply_corrections=False)


def nrmse_per_frame(original: ScalarField, recon: ScalarField) -> np.ndarray:
    """[V, T] per-frame RMSE normalized by each variable's full range."""
    if original.shape != recon.shape:
        raise DataError("shape mismatch between original and reconstruction")
    a = original.data.astype(np.float64)
    b = recon.data.astype(np.float64)
    rng = a.reshape(a.shape[0], -1).max(axis=1) - a.reshape(a.shape[0], -1).min(axis=1)
    rmse = np.sqrt(np.mean((a - b) ** 2, axis=(2, 3)))
    return rmse / np.maximum(rng[:, None], 1e-30)


def evaluate(original: ScalarField, recon: ScalarField) -> dict:
    return {
        "nrmse": nrmse(original, recon),
        "per_frame_nrmse": nrmse_per_frame(original, recon),
    }


def eval_sweep(field: ScalarField, models: Models, grid: list[PipelineConfig]) -> list[dict]:
    """Compress/decompress once per configuration and collect metric rows."""
    rows = []
    for cfg in grid:
        start = time.perf_counter()
        container = compress(field, models, cfg)
        recon = decompress(container, models)
        wall = time.perf_counter() - start
        rows.append({
            "strategy": cfg.strategy,
            "interval": cfg.interval,
            "steps": cfg.steps,
            "tau": cfg.tau if cfg.tau is not None else "",
            "nrmse": nrmse(field, recon),
            "ratio": compression_ratio(field.nbytes, container.size_l, container.size_g),
            "size_l": container.size_l,
            "size_g": container.size_g,
            "wall_time": wall,
        })
    return rows


def sweep_to_csv(rows: list[dict], path) -> None:
    import csv

    fields = ["strategy", "interval", "steps", "tau", "nrmse", "ratio",
              "size_l", "size_g", "wall_time"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in fields})


def encode_all_latents(codec: LatentCodec, field: ScalarField) -> np.ndarray:
    """Quantized latents [V, T, C, H', W'] for every frame (frozen encoder)."""
    v, t, h, w = field.shape
    out = None
    for vi in range(v):
        normed = np.empty((t, h, w), dtype=np.float64)
        for ti in range(t):
            normed[ti], _ = normalize_frame(field.frame(vi, ti))
        padded = _spatial_pad(normed, codec.cfg.downsample)
        with torch.no_grad():
            y = codec.analyze(torch.from_numpy(padded[:, None]).float())
        y_int = quantize(y.numpy())
        if out is None:
            out = np.empty((v,) + y_int.shape, dtype=np.int64)
        out[vi] = y_int
    return out


def latent_window_batch_fn(latents: np.ndarray, batch: int, window: int,
                           strategy: Strategy, frame_range: tuple[int, int] | None = None,
                           intervals: list[int] | None = None, crop: int | None = None):
    """Batch sampler for diffusion training over precomputed quantized latents.

    Windows of consecutive frames are min-max normalized per sample exactly as
    the encoder does per block.  When ``intervals`` is given the interpolation
    interval (and the matching window length) is resampled each call so one
    model serves interval sweeps.  ``crop`` takes random spatial crops of the
    latent grid (one offset per sample, shared across its frames); the
    attention denoiser is size-agnostic, so training on crops transfers to
    full-grid sampling and cuts the quadratic spatial-attention cost.
    """
    v, t = latents.shape[:2]
    hl, wl = latents.shape[-2:]
    t_lo, t_hi = frame_range or (0, t)

    def batch_fn(rng: np.random.Generator):
        if intervals:
            d = int(rng.choice(intervals))
            strat = Strategy(kind="interpolation", interval=d, k=strategy.k)
            win = d * max(1, (window - 1) // d) + 1
        else:
            strat = strategy
            win = window
        partition = make_partition(win, strat)
        ch, cw = (min(crop, hl), min(crop, wl)) if crop else (hl, wl)
        frames = np.empty((batch, win, latents.shape[2], ch, cw), dtype=np.float32)
        for b in range(batch):
            vi = int(rng.integers(v))
            t0 = int(rng.integers(t_lo, t_hi - win + 1))
            y0 = int(rng.integers(hl - ch + 1))
            x0 = int(rng.integers(wl - cw + 1))
            block = latents[vi, t0:t0 + win, :, y0:y0 + ch, x0:x0 + cw]
            frames[b] = LatentMinMax.from_latents(block).to_unit(block.astype(np.float64))
        return torch.from_numpy(frames), partition

    return batch_fn


def fit_residual_basis(field: ScalarField, models: Models, cfg: PipelineConfig,
                       n_components: int = 64, max_tiles: int = 4000,
                       seed: int = 0) -> ResidualBasis:
    """Fit the correction basis on decode residual tiles (no correction active)."""
    plain = replace(cfg, tau=None)
    container = compress(field, models, plain)
    recon = decompress(container, models)
    th, tw = cfg.tile
    tiles = []
    for vi in range(field.shape[0]):
        for ti in range(field.shape[1]):
            res = field.data[vi, ti].astype(np.float64) - recon.data[vi, ti].astype(np.float64)
            for ys, xs in _iter_tiles(field.shape[2], field.shape[3], cfg.tile):
                tiles.append(res[ys, xs].ravel())
    tiles = np.asarray(tiles)
    if len(tiles) > max_tiles:
        rng = np.random.default_rng(seed)
        tiles = tiles[rng.choice(len(tiles), size=max_tiles, replace=False)]
    return fit_basis(tiles, n_components=min(n_components, th * tw, len(tiles)))
