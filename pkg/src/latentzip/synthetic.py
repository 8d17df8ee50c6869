"""Deterministic synthetic spatiotemporal fields for training and evaluation."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .fields import ScalarField

__all__ = ["synth_data", "advecting_blobs", "smooth_random_field"]


def advecting_blobs(dims: tuple[int, int, int, int], seed: int = 0, n_blobs: int = 4,
                    speed: float = 0.35, dtype_bits: int = 32) -> ScalarField:
    """Gaussian bumps drifting on a torus; slow speeds keep frames strongly
    correlated so the sequence is a good diffusion-interpolation target."""
    v, t, h, w = dims
    rng = np.random.default_rng(seed)
    data = np.empty(dims, dtype=np.float64)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    for vi in range(v):
        pos = rng.random((n_blobs, 2)) * [h, w]
        angle = rng.random(n_blobs) * 2 * np.pi
        vel = speed * np.stack([np.sin(angle), np.cos(angle)], axis=1)
        sigma = (0.08 + 0.1 * rng.random(n_blobs)) * min(h, w)
        amp = 0.5 + rng.random(n_blobs)
        scale = 10.0 ** rng.uniform(-2, 2)
        offset = rng.uniform(-5, 5) * scale
        for ti in range(t):
            frame = np.zeros((h, w))
            for b in range(n_blobs):
                py, px = pos[b] + vel[b] * ti
                dy = np.abs(ys - (py % h))
                dx = np.abs(xs - (px % w))
                dy = np.minimum(dy, h - dy)  # torus distance keeps motion smooth
                dx = np.minimum(dx, w - dx)
                frame += amp[b] * np.exp(-(dy**2 + dx**2) / (2 * sigma[b] ** 2))
            data[vi, ti] = frame * scale + offset
    return ScalarField(data=data, dtype_bits=dtype_bits)


def smooth_random_field(dims: tuple[int, int, int, int], seed: int = 0,
                        correlation: float = 0.98, cutoff: float = 0.15,
                        dtype_bits: int = 32) -> ScalarField:
    """Low-pass random field evolving as an AR(1) process in Fourier space."""
    v, t, h, w = dims
    rng = np.random.default_rng(seed)
    ky = np.fft.fftfreq(h)[:, None]
    kx = np.fft.fftfreq(w)[None, :]
    mask = (np.sqrt(ky**2 + kx**2) <= cutoff).astype(np.float64)
    data = np.empty(dims, dtype=np.float64)
    for vi in range(v):
        coeff = (rng.standard_normal((h, w)) + 1j * rng.standard_normal((h, w))) * mask
        scale = 10.0 ** rng.uniform(-2, 2)
        for ti in range(t):
            if ti > 0:
                fresh = (rng.standard_normal((h, w)) + 1j * rng.standard_normal((h, w))) * mask
                coeff = correlation * coeff + np.sqrt(1 - correlation**2) * fresh
            data[vi, ti] = np.fft.ifft2(coeff).real * scale
    return ScalarField(data=data, dtype_bits=dtype_bits)


_KINDS = {
    "advecting-blobs": advecting_blobs,
    "smooth-random-field": smooth_random_field,
}


def synth_data(kind: str, dims: tuple[int, int, int, int], seed: int = 0, **kwargs) -> ScalarField:
    """Generate one of the synthetic corpus kinds; deterministic per seed."""
    if kind not in _KINDS:
        raise ConfigError(f"unknown synthetic kind {kind!r}; choose from {sorted(_KINDS)}")
    return _KINDS[kind](dims, seed=seed, **kwargs)


def temporal_autocorrelation(field: ScalarField) -> float:
    """Mean lag-1 correlation between consecutive frames, averaged over variables."""
    corrs = []
    for vi in range(field.shape[0]):
        frames = field.data[vi].reshape(field.shape[1], -1).astype(np.float64)
        a = frames[:-1] - frames[:-1].mean(axis=1, keepdims=True)
        b = frames[1:] - frames[1:].mean(axis=1, keepdims=True)
        num = np.sum(a * b, axis=1)
        den = np.sqrt(np.sum(a**2, axis=1) * np.sum(b**2, axis=1))
        corrs.append(float(np.mean(num / np.maximum(den, 1e-30))))
    return float(np.mean(corrs))
