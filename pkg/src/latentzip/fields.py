"""Scalar field container, per-frame normalization, and evaluation metrics.

All metric arithmetic runs in float64 regardless of the stored dtype so that
small residuals stay meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

__all__ = [
    "ScalarField",
    "FrameNormalization",
    "normalize_frame",
    "denormalize_frame",
    "nrmse",
    "compression_ratio",
]


@dataclass
class ScalarField:
    """A 4-D real tensor [variable, time, height, width] with metadata."""

    data: np.ndarray
    var_names: list[str] = field(default_factory=list)
    dtype_bits: int = 32

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise DataError(f"expected 4-D [V,T,H,W] data, got shape {self.data.shape}")
        v, t, h, w = self.data.shape
        if t < 1 or h < 1 or w < 1:
            raise DataError(f"degenerate dimensions {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise DataError("field contains non-finite values")
        if self.dtype_bits not in (32, 64):
            raise DataError(f"dtype_bits must be 32 or 64, got {self.dtype_bits}")
        want = np.float32 if self.dtype_bits == 32 else np.float64
        if self.data.dtype != want:
            self.data = self.data.astype(want)
        if not self.var_names:
            self.var_names = [f"var{i}" for i in range(v)]
        if len(self.var_names) != v:
            raise DataError(f"{len(self.var_names)} names for {v} variables")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def nbytes(self) -> int:
        """Raw storage cost of the payload at the declared precision."""
        return self.data.size * self.dtype_bits // 8

    def frame(self, v: int, t: int) -> np.ndarray:
        return self.data[v, t]


@dataclass(frozen=True)
class FrameNormalization:
    """Constants that undo a zero-mean / unit-range frame normalization."""

    mean: float
    range: float
    constant: bool = False

    def __post_init__(self):
        if self.range < 0:
            raise DataError(f"negative range {self.range}")


def normalize_frame(frame: np.ndarray) -> tuple[np.ndarray, FrameNormalization]:
    """Shift a frame to zero mean and scale it to unit range.

    A constant frame has no usable range; it maps to zeros and the returned
    constants carry ``constant=True`` (range 0) so inversion reproduces the
    stored mean without dividing.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if not np.all(np.isfinite(frame)):
        raise DataError("frame contains non-finite values")
    mean = float(frame.mean())
    rng = float(frame.max() - frame.min())
    if rng == 0.0:
        return np.zeros_like(frame), FrameNormalization(mean=mean, range=0.0, constant=True)
    return (frame - mean) / rng, FrameNormalization(mean=mean, range=rng)


def denormalize_frame(frame: np.ndarray, norm: FrameNormalization) -> np.ndarray:
    """Invert :func:`normalize_frame`; exact for constant frames (range 0)."""
    return np.asarray(frame, dtype=np.float64) * norm.range + norm.mean


def _as_array(x) -> np.ndarray:
    data = x.data if isinstance(x, ScalarField) else x
    return np.asarray(data, dtype=np.float64)


def nrmse(original, reconstructed) -> float:
    """Root mean square error normalized by the range of the original."""
    a = _as_array(original)
    b = _as_array(reconstructed)
    if a.shape != b.shape:
        raise DataError(f"shape mismatch {a.shape} vs {b.shape}")
    rng = float(a.max() - a.min())
    if rng == 0.0:
        raise DataError("NRMSE undefined for a constant original (zero range)")
    rmse = float(np.sqrt(np.mean((a - b) ** 2)))
    return rmse / rng


def compression_ratio(original_bytes: int, l_bytes: int, g_bytes: int) -> float:
    """Effective compression ratio: original size over stored size (L plus G)."""
    denom = l_bytes + g_bytes
    if denom <= 0:
        raise DataError("compressed size must be positive")
    return original_bytes / denom
