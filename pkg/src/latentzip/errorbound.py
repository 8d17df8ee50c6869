"""Hard reconstruction-error guarantee via principal-component residual correction.

A basis fitted offline on a residual corpus captures typical reconstruction
errors; per block, the largest projection coefficients are kept, quantized,
and entropy-coded until the achieved residual norm falls under the requested
bound.  Blocks the basis cannot fix fall back to storing the block losslessly,
so the bound holds unconditionally.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import BoundUnreachableError, ConfigError, DataError

__all__ = [
    "ResidualBasis",
    "fit_basis",
    "project",
    "CorrectionPayload",
    "select_and_quantize",
    "apply_correction",
    "encode_payload",
    "decode_payload",
]


@dataclass
class ResidualBasis:
    """Orthonormal residual directions, columns ordered by explained variance."""

    matrix: np.ndarray  # [D, B]
    explained_variance: np.ndarray  # [B]
    corpus_fingerprint: str

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise DataError("basis must be a [D, B] matrix")
        self.explained_variance = np.ascontiguousarray(self.explained_variance, dtype=np.float64)

    @property
    def block_size(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_components(self) -> int:
        return self.matrix.shape[1]


def fit_basis(residuals: np.ndarray, n_components: int) -> ResidualBasis:
    """Top principal directions of the centered residual corpus ([n, D] rows)."""
    residuals = np.asarray(residuals, dtype=np.float64)
    if residuals.ndim != 2:
        raise DataError(f"expected [n, D] corpus, got {residuals.shape}")
    n, d = residuals.shape
    if not 1 <= n_components <= min(n, d):
        raise DataError(f"n_components must be in 1..{min(n, d)}, got {n_components}")
    centered = residuals - residuals.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    var = (s**2) / max(n - 1, 1)
    fp = hashlib.sha256(residuals.tobytes()).hexdigest()[:16]
    return ResidualBasis(
        matrix=vt[:n_components].T.copy(),
        explained_variance=var[:n_components].copy(),
        corpus_fingerprint=fp,
    )


def project(residual: np.ndarray, basis: ResidualBasis) -> np.ndarray:
    """Coefficients of a residual in the basis: U^T r."""
    residual = np.asarray(residual, dtype=np.float64).ravel()
    if residual.size != basis.block_size:
        raise DataError(f"residual of {residual.size} values, basis expects {basis.block_size}")
    return basis.matrix.T @ residual


@dataclass
class CorrectionPayload:
    """Decodable correction for one block.

    Either a sparse set of quantized basis coefficients, or (fallback) the
    block's target values verbatim so the corrected output is bit-exact.
    """

    indices: np.ndarray          # int64, strictly increasing
    coeffs: np.ndarray           # int64, quantized coefficient integers
    step: float                  # quantization step
    fallback: np.ndarray | None = None

    def __post_init__(self):
        self.indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        self.coeffs = np.ascontiguousarray(self.coeffs, dtype=np.int64)
        if self.indices.size != self.coeffs.size:
            raise DataError("indices and coefficients differ in length")
        if self.indices.size and np.any(np.diff(self.indices) <= 0):
            raise DataError("indices must be strictly increasing")
        if self.fallback is not None:
            self.fallback = np.ascontiguousarray(self.fallback, dtype=np.float64)

    @property
    def is_empty(self) -> bool:
        return self.fallback is None and self.indices.size == 0

    @property
    def is_fallback(self) -> bool:
        return self.fallback is not None


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64)


def select_and_quantize(target: np.ndarray, reconstruction: np.ndarray,
                        basis: ResidualBasis, tau: float, safety: float = 2.0) -> CorrectionPayload:
    """Choose and quantize coefficients so the corrected block meets the bound.

    Coefficients are added greedily in order of decreasing magnitude; the
    quantization step is set from the final selection count so rounding error
    cannot consume the whole budget, and the achieved norm is re-verified on
    the actual quantized correction.  If the basis cannot reach ``tau`` the
    payload stores the target block itself (lossless fallback).
    """
    if not tau > 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    target = np.asarray(target, dtype=np.float64).ravel()
    recon = np.asarray(reconstruction, dtype=np.float64).ravel()
    if target.shape != recon.shape or target.size != basis.block_size:
        raise DataError("target/reconstruction size does not match the basis")
    residual = target - recon
    if float(np.linalg.norm(residual)) <= tau:
        return CorrectionPayload(indices=np.empty(0, np.int64), coeffs=np.empty(0, np.int64), step=1.0)
    c = basis.matrix.T @ residual
    order = np.argsort(-np.abs(c), kind="stable")
    # leave half the slack of 1/safety for quantization error
    in_span_sq = float(residual @ residual) - np.cumsum(c[order] ** 2)
    goal = tau * (1.0 - 0.5 / safety)
    reachable = np.nonzero(in_span_sq <= goal * goal)[0]
    m = int(reachable[0]) + 1 if reachable.size else basis.n_components
    while m <= basis.n_components:
        idx = np.sort(order[:m])
        step = tau / (2.0 * np.sqrt(m) * safety)
        coeffs = _round_half_away(c[idx] / step)
        corrected = recon + basis.matrix[:, idx] @ (coeffs * step)
        if float(np.linalg.norm(target - corrected)) <= tau:
            return CorrectionPayload(indices=idx, coeffs=coeffs, step=step)
        m += 1
    return CorrectionPayload(
        indices=np.empty(0, np.int64), coeffs=np.empty(0, np.int64), step=1.0,
        fallback=target.copy(),
    )


def apply_correction(reconstruction: np.ndarray, payload: CorrectionPayload,
                     basis: ResidualBasis) -> np.ndarray:
    """Corrected block: reconstruction plus the decoded basis correction."""
    recon = np.asarray(reconstruction, dtype=np.float64)
    if payload.is_fallback:
        if payload.fallback.size != recon.size:
            raise DataError("fallback size does not match the block")
        return payload.fallback.reshape(recon.shape).copy()
    if payload.is_empty:
        return recon.copy()
    correction = basis.matrix[:, payload.indices] @ (payload.coeffs * payload.step)
    return recon + correction.reshape(recon.shape)


def check_bound(target: np.ndarray, corrected: np.ndarray, tau: float) -> None:
    """Raise if the guarantee is violated (indicates a bug, not bad data)."""
    err = float(np.linalg.norm(np.asarray(target, np.float64).ravel() -
                               np.asarray(corrected, np.float64).ravel()))
    if err > tau:
        raise BoundUnreachableError(f"achieved residual {err} exceeds tau {tau}")


class _BitWriter:
    def __init__(self):
        self._bytes = bytearray()
        self._acc = 0
        self._nbits = 0

    def write(self, value: int, nbits: int):
        for i in range(nbits - 1, -1, -1):
            self._acc = (self._acc << 1) | ((value >> i) & 1)
            self._nbits += 1
            if self._nbits == 8:
                self._bytes.append(self._acc)
                self._acc = 0
                self._nbits = 0

    def write_exp_golomb(self, value: int):
        if value < 0:
            raise DataError("exp-Golomb codes non-negative integers")
        v = value + 1
        nbits = v.bit_length()
        self.write(0, nbits - 1)
        self.write(v, nbits)

    def write_signed_exp_golomb(self, value: int):
        # zigzag: 0, -1, 1, -2, 2, ...
        self.write_exp_golomb((-value << 1) - 1 if value < 0 else value << 1)

    def align(self):
        if self._nbits:
            self._acc <<= 8 - self._nbits
            self._bytes.append(self._acc)
            self._acc = 0
            self._nbits = 0

    def write_bytes(self, data: bytes):
        self.align()
        self._bytes.extend(data)

    def getvalue(self) -> bytes:
        self.align()
        return bytes(self._bytes)


class _BitReader:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self._acc = 0
        self._nbits = 0

    def read(self, nbits: int) -> int:
        out = 0
        for _ in range(nbits):
            if self._nbits == 0:
                if self._pos >= len(self._data):
                    raise DataError("truncated correction payload")
                self._acc = self._data[self._pos]
                self._pos += 1
                self._nbits = 8
            out = (out << 1) | ((self._acc >> (self._nbits - 1)) & 1)
            self._nbits -= 1
        return out

    def read_exp_golomb(self) -> int:
        zeros = 0
        while self.read(1) == 0:
            zeros += 1
            if zeros > 64:
                raise DataError("malformed exp-Golomb code")
        return ((1 << zeros) | self.read(zeros)) - 1 if zeros else 0

    def read_signed_exp_golomb(self) -> int:
        u = self.read_exp_golomb()
        return -(u >> 1) - 1 if u & 1 else u >> 1

    def align(self):
        self._nbits = 0

    def read_bytes(self, count: int) -> bytes:
        self.align()
        if self._pos + count > len(self._data):
            raise DataError("truncated correction payload")
        out = self._data[self._pos:self._pos + count]
        self._pos += count
        return out


_MODE_EMPTY, _MODE_COEFFS, _MODE_FALLBACK = 0, 1, 2


def encode_payload(payload: CorrectionPayload) -> bytes:
    """Self-delimiting byte encoding; its length is the block's Size(G) share."""
    w = _BitWriter()
    if payload.is_fallback:
        w.write(_MODE_FALLBACK, 2)
        raw = zlib.compress(payload.fallback.astype("<f8").tobytes(), level=6)
        w.write_exp_golomb(payload.fallback.size)
        w.write_exp_golomb(len(raw))
        w.write_bytes(raw)
    elif payload.is_empty:
        w.write(_MODE_EMPTY, 2)
    else:
        w.write(_MODE_COEFFS, 2)
        w.write_bytes(struct.pack("<d", payload.step))
        w.write_exp_golomb(payload.indices.size)
        prev = -1
        for idx in payload.indices:
            w.write_exp_golomb(int(idx - prev - 1))
            prev = int(idx)
        for coeff in payload.coeffs:
            w.write_signed_exp_golomb(int(coeff))
    return w.getvalue()


def decode_payload(data: bytes) -> CorrectionPayload:
    r = _BitReader(data)
    mode = r.read(2)
    if mode == _MODE_EMPTY:
        return CorrectionPayload(np.empty(0, np.int64), np.empty(0, np.int64), 1.0)
    if mode == _MODE_FALLBACK:
        size = r.read_exp_golomb()
        nraw = r.read_exp_golomb()
        values = np.frombuffer(zlib.decompress(r.read_bytes(nraw)), dtype="<f8")
        if values.size != size:
            raise DataError("fallback payload length mismatch")
        return CorrectionPayload(np.empty(0, np.int64), np.empty(0, np.int64), 1.0,
                                 fallback=values.astype(np.float64))
    if mode != _MODE_COEFFS:
        raise DataError(f"unknown payload mode {mode}")
    (step,) = struct.unpack("<d", r.read_bytes(8))
    m = r.read_exp_golomb()
    indices = np.empty(m, np.int64)
    prev = -1
    for i in range(m):
        prev = prev + 1 + r.read_exp_golomb()
        indices[i] = prev
    coeffs = np.asarray([r.read_signed_exp_golomb() for _ in range(m)], dtype=np.int64)
    return CorrectionPayload(indices=indices, coeffs=coeffs, step=step)
