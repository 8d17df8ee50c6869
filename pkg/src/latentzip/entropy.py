"""Fixed-point PMF tables, conditional Gaussian and factorized densities,
bit-rate estimation, and lossless coding of integer symbol planes.

Tables use ``PRECISION``-bit fixed point: every symbol keeps at least one
probability quantum and each table sums to exactly ``2**PRECISION``, which
caps the per-symbol code cost at PRECISION bits and makes coding exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
from scipy.special import ndtr

from . import rangecoder
from .errors import CodingError, DataError

__all__ = [
    "PRECISION",
    "DiscretePMFTable",
    "TableSet",
    "discretized_gaussian_pmf",
    "gaussian_table_set",
    "table_bits",
    "rate_estimate",
    "FactorizedDensity",
    "fit_factorized_density",
]

PRECISION = 16
SIGMA_MIN = 0.01
SIGMA_MAX = 256.0
MAX_SUPPORT = 1 << 15  # each bin must keep >= 1 quantum out of 2**PRECISION


def _fixed_point_rows(probs: np.ndarray) -> np.ndarray:
    """Convert rows of probabilities to integer frequencies summing to 2**P.

    Floor-plus-one keeps every bin at one quantum minimum; the residual mass
    is handed to the largest bin, which is deterministic and keeps the floor.
    """
    probs = np.atleast_2d(probs)
    n, w = probs.shape
    if w < 1:
        raise CodingError("empty support")
    if w > MAX_SUPPORT:
        raise CodingError(f"support of {w} symbols exceeds {MAX_SUPPORT}")
    total = 1 << PRECISION
    freq = np.floor(probs * (total - w)).astype(np.int64) + 1
    deficit = total - freq.sum(axis=1)
    rows = np.arange(n)
    top = np.argmax(freq, axis=1)
    freq[rows, top] += deficit
    if freq.min() < 1:
        raise CodingError("probability floor violated during renormalization")
    return freq.astype(np.uint32)


@dataclass
class DiscretePMFTable:
    """Per-symbol fixed-point probabilities on integer support [sym_min, sym_max]."""

    sym_min: int
    freq: np.ndarray  # uint32, sums to exactly 2**precision
    precision: int = PRECISION

    def __post_init__(self):
        self.freq = np.ascontiguousarray(self.freq, dtype=np.uint32)
        if self.freq.ndim != 1 or self.freq.size < 1:
            raise CodingError("frequency table must be a non-empty vector")
        if int(self.freq.sum()) != 1 << self.precision:
            raise CodingError("frequencies must sum to exactly 2**precision")
        if int(self.freq.min()) < 1:
            raise CodingError("zero-frequency symbol would be uncodable")

    @property
    def sym_max(self) -> int:
        return self.sym_min + self.freq.size - 1

    @property
    def width(self) -> int:
        return self.freq.size

    def pmf(self) -> np.ndarray:
        return self.freq.astype(np.float64) / (1 << self.precision)

    @classmethod
    def from_probabilities(cls, probs: np.ndarray, sym_min: int) -> "DiscretePMFTable":
        return cls(sym_min=sym_min, freq=_fixed_point_rows(probs)[0])


class TableSet:
    """A group of PMF tables flattened for the range-coder kernels.

    Each coded symbol references one table by id; a set with a single table
    codes homogeneous planes without a per-symbol id array.
    """

    def __init__(self, tables: list[DiscretePMFTable] | None = None, *, _parts=None):
        if _parts is not None:
            self.tbl_base, self.sym_min, self.width, self.cums, self.total = _parts
            return
        if not tables:
            raise CodingError("need at least one table")
        self.total = 1 << tables[0].precision
        self.width = np.asarray([t.width for t in tables], dtype=np.int64)
        self.sym_min = np.asarray([t.sym_min for t in tables], dtype=np.int64)
        self.tbl_base = np.zeros(len(tables), dtype=np.int64)
        base = 0
        cums = []
        for i, t in enumerate(tables):
            if (1 << t.precision) != self.total:
                raise CodingError("mixed precisions in one table set")
            self.tbl_base[i] = base
            cum = np.zeros(t.width + 1, dtype=np.uint32)
            np.cumsum(t.freq, out=cum[1:], dtype=np.uint32)
            cums.append(cum)
            base += t.width + 1
        self.cums = np.concatenate(cums)

    def __len__(self) -> int:
        return len(self.width)

    @classmethod
    def from_freq_matrix(cls, freq: np.ndarray, sym_min: int) -> "TableSet":
        """Fast path for many tables sharing one support: rows of ``freq``."""
        return cls.from_channel_groups([(freq, sym_min)])

    @classmethod
    def from_channel_groups(cls, groups: list[tuple[np.ndarray, int]]) -> "TableSet":
        """Concatenate groups of fixed-point rows, one group per shared support.

        Group g contributes ``freq.shape[0]`` tables starting at symbol
        ``sym_min``; table ids are assigned in order across groups.
        """
        widths, mins, cum_parts = [], [], []
        for freq, sym_min in groups:
            freq = np.ascontiguousarray(np.atleast_2d(freq), dtype=np.uint32)
            n, w = freq.shape
            sums = freq.sum(axis=1, dtype=np.int64)
            if np.any(sums != 1 << PRECISION) or int(freq.min()) < 1:
                raise CodingError("invalid fixed-point rows")
            cum = np.zeros((n, w + 1), dtype=np.uint32)
            np.cumsum(freq, axis=1, out=cum[:, 1:])
            cum_parts.append(cum.ravel())
            widths.append(np.full(n, w, dtype=np.int64))
            mins.append(np.full(n, sym_min, dtype=np.int64))
        width = np.concatenate(widths)
        tbl_base = np.zeros(width.size, dtype=np.int64)
        np.cumsum(width[:-1] + 1, out=tbl_base[1:])
        parts = (tbl_base, np.concatenate(mins), width, np.concatenate(cum_parts), 1 << PRECISION)
        return cls(_parts=parts)

    def _ids(self, table_ids, count: int) -> np.ndarray:
        if table_ids is None:
            if len(self) != 1:
                raise CodingError("table_ids required for a multi-table set")
            return np.zeros(count, dtype=np.int64)
        return np.ascontiguousarray(table_ids, dtype=np.int64)

    def encode(self, symbols, table_ids=None) -> bytes:
        symbols = np.ascontiguousarray(symbols, dtype=np.int64)
        ids = self._ids(table_ids, symbols.size)
        return rangecoder.encode_symbols(
            symbols, ids, self.tbl_base, self.sym_min, self.width, self.cums, self.total
        )

    def decode(self, data: bytes, count: int, table_ids=None) -> np.ndarray:
        ids = self._ids(table_ids, count)
        return rangecoder.decode_symbols(
            data, count, ids, self.tbl_base, self.sym_min, self.width, self.cums, self.total
        )

    def bits(self, symbols, table_ids=None) -> float:
        """Model cost of ``symbols`` in bits under the fixed-point tables."""
        symbols = np.ascontiguousarray(symbols, dtype=np.int64)
        ids = self._ids(table_ids, symbols.size)
        offs = symbols - self.sym_min[ids]
        if np.any(offs < 0) or np.any(offs >= self.width[ids]):
            raise CodingError("symbol outside its table's support")
        freq = self.cums[self.tbl_base[ids] + offs + 1].astype(np.float64) - self.cums[
            self.tbl_base[ids] + offs
        ].astype(np.float64)
        p = int(round(math.log2(self.total)))
        return float(np.sum(p - np.log2(freq)))


def _gaussian_prob_rows(mu: np.ndarray, sigma: np.ndarray, sym_min: int, sym_max: int) -> np.ndarray:
    """Bin masses of N(mu, sigma^2) over integer bins, tails folded into the ends."""
    if sym_max < sym_min:
        raise CodingError(f"empty support [{sym_min}, {sym_max}]")
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    if np.any(sigma < SIGMA_MIN):
        raise CodingError(f"sigma below {SIGMA_MIN}")
    edges = np.arange(sym_min, sym_max + 2, dtype=np.float64) - 0.5
    z = (edges[None, :] - mu[:, None]) / sigma[:, None]
    cdf = ndtr(z)
    probs = np.diff(cdf, axis=1)
    probs[:, 0] += cdf[:, 0]
    probs[:, -1] += 1.0 - cdf[:, -1]
    return probs


def discretized_gaussian_pmf(mu: float, sigma: float, sym_min: int, sym_max: int) -> DiscretePMFTable:
    """Fixed-point table for one Gaussian on the given integer support."""
    probs = _gaussian_prob_rows(mu, sigma, sym_min, sym_max)
    return DiscretePMFTable(sym_min=sym_min, freq=_fixed_point_rows(probs)[0])


def gaussian_table_set(mu: np.ndarray, sigma: np.ndarray, sym_min: int, sym_max: int) -> TableSet:
    """One table per (mu, sigma) pair on a shared support; ids are positional."""
    probs = _gaussian_prob_rows(mu, sigma, sym_min, sym_max)
    return TableSet.from_freq_matrix(_fixed_point_rows(probs), sym_min)


def gaussian_tables_per_channel(mu: np.ndarray, sigma: np.ndarray, supports: np.ndarray) -> TableSet:
    """Per-element Gaussian tables with per-channel supports.

    ``mu``/``sigma`` have shape [C, n]; ``supports`` is [C, 2] integer
    (lo, hi).  Table ids are positional over the channel-major flattening.
    """
    groups = []
    for c in range(mu.shape[0]):
        lo, hi = int(supports[c, 0]), int(supports[c, 1])
        rows = _fixed_point_rows(_gaussian_prob_rows(mu[c], sigma[c], lo, hi))
        groups.append((rows, lo))
    return TableSet.from_channel_groups(groups)


def table_bits(symbols, tables: TableSet, table_ids=None) -> float:
    return tables.bits(symbols, table_ids)


def rate_estimate(y_hat, y_tables: TableSet, z_hat=None, z_tables: TableSet | None = None,
                  y_ids=None, z_ids=None) -> tuple[float, float]:
    """Bits to code the latent plane and the hyperlatent plane.

    Returns (bits_y, bits_z); the total rate is their sum.  Estimates use the
    same integer tables the coder consumes, so they track real coded lengths.
    """
    bits_y = y_tables.bits(np.ravel(y_hat), y_ids)
    bits_z = 0.0
    if z_hat is not None:
        if z_tables is None:
            raise CodingError("hyperlatent symbols given without tables")
        bits_z = z_tables.bits(np.ravel(z_hat), z_ids)
    return bits_y, bits_z


class FactorizedDensity(nn.Module):
    """Learned per-channel univariate density with a monotone CDF.

    A stack of monotone nonlinear layers maps a scalar to CDF logits; bin
    masses come from CDF differences at half-integer edges.  Used as the
    prior for hyperlatents, which have no side information of their own.
    """

    def __init__(self, channels: int, filters: tuple[int, ...] = (3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        self.filters = tuple(filters)
        dims = (1,) + self.filters + (1,)
        scale = init_scale ** (1.0 / (len(dims) - 1))
        self._matrices = nn.ParameterList()
        self._biases = nn.ParameterList()
        self._gates = nn.ParameterList()
        for k in range(len(dims) - 1):
            init = math.log(math.expm1(1.0 / scale / dims[k + 1]))
            m = nn.Parameter(torch.full((channels, dims[k + 1], dims[k]), init))
            b = nn.Parameter(torch.empty(channels, dims[k + 1], 1).uniform_(-0.5, 0.5))
            self._matrices.append(m)
            self._biases.append(b)
            if k < len(dims) - 2:
                self._gates.append(nn.Parameter(torch.zeros(channels, dims[k + 1], 1)))

    def _logits(self, x: torch.Tensor) -> torch.Tensor:
        # x: [C, 1, n] -> CDF logits [C, 1, n]
        for k, (m, b) in enumerate(zip(self._matrices, self._biases)):
            x = torch.bmm(torch.nn.functional.softplus(m), x) + b
            if k < len(self._gates):
                x = x + torch.tanh(self._gates[k]) * torch.tanh(x)
        return x

    def cdf(self, x: torch.Tensor) -> torch.Tensor:
        """CDF values for x of shape [C, n]."""
        return torch.sigmoid(self._logits(x.unsqueeze(1))).squeeze(1)

    def likelihood(self, x: torch.Tensor) -> torch.Tensor:
        """Mass of the unit bin centred on each value; x shape [C, n].

        Evaluated as a sigmoid difference with a sign flip so the two edges
        are on the tail side where the subtraction stays well-conditioned.
        """
        lower = self._logits((x - 0.5).unsqueeze(1))
        upper = self._logits((x + 0.5).unsqueeze(1))
        sign = -torch.sign(lower + upper).detach()
        lik = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        return lik.squeeze(1)

    @torch.no_grad()
    def to_tables(self, supports: list[tuple[int, int]]) -> list[DiscretePMFTable]:
        """One fixed-point table per channel on the given integer supports."""
        if len(supports) != self.channels:
            raise DataError(f"{len(supports)} supports for {self.channels} channels")
        tables = []
        for c, (lo, hi) in enumerate(supports):
            if hi < lo:
                raise CodingError(f"empty support [{lo}, {hi}]")
            edges = torch.arange(lo, hi + 2, dtype=torch.float32) - 0.5
            cdf = self.cdf(edges.unsqueeze(0).repeat(self.channels, 1))[c].double().numpy()
            probs = np.diff(cdf)
            probs[0] += cdf[0]
            probs[-1] += 1.0 - cdf[-1]
            probs = np.clip(probs, 0.0, None)
            tables.append(DiscretePMFTable.from_probabilities(probs, lo))
        return tables

    def bits(self, x: torch.Tensor) -> torch.Tensor:
        """Differentiable total code length (bits) of values x [C, n]."""
        lik = self.likelihood(x).clamp_min(1e-9)
        return torch.sum(-torch.log2(lik))


def fit_factorized_density(samples: np.ndarray, iters: int = 800, lr: float = 5e-3,
                           seed: int = 0) -> FactorizedDensity:
    """Fit the factorized model to samples of shape [n, C] by minimizing code length."""
    samples = np.asarray(samples, dtype=np.float32)
    if samples.ndim != 2:
        raise DataError(f"expected [n, channels] samples, got {samples.shape}")
    torch.manual_seed(seed)
    density = FactorizedDensity(channels=samples.shape[1])
    x = torch.from_numpy(samples.T.copy())  # [C, n]
    opt = torch.optim.Adam(density.parameters(), lr=lr)
    for _ in range(iters):
        opt.zero_grad()
        loss = density.bits(x) / x.numel()
        loss.backward()
        opt.step()
    density.eval()
    return density
