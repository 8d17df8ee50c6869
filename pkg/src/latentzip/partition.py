"""Keyframe index partitions, selection strategies, and the frame-merge operator."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

__all__ = [
    "IndexPartition",
    "FrameSequence",
    "Strategy",
    "make_partition",
    "oplus",
]

STRATEGIES = ("prediction", "interpolation", "mixed")


@dataclass(frozen=True)
class IndexPartition:
    """Disjoint cover of frame indices {1..N} by a conditioning set and a
    generated set.  Indices are 1-based to match the selection conventions;
    ``cond_idx0`` / ``gen_idx0`` expose 0-based arrays for tensor indexing."""

    n_frames: int
    cond: tuple[int, ...]
    gen: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        n = self.n_frames
        if n < 1:
            raise ConfigError(f"n_frames must be >= 1, got {n}")
        cond = tuple(sorted(self.cond))
        if len(cond) < 1:
            raise ConfigError("need at least one conditioning frame")
        if len(set(cond)) != len(cond):
            raise ConfigError(f"duplicate conditioning indices {cond}")
        if cond[0] < 1 or cond[-1] > n:
            raise ConfigError(f"conditioning indices {cond} outside 1..{n}")
        gen = tuple(i for i in range(1, n + 1) if i not in set(cond))
        object.__setattr__(self, "cond", cond)
        object.__setattr__(self, "gen", gen)

    @property
    def n_cond(self) -> int:
        return len(self.cond)

    @property
    def n_gen(self) -> int:
        return len(self.gen)

    @property
    def cond_idx0(self) -> np.ndarray:
        return np.asarray(self.cond, dtype=np.int64) - 1

    @property
    def gen_idx0(self) -> np.ndarray:
        return np.asarray(self.gen, dtype=np.int64) - 1


@dataclass
class FrameSequence:
    """A stack of per-frame tensors [N, C, H, W] plus its index partition."""

    frames: np.ndarray
    partition: IndexPartition

    def __post_init__(self):
        if len(self.frames) != self.partition.n_frames:
            raise DataError(
                f"{len(self.frames)} frames for partition of {self.partition.n_frames}"
            )


@dataclass(frozen=True)
class Strategy:
    """Keyframe selection strategy: which frames are stored as conditioning."""

    kind: str = "interpolation"
    interval: int = 3
    k: int = 6

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.kind!r}; choose from {STRATEGIES}")
        if self.kind == "interpolation" and self.interval < 2:
            raise ConfigError(f"interval must be >= 2, got {self.interval}")
        if self.kind == "prediction" and self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.kind == "mixed" and self.k < 2:
            raise ConfigError(f"mixed strategy needs k >= 2, got {self.k}")


def make_partition(n_frames: int, strategy: Strategy) -> IndexPartition:
    """Build the conditioning/generated split for one window of frames.

    prediction     -> first k frames
    interpolation  -> every ``interval``-th frame from 1 through N (requires
                      N-1 divisible by the interval)
    mixed          -> first k-1 frames plus the last frame
    """
    n = n_frames
    if n < 2:
        raise ConfigError(f"need at least 2 frames, got {n}")
    if strategy.kind == "prediction":
        k = min(strategy.k, n)
        cond = tuple(range(1, k + 1))
    elif strategy.kind == "mixed":
        if strategy.k > n:
            raise ConfigError(f"k={strategy.k} exceeds window of {n} frames")
        cond = tuple(range(1, strategy.k)) + (n,)
    else:
        d = strategy.interval
        if (n - 1) % d != 0:
            valid = [i for i in range(2, n) if (n - 1) % i == 0]
            raise ConfigError(
                f"interval {d} does not divide N-1={n - 1}; valid intervals for "
                f"N={n}: {valid}"
            )
        cond = tuple(range(1, n + 1, d))
    return IndexPartition(n_frames=n, cond=cond)


def oplus(gen_frames, cond_frames, partition: IndexPartition):
    """Assemble a full frame sequence from generated- and conditioning-set frames.

    Output index i takes ``gen_frames`` where i is in the generated set and
    ``cond_frames`` where i is in the conditioning set.  Works on numpy arrays
    and torch tensors alike (the gather formulation keeps autograd intact).
    """
    if len(gen_frames) != partition.n_gen:
        raise DataError(f"{len(gen_frames)} generated frames, expected {partition.n_gen}")
    if len(cond_frames) != partition.n_cond:
        raise DataError(f"{len(cond_frames)} conditioning frames, expected {partition.n_cond}")
    targets = np.concatenate([partition.gen_idx0, partition.cond_idx0])
    inverse = np.empty(partition.n_frames, dtype=np.int64)
    inverse[targets] = np.arange(partition.n_frames)
    if isinstance(gen_frames, np.ndarray):
        stacked = np.concatenate([gen_frames, cond_frames], axis=0)
        return stacked[inverse]
    import torch

    stacked = torch.cat([gen_frames, cond_frames], dim=0)
    return stacked[torch.from_numpy(inverse)]
