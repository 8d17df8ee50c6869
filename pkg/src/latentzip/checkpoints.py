"""Versioned model checkpoints with content fingerprints.

Containers reference checkpoints by fingerprint instead of embedding them;
the fingerprint hashes the architecture config and every parameter tensor, so
a decode with mismatched weights is caught up front.
"""

from __future__ import annotations

import dataclasses
import hashlib
from pathlib import Path

import numpy as np
import torch

from .codec import LatentCodec, TransformConfig
from .diffusion import Denoiser, DenoiserConfig, NoiseSchedule
from .errorbound import ResidualBasis
from .errors import DataError

__all__ = [
    "fingerprint_module",
    "save_codec", "load_codec",
    "save_denoiser", "load_denoiser",
    "save_basis", "load_basis",
]

FORMAT_VERSION = 1


def _fingerprint(config: dict, arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    h.update(repr(sorted(config.items())).encode())
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(str(arr.dtype).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def fingerprint_module(module: torch.nn.Module, config: dict) -> str:
    arrays = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    return _fingerprint(config, arrays)


def _save(path, payload: dict):
    payload["format_version"] = FORMAT_VERSION
    torch.save(payload, path)


def _load(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing checkpoint {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version in {path}")
    return payload


def save_codec(codec: LatentCodec, path) -> str:
    config = dataclasses.asdict(codec.cfg)
    fp = fingerprint_module(codec, config)
    _save(path, {"kind": "codec", "config": config, "state": codec.state_dict(),
                 "fingerprint": fp})
    return fp


def load_codec(path) -> tuple[LatentCodec, str]:
    payload = _load(path)
    if payload.get("kind") != "codec":
        raise DataError(f"{path} is not a transform checkpoint")
    codec = LatentCodec(TransformConfig(**payload["config"]))
    codec.load_state_dict(payload["state"])
    codec.eval()
    return codec, payload["fingerprint"]


def save_denoiser(denoiser: Denoiser, sched: NoiseSchedule, path) -> str:
    """The noise schedule is embedded so decoding never needs side config."""
    config = dataclasses.asdict(denoiser.cfg)
    fp = fingerprint_module(denoiser, config)
    _save(path, {"kind": "denoiser", "config": config, "state": denoiser.state_dict(),
                 "betas": sched.betas, "fingerprint": fp})
    return fp


def load_denoiser(path) -> tuple[Denoiser, NoiseSchedule, str]:
    payload = _load(path)
    if payload.get("kind") != "denoiser":
        raise DataError(f"{path} is not a denoiser checkpoint")
    denoiser = Denoiser(DenoiserConfig(**payload["config"]))
    denoiser.load_state_dict(payload["state"])
    denoiser.eval()
    betas = np.asarray(payload["betas"], dtype=np.float64)
    bars = np.empty(betas.size + 1)
    bars[0] = 1.0
    np.cumprod(1.0 - betas, out=bars[1:])
    return denoiser, NoiseSchedule(betas=betas, alpha_bars=bars), payload["fingerprint"]


def save_basis(basis: ResidualBasis, path) -> str:
    fp = _fingerprint({"corpus": basis.corpus_fingerprint}, {"matrix": basis.matrix})
    np.savez(path, matrix=basis.matrix, explained_variance=basis.explained_variance,
             corpus_fingerprint=np.asarray(basis.corpus_fingerprint),
             fingerprint=np.asarray(fp), format_version=np.asarray(FORMAT_VERSION))
    return fp


def load_basis(path) -> tuple[ResidualBasis, str]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing basis file {path}")
    with np.load(path, allow_pickle=False) as data:
        if int(data["format_version"]) != FORMAT_VERSION:
            raise DataError(f"unsupported basis version in {path}")
        basis = ResidualBasis(
            matrix=data["matrix"],
            explained_variance=data["explained_variance"],
            corpus_fingerprint=str(data["corpus_fingerprint"]),
        )
        return basis, str(data["fingerprint"])
