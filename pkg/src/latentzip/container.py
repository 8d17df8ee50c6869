"""Self-describing compressed container.

Layout (all integers little-endian, fixed width):

    magic "LZKC" | version u16 | body_len u64 | body | crc32 u32

The CRC covers the body; any corruption of header fields or payload raises
:class:`ContainerError`.  The body is a header section followed by per-block
records.  Everything a decoder needs that is not in a fingerprinted model
checkpoint lives here: frame normalization constants, latent min-max ranges,
per-channel symbol supports, the sampling-step count and sampler seed.

Byte accounting: ``size_g`` counts the correction-payload sections (their
length prefixes included); ``size_l`` is every other byte in the file, magic
and CRC included, so ``size_l + size_g`` equals the file length exactly.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .diffusion import LatentMinMax
from .errors import ContainerError
from .fields import FrameNormalization, compression_ratio

__all__ = [
    "MAGIC",
    "VERSION",
    "ContainerHeader",
    "BlockRecord",
    "CompressedContainer",
    "write_container",
    "read_container",
    "accounting",
]

MAGIC = b"LZKC"
VERSION = 1


@dataclass
class ContainerHeader:
    dims: tuple[int, int, int, int]           # V, T, H, W
    dtype_bits: int
    var_names: list[str]
    var_ranges: list[tuple[float, float]]     # per-variable (min, max) of the original
    window: int
    tile: tuple[int, int]
    strategy: str
    interval: int
    k: int
    steps: int
    seed: int
    tau: float | None                         # NRMSE-equivalent bound, None = no correction
    latent_channels: int
    hyper_channels: int
    codec_fingerprint: str
    denoiser_fingerprint: str
    basis_fingerprint: str


@dataclass
class BlockRecord:
    """One temporal window of one variable."""

    var_idx: int
    t_start: int
    n_frames: int                              # window length including padding
    n_pad: int
    frame_norms: list[FrameNormalization]
    minmax: LatentMinMax
    y_support: np.ndarray                      # [C, 2] int32 per-channel (lo, hi)
    z_support: np.ndarray                      # [Cz, 2] int32
    keyframe_codes: list[tuple[bytes, bytes]]  # per keyframe: (z bytes, y bytes)
    corrections: list[bytes] = field(default_factory=list)


@dataclass
class CompressedContainer:
    header: ContainerHeader
    blocks: list[BlockRecord]
    size_l: int = 0
    size_g: int = 0


class _Writer:
    def __init__(self):
        self.buf = bytearray()
        self.g_bytes = 0

    def pack(self, fmt: str, *vals):
        self.buf.extend(struct.pack("<" + fmt, *vals))

    def put_bytes(self, data: bytes, correction: bool = False):
        self.pack("I", len(data))
        self.buf.extend(data)
        if correction:
            self.g_bytes += 4 + len(data)

    def put_str(self, s: str):
        raw = s.encode("utf-8")
        self.pack("H", len(raw))
        self.buf.extend(raw)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise ContainerError("truncated container body")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals if len(vals) > 1 else vals[0]

    def get_bytes(self) -> bytes:
        n = self.unpack("I")
        if self.pos + n > len(self.data):
            raise ContainerError("truncated container body")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def get_str(self) -> str:
        n = self.unpack("H")
        if self.pos + n > len(self.data):
            raise ContainerError("truncated container body")
        out = self.data[self.pos:self.pos + n].decode("utf-8")
        self.pos += n
        return out


def _write_header(w: _Writer, h: ContainerHeader):
    w.pack("IIII", *h.dims)
    w.pack("B", h.dtype_bits)
    w.pack("H", len(h.var_names))
    for name in h.var_names:
        w.put_str(name)
    if len(h.var_ranges) != h.dims[0]:
        raise ContainerError("one (min, max) pair required per variable")
    for lo, hi in h.var_ranges:
        w.pack("dd", lo, hi)
    w.pack("HHH", h.window, *h.tile)
    w.put_str(h.strategy)
    w.pack("HH", h.interval, h.k)
    w.pack("H", h.steps)
    w.pack("Q", h.seed)
    w.pack("B", 1 if h.tau is not None else 0)
    w.pack("d", h.tau if h.tau is not None else 0.0)
    w.pack("HH", h.latent_channels, h.hyper_channels)
    for fp in (h.codec_fingerprint, h.denoiser_fingerprint, h.basis_fingerprint):
        w.put_str(fp)


def _read_header(r: _Reader) -> ContainerHeader:
    dims = tuple(r.unpack("IIII"))
    dtype_bits = r.unpack("B")
    n_vars = r.unpack("H")
    var_names = [r.get_str() for _ in range(n_vars)]
    var_ranges = [tuple(r.unpack("dd")) for _ in range(dims[0])]
    window, tile_h, tile_w = r.unpack("HHH")
    strategy = r.get_str()
    interval, k = r.unpack("HH")
    steps = r.unpack("H")
    seed = r.unpack("Q")
    has_tau = r.unpack("B")
    tau = r.unpack("d")
    latent_channels, hyper_channels = r.unpack("HH")
    fps = [r.get_str() for _ in range(3)]
    return ContainerHeader(
        dims=dims, dtype_bits=dtype_bits, var_names=var_names, var_ranges=var_ranges,
        window=window, tile=(tile_h, tile_w), strategy=strategy, interval=interval,
        k=k, steps=steps, seed=seed, tau=tau if has_tau else None,
        latent_channels=latent_channels, hyper_channels=hyper_channels,
        codec_fingerprint=fps[0], denoiser_fingerprint=fps[1], basis_fingerprint=fps[2],
    )


def _write_block(w: _Writer, b: BlockRecord):
    w.pack("HIHH", b.var_idx, b.t_start, b.n_frames, b.n_pad)
    if len(b.frame_norms) != b.n_frames:
        raise ContainerError("one normalization record required per frame")
    for norm in b.frame_norms:
        w.pack("ddB", norm.mean, norm.range, 1 if norm.constant else 0)
    w.pack("dd", b.minmax.lo, b.minmax.hi)
    for support in (b.y_support, b.z_support):
        arr = np.ascontiguousarray(support, dtype=np.int32)
        w.pack("H", arr.shape[0])
        w.buf.extend(arr.tobytes())
    w.pack("H", len(b.keyframe_codes))
    for z_code, y_code in b.keyframe_codes:
        w.put_bytes(z_code)
        w.put_bytes(y_code)
    w.pack("I", len(b.corrections))
    for payload in b.corrections:
        w.put_bytes(payload, correction=True)


def _read_block(r: _Reader) -> tuple[BlockRecord, int]:
    var_idx, t_start, n_frames, n_pad = r.unpack("HIHH")
    norms = []
    for _ in range(n_frames):
        mean, rng, const = r.unpack("ddB")
        norms.append(FrameNormalization(mean=mean, range=rng, constant=bool(const)))
    lo, hi = r.unpack("dd")
    supports = []
    for _ in range(2):
        n = r.unpack("H")
        raw = r.data[r.pos:r.pos + 8 * n]
        if len(raw) != 8 * n:
            raise ContainerError("truncated support table")
        r.pos += 8 * n
        supports.append(np.frombuffer(raw, dtype=np.int32).reshape(n, 2).copy())
    n_kf = r.unpack("H")
    codes = []
    for _ in range(n_kf):
        z_code = r.get_bytes()
        y_code = r.get_bytes()
        codes.append((z_code, y_code))
    n_corr = r.unpack("I")
    g_bytes = 0
    corrections = []
    for _ in range(n_corr):
        payload = r.get_bytes()
        g_bytes += 4 + len(payload)
        corrections.append(payload)
    block = BlockRecord(
        var_idx=var_idx, t_start=t_start, n_frames=n_frames, n_pad=n_pad,
        frame_norms=norms, minmax=LatentMinMax(lo=lo, hi=hi),
        y_support=supports[0], z_support=supports[1],
        keyframe_codes=codes, corrections=corrections,
    )
    return block, g_bytes


def write_container(container: CompressedContainer) -> bytes:
    w = _Writer()
    _write_header(w, container.header)
    w.pack("I", len(container.blocks))
    for block in container.blocks:
        _write_block(w, block)
    body = bytes(w.buf)
    out = MAGIC + struct.pack("<H", VERSION) + struct.pack("<Q", len(body)) + body
    out += struct.pack("<I", zlib.crc32(body))
    container.size_g = w.g_bytes
    container.size_l = len(out) - w.g_bytes
    return out


def read_container(data: bytes) -> CompressedContainer:
    if len(data) < len(MAGIC) + 2 + 8 + 4:
        raise ContainerError("container too short")
    if data[:4] != MAGIC:
        raise ContainerError("bad magic; not a compressed container")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    (body_len,) = struct.unpack_from("<Q", data, 6)
    if len(data) != 14 + body_len + 4:
        raise ContainerError("container length does not match its header")
    body = data[14:14 + body_len]
    (crc,) = struct.unpack_from("<I", data, 14 + body_len)
    if zlib.crc32(body) != crc:
        raise ContainerError("checksum failure; container is corrupt")
    r = _Reader(body)
    try:
        header = _read_header(r)
        n_blocks = r.unpack("I")
        blocks = []
        g_total = 0
        for _ in range(n_blocks):
            block, g = _read_block(r)
            blocks.append(block)
            g_total += g
        if r.pos != len(body):
            raise ContainerError("trailing garbage in container body")
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise ContainerError(f"malformed container body: {exc}") from exc
    return CompressedContainer(header=header, blocks=blocks,
                               size_l=len(data) - g_total, size_g=g_total)


def accounting(container: CompressedContainer, original_bytes: int | None = None):
    """(size_L, size_G[, ratio]) for a container whose sizes are populated."""
    if container.size_l <= 0:
        write_container(container)  # populates sizes deterministically
    if original_bytes is None:
        return container.size_l, container.size_g
    ratio = compression_ratio(original_bytes, container.size_l, container.size_g)
    return container.size_l, container.size_g, ratio
