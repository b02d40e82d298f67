"""Uplink compressors with exact wire-size accounting.

Every compressor maps a float64 gradient to an :class:`UplinkMessage` whose
``byte_size`` counts one float or index as 4 bytes:

    full, ldp_full   4 d
    mpdd             4 (m + 1)          m scalars plus the wire seed
    qsgd             4 + ceil(d (b + 1) / 8)
    topk             8 k                (index, value) pairs

In-memory payloads stay float64; only :func:`serialize` narrows to float32.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

from .projection import (
    MpddPayload,
    ProjectionSpec,
    decode_mpdd,
    derive_wire_seed,
    encode_mpdd,
)

KINDS = ("full", "mpdd", "qsgd", "topk", "ldp_full")
KIND_TAGS = {kind: i for i, kind in enumerate(KINDS)}

# purpose codes that separate independent random streams for one (round, client)
PURPOSE_BATCH = 1
PURPOSE_QSGD = 2
PURPOSE_LDP = 3
PURPOSE_SAMPLE = 4


def rng_for(master_seed: int, round_index: int, client: int, purpose: int):
    """Independent numpy Generator keyed by (master, round, client, purpose)."""
    ss = np.random.SeedSequence([master_seed & ((1 << 64) - 1), round_index, client, purpose])
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class RoundContext:
    round: int
    client: int
    master_seed: int


@dataclass(frozen=True)
class CompressorConfig:
    kind: str = "full"
    m: Optional[int] = None
    bits: Optional[int] = None
    k: Optional[int] = None
    noise: Optional[str] = None
    scale: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown compressor kind {self.kind!r}")
        if self.kind == "mpdd" and (self.m is None or self.m < 1):
            raise ValueError("mpdd needs m >= 1")
        if self.kind == "qsgd" and (self.bits is None or not 1 <= self.bits <= 16):
            raise ValueError(f"qsgd bits must lie in [1, 16], got {self.bits}")
        if self.kind == "topk" and (self.k is None or self.k < 1):
            raise ValueError(f"topk needs k >= 1, got {self.k}")
        if self.kind == "ldp_full":
            if self.noise not in ("gaussian", "laplace"):
                raise ValueError(f"ldp noise must be gaussian or laplace, got {self.noise!r}")
            if self.scale is None or self.scale < 0:
                raise ValueError(f"ldp scale must be >= 0, got {self.scale}")

    @classmethod
    def parse(cls, text: str) -> "CompressorConfig":
        """Parse a short spec such as ``mpdd:m=600`` or ``ldp_full:noise=laplace,scale=0.1``."""
        kind, _, rest = text.partition(":")
        kwargs: dict[str, Any] = {}
        for item in filter(None, rest.split(",")):
            key, _, value = item.partition("=")
            key = key.strip()
            if key in ("m", "bits", "k"):
                kwargs[key] = int(value)
            elif key == "scale":
                kwargs[key] = float(value)
            elif key == "noise":
                kwargs[key] = value.strip()
            else:
                raise ValueError(f"unknown compressor parameter {key!r}")
        return cls(kind.strip(), **kwargs)


@dataclass(frozen=True)
class UplinkMessage:
    kind: str
    payload: Any
    byte_size: int


@dataclass(frozen=True)
class QsgdPayload:
    norm: float
    signs: np.ndarray  # bool, True for negative
    levels: np.ndarray  # int, in [0, 2^b - 1]
    bits: int


@dataclass(frozen=True)
class TopkPayload:
    indices: np.ndarray
    values: np.ndarray


def message_bytes(cfg: CompressorConfig, d: int) -> int:
    """Wire size of one client message; a pure function of (kind, d, params)."""
    if cfg.kind in ("full", "ldp_full"):
        return 4 * d
    if cfg.kind == "mpdd":
        return 4 * (cfg.m + 1)
    if cfg.kind == "qsgd":
        return 4 + math.ceil(d * (cfg.bits + 1) / 8)
    if cfg.kind == "topk":
        return 8 * cfg.k
    raise ValueError(cfg.kind)


def qsgd_quantize(grad, bits: int, rng: np.random.Generator) -> QsgdPayload:
    """Stochastic uniform quantizer with 2^b - 1 levels on |g_i| / ||g||."""
    if not 1 <= bits <= 16:
        raise ValueError(f"bits must lie in [1, 16], got {bits}")
    grad = np.asarray(grad, dtype=np.float64)
    s = (1 << bits) - 1
    norm = float(np.linalg.norm(grad))
    signs = grad < 0
    if norm == 0.0:
        return QsgdPayload(0.0, signs, np.zeros(grad.size, dtype=np.int64), bits)
    scaled = np.abs(grad) / norm * s
    lower = np.floor(scaled)
    frac = scaled - lower
    # always draw so the stream position does not depend on the data
    u = rng.random(grad.size)
    levels = (lower + (u < frac)).astype(np.int64)
    return QsgdPayload(norm, signs, np.minimum(levels, s), bits)


def qsgd_dequantize(payload: QsgdPayload) -> np.ndarray:
    s = (1 << payload.bits) - 1
    sign = np.where(payload.signs, -1.0, 1.0)
    return payload.norm * sign * payload.levels / s


def topk_select(grad, k: int) -> TopkPayload:
    """Keep the k largest-magnitude entries; ties go to the lower index."""
    grad = np.asarray(grad, dtype=np.float64)
    if not 1 <= k <= grad.size:
        raise ValueError(f"k must lie in [1, {grad.size}], got {k}")
    order = np.argsort(-np.abs(grad), kind="stable")[:k]
    idx = np.sort(order)
    return TopkPayload(idx, grad[idx])


def ldp_perturb(grad, noise: str, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Add iid Gaussian (std ``scale``) or Laplace (scale ``scale``) noise."""
    if scale < 0:
        raise ValueError(f"noise scale must be >= 0, got {scale}")
    grad = np.asarray(grad, dtype=np.float64)
    if noise == "gaussian":
        z = rng.standard_normal(grad.size)
    elif noise == "laplace":
        z = rng.laplace(0.0, 1.0, grad.size)
    else:
        raise ValueError(f"unknown noise {noise!r}")
    return grad + scale * z


def compress(cfg: CompressorConfig, grad, ctx: RoundContext) -> UplinkMessage:
    grad = np.asarray(grad, dtype=np.float64)
    d = grad.size
    if d < 1:
        raise ValueError("gradient must be non-empty")
    if not np.all(np.isfinite(grad)):
        raise ValueError("gradient contains NaN or Inf")
    size = message_bytes(cfg, d)
    if cfg.kind == "full":
        payload = grad.copy()
    elif cfg.kind == "mpdd":
        seed = derive_wire_seed(ctx.master_seed, ctx.round, ctx.client)
        payload = encode_mpdd(grad, ProjectionSpec(seed, cfg.m, d))
    elif cfg.kind == "qsgd":
        rng = rng_for(ctx.master_seed, ctx.round, ctx.client, PURPOSE_QSGD)
        payload = qsgd_quantize(grad, cfg.bits, rng)
    elif cfg.kind == "topk":
        payload = topk_select(grad, cfg.k)
    else:
        rng = rng_for(ctx.master_seed, ctx.round, ctx.client, PURPOSE_LDP)
        payload = ldp_perturb(grad, cfg.noise, cfg.scale, rng)
    return UplinkMessage(cfg.kind, payload, size)


def decompress(cfg: CompressorConfig, msg: UplinkMessage, d: int) -> np.ndarray:
    if msg.kind != cfg.kind:
        raise ValueError(f"message kind {msg.kind!r} does not match compressor {cfg.kind!r}")
    if cfg.kind in ("full", "ldp_full"):
        out = np.asarray(msg.payload, dtype=np.float64)
    elif cfg.kind == "mpdd":
        out = decode_mpdd(msg.payload, ProjectionSpec(msg.payload.wire_seed, cfg.m, d))
    elif cfg.kind == "qsgd":
        out = qsgd_dequantize(msg.payload)
    else:
        out = np.zeros(d)
        out[msg.payload.indices] = msg.payload.values
    if out.shape != (d,):
        raise ValueError(f"decompressed length {out.size} does not match d={d}")
    return out


# -- canonical wire format (little-endian, 1-byte kind tag, then payload) ----


def _pack_bits(bits: np.ndarray) -> bytes:
    return np.packbits(bits.astype(np.uint8), bitorder="little").tobytes()


def serialize(msg: UplinkMessage) -> bytes:
    """Encode a message; ``len(result) == 1 + msg.byte_size``."""
    tag = struct.pack("<B", KIND_TAGS[msg.kind])
    p = msg.payload
    if msg.kind in ("full", "ldp_full"):
        body = np.asarray(p, dtype="<f4").tobytes()
    elif msg.kind == "mpdd":
        body = struct.pack("<I", p.wire_seed) + np.asarray(p.scalars, dtype="<f4").tobytes()
    elif msg.kind == "qsgd":
        # per coordinate: sign bit, then b level bits (LSB first)
        shifts = np.arange(p.bits, dtype=np.int64)
        level_bits = (p.levels[:, None] >> shifts[None, :]) & 1
        stream = np.concatenate([p.signs[:, None].astype(np.int64), level_bits], axis=1)
        body = struct.pack("<f", p.norm) + _pack_bits(stream.ravel())
    else:
        pairs = np.empty(len(p.indices), dtype=[("i", "<u4"), ("v", "<f4")])
        pairs["i"] = p.indices
        pairs["v"] = p.values
        body = pairs.tobytes()
    return tag + body


def deserialize(data: bytes, cfg: CompressorConfig, d: int) -> UplinkMessage:
    """Inverse of :func:`serialize`; float payloads come back narrowed to float32."""
    if not data:
        raise ValueError("empty message")
    kind = KINDS[data[0]] if data[0] < len(KINDS) else None
    if kind != cfg.kind:
        raise ValueError(f"message tag {data[0]} does not match compressor {cfg.kind!r}")
    body = data[1:]
    if len(body) != message_bytes(cfg, d):
        raise ValueError(f"body is {len(body)} bytes, expected {message_bytes(cfg, d)}")
    if kind in ("full", "ldp_full"):
        payload = np.frombuffer(body, dtype="<f4").astype(np.float64)
    elif kind == "mpdd":
        (seed,) = struct.unpack_from("<I", body)
        payload = MpddPayload(np.frombuffer(body[4:], dtype="<f4").astype(np.float64), seed)
    elif kind == "qsgd":
        (norm,) = struct.unpack_from("<f", body)
        width = cfg.bits + 1
        bits = np.unpackbits(np.frombuffer(body[4:], dtype=np.uint8), bitorder="little")
        stream = bits[: d * width].reshape(d, width).astype(np.int64)
        levels = (stream[:, 1:] << np.arange(cfg.bits, dtype=np.int64)).sum(axis=1)
        payload = QsgdPayload(float(norm), stream[:, 0].astype(bool), levels, cfg.bits)
    else:
        pairs = np.frombuffer(body, dtype=[("i", "<u4"), ("v", "<f4")])
        payload = TopkPayload(pairs["i"].astype(np.int64), pairs["v"].astype(np.float64))
    return UplinkMessage(kind, payload, len(body))
