"""Seed-replayed Rademacher directions and the MPDD encode/decode pair.

A client and the server must regenerate the same directions from a 32-bit
wire seed, so the generator is fixed here as part of the wire contract:

    state_0 = seed XOR ((j + 1) * GOLDEN mod 2^64)
    word_w  = mix64(state_0 + (w + 1) * GOLDEN)          (SplitMix64)

Each 64-bit word supplies 64 signs, least-significant bit first, with
bit 1 -> +1 and bit 0 -> -1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
MASK64 = (1 << 64) - 1

# cap on int8 direction bytes materialized per block in encode/decode
_BLOCK_BYTES = 1 << 24


@dataclass(frozen=True)
class ProjectionSpec:
    wire_seed: int
    directions: int
    dim: int

    def __post_init__(self):
        if not 0 <= self.wire_seed <= 0xFFFFFFFF:
            raise ValueError(f"wire seed must fit in 32 bits, got {self.wire_seed}")
        if self.directions < 1 or self.dim < 1:
            raise ValueError("directions and dim must be >= 1")


@dataclass(frozen=True)
class MpddPayload:
    scalars: np.ndarray
    wire_seed: int


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
    return z ^ (z >> np.uint64(31))


def splitmix64_words(seeds, js, nwords: int) -> np.ndarray:
    """SplitMix64 words for each (seed, j) row; returns uint64 (n, nwords)."""
    seeds = np.asarray(seeds, dtype=np.uint64).ravel()
    js = np.asarray(js, dtype=np.uint64).ravel()
    seeds, js = np.broadcast_arrays(seeds, js)
    with np.errstate(over="ignore"):
        state0 = seeds ^ ((js + np.uint64(1)) * np.uint64(GOLDEN))
        steps = np.arange(1, nwords + 1, dtype=np.uint64) * np.uint64(GOLDEN)
        return _mix64(state0[:, None] + steps[None, :])


def rademacher_rows(seeds, js, d: int) -> np.ndarray:
    """Directions for many (seed, j) pairs at once, as an int8 (n, d) matrix."""
    nwords = -(-d // 64)
    words = splitmix64_words(seeds, js, nwords)
    raw = np.ascontiguousarray(words.astype("<u8")).view(np.uint8)
    bits = np.unpackbits(raw, axis=1, bitorder="little")[:, :d]
    return (bits.astype(np.int8) << 1) - 1


def rademacher_direction(wire_seed: int, j: int, d: int) -> np.ndarray:
    if d < 1:
        raise ValueError("dimension must be >= 1")
    return rademacher_rows([wire_seed], [j], d)[0]


def _row_blocks(m: int, d: int):
    step = max(1, _BLOCK_BYTES // max(d, 1))
    for lo in range(0, m, step):
        yield lo, min(m, lo + step)


def encode_mpdd(grad: np.ndarray, spec: ProjectionSpec) -> MpddPayload:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (spec.dim,):
        raise ValueError(f"gradient length {grad.size} does not match dim {spec.dim}")
    scalars = np.empty(spec.directions)
    for lo, hi in _row_blocks(spec.directions, spec.dim):
        U = rademacher_rows(spec.wire_seed, np.arange(lo, hi), spec.dim)
        scalars[lo:hi] = U @ grad
    return MpddPayload(scalars, spec.wire_seed)


def decode_mpdd(payload: MpddPayload, spec: ProjectionSpec) -> np.ndarray:
    """(1/m) * sum_j s_j u_j, accumulated block by block in ascending j."""
    scalars = np.asarray(payload.scalars, dtype=np.float64)
    if scalars.shape != (spec.directions,):
        raise ValueError(
            f"payload has {scalars.size} scalars, spec expects {spec.directions}"
        )
    if payload.wire_seed != spec.wire_seed:
        raise ValueError("payload seed does not match projection spec")
    out = np.zeros(spec.dim)
    for lo, hi in _row_blocks(spec.directions, spec.dim):
        U = rademacher_rows(spec.wire_seed, np.arange(lo, hi), spec.dim)
        out += (scalars[lo:hi] / spec.directions) @ U
    return out


def jl_directions(d: int, eps: float, delta: float, c: float = 8.0) -> int:
    """ceil(c * ln(d / delta) / eps^2), clamped to [1, d]."""
    if not 0 < eps < 1:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if not c > 0:
        raise ValueError(f"c must be positive, got {c}")
    if d < 1:
        raise ValueError("dimension must be >= 1")
    m = math.ceil(c * math.log(d / delta) / eps**2)
    return int(min(max(m, 1), d))


def _mix64_int(z: int) -> int:
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


def derive_wire_seed(master_seed: int, round_index: int, client: int) -> int:
    """32-bit seed for (master, round, client) from chained SplitMix64 finalizers."""
    z = master_seed & MASK64
    for v in (round_index, client):
        z = _mix64_int((z + GOLDEN) & MASK64) ^ (v & MASK64)
    return _mix64_int((z + GOLDEN) & MASK64) & 0xFFFFFFFF


def format_golden(seed: int, j: int, d: int, signs) -> str:
    """One golden-file record: ``seed j d`` then the +/-1 sequence."""
    body = " ".join("+1" if s > 0 else "-1" for s in signs)
    return f"{seed} {j} {d}\n{body}\n"


def parse_golden(text: str):
    """Yield (seed, j, d, signs) records from golden-file text."""
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if len(lines) % 2:
        raise ValueError("golden file has an unpaired header line")
    for head, body in zip(lines[::2], lines[1::2]):
        seed, j, d = (int(t) for t in head.split())
        signs = np.array([int(t) for t in body.split()], dtype=np.int8)
        if signs.size != d:
            raise ValueError(f"record ({seed}, {j}) lists {signs.size} signs, expected {d}")
        yield seed, j, d, signs
