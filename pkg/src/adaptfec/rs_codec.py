"""Systematic Reed-Solomon erasure codec over GF(256).

A block of ``b`` equal-length source payloads is sent unmodified together
with ``k`` parity payloads. Parity row ``j`` is the GF(256) combination of
the sources with coefficients ``M[j][i] = 1 / ((b + j) ^ i)``, a Cauchy
matrix, so any ``b`` of the ``b + k`` packets determine the sources.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from . import gf256

MAX_BLOCK = 256  # x_j = b + j must stay a field element distinct from every y_i


class CodecError(ValueError):
    """Bad codec parameters or mismatched payload shapes."""


@dataclass(frozen=True)
class PacketRecord:
    block_id: int
    index: int
    kind: str  # "source" | "parity"
    payload: bytes
    received: bool = True


@dataclass
class CodingBlock:
    block_id: int
    b: int
    k: int
    source: list
    parity: list
    # one flag per packet, sources first; None means everything arrived
    received: Optional[list] = field(default=None)

    def __post_init__(self):
        if len(self.source) != self.b or len(self.parity) != self.k:
            raise CodecError("payload counts do not match (b, k)")
        if self.received is not None and len(self.received) != self.b + self.k:
            raise CodecError(f"need {self.b + self.k} received flags, got {len(self.received)}")

    @property
    def n(self) -> int:
        return self.b + self.k

    def flags(self) -> list:
        return [True] * self.n if self.received is None else list(self.received)

    def packets(self) -> list:
        flags = self.flags()
        out = []
        for idx, payload in enumerate(list(self.source) + list(self.parity)):
            kind = "source" if idx < self.b else "parity"
            out.append(PacketRecord(self.block_id, idx, kind, bytes(payload), flags[idx]))
        return out

    def with_losses(self, lost: Sequence[int]) -> "CodingBlock":
        lost = set(lost)
        flags = [i not in lost for i in range(self.n)]
        return CodingBlock(self.block_id, self.b, self.k, self.source, self.parity, flags)


def _check_params(b: int, k: int) -> None:
    if b < 1:
        raise CodecError(f"b must be >= 1, got {b}")
    if not 0 <= k <= b:
        raise CodecError(f"k must be in [0, b={b}], got {k}")
    if b + k > MAX_BLOCK:
        raise CodecError(f"b + k must not exceed {MAX_BLOCK}")


@lru_cache(maxsize=None)
def _cauchy(b: int, k: int) -> np.ndarray:
    m = np.zeros((k, b), dtype=np.uint8)
    for j in range(k):
        for i in range(b):
            m[j, i] = gf256.gf_inv((b + j) ^ i)
    m.setflags(write=False)
    return m


def encoding_matrix(b: int, k: int) -> np.ndarray:
    """The k x b parity-coefficient matrix for a (b, k) block (read-only)."""
    _check_params(b, k)
    return _cauchy(b, k)


def generator_matrix(b: int, k: int) -> np.ndarray:
    """[I; M], the (b + k) x b map from sources to all transmitted packets."""
    return np.concatenate([np.eye(b, dtype=np.uint8), encoding_matrix(b, k)], axis=0)


@lru_cache(maxsize=4096)
def _decoding_matrix(b: int, k: int, chosen: tuple) -> np.ndarray:
    return gf256.mat_inv(generator_matrix(b, k)[list(chosen)])


def _as_rows(payloads) -> np.ndarray:
    lengths = {len(p) for p in payloads}
    if len(lengths) > 1:
        raise CodecError(f"payloads must share one length, got {sorted(lengths)}")
    return np.array([np.frombuffer(bytes(p), dtype=np.uint8) for p in payloads], dtype=np.uint8)


def encode_block(source: Sequence[bytes], k: int, block_id: int = 0) -> CodingBlock:
    b = len(source)
    _check_params(b, k)
    rows = _as_rows(source)
    parity = gf256.matmul(encoding_matrix(b, k), rows) if k else np.zeros((0, rows.shape[1]), np.uint8)
    return CodingBlock(
        block_id=block_id,
        b=b,
        k=k,
        source=[bytes(p) for p in source],
        parity=[r.tobytes() for r in parity],
    )


def decode_block(block: CodingBlock) -> Optional[list]:
    """Recover the b source payloads, or return None if fewer than b packets arrived.

    Payloads of packets flagged as lost are never read.
    """
    b, k = block.b, block.k
    _check_params(b, k)
    flags = block.flags()
    got = [i for i, ok in enumerate(flags) if ok]
    if len(got) < b:
        return None
    if all(flags[:b]):
        return [bytes(p) for p in block.source]

    allp = list(block.source) + list(block.parity)
    chosen = got[:b]
    rows = _as_rows([allp[i] for i in chosen])
    solved = gf256.matmul(_decoding_matrix(b, k, tuple(chosen)), rows)
    out = []
    for i in range(b):
        out.append(bytes(allp[i]) if flags[i] else solved[i].tobytes())
    return out


def can_recover(b: int, lost_source: int, k: int) -> bool:
    """Counting-only recovery test; parity packets are assumed never lost."""
    if not 0 <= lost_source <= b:
        raise CodecError(f"lost_source must be in [0, {b}], got {lost_source}")
    return lost_source <= k
