"""Arithmetic in GF(2^8) with field polynomial x^8 + x^4 + x^3 + x^2 + 1 (0x11D).

Elements are plain ints in [0, 255]. Addition is XOR. Multiplication and
inversion go through log/antilog tables built once at import time by
repeated multiplication with the generator 0x02.
"""

import numpy as np

PRIM_POLY = 0x11D
GENERATOR = 0x02
ORDER = 255  # size of the multiplicative group


def _build_tables():
    exp = np.zeros(2 * ORDER, dtype=np.int32)
    log = np.zeros(256, dtype=np.int32)
    x = 1
    for i in range(ORDER):
        exp[i] = x
        log[x] = i
        x <<= 1
        if x & 0x100:
            x ^= PRIM_POLY
    # doubled so exp[log a + log b] never needs a modulo
    exp[ORDER:] = exp[:ORDER]
    return exp, log


EXP, LOG = _build_tables()

# full 256x256 product table; uint8 so payload multiplication is a single gather
MUL_TABLE = np.zeros((256, 256), dtype=np.uint8)
MUL_TABLE[1:, 1:] = EXP[LOG[1:, None] + LOG[None, 1:]]
for _t in (EXP, LOG, MUL_TABLE):
    _t.setflags(write=False)

INV_TABLE = np.zeros(256, dtype=np.uint8)
INV_TABLE[1:] = EXP[(ORDER - LOG[1:]) % ORDER]
INV_TABLE.setflags(write=False)


class FieldError(ValueError):
    """Raised for operations undefined in the field (e.g. inverting zero)."""


def _check(a):
    if not 0 <= a <= 255:
        raise FieldError(f"{a!r} is not an element of GF(256)")


def gf_add(a: int, b: int) -> int:
    return a ^ b


def gf_mul(a: int, b: int) -> int:
    _check(a)
    _check(b)
    if a == 0 or b == 0:
        return 0
    return int(EXP[LOG[a] + LOG[b]])


def gf_inv(a: int) -> int:
    """Multiplicative inverse of a nonzero field element."""
    _check(a)
    if a == 0:
        raise FieldError("zero has no multiplicative inverse")
    return int(EXP[ORDER - LOG[a]])


def gf_div(a: int, b: int) -> int:
    return gf_mul(a, gf_inv(b))


def gf_pow(a: int, n: int) -> int:
    _check(a)
    if n == 0:
        return 1
    if a == 0:
        return 0
    return int(EXP[(LOG[a] * n) % ORDER])


def scale(coef: int, data: np.ndarray) -> np.ndarray:
    """Multiply every byte of ``data`` by the scalar ``coef``."""
    return MUL_TABLE[coef][data]


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over GF(256); ``a`` is (m, n), ``b`` is (n, L), both uint8."""
    a = np.asarray(a, dtype=np.uint8)
    b = np.asarray(b, dtype=np.uint8)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch: {a.shape} @ {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.uint8)
    for i in range(a.shape[0]):
        acc = out[i]
        for j in range(a.shape[1]):
            c = a[i, j]
            if c:
                acc ^= MUL_TABLE[c][b[j]]
    return out


def mat_inv(m: np.ndarray) -> np.ndarray:
    """Invert a square matrix over GF(256) by Gauss-Jordan elimination.

    Raises FieldError if the matrix is singular.
    """
    m = np.array(m, dtype=np.uint8)
    n = m.shape[0]
    if m.shape != (n, n):
        raise ValueError(f"matrix must be square, got {m.shape}")
    aug = np.concatenate([m, np.eye(n, dtype=np.uint8)], axis=1)
    for col in range(n):
        nz = np.nonzero(aug[col:, col])[0]
        if nz.size == 0:
            raise FieldError("matrix is singular over GF(256)")
        piv = col + nz[0]
        if piv != col:
            aug[[col, piv]] = aug[[piv, col]]
        aug[col] = MUL_TABLE[INV_TABLE[aug[col, col]]][aug[col]]
        for row in range(n):
            f = aug[row, col]
            if row != col and f:
                aug[row] ^= MUL_TABLE[f][aug[col]]
    return aug[:, n:].copy()
