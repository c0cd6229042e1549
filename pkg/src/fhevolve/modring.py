"""Exact arithmetic in the negacyclic ring Z_q[X]/(X^n + 1).

Coefficients are unsigned residues in ``[0, q)`` held in ``uint64`` arrays.
Polynomial products are computed either by the schoolbook reference
(:func:`negacyclic_polymul_ref`, pure Python integers) or through the
Toeplitz reformulation (:func:`toeplitz_polymul`), which is the form every
kernel variant in :mod:`fhevolve.variants` is checked against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MAX_MODULUS = 1 << 62


class ParameterMismatchError(ValueError):
    pass


class InvalidAutomorphismError(ValueError):
    pass


@dataclass(frozen=True)
class RingParams:
    n: int
    q: int

    def __post_init__(self):
        if self.n < 2 or self.n & (self.n - 1):
            raise ValueError(f"ring degree must be a power of two >= 2, got {self.n}")
        if not 2 <= self.q <= MAX_MODULUS:
            raise ValueError(f"modulus must lie in [2, 2^62], got {self.q}")


class RingPoly:
    """A coefficient vector in R_q; index i holds the coefficient of X^i."""

    __slots__ = ("params", "coeffs")

    def __init__(self, params: RingParams, coeffs):
        arr = np.asarray(coeffs)
        if arr.shape != (params.n,):
            raise ValueError(f"expected {params.n} coefficients, got shape {arr.shape}")
        if arr.dtype.kind == "i":
            # numpy's % follows the sign of the divisor, so this lands in [0, q)
            arr = (arr.astype(np.int64) % np.int64(params.q)).astype(np.uint64)
        elif arr.dtype == object:
            arr = np.array([int(c) % params.q for c in arr.tolist()], dtype=np.uint64)
        else:
            arr = arr.astype(np.uint64)
            if arr.size and int(arr.max()) >= params.q:
                arr = arr % np.uint64(params.q)
        arr.setflags(write=False)
        self.params = params
        self.coeffs = arr

    @classmethod
    def zero(cls, params: RingParams) -> RingPoly:
        return cls(params, np.zeros(params.n, dtype=np.uint64))

    @classmethod
    def monomial(cls, params: RingParams, power: int, coeff: int = 1) -> RingPoly:
        """coeff * X^power, reduced with X^n = -1."""
        c = np.zeros(params.n, dtype=object)
        k = power % (2 * params.n)
        if k >= params.n:
            c[k - params.n] = -coeff
        else:
            c[k] = coeff
        return cls(params, c)

    @classmethod
    def random(cls, params: RingParams, rng: np.random.Generator) -> RingPoly:
        return cls(params, rng.integers(0, params.q, size=params.n, dtype=np.uint64))

    def to_list(self) -> list[int]:
        return [int(c) for c in self.coeffs]

    def centered(self) -> list[int]:
        q = self.params.q
        return [c - q if c > q // 2 else c for c in self.to_list()]

    def _check(self, other: RingPoly) -> None:
        if not isinstance(other, RingPoly):
            raise TypeError(f"expected RingPoly, got {type(other).__name__}")
        if other.params != self.params:
            raise ParameterMismatchError(f"{self.params} != {other.params}")

    def __add__(self, other: RingPoly) -> RingPoly:
        self._check(other)
        return RingPoly(self.params, add_mod(self.coeffs, other.coeffs, self.params.q))

    def __sub__(self, other: RingPoly) -> RingPoly:
        self._check(other)
        return RingPoly(self.params, sub_mod(self.coeffs, other.coeffs, self.params.q))

    def __neg__(self) -> RingPoly:
        return RingPoly(self.params, sub_mod(np.zeros_like(self.coeffs), self.coeffs, self.params.q))

    def __mul__(self, other: RingPoly) -> RingPoly:
        return toeplitz_polymul(self, other)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, RingPoly)
            and other.params == self.params
            and np.array_equal(self.coeffs, other.coeffs)
        )

    def __hash__(self):
        return hash((self.params, self.coeffs.tobytes()))

    def __repr__(self) -> str:
        head = self.to_list()[:8]
        more = ", ..." if self.params.n > 8 else ""
        return f"RingPoly(n={self.params.n}, q={self.params.q}, {head}{more})"

    def rotate(self, power: int) -> RingPoly:
        """Multiply by X^power (negacyclic shift)."""
        return RingPoly(self.params, negacyclic_shift(self.coeffs, power, self.params.q))

    def scale(self, c: int) -> RingPoly:
        return RingPoly(self.params, scalar_mul_mod(self.coeffs, c, self.params.q))


@dataclass(frozen=True)
class ToeplitzMatrix:
    params: RingParams
    rows: np.ndarray  # (n, n) uint64, row-major

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ToeplitzMatrix)
            and self.params == other.params
            and np.array_equal(self.rows, other.rows)
        )

    def tolist(self) -> list[list[int]]:
        return [[int(x) for x in row] for row in self.rows]


# ---------------------------------------------------------------------------
# elementwise helpers on uint64 residue arrays

def add_mod(a: np.ndarray, b: np.ndarray, q: int) -> np.ndarray:
    q64 = np.uint64(q)
    # a + b < 2^63 since q <= 2^62
    return (a + b) % q64


def sub_mod(a: np.ndarray, b: np.ndarray, q: int) -> np.ndarray:
    q64 = np.uint64(q)
    return (a + (q64 - b)) % q64


def scalar_mul_mod(a: np.ndarray, c: int, q: int) -> np.ndarray:
    c %= q
    if q <= 1 << 32:
        return (a * np.uint64(c)) % np.uint64(q)
    return np.array([(int(x) * c) % q for x in a.tolist()], dtype=np.uint64)


def negacyclic_shift(coeffs: np.ndarray, power: int, q: int) -> np.ndarray:
    n = coeffs.shape[-1]
    k = power % (2 * n)
    negate = k >= n
    k %= n
    out = np.roll(coeffs, k, axis=-1)
    q64 = np.uint64(q)
    wrapped = np.zeros(n, dtype=bool)
    wrapped[:k] = True
    if negate:
        wrapped = ~wrapped
    out = out.copy()
    out[..., wrapped] = (q64 - out[..., wrapped]) % q64
    return out


# ---------------------------------------------------------------------------
# products

def negacyclic_polymul_ref(a: RingPoly, b: RingPoly) -> RingPoly:
    """Schoolbook product reduced modulo X^n + 1. Ground-truth oracle."""
    a._check(b)
    n, q = a.params.n, a.params.q
    x, y = a.to_list(), b.to_list()
    acc = [0] * n
    for i in range(n):
        xi = x[i]
        if not xi:
            continue
        for j in range(n):
            k = i + j
            if k < n:
                acc[k] += xi * y[j]
            else:
                acc[k - n] -= xi * y[j]
    return RingPoly(a.params, np.array([v % q for v in acc], dtype=np.uint64))


def toeplitz_index(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gather indices and negation mask such that T[i, j] = +-a[idx[i, j]]."""
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    return (j - i) % n, j < i


def toeplitz_rows(a: np.ndarray, q: int) -> np.ndarray:
    """Toeplitz expansion of coefficient vectors along the last axis."""
    n = a.shape[-1]
    idx, neg = toeplitz_index(n)
    t = a[..., idx]
    q64 = np.uint64(q)
    t[..., neg] = (q64 - t[..., neg]) % q64
    return t


def build_toeplitz(a: RingPoly) -> ToeplitzMatrix:
    rows = toeplitz_rows(a.coeffs, a.params.q)
    rows.setflags(write=False)
    return ToeplitzMatrix(a.params, rows)


def vecmat_mod(vec: np.ndarray, mat: np.ndarray, q: int) -> np.ndarray:
    """Exact ``vec @ mat mod q`` for residues below q <= 2^62."""
    k = vec.shape[0]
    top = q - 1
    if k * top * top < 1 << 64:
        return (vec @ mat) % np.uint64(q)
    if q <= 1 << 32:
        # split the vector into w-bit pieces so that k * q * 2^w < 2^64
        w = 63 - (k * top).bit_length()
        if w >= 1:
            mask = np.uint64((1 << w) - 1)
            q64 = np.uint64(q)
            acc = np.zeros(mat.shape[1], dtype=np.uint64)
            for piece in range(math.ceil(top.bit_length() / w) - 1, -1, -1):
                part = (vec >> np.uint64(piece * w)) & mask
                acc = (acc * np.uint64(pow(2, w, q))) % q64
                acc = (acc + (part @ mat) % q64) % q64
            return acc
    big = vec.astype(object) @ mat.astype(object)
    return np.array([int(v) % q for v in big], dtype=np.uint64)


def toeplitz_polymul(a: RingPoly, b: RingPoly) -> RingPoly:
    """a * b computed as the vector-matrix product b^T T(a) mod q."""
    a._check(b)
    t = build_toeplitz(a)
    return RingPoly(a.params, vecmat_mod(b.coeffs, t.rows, a.params.q))


def automorphism_ref(a: RingPoly, k: int) -> RingPoly:
    """a(X^k) in R_q for odd k in [1, 2n)."""
    n, q = a.params.n, a.params.q
    if not 1 <= k < 2 * n or math.gcd(k, 2 * n) != 1:
        raise InvalidAutomorphismError(f"automorphism index must be odd in [1, {2 * n}), got {k}")
    dest = (np.arange(n) * k) % (2 * n)
    out = np.zeros(n, dtype=np.uint64)
    neg = dest >= n
    src = a.coeffs
    q64 = np.uint64(q)
    out[dest[~neg]] = src[~neg]
    out[dest[neg] - n] = (q64 - src[neg]) % q64
    return RingPoly(a.params, out)
