"""Toy-parameter TFHE: LWE/RLWE/RGSW, gadget decomposition, external product,
blind rotation, sample extraction, key switching and 3-bit programmable
bootstrapping.

Conventions
-----------
* LWE phase is ``b - <a, s>``; RLWE phase is ``b - a*s``.
* Messages carry one padding bit: ``m -> m*D + D/2`` with ``D = Q / 2^(p+1)``
  so every encoded message sits in ``[0, Q/2)`` and an arbitrary lookup
  table fits in the negacyclic test polynomial.
* Gadget digits are unsigned, least significant first, taken from the top
  ``L * log2(B)`` bits of each coefficient.

These parameters are NOT secure.  They exist so that the kernels under
search can be exercised end to end in milliseconds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .modring import RingParams, RingPoly, negacyclic_shift
from .variants import REFERENCE_GENOME, DescriptorError, Genome, KernelDescriptor, PreparedKeys, run_variant

INSECURE = "insecure_test_only"
VALIDATED = "standard_validated"
SECURITY_FLAGS = (INSECURE, VALIDATED)


class MessageRangeError(ValueError):
    pass


@dataclass(frozen=True)
class TfheParams:
    lwe_dim: int
    ring: RingParams
    decomp_base_log: int
    decomp_levels: int
    lwe_noise_std: float
    rlwe_noise_std: float
    plaintext_bits: int = 3
    security_flag: str = INSECURE

    def __post_init__(self):
        q = self.ring.q
        if q & (q - 1):
            raise ValueError("TFHE modulus must be a power of two")
        if self.lwe_dim < 1:
            raise ValueError("lwe_dim must be positive")
        if self.decomp_base_log < 1 or self.decomp_levels < 1:
            raise ValueError("decomposition base and level count must be positive")
        if self.plaintext_bits < 1:
            raise ValueError("plaintext_bits must be >= 1")
        if self.security_flag not in SECURITY_FLAGS:
            raise ValueError(f"security_flag must be one of {SECURITY_FLAGS}")
        if self.lwe_noise_std < 0 or self.rlwe_noise_std < 0:
            raise ValueError("noise standard deviations must be >= 0")

    @property
    def q(self) -> int:
        return self.ring.q

    @property
    def N(self) -> int:
        return self.ring.n

    @property
    def base(self) -> int:
        return 1 << self.decomp_base_log

    @property
    def log_q(self) -> int:
        return self.ring.q.bit_length() - 1

    @property
    def slot(self) -> int:
        return self.q >> (self.plaintext_bits + 1)

    def structural_problems(self) -> list[str]:
        problems = []
        if self.decomp_base_log * self.decomp_levels > self.log_q:
            problems.append(
                f"B^L = 2^{self.decomp_base_log * self.decomp_levels} exceeds Q = 2^{self.log_q}")
        if self.slot < 2:
            problems.append("modulus too small for the requested plaintext width")
        if self.N % (1 << self.plaintext_bits):
            problems.append("ring degree must be a multiple of the message count")
        return problems

    def to_dict(self) -> dict:
        return {
            "scheme": "tfhe",
            "lwe_dim": self.lwe_dim,
            "ring": {"n": self.ring.n, "q": self.ring.q},
            "decomp_base_log": self.decomp_base_log,
            "decomp_levels": self.decomp_levels,
            "lwe_noise_std": self.lwe_noise_std,
            "rlwe_noise_std": self.rlwe_noise_std,
            "plaintext_bits": self.plaintext_bits,
            "security_flag": self.security_flag,
        }

    @classmethod
    def from_dict(cls, data: dict) -> TfheParams:
        data = dict(data)
        scheme = data.pop("scheme", "tfhe")
        if scheme != "tfhe":
            raise ValueError(f"not a TFHE parameter set (scheme={scheme!r})")
        if "security_flag" not in data:
            raise ValueError("security_flag is required")
        known = {"lwe_dim", "ring", "decomp_base_log", "decomp_levels", "lwe_noise_std",
                 "rlwe_noise_std", "plaintext_bits", "security_flag"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown TFHE parameter keys: {sorted(unknown)}")
        ring = data.pop("ring")
        return cls(ring=RingParams(int(ring["n"]), int(ring["q"])), **data)


TOY_PARAMS = TfheParams(
    lwe_dim=16,
    ring=RingParams(128, 1 << 32),
    decomp_base_log=8,
    decomp_levels=4,
    lwe_noise_std=1024.0,
    rlwe_noise_std=256.0,
)


# ---------------------------------------------------------------------------
# ciphertext and key types

@dataclass(frozen=True)
class LweCiphertext:
    mask: np.ndarray
    body: int
    q: int

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=np.uint64) % np.uint64(self.q)
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "body", int(self.body) % self.q)

    @property
    def dim(self) -> int:
        return self.mask.shape[0]

    def __add__(self, other: LweCiphertext) -> LweCiphertext:
        return LweCiphertext(self.mask + other.mask, self.body + other.body, self.q)

    def __sub__(self, other: LweCiphertext) -> LweCiphertext:
        return LweCiphertext(self.mask + (np.uint64(self.q) - other.mask), self.body - other.body, self.q)

    def __eq__(self, other) -> bool:
        return (isinstance(other, LweCiphertext) and self.q == other.q and self.body == other.body
                and np.array_equal(self.mask, other.mask))

    __hash__ = None


@dataclass(frozen=True)
class RlweCiphertext:
    a: RingPoly
    b: RingPoly

    def __post_init__(self):
        if self.a.params != self.b.params:
            raise ValueError("RLWE components must share ring parameters")

    @property
    def params(self) -> RingParams:
        return self.a.params

    def __add__(self, other: RlweCiphertext) -> RlweCiphertext:
        return RlweCiphertext(self.a + other.a, self.b + other.b)

    def __sub__(self, other: RlweCiphertext) -> RlweCiphertext:
        return RlweCiphertext(self.a - other.a, self.b - other.b)

    def rotate(self, power: int) -> RlweCiphertext:
        return RlweCiphertext(self.a.rotate(power), self.b.rotate(power))

    def as_array(self) -> np.ndarray:
        return np.stack([self.a.coeffs, self.b.coeffs])

    @classmethod
    def trivial(cls, m: RingPoly) -> RlweCiphertext:
        return cls(RingPoly.zero(m.params), m)


@dataclass(frozen=True)
class RgswCiphertext:
    rows: tuple  # 2L RlweCiphertexts

    @property
    def array(self) -> np.ndarray:
        """(2L, 2, N) stack of (a, b) rows, the operand layout the kernels use."""
        cached = self.__dict__.get("_array")
        if cached is None:
            cached = np.stack([r.as_array() for r in self.rows])
            cached.setflags(write=False)
            object.__setattr__(self, "_array", cached)
        return cached

    @property
    def prepared(self) -> PreparedKeys:
        """Toeplitz-expanded rows, built on first use and kept with the key."""
        cached = self.__dict__.get("_prepared")
        if cached is None:
            cached = PreparedKeys(self.array, self.rows[0].params.q)
            object.__setattr__(self, "_prepared", cached)
        return cached


@dataclass(frozen=True)
class LweSecret:
    bits: np.ndarray


@dataclass(frozen=True)
class RlweSecret:
    poly: RingPoly

    def as_lwe(self) -> LweSecret:
        """The coefficient-embedded LWE key used after sample extraction."""
        return LweSecret(self.poly.coeffs.copy())


@dataclass(frozen=True)
class BootstrapKeys:
    bsk: tuple  # lwe_dim RgswCiphertexts
    ksk: np.ndarray  # (N, L, lwe_dim + 1): LWE encryptions of s'_j * g_l, last column is the body
    params: TfheParams


@dataclass
class Lut:
    table: tuple
    test_poly: RingPoly

    @classmethod
    def from_table(cls, table: Sequence[int], params: TfheParams) -> Lut:
        p = params.plaintext_bits
        table = tuple(int(t) for t in table)
        if len(table) != 1 << p or any(not 0 <= t < 1 << p for t in table):
            raise MessageRangeError(f"LUT needs {1 << p} entries in [0, {1 << p})")
        N = params.N
        coeffs = [encode_message(table[(i << p) // N], params) for i in range(N)]
        return cls(table, RingPoly(params.ring, np.array(coeffs, dtype=np.uint64)))


# ---------------------------------------------------------------------------
# sampling and encoding

def _noise(rng: np.random.Generator, std: float, size, q: int) -> np.ndarray:
    if std == 0:
        return np.zeros(size, dtype=np.uint64)
    e = np.rint(rng.normal(0.0, std, size=size)).astype(np.int64)
    return (e % q).astype(np.uint64)


def encode_message(m: int, params: TfheParams) -> int:
    return (m * params.slot + params.slot // 2) % params.q


def decode_phase(phase: int, params: TfheParams) -> int:
    return (phase // params.slot) % (1 << params.plaintext_bits)


def keygen(params: TfheParams, rng_seed) -> tuple[LweSecret, RlweSecret, BootstrapKeys]:
    rng = np.random.default_rng(rng_seed)
    lwe_sk = LweSecret(rng.integers(0, 2, size=params.lwe_dim, dtype=np.uint64))
    rlwe_sk = RlweSecret(RingPoly(params.ring, rng.integers(0, 2, size=params.N, dtype=np.uint64)))
    bsk = tuple(rgsw_encrypt(int(bit), rlwe_sk, params, rng) for bit in lwe_sk.bits)
    ksk = _keyswitch_key(rlwe_sk.as_lwe(), lwe_sk, params, rng)
    return lwe_sk, rlwe_sk, BootstrapKeys(bsk, ksk, params)


def gadget_values(params: TfheParams) -> list[int]:
    shift = params.log_q - params.decomp_base_log * params.decomp_levels
    return [1 << (params.decomp_base_log * level + shift) for level in range(params.decomp_levels)]


def rlwe_encrypt(m: RingPoly, sk: RlweSecret, params: TfheParams, rng: np.random.Generator) -> RlweCiphertext:
    a = RingPoly.random(params.ring, rng)
    e = RingPoly(params.ring, _noise(rng, params.rlwe_noise_std, params.N, params.q))
    return RlweCiphertext(a, a * sk.poly + m + e)


def rlwe_phase(ct: RlweCiphertext, sk: RlweSecret) -> RingPoly:
    return ct.b - ct.a * sk.poly


def rgsw_encrypt(bit: int, sk: RlweSecret, params: TfheParams, rng: np.random.Generator) -> RgswCiphertext:
    zero = RingPoly.zero(params.ring)
    rows_a, rows_b = [], []
    for g in gadget_values(params):
        za = rlwe_encrypt(zero, sk, params, rng)
        zb = rlwe_encrypt(zero, sk, params, rng)
        gpoly = RingPoly.monomial(params.ring, 0, g * bit)
        rows_a.append(RlweCiphertext(za.a + gpoly, za.b))
        rows_b.append(RlweCiphertext(zb.a, zb.b + gpoly))
    return RgswCiphertext(tuple(rows_a + rows_b))


def lwe_encrypt(m: int, secret: LweSecret, params: TfheParams, rng_seed) -> LweCiphertext:
    if not 0 <= m < 1 << params.plaintext_bits:
        raise MessageRangeError(f"message {m} outside [0, {1 << params.plaintext_bits})")
    rng = np.random.default_rng(rng_seed)
    return _lwe_encrypt_raw(encode_message(m, params), secret, params.q, params.lwe_noise_std, rng)


def _lwe_encrypt_raw(mu: int, secret: LweSecret, q: int, std: float, rng: np.random.Generator) -> LweCiphertext:
    a = rng.integers(0, q, size=secret.bits.shape[0], dtype=np.uint64)
    e = int(_noise(rng, std, 1, q)[0])
    return LweCiphertext(a, _dot_mod(a, secret.bits, q) + mu + e, q)


def _dot_mod(a: np.ndarray, bits: np.ndarray, q: int) -> int:
    return int(sum(int(x) for x in a[bits.astype(bool)])) % q


def lwe_phase(ct: LweCiphertext, secret: LweSecret) -> int:
    if ct.dim != secret.bits.shape[0]:
        raise DescriptorError(f"ciphertext dimension {ct.dim} != key dimension {secret.bits.shape[0]}")
    return (ct.body - _dot_mod(ct.mask, secret.bits, ct.q)) % ct.q


def lwe_decrypt(ct: LweCiphertext, secret: LweSecret, params: TfheParams) -> int:
    return decode_phase(lwe_phase(ct, secret), params)


def lwe_add(ct1: LweCiphertext, ct2: LweCiphertext, params: TfheParams) -> LweCiphertext:
    """Homomorphic message addition (mod 2^p once the padding bit is used)."""
    s = ct1 + ct2
    return LweCiphertext(s.mask, s.body - params.slot // 2, s.q)


# ---------------------------------------------------------------------------
# gadget decomposition and external product

def gadget_decompose(p: RingPoly, params: TfheParams) -> list[RingPoly]:
    """Unsigned base-B digits of the top L*log2(B) bits, least significant first."""
    return [RingPoly(p.params, d) for d in _decompose_array(p.coeffs, params)]


def _decompose_array(coeffs: np.ndarray, params: TfheParams) -> np.ndarray:
    """Digits of every coefficient along a new leading axis of length L."""
    logb, levels = params.decomp_base_log, params.decomp_levels
    shift = params.log_q - logb * levels
    c = coeffs.astype(np.uint64)
    if shift:
        # round to the retained bits
        c = ((c + np.uint64(1 << (shift - 1))) >> np.uint64(shift)) & np.uint64((1 << (logb * levels)) - 1)
    mask = np.uint64((1 << logb) - 1)
    return np.stack([(c >> np.uint64(logb * level)) & mask for level in range(levels)])


def recompose(digits: Sequence[RingPoly], params: TfheParams) -> RingPoly:
    acc = RingPoly.zero(digits[0].params)
    for d, g in zip(digits, gadget_values(params)):
        acc = acc + d.scale(g)
    return acc


def external_product(
    g: RgswCiphertext,
    c: RlweCiphertext,
    genome: Genome = REFERENCE_GENOME,
    *,
    params: TfheParams | None = None,
    kernel: Callable = run_variant,
    profiler=None,
) -> RlweCiphertext:
    """RGSW x RLWE -> RLWE encrypting bit * message(c)."""
    params = params or _params_for(c)
    if c.params != params.ring or len(g.rows) != 2 * params.decomp_levels or g.rows[0].params != c.params:
        raise DescriptorError("RGSW/RLWE parameters do not match")
    with _stage(profiler, "decompose"):
        digits = _batch_digits(c.as_array()[None], params)
    with _stage(profiler, "external_product"):
        desc = KernelDescriptor(genome, "external_product", (digits.shape[1], 2 * params.N))
        out = np.asarray(kernel(desc, (digits, g.prepared, params.q)), dtype=np.uint64)
        if out.shape != (1, 2, params.N):
            raise DescriptorError(f"kernel returned shape {out.shape}, expected {(1, 2, params.N)}")
    return RlweCiphertext(RingPoly(c.params, out[0, 0]), RingPoly(c.params, out[0, 1]))


def _params_for(c: RlweCiphertext) -> TfheParams:
    if c.params == TOY_PARAMS.ring:
        return TOY_PARAMS
    raise DescriptorError("pass params= explicitly for non-default rings")


def _batch_digits(acc: np.ndarray, params: TfheParams) -> np.ndarray:
    """(B, 2, N) accumulators -> (B, 2L, N) digits, a-digits first."""
    d = _decompose_array(acc, params)  # (L, B, 2, N)
    return d.transpose(1, 2, 0, 3).reshape(acc.shape[0], 2 * params.decomp_levels, params.N)


def _rotate_rows(acc: np.ndarray, powers: Sequence[int], q: int) -> np.ndarray:
    return np.stack([negacyclic_shift(acc[i], p, q) for i, p in enumerate(powers)])


def cmux_batch(bsk_i: RgswCiphertext, acc: np.ndarray, powers: Sequence[int], genome: Genome,
               params: TfheParams, kernel: Callable = run_variant, profiler=None) -> np.ndarray:
    """acc + ExtProd(bsk_i, X^power * acc - acc) for a (B, 2, N) batch of accumulators."""
    q = params.q
    with _stage(profiler, "rotate"):
        diff = (_rotate_rows(acc, powers, q) + (np.uint64(q) - acc)) % np.uint64(q)
    with _stage(profiler, "decompose"):
        digits = _batch_digits(diff, params)
    with _stage(profiler, "external_product"):
        desc = KernelDescriptor(genome, "external_product", (digits.shape[1], 2 * params.N))
        out = np.asarray(kernel(desc, (digits, bsk_i.prepared, q)), dtype=np.uint64)
        if out.shape != acc.shape:
            raise DescriptorError(f"kernel returned shape {out.shape}, expected {acc.shape}")
    with _stage(profiler, "accumulate"):
        return (acc + out % np.uint64(q)) % np.uint64(q)


def cmux(bsk_i: RgswCiphertext, acc: RlweCiphertext, power: int, genome: Genome, params: TfheParams,
         kernel: Callable = run_variant, profiler=None) -> RlweCiphertext:
    out = cmux_batch(bsk_i, acc.as_array()[None], [power], genome, params, kernel, profiler)[0]
    return RlweCiphertext(RingPoly(params.ring, out[0]), RingPoly(params.ring, out[1]))


class _NullStage:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def _stage(profiler, name):
    return profiler.stage(name) if profiler is not None else _NullStage()


def mod_switch(x: int, q: int, two_n: int) -> int:
    return ((x * two_n + q // 2) // q) % two_n


def blind_rotate_many(
    luts: Sequence[Lut],
    cts: Sequence[LweCiphertext],
    keys: BootstrapKeys,
    genome: Genome = REFERENCE_GENOME,
    *,
    kernel: Callable = run_variant,
    profiler=None,
) -> list[RlweCiphertext]:
    """Blind-rotate a batch of ciphertexts in lockstep, sharing each key load.

    The outer loop over mask elements is unrolled by ``genome.unroll_factor``
    with a scalar epilogue; the inner products run through ``kernel``.
    """
    params = keys.params
    if len(luts) != len(cts) or not cts:
        raise DescriptorError("need one LUT per ciphertext and at least one ciphertext")
    for lut, ct in zip(luts, cts):
        if ct.dim != len(keys.bsk) or ct.q != params.q or lut.test_poly.params != params.ring:
            raise DescriptorError("ciphertext, LUT and bootstrap keys disagree on parameters")
    two_n = 2 * params.N
    a_t = np.array([[mod_switch(int(a), params.q, two_n) for a in ct.mask] for ct in cts])
    acc = np.stack([
        np.stack([np.zeros(params.N, dtype=np.uint64),
                  lut.test_poly.rotate(-mod_switch(ct.body, params.q, two_n)).coeffs])
        for lut, ct in zip(luts, cts)
    ])
    u = genome.unroll_factor
    n = a_t.shape[1]
    full = (n // u) * u
    for base in range(0, full, u):
        for j in range(u):
            i = base + j
            acc = cmux_batch(keys.bsk[i], acc, a_t[:, i], genome, params, kernel, profiler)
    for i in range(full, n):
        acc = cmux_batch(keys.bsk[i], acc, a_t[:, i], genome, params, kernel, profiler)
    return [RlweCiphertext(RingPoly(params.ring, c[0]), RingPoly(params.ring, c[1])) for c in acc]


def blind_rotate(
    lut: Lut,
    ct: LweCiphertext,
    keys: BootstrapKeys,
    genome: Genome = REFERENCE_GENOME,
    *,
    kernel: Callable = run_variant,
    profiler=None,
) -> RlweCiphertext:
    """Rotate the test polynomial by the (mod-switched) phase of ``ct``."""
    return blind_rotate_many([lut], [ct], keys, genome, kernel=kernel, profiler=profiler)[0]


def sample_extract(c: RlweCiphertext, index: int = 0) -> LweCiphertext:
    """LWE ciphertext (under the coefficient key) of coefficient ``index`` of c's phase."""
    N, q = c.params.n, c.params.q
    if not 0 <= index < N:
        raise IndexError(f"index {index} outside [0, {N})")
    a = c.a.coeffs
    j = np.arange(N)
    src = (index - j) % N
    mask = a[src].copy()
    wrap = j > index
    mask[wrap] = (np.uint64(q) - mask[wrap]) % np.uint64(q)
    return LweCiphertext(mask, int(c.b.coeffs[index]), q)


def _keyswitch_key(from_key: LweSecret, to_key: LweSecret, params: TfheParams, rng: np.random.Generator) -> np.ndarray:
    gadget = gadget_values(params)
    N, L, n = from_key.bits.shape[0], params.decomp_levels, to_key.bits.shape[0]
    ksk = np.zeros((N, L, n + 1), dtype=np.uint64)
    for j in range(N):
        for level in range(L):
            mu = (int(from_key.bits[j]) * gadget[level]) % params.q
            ct = _lwe_encrypt_raw(mu, to_key, params.q, params.lwe_noise_std, rng)
            ksk[j, level, :n] = ct.mask
            ksk[j, level, n] = ct.body
    return ksk


def key_switch(ct: LweCiphertext, ksk: np.ndarray, params: TfheParams) -> LweCiphertext:
    """Switch an N-dimensional LWE ciphertext back to the lwe_dim key."""
    N, L, n1 = ksk.shape
    if ct.dim != N:
        raise DescriptorError(f"ciphertext dimension {ct.dim} != key-switch key input dimension {N}")
    digits = _decompose_array(ct.mask, params).T.reshape(N * L)  # row j*L + level
    flat = ksk.reshape(N * L, n1)
    # digits < 2^logB and entries < 2^32: accumulate in exact pieces
    q = params.q
    acc = np.zeros(n1, dtype=object)
    lo = (flat & np.uint64(0xFFFF)).astype(np.float64)
    hi = (flat >> np.uint64(16)).astype(np.float64)
    d = digits.astype(np.float64)
    s_lo = (d @ lo).astype(np.uint64)
    s_hi = (d @ hi).astype(np.uint64)
    acc = [(int(s_lo[i]) + (int(s_hi[i]) << 16)) % q for i in range(n1)]
    mask = np.array([(-x) % q for x in acc[:-1]], dtype=np.uint64)
    return LweCiphertext(mask, ct.body - acc[-1], q)


def bootstrap(
    ct: LweCiphertext,
    lut: Lut,
    keys: BootstrapKeys,
    genome: Genome = REFERENCE_GENOME,
    *,
    kernel: Callable = run_variant,
    profiler=None,
) -> LweCiphertext:
    """Programmable bootstrap: output encrypts lut.table[m] under the LWE key."""
    return bootstrap_many([ct], [lut], keys, genome, kernel=kernel, profiler=profiler)[0]


def bootstrap_many(
    cts: Sequence[LweCiphertext],
    luts: Sequence[Lut],
    keys: BootstrapKeys,
    genome: Genome = REFERENCE_GENOME,
    *,
    kernel: Callable = run_variant,
    profiler=None,
) -> list[LweCiphertext]:
    accs = blind_rotate_many(luts, cts, keys, genome, kernel=kernel, profiler=profiler)
    out = []
    for acc in accs:
        with _stage(profiler, "sample_extract"):
            extracted = sample_extract(acc, 0)
        with _stage(profiler, "key_switch"):
            out.append(key_switch(extracted, keys.ksk, keys.params))
    return out


def load_params(path) -> TfheParams:
    with open(path, encoding="utf-8") as fh:
        return TfheParams.from_dict(json.load(fh))
