"""Desk-scale RNS-CKKS over Z[X]/(X^N + 1).

Ciphertexts decrypt as ``c0 + c1*s``.  Limb products use the Toeplitz
formulation from :mod:`fhevolve.modring`; the key-switch inner products go
through :func:`fhevolve.variants.run_variant` so they share the kernel
search space with the TFHE external product.

Key switching uses one digit per active prime and a single special prime P.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import sympy

from .modring import RingParams, RingPoly, automorphism_ref, toeplitz_polymul
from .tfhe import INSECURE, SECURITY_FLAGS, _stage
from .variants import REFERENCE_GENOME, DescriptorError, Genome, KernelDescriptor, PreparedKeys, run_variant

GALOIS_GENERATOR = 5


class CapacityError(ValueError):
    pass


class LevelError(ValueError):
    pass


class MissingKeyError(KeyError):
    pass


def ntt_friendly_primes(count: int, bits: int, n: int, exclude: Sequence[int] = ()) -> list[int]:
    """The ``count`` smallest primes above 2^bits that are 1 mod 2n."""
    step = 2 * n
    p = (1 << bits) + 1
    out = []
    while len(out) < count:
        if p not in exclude and sympy.isprime(p):
            out.append(p)
        p += step
    return out


@dataclass(frozen=True)
class CkksParams:
    ring_degree: int
    modulus_chain: tuple
    special_primes: tuple
    scale_bits: int = 30
    noise_std: float = 3.2
    security_flag: str = INSECURE

    def __post_init__(self):
        object.__setattr__(self, "modulus_chain", tuple(int(q) for q in self.modulus_chain))
        object.__setattr__(self, "special_primes", tuple(int(p) for p in self.special_primes))
        n = self.ring_degree
        RingParams(n, 2)  # degree check
        primes = self.modulus_chain + self.special_primes
        if not self.modulus_chain:
            raise ValueError("modulus chain must not be empty")
        if len(self.special_primes) != 1:
            raise ValueError("exactly one special prime is supported")
        if len(set(primes)) != len(primes):
            raise ValueError("moduli must be distinct")
        for q in primes:
            if q >= 1 << 62 or not sympy.isprime(q):
                raise ValueError(f"{q} is not a word-size prime")
            if q % (2 * n) != 1:
                raise ValueError(f"{q} is not 1 mod 2N={2 * n}")
        if self.scale > min(self.modulus_chain):
            raise ValueError("scale must not exceed the smallest chain prime")
        if self.security_flag not in SECURITY_FLAGS:
            raise ValueError(f"security_flag must be one of {SECURITY_FLAGS}")

    @property
    def N(self) -> int:
        return self.ring_degree

    @property
    def scale(self) -> int:
        return 1 << self.scale_bits

    @property
    def slot_count(self) -> int:
        return self.ring_degree // 2

    @property
    def max_level(self) -> int:
        return len(self.modulus_chain)

    @property
    def special(self) -> int:
        return self.special_primes[0]

    @property
    def log_q_total(self) -> float:
        return sum(math.log2(q) for q in self.modulus_chain + self.special_primes)

    def moduli(self, level: int) -> tuple:
        return self.modulus_chain[:level]

    def to_dict(self) -> dict:
        return {
            "scheme": "ckks",
            "ring_degree": self.ring_degree,
            "modulus_chain": list(self.modulus_chain),
            "special_primes": list(self.special_primes),
            "scale_bits": self.scale_bits,
            "noise_std": self.noise_std,
            "security_flag": self.security_flag,
        }

    @classmethod
    def from_dict(cls, data: dict) -> CkksParams:
        data = dict(data)
        scheme = data.pop("scheme", "ckks")
        if scheme != "ckks":
            raise ValueError(f"not a CKKS parameter set (scheme={scheme!r})")
        if "security_flag" not in data:
            raise ValueError("security_flag is required")
        known = {"ring_degree", "modulus_chain", "special_primes", "scale_bits", "noise_std", "security_flag"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown CKKS parameter keys: {sorted(unknown)}")
        return cls(**data)


def toy_params() -> CkksParams:
    chain = ntt_friendly_primes(3, 30, 64)
    special = ntt_friendly_primes(1, 31, 64)
    return CkksParams(64, tuple(chain), tuple(special))


TOY_PARAMS = toy_params()


# ---------------------------------------------------------------------------
# RNS polynomials

class RnsPoly:
    """One RingPoly limb per modulus; ``moduli`` may include the special prime."""

    __slots__ = ("limbs", "moduli")

    def __init__(self, limbs: Sequence[RingPoly]):
        limbs = tuple(limbs)
        if not limbs:
            raise ValueError("RnsPoly needs at least one limb")
        n = limbs[0].params.n
        if any(l.params.n != n for l in limbs):
            raise ValueError("all limbs must share the ring degree")
        self.limbs = limbs
        self.moduli = tuple(l.params.q for l in limbs)

    @property
    def n(self) -> int:
        return self.limbs[0].params.n

    @property
    def level(self) -> int:
        return len(self.limbs)

    @classmethod
    def from_ints(cls, coeffs: Sequence[int], moduli: Sequence[int]) -> RnsPoly:
        n = len(coeffs)
        return cls([RingPoly(RingParams(n, q), np.array([c % q for c in coeffs], dtype=np.uint64))
                    for q in moduli])

    @classmethod
    def zero(cls, n: int, moduli: Sequence[int]) -> RnsPoly:
        return cls([RingPoly.zero(RingParams(n, q)) for q in moduli])

    def to_ints(self) -> list[int]:
        """CRT lift to centered integers in (-Q/2, Q/2]."""
        Q = math.prod(self.moduli)
        acc = [0] * self.n
        for limb, q in zip(self.limbs, self.moduli):
            qhat = Q // q
            w = qhat * pow(qhat, -1, q)
            for i, c in enumerate(limb.to_list()):
                acc[i] += c * w
        return [v % Q - Q if v % Q > Q // 2 else v % Q for v in acc]

    def _check(self, other: RnsPoly) -> None:
        if self.moduli != other.moduli:
            raise LevelError(f"RNS bases differ: {self.moduli} vs {other.moduli}")

    def __add__(self, other: RnsPoly) -> RnsPoly:
        self._check(other)
        return RnsPoly([a + b for a, b in zip(self.limbs, other.limbs)])

    def __sub__(self, other: RnsPoly) -> RnsPoly:
        self._check(other)
        return RnsPoly([a - b for a, b in zip(self.limbs, other.limbs)])

    def __neg__(self) -> RnsPoly:
        return RnsPoly([-a for a in self.limbs])

    def __mul__(self, other: RnsPoly) -> RnsPoly:
        self._check(other)
        return RnsPoly([toeplitz_polymul(a, b) for a, b in zip(self.limbs, other.limbs)])

    def __eq__(self, other) -> bool:
        return isinstance(other, RnsPoly) and self.moduli == other.moduli and self.limbs == other.limbs

    __hash__ = None

    def restrict(self, moduli: Sequence[int]) -> RnsPoly:
        """Keep only the limbs for ``moduli`` (which must be a subset)."""
        index = {q: i for i, q in enumerate(self.moduli)}
        try:
            return RnsPoly([self.limbs[index[q]] for q in moduli])
        except KeyError as exc:
            raise LevelError(f"modulus {exc.args[0]} not present") from None

    def automorphism(self, k: int) -> RnsPoly:
        return RnsPoly([automorphism_ref(l, k) for l in self.limbs])

    def array(self) -> np.ndarray:
        return np.stack([l.coeffs for l in self.limbs])


def _small_rns(values: np.ndarray, moduli: Sequence[int]) -> RnsPoly:
    """Signed small integer vector -> RnsPoly."""
    n = values.shape[0]
    v = values.astype(np.int64)
    return RnsPoly([RingPoly(RingParams(n, q), v) for q in moduli])


# ---------------------------------------------------------------------------
# canonical embedding

def _roots(n: int) -> np.ndarray:
    """zeta^(5^j) for the n/2 slots, zeta = exp(i*pi/n)."""
    m = 2 * n
    exps = [pow(GALOIS_GENERATOR, j, m) for j in range(n // 2)]
    return np.exp(1j * np.pi * np.array(exps) / n)


def encode(slots, params: CkksParams, level: int | None = None, scale: float | None = None) -> RnsPoly:
    n = params.N
    z = np.zeros(n // 2, dtype=np.complex128)
    slots = np.asarray(slots, dtype=np.complex128).ravel()
    if slots.size > n // 2:
        raise CapacityError(f"{slots.size} slots exceed capacity {n // 2}")
    z[:slots.size] = slots
    scale = params.scale if scale is None else scale
    roots = _roots(n)
    i = np.arange(n)
    # m_i = (2/N) Re sum_j z_j * conj(root_j)^i
    vander = np.conj(roots)[None, :] ** i[:, None]
    coeffs = (2.0 / n) * np.real(vander @ z) * scale
    ints = [int(c) for c in np.rint(coeffs)]
    level = params.max_level if level is None else level
    return RnsPoly.from_ints(ints, params.moduli(level))


def decode(p: RnsPoly, params: CkksParams, scale: float | None = None) -> np.ndarray:
    scale = params.scale if scale is None else scale
    coeffs = np.array([float(c) for c in p.to_ints()])
    roots = _roots(params.N)
    vander = roots[:, None] ** np.arange(params.N)[None, :]
    return (vander @ coeffs) / scale


# ---------------------------------------------------------------------------
# keys and ciphertexts

@dataclass(frozen=True)
class CkksCiphertext:
    c0: RnsPoly
    c1: RnsPoly
    scale: float

    def __post_init__(self):
        if self.c0.moduli != self.c1.moduli:
            raise LevelError("c0 and c1 must share the RNS basis")
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    @property
    def level(self) -> int:
        return self.c0.level

    def __add__(self, other: CkksCiphertext) -> CkksCiphertext:
        return CkksCiphertext(self.c0 + other.c0, self.c1 + other.c1, self.scale)

    def __eq__(self, other) -> bool:
        return (isinstance(other, CkksCiphertext) and self.c0 == other.c0 and self.c1 == other.c1
                and self.scale == other.scale)

    __hash__ = None


@dataclass(frozen=True)
class SecretKey:
    coeffs: np.ndarray  # ternary, int64

    def rns(self, moduli: Sequence[int]) -> RnsPoly:
        return _small_rns(self.coeffs, moduli)


@dataclass(frozen=True)
class PublicKey:
    b: RnsPoly
    a: RnsPoly


@dataclass
class EvalKey:
    """Per-digit pairs (b_i, a_i) over the full chain plus the special prime,
    with b_i = -a_i*s + e_i + P*g_i*s'."""

    b: tuple
    a: tuple
    tag: str
    galois: int | None = None
    _prepared: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def digit_count(self) -> int:
        return len(self.b)

    def prepared(self, level: int, modulus: int) -> PreparedKeys:
        """Keys (level digits, 2 components, N) for one target modulus."""
        key = (level, modulus)
        cached = self._prepared.get(key)
        if cached is None:
            idx = self.b[0].moduli.index(modulus)
            arr = np.stack([
                np.stack([self.b[i].limbs[idx].coeffs, self.a[i].limbs[idx].coeffs]) for i in range(level)
            ])
            cached = PreparedKeys(arr, modulus)
            self._prepared[key] = cached
        return cached


@dataclass
class KeySet:
    params: CkksParams
    sk: SecretKey
    pk: PublicKey
    rlk: EvalKey
    rot_keys: dict

    def rotation_key(self, rot: int) -> EvalKey:
        rot %= self.params.slot_count
        if rot not in self.rot_keys:
            raise MissingKeyError(f"no rotation key for rot={rot}")
        return self.rot_keys[rot]


def _noise(rng, params: CkksParams) -> np.ndarray:
    return np.rint(rng.normal(0.0, params.noise_std, size=params.N)).astype(np.int64)


def _uniform(rng, n: int, moduli: Sequence[int]) -> RnsPoly:
    return RnsPoly([RingPoly.random(RingParams(n, q), rng) for q in moduli])


def keygen(params: CkksParams, rng_seed, rotations: Sequence[int] = ()) -> KeySet:
    rng = np.random.default_rng(rng_seed)
    n = params.N
    sk = SecretKey(rng.integers(-1, 2, size=n).astype(np.int64))
    chain = params.moduli(params.max_level)
    s = sk.rns(chain)
    a = _uniform(rng, n, chain)
    pk = PublicKey(-(a * s) + _small_rns(_noise(rng, params), chain), a)
    s2 = s * s
    rlk = _eval_key(params, sk, _small_rns_from_rns(s2), rng, "relin")
    rot_keys = {}
    for rot in sorted({r % params.slot_count for r in rotations}):
        k = galois_element(rot, n)
        s_rot = sk.rns(chain).automorphism(k)
        rot_keys[rot] = _eval_key(params, sk, _small_rns_from_rns(s_rot), rng, f"rot{rot}", galois=k)
    return KeySet(params, sk, pk, rlk, rot_keys)


def _small_rns_from_rns(p: RnsPoly) -> np.ndarray:
    return np.array(p.to_ints(), dtype=object)


def _eval_key(params: CkksParams, sk: SecretKey, s_new: np.ndarray, rng, tag: str, galois=None) -> EvalKey:
    """Key switching from s_new (integer coefficients) to sk."""
    n = params.N
    chain = params.moduli(params.max_level)
    ext = chain + params.special_primes
    P = params.special
    Q = math.prod(chain)
    s = sk.rns(ext)
    s_new_ext = RnsPoly.from_ints([int(c) for c in s_new], ext)
    bs, as_ = [], []
    for i, qi in enumerate(chain):
        qhat = Q // qi
        g = qhat * pow(qhat, -1, qi)  # 1 mod q_i, 0 mod q_j
        a = _uniform(rng, n, ext)
        e = _small_rns(_noise(rng, params), ext)
        gadget = RnsPoly([l.scale((P * g) % m) for l, m in zip(s_new_ext.limbs, ext)])
        bs.append(-(a * s) + e + gadget)
        as_.append(a)
    return EvalKey(tuple(bs), tuple(as_), tag, galois)


def galois_element(rot: int, n: int) -> int:
    return pow(GALOIS_GENERATOR, rot, 2 * n)


def encrypt(pt: RnsPoly, key, params: CkksParams, rng_seed, scale: float | None = None) -> CkksCiphertext:
    """Encrypt with a PublicKey or a SecretKey."""
    rng = np.random.default_rng(rng_seed)
    moduli = pt.moduli
    n = params.N
    scale = params.scale if scale is None else scale
    if isinstance(key, SecretKey):
        a = _uniform(rng, n, moduli)
        e = _small_rns(_noise(rng, params), moduli)
        return CkksCiphertext(-(a * key.rns(moduli)) + pt + e, a, scale)
    if isinstance(key, PublicKey):
        if pt.level > key.a.level:
            raise LevelError("plaintext level exceeds key level")
        b, a = key.b.restrict(moduli), key.a.restrict(moduli)
        v = _small_rns(rng.integers(-1, 2, size=n).astype(np.int64), moduli)
        e0 = _small_rns(_noise(rng, params), moduli)
        e1 = _small_rns(_noise(rng, params), moduli)
        return CkksCiphertext(v * b + e0 + pt, v * a + e1, scale)
    raise TypeError(f"cannot encrypt with {type(key).__name__}")


def decrypt(ct: CkksCiphertext, sk: SecretKey) -> RnsPoly:
    return ct.c0 + ct.c1 * sk.rns(ct.c0.moduli)


def encrypt_vector(values, keys: KeySet, rng_seed) -> CkksCiphertext:
    return encrypt(encode(values, keys.params), keys.pk, keys.params, rng_seed)


def decrypt_vector(ct: CkksCiphertext, keys: KeySet) -> np.ndarray:
    return decode(decrypt(ct, keys.sk), keys.params, ct.scale)


# ---------------------------------------------------------------------------
# the five primitives

def tensor_multiply(ct1: CkksCiphertext, ct2: CkksCiphertext) -> tuple[RnsPoly, RnsPoly, RnsPoly]:
    if ct1.c0.moduli != ct2.c0.moduli:
        raise LevelError(f"level mismatch: {ct1.level} vs {ct2.level}")
    d0 = ct1.c0 * ct2.c0
    d1 = ct1.c0 * ct2.c1 + ct1.c1 * ct2.c0
    d2 = ct1.c1 * ct2.c1
    return d0, d1, d2


def key_switch_extended(
    d: RnsPoly,
    evk: EvalKey,
    genome: Genome = REFERENCE_GENOME,
    *,
    kernel: Callable = run_variant,
) -> tuple[RnsPoly, RnsPoly]:
    """Inner products of d's RNS digits with evk over Q_l and P (before mod-down)."""
    level = d.level
    if level > evk.digit_count:
        raise DescriptorError(f"{level} digits but the key has {evk.digit_count}")
    special = evk.b[0].moduli[-1]
    if d.moduli != evk.b[0].moduli[:level]:
        raise DescriptorError("input basis does not match the key's modulus chain")
    targets = d.moduli + (special,)
    n = d.n
    raw = [l.coeffs for l in d.limbs]
    out0, out1 = [], []
    for t in targets:
        t64 = np.uint64(t)
        digits = np.stack([c % t64 for c in raw])
        desc = KernelDescriptor(genome, "ckks_keyswitch_inner", (level, 2 * n), trip_count=level * len(targets))
        res = np.asarray(kernel(desc, (digits, evk.prepared(level, t), t)), dtype=np.uint64) % t64
        if res.shape != (2, n):
            raise DescriptorError(f"kernel returned shape {res.shape}, expected {(2, n)}")
        out0.append(RingPoly(RingParams(n, t), res[0]))
        out1.append(RingPoly(RingParams(n, t), res[1]))
    return RnsPoly(out0), RnsPoly(out1)


def _divide_by_last(p: RnsPoly) -> RnsPoly:
    """round(p / q_last) over the remaining limbs, using the last limb's centered residue."""
    last = p.limbs[-1]
    ql = p.moduli[-1]
    r = np.array(last.centered(), dtype=object)
    out = []
    for limb, q in zip(p.limbs[:-1], p.moduli[:-1]):
        inv = pow(ql, -1, q)
        vals = [((int(c) - int(x)) * inv) % q for c, x in zip(limb.coeffs.tolist(), r)]
        out.append(RingPoly(limb.params, np.array(vals, dtype=np.uint64)))
    return RnsPoly(out)


def approx_mod_down(p: RnsPoly, special: int) -> RnsPoly:
    """Divide out the special prime (the last limb) with rounding."""
    if p.level < 2 or p.moduli[-1] != special:
        raise LevelError("input does not carry the special-prime limb")
    return _divide_by_last(p)


def key_switch(
    d: RnsPoly,
    evk: EvalKey,
    genome: Genome = REFERENCE_GENOME,
    *,
    kernel: Callable = run_variant,
    profiler=None,
) -> tuple[RnsPoly, RnsPoly]:
    with _stage(profiler, "keyswitch"):
        k0, k1 = key_switch_extended(d, evk, genome, kernel=kernel)
    special = evk.b[0].moduli[-1]
    with _stage(profiler, "moddown"):
        return approx_mod_down(k0, special), approx_mod_down(k1, special)


def rescale(ct: CkksCiphertext) -> CkksCiphertext:
    if ct.level < 2:
        raise LevelError("cannot rescale at level 1")
    ql = ct.c0.moduli[-1]
    return CkksCiphertext(_divide_by_last(ct.c0), _divide_by_last(ct.c1), ct.scale / ql)


def automorphism_ct(ct: CkksCiphertext, rot: int, n: int | None = None) -> CkksCiphertext:
    """Apply X -> X^(5^rot) to both components; decrypts under s(X^k) until key-switched."""
    n = ct.c0.n if n is None else n
    if not 0 <= rot < n // 2:
        raise ValueError(f"rotation {rot} outside [0, {n // 2})")
    k = galois_element(rot, n)
    return CkksCiphertext(ct.c0.automorphism(k), ct.c1.automorphism(k), ct.scale)


def he_mul(
    ct1: CkksCiphertext,
    ct2: CkksCiphertext,
    rlk: EvalKey,
    genome: Genome = REFERENCE_GENOME,
    *,
    kernel: Callable = run_variant,
    profiler=None,
) -> CkksCiphertext:
    if ct1.level < 2 or ct2.level < 2:
        raise LevelError("he_mul needs level >= 2")
    with _stage(profiler, "tensor"):
        d0, d1, d2 = tensor_multiply(ct1, ct2)
    k0, k1 = key_switch(d2, rlk, genome, kernel=kernel, profiler=profiler)
    with _stage(profiler, "rescale"):
        return rescale(CkksCiphertext(d0 + k0, d1 + k1, ct1.scale * ct2.scale))


def he_rot(
    ct: CkksCiphertext,
    rot: int,
    keys: KeySet | EvalKey,
    genome: Genome = REFERENCE_GENOME,
    *,
    kernel: Callable = run_variant,
    profiler=None,
) -> CkksCiphertext:
    n = ct.c0.n
    rot %= n // 2
    if rot == 0:
        return ct
    evk = keys.rotation_key(rot) if isinstance(keys, KeySet) else keys
    if evk.galois != galois_element(rot, n):
        raise MissingKeyError(f"key is not for rot={rot}")
    with _stage(profiler, "automorphism"):
        rotated = automorphism_ct(ct, rot, n)
    k0, k1 = key_switch(rotated.c1, evk, genome, kernel=kernel, profiler=profiler)
    return CkksCiphertext(rotated.c0 + k0, k1, ct.scale)


def relative_error(got, expected) -> float:
    got, expected = np.asarray(got), np.asarray(expected)
    denom = np.max(np.abs(expected))
    return float(np.max(np.abs(got - expected)) / denom) if denom > 0 else float(np.max(np.abs(got)))


def load_params(path) -> CkksParams:
    with open(path, encoding="utf-8") as fh:
        return CkksParams.from_dict(json.load(fh))
