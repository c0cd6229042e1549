"""Fixed keys, inputs and oracle outputs for gating and timing one kernel.

A context is built once per (kernel, params, gate seed) and then shared by
every genome evaluated against it.  ``kernel_impl`` is the function the
context routes variant executions through; tests swap it for deliberately
broken kernels.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ckks, tfhe
from .modring import RingParams, RingPoly, toeplitz_polymul
from .variants import Genome, KernelDescriptor, PreparedKeys, run_variant

KERNELS = {
    "blind-rotate": ("tfhe", "blind_rotate_loop"),
    "external-product": ("tfhe", "external_product"),
    "he-mul": ("ckks", "ckks_keyswitch_inner"),
    "he-rot": ("ckks", "ckks_keyswitch_inner"),
}

UNIT_RANDOM_INPUTS = 32
CKKS_ROTATIONS = (1, 2, 3)
CKKS_TOLERANCE = 1e-3


class ConfigError(ValueError):
    pass


def scheme_of(kernel: str) -> str:
    try:
        return KERNELS[kernel][0]
    except KeyError:
        raise ConfigError(f"unknown kernel {kernel!r}; choose from {sorted(KERNELS)}") from None


def descriptor_for(kernel: str, params, genome: Genome) -> KernelDescriptor:
    """The dominant-operand descriptor the cost model scores for ``kernel``."""
    scheme, op_kind = KERNELS.get(kernel, (None, None))
    if scheme is None:
        raise ConfigError(f"unknown kernel {kernel!r}; choose from {sorted(KERNELS)}")
    if scheme == "tfhe":
        if not isinstance(params, tfhe.TfheParams):
            raise ConfigError(f"kernel {kernel} needs TFHE parameters")
        rows, cols = 2 * params.decomp_levels, 2 * params.N
        trips = params.lwe_dim if op_kind == "blind_rotate_loop" else rows * params.lwe_dim
        return KernelDescriptor(genome, op_kind, (rows, cols), trips)
    if not isinstance(params, ckks.CkksParams):
        raise ConfigError(f"kernel {kernel} needs CKKS parameters")
    digits = params.max_level
    return KernelDescriptor(genome, op_kind, (digits, 2 * params.N), digits * (digits + 1))


def load_params(path):
    """Read a TFHE or CKKS parameter JSON file (dispatching on its ``scheme`` key)."""
    import json

    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError("parameter file must hold a JSON object")
    scheme = data.get("scheme")
    if scheme == "tfhe":
        return tfhe.TfheParams.from_dict(data)
    if scheme == "ckks":
        return ckks.CkksParams.from_dict(data)
    raise ValueError(f"parameter file needs scheme 'tfhe' or 'ckks', got {scheme!r}")


# ---------------------------------------------------------------------------
# oracle

def oracle_product(digits: np.ndarray, keys, q: int) -> np.ndarray:
    """sum_k digits[.., k] * keys[k, c] through the modring Toeplitz product."""
    keys = keys.keys if isinstance(keys, PreparedKeys) else np.asarray(keys, dtype=np.uint64)
    digits = np.asarray(digits, dtype=np.uint64)
    batched = digits.ndim == 3
    batch = digits if batched else digits[None]
    K, C, N = keys.shape
    ring = RingParams(N, q)
    key_polys = [[RingPoly(ring, keys[k, c]) for c in range(C)] for k in range(K)]
    out = np.zeros((batch.shape[0], C, N), dtype=np.uint64)
    for b, item in enumerate(batch):
        for c in range(C):
            acc = RingPoly.zero(ring)
            for k in range(K):
                acc = acc + toeplitz_polymul(key_polys[k][c], RingPoly(ring, item[k]))
            out[b, c] = acc.coeffs
    return out if batched else out[0]


def oracle_kernel(desc: KernelDescriptor, operands):
    """A kernel_impl that ignores the genome and uses the modring oracle."""
    digits, keys, q = operands
    return oracle_product(digits, keys, q)


@dataclass(frozen=True)
class UnitCase:
    label: str
    digits: np.ndarray  # (B, K, N)
    keys: PreparedKeys
    q: int
    expected: np.ndarray  # (B, C, N)


def _unit_cases(rng, K: int, C: int, N: int, q: int, digit_bound: int, tag: str) -> list[UnitCase]:
    """Random operands in the kernel's domain plus range-boundary witnesses."""
    random_digits = rng.integers(0, digit_bound, size=(UNIT_RANDOM_INPUTS, K, N), dtype=np.uint64)
    edge = np.full((1, K, N), digit_bound - 1, dtype=np.uint64)
    random_keys = PreparedKeys(rng.integers(0, q, size=(K, C, N), dtype=np.uint64), q)
    max_keys = PreparedKeys(np.full((K, C, N), q - 1, dtype=np.uint64), q)
    cases = []
    for label, digits, keys in (
        (f"{tag} random digits", np.concatenate([random_digits, edge]), random_keys),
        (f"{tag} max-value digits and keys", edge, max_keys),
    ):
        cases.append(UnitCase(label, digits, keys, q, oracle_product(digits, keys, q)))
    return cases


def _first_mismatch(got: np.ndarray, expected: np.ndarray) -> str:
    idx = tuple(int(i) for i in np.argwhere(got != expected)[0])
    return f"output {idx}: variant={int(got[idx])}, oracle={int(expected[idx])}"


# ---------------------------------------------------------------------------
# contexts

class TfheContext:
    scheme = "tfhe"

    def __init__(self, params: tfhe.TfheParams, seed: int = 0, kernel_impl: Callable = run_variant):
        self.params = params
        self.seed = seed
        self.kernel_impl = kernel_impl
        self.lwe_sk, self.rlwe_sk, self.keys = tfhe.keygen(params, [seed, 1])
        self.messages = list(range(1 << params.plaintext_bits))
        size = len(self.messages)
        # a permutation, so every input has a distinct expected output
        self.lut = tfhe.Lut.from_table([(5 * m + 5) % size for m in self.messages], params)
        self.chain_lut = tfhe.Lut.from_table([(m + 1) % size for m in self.messages], params)
        self.cts = [tfhe.lwe_encrypt(m, self.lwe_sk, params, [seed, 2, m]) for m in self.messages]
        rng = np.random.default_rng([seed, 3])
        K, N = 2 * params.decomp_levels, params.N
        self.unit_cases = _unit_cases(rng, K, 2, N, params.q, params.base, "gadget")
        self.module_inputs = [
            tfhe.rlwe_encrypt(RingPoly.random(params.ring, rng), self.rlwe_sk, params, rng) for _ in range(2)
        ]
        self.module_expected = [
            tfhe.external_product(self.keys.bsk[i], c, params=params, kernel=oracle_kernel)
            for i, c in enumerate(self.module_inputs)
        ]
        self._timing_ct = self.cts[3 % len(self.cts)]

    def unit_desc(self, genome: Genome) -> KernelDescriptor:
        return KernelDescriptor(genome, "external_product", (2 * self.params.decomp_levels, 2 * self.params.N))

    def module_check(self, genome: Genome) -> str | None:
        for i, (c, want) in enumerate(zip(self.module_inputs, self.module_expected)):
            got = tfhe.external_product(self.keys.bsk[i], c, genome, params=self.params, kernel=self.kernel_impl)
            if got != want:
                return f"external product #{i} differs from the oracle: " + _first_mismatch(
                    got.as_array(), want.as_array())
        return None

    def end_to_end_check(self, genome: Genome) -> str | None:
        p = self.params
        outs = tfhe.bootstrap_many(self.cts, [self.lut] * len(self.cts), self.keys, genome, kernel=self.kernel_impl)
        for m, out in zip(self.messages, outs):
            got = tfhe.lwe_decrypt(out, self.lwe_sk, p)
            if got != self.lut.table[m]:
                return f"bootstrap of m={m}: decrypted {got}, table gives {self.lut.table[m]}"
        m = self.messages[-1]
        second = tfhe.bootstrap(outs[-1], self.chain_lut, self.keys, genome, kernel=self.kernel_impl)
        got = tfhe.lwe_decrypt(second, self.lwe_sk, p)
        want = self.chain_lut.table[self.lut.table[m]]
        if got != want:
            return f"depth-2 chain from m={m}: decrypted {got}, expected {want}"
        return None

    def workload(self, kernel: str, genome: Genome, profiler=None) -> Callable[[], object]:
        if kernel == "external-product":
            c = self.module_inputs[0]
            return lambda: tfhe.external_product(self.keys.bsk[0], c, genome, params=self.params,
                                                 kernel=self.kernel_impl)
        return lambda: tfhe.bootstrap(self._timing_ct, self.lut, self.keys, genome,
                                      kernel=self.kernel_impl, profiler=profiler)


class CkksContext:
    scheme = "ckks"

    def __init__(self, params: ckks.CkksParams, seed: int = 0, kernel_impl: Callable = run_variant):
        self.params = params
        self.seed = seed
        self.kernel_impl = kernel_impl
        self.keys = ckks.keygen(params, [seed, 1], rotations=CKKS_ROTATIONS)
        rng = np.random.default_rng([seed, 2])
        slots = params.slot_count
        self.values = [rng.uniform(-1, 1, slots) + 1j * rng.uniform(-1, 1, slots) for _ in range(3)]
        self.cts = [ckks.encrypt_vector(v, self.keys, [seed, 3, i]) for i, v in enumerate(self.values[:2])]
        # third operand sits one level down at the scale a product has after rescaling
        level = params.max_level - 1
        scale = params.scale ** 2 / params.modulus_chain[level]
        self.cts.append(ckks.encrypt(ckks.encode(self.values[2], params, level, scale), self.keys.pk, params,
                                     [seed, 3, 2], scale))
        N, D = params.N, params.max_level
        self.unit_cases = []
        for t in (params.modulus_chain[0], params.special):
            self.unit_cases += _unit_cases(rng, D, 2, N, t, t, f"mod {t}")
        chain = params.moduli(D)
        self.module_inputs = [ckks._uniform(rng, N, chain)]
        self.module_expected = [ckks.key_switch(d, self.keys.rlk, kernel=oracle_kernel) for d in self.module_inputs]

    def unit_desc(self, genome: Genome) -> KernelDescriptor:
        D = self.params.max_level
        return KernelDescriptor(genome, "ckks_keyswitch_inner", (D, 2 * self.params.N))

    def module_check(self, genome: Genome) -> str | None:
        for i, (d, want) in enumerate(zip(self.module_inputs, self.module_expected)):
            got = ckks.key_switch(d, self.keys.rlk, genome, kernel=self.kernel_impl)
            for part, g, w in zip("01", got, want):
                if g != w:
                    return f"key switch #{i} component {part} differs from the oracle: " + _first_mismatch(
                        g.array(), w.array())
        return None

    def end_to_end_check(self, genome: Genome) -> str | None:
        k, kern = self.keys, self.kernel_impl
        a, b, c = self.cts
        va, vb, vc = self.values
        prod = ckks.he_mul(a, b, k.rlk, genome, kernel=kern)
        checks = [("he_mul", prod, va * vb)]
        checks.append(("he_rot(1)", ckks.he_rot(a, 1, k, genome, kernel=kern), np.roll(va, -1)))
        checks.append(("depth-2 he_mul", ckks.he_mul(prod, c, k.rlk, genome, kernel=kern),
                       va * vb * vc))
        checks.append(("he_rot(2)∘he_rot(1)",
                       ckks.he_rot(ckks.he_rot(a, 1, k, genome, kernel=kern), 2, k, genome, kernel=kern),
                       np.roll(va, -3)))
        for name, ct, want in checks:
            err = ckks.relative_error(ckks.decrypt_vector(ct, k), want)
            if not err < CKKS_TOLERANCE:
                return f"{name}: relative error {err:.3g} >= {CKKS_TOLERANCE}"
        return None

    def workload(self, kernel: str, genome: Genome, profiler=None) -> Callable[[], object]:
        a, b, _ = self.cts
        if kernel == "he-rot":
            return lambda: ckks.he_rot(a, 1, self.keys, genome, kernel=self.kernel_impl, profiler=profiler)
        return lambda: ckks.he_mul(a, b, self.keys.rlk, genome, kernel=self.kernel_impl, profiler=profiler)


_CONTEXTS: dict = {}
_CONTEXT_LOCK = threading.Lock()


def get_context(params, seed: int = 0, kernel_impl: Callable = run_variant):
    """Shared context for the default kernel; a fresh one for any other implementation."""
    cls = TfheContext if isinstance(params, tfhe.TfheParams) else CkksContext
    if kernel_impl is not run_variant:
        return cls(params, seed, kernel_impl)
    key = (repr(params), seed)
    with _CONTEXT_LOCK:
        ctx = _CONTEXTS.get(key)
        if ctx is None:
            ctx = _CONTEXTS[key] = cls(params, seed, kernel_impl)
        return ctx
