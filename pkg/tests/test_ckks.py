import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fhevolve import ckks
from fhevolve.modring import RingParams, RingPoly
from fhevolve.variants import REFERENCE_GENOME, DescriptorError, enumerate_space

P = ckks.TOY_PARAMS
NOISELESS = ckks.CkksParams(P.ring_degree, P.modulus_chain, P.special_primes, noise_std=0.0)


@pytest.fixture(scope="module")
def keys():
    return ckks.keygen(P, 200, rotations=(1, 2, 3))


@pytest.fixture(scope="module")
def rng():
    return np.random.default_rng(201)


def rand_slots(rng):
    return rng.uniform(-1, 1, P.slot_count) + 1j * rng.uniform(-1, 1, P.slot_count)


def test_toy_params_shape():
    assert P.ring_degree == 64 and P.scale == 1 << 30 and len(P.modulus_chain) == 3
    for q in P.modulus_chain + P.special_primes:
        assert q % (2 * P.N) == 1
    assert ckks.CkksParams.from_dict(P.to_dict()) == P


def test_param_validation():
    with pytest.raises(ValueError):
        ckks.CkksParams(64, (P.modulus_chain[0], P.modulus_chain[0]), P.special_primes)
    with pytest.raises(ValueError):
        ckks.CkksParams(64, (1073741827,), P.special_primes)  # prime but not 1 mod 128
    with pytest.raises(ValueError):
        ckks.CkksParams(64, P.modulus_chain, P.special_primes, scale_bits=31)


def test_encode_zero_and_constants():
    z = ckks.encode(np.zeros(P.slot_count), P)
    assert all(c == 0 for c in z.to_ints())
    assert np.array_equal(ckks.decode(z, P), np.zeros(P.slot_count))
    ones = ckks.encode(np.ones(P.slot_count), P).to_ints()
    assert ones[0] == P.scale and all(c == 0 for c in ones[1:])


def test_encode_round_trip(rng):
    v = rand_slots(rng)
    got = ckks.decode(ckks.encode(v, P), P)
    assert ckks.relative_error(got, v) < 1e-6
    assert np.max(np.abs(got - v)) <= P.N / P.scale


def test_encode_capacity():
    with pytest.raises(ckks.CapacityError):
        ckks.encode(np.ones(P.slot_count + 1), P)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(-(1 << 80), 1 << 80), min_size=8, max_size=8))
def test_crt_round_trip(values):
    moduli = P.modulus_chain
    Q = math.prod(moduli)
    p = ckks.RnsPoly.from_ints(values, moduli)
    centered = [(v % Q) - Q if v % Q > Q // 2 else v % Q for v in values]
    assert p.to_ints() == centered
    assert ckks.RnsPoly.from_ints(p.to_ints(), moduli) == p


def test_noiseless_encryption_is_exact():
    k = ckks.keygen(NOISELESS, 202)
    pt = ckks.encode(np.arange(P.slot_count) / 10, NOISELESS)
    assert ckks.decrypt(ckks.encrypt(pt, k.sk, NOISELESS, 1), k.sk) == pt
    assert ckks.decrypt(ckks.encrypt(pt, k.pk, NOISELESS, 2), k.sk) == pt


def test_additive_homomorphism(keys, rng):
    a, b = rand_slots(rng), rand_slots(rng)
    ct = ckks.encrypt_vector(a, keys, 3) + ckks.encrypt_vector(b, keys, 4)
    assert ckks.relative_error(ckks.decrypt_vector(ct, keys), a + b) < 1e-6


def test_tensor_multiply_identity_and_zero(keys, rng):
    v = rand_slots(rng)
    ct = ckks.encrypt_vector(v, keys, 5)
    one = ckks.encrypt_vector(np.ones(P.slot_count), keys, 6)
    d0, d1, d2 = ckks.tensor_multiply(ct, one)
    s = keys.sk.rns(d0.moduli)
    phase = d0 + d1 * s + d2 * (s * s)
    assert ckks.relative_error(ckks.decode(phase, P, P.scale ** 2), v) < 1e-5
    zero = ckks.CkksCiphertext(ckks.RnsPoly.zero(P.N, d0.moduli), ckks.RnsPoly.zero(P.N, d0.moduli), P.scale)
    assert all(all(c == 0 for c in d.to_ints()) for d in ckks.tensor_multiply(ct, zero))


def test_tensor_multiply_level_mismatch(keys, rng):
    ct = ckks.encrypt_vector(rand_slots(rng), keys, 7)
    low = ckks.rescale(ct)
    with pytest.raises(ckks.LevelError):
        ckks.tensor_multiply(ct, low)


def test_approx_mod_down_cases(rng):
    ext = P.modulus_chain + P.special_primes
    special = P.special
    zero = ckks.RnsPoly.zero(P.N, ext)
    assert ckks.approx_mod_down(zero, special) == ckks.RnsPoly.zero(P.N, P.modulus_chain)
    x = [int(v) for v in rng.integers(-(1 << 40), 1 << 40, P.N)]
    exact = ckks.RnsPoly.from_ints([special * v for v in x], ext)
    assert ckks.approx_mod_down(exact, special).to_ints() == x
    Q = math.prod(ext)
    big = [int(rng.integers(0, 1 << 62)) * int(rng.integers(0, 1 << 62)) * int(rng.integers(0, 1 << 60)) % Q
           for _ in range(P.N)]
    p = ckks.RnsPoly.from_ints(big, ext)
    got = ckks.approx_mod_down(p, special).to_ints()
    Qc = Q // special
    for g, v in zip(got, p.to_ints()):
        ref = (2 * v + special) // (2 * special)  # exact big-integer rounding division
        assert abs((g - ref + Qc // 2) % Qc - Qc // 2) <= 1
    with pytest.raises(ckks.LevelError):
        ckks.approx_mod_down(ckks.RnsPoly.zero(P.N, P.modulus_chain), special)


def test_rescale_bookkeeping(keys, rng):
    a, b = rand_slots(rng), rand_slots(rng)
    ca, cb = ckks.encrypt_vector(a, keys, 8), ckks.encrypt_vector(b, keys, 9)
    prod = ckks.he_mul(ca, cb, keys.rlk)
    assert prod.level == ca.level - 1
    q_last = P.modulus_chain[-1]
    assert prod.scale == P.scale ** 2 / q_last
    assert abs(prod.scale / P.scale - 1) < 1e-3
    # a plaintext at scale Delta*q_last rescales back to scale Delta
    big = ckks.encrypt(ckks.encode(a, P, scale=P.scale * q_last), keys.pk, P, 21, P.scale * q_last)
    r = ckks.rescale(big)
    assert r.level == big.level - 1 and r.scale == P.scale
    assert ckks.relative_error(ckks.decrypt_vector(r, keys), a) < 1e-5
    zero = ckks.CkksCiphertext(ckks.RnsPoly.zero(P.N, ca.c0.moduli), ckks.RnsPoly.zero(P.N, ca.c0.moduli), P.scale)
    assert all(c == 0 for c in ckks.rescale(zero).c0.to_ints())
    with pytest.raises(ckks.LevelError):
        ckks.rescale(ckks.rescale(r))


def test_key_switch_zero_input(keys):
    d = ckks.RnsPoly.zero(P.N, P.modulus_chain)
    k0, k1 = ckks.key_switch(d, keys.rlk)
    assert all(c == 0 for c in k0.to_ints()) and all(c == 0 for c in k1.to_ints())


def test_key_switch_digit_mismatch(keys):
    d = ckks.RnsPoly.zero(P.N, P.modulus_chain[1:])
    with pytest.raises(DescriptorError):
        ckks.key_switch(d, keys.rlk)


def test_he_mul_fidelity(keys, rng):
    for seed in range(5):
        a, b = rand_slots(rng), rand_slots(rng)
        got = ckks.decrypt_vector(ckks.he_mul(ckks.encrypt_vector(a, keys, [10, seed]),
                                              ckks.encrypt_vector(b, keys, [11, seed]), keys.rlk), keys)
        assert ckks.relative_error(got, a * b) < 1e-3


def test_he_mul_by_ones(keys, rng):
    v = rand_slots(rng)
    one = ckks.encrypt_vector(np.ones(P.slot_count), keys, 12)
    got = ckks.decrypt_vector(ckks.he_mul(ckks.encrypt_vector(v, keys, 13), one, keys.rlk), keys)
    assert ckks.relative_error(got, v) < 1e-3


def test_he_rot(keys, rng):
    v = rand_slots(rng)
    ct = ckks.encrypt_vector(v, keys, 14)
    assert ckks.he_rot(ct, 0, keys) is ct
    for r in (1, 3):
        got = ckks.decrypt_vector(ckks.he_rot(ct, r, keys), keys)
        assert ckks.relative_error(got, np.roll(v, -r)) < 1e-3
    composed = ckks.decrypt_vector(ckks.he_rot(ckks.he_rot(ct, 1, keys), 2, keys), keys)
    assert ckks.relative_error(composed, np.roll(v, -3)) < 1e-3


def test_he_rot_missing_key(keys, rng):
    ct = ckks.encrypt_vector(rand_slots(rng), keys, 15)
    with pytest.raises(ckks.MissingKeyError):
        ckks.he_rot(ct, 5, keys)
    with pytest.raises(ckks.MissingKeyError):
        ckks.he_rot(ct, 2, keys.rotation_key(1))


def test_automorphism_range(keys, rng):
    ct = ckks.encrypt_vector(rand_slots(rng), keys, 16)
    with pytest.raises(ValueError):
        ckks.automorphism_ct(ct, P.slot_count)
    assert ckks.automorphism_ct(ct, 0) == ct


def test_automorphism_group_law(keys, rng):
    ct = ckks.encrypt_vector(rand_slots(rng), keys, 17)
    twice = ckks.automorphism_ct(ckks.automorphism_ct(ct, 1), 2)
    assert twice == ckks.automorphism_ct(ct, 3)


def test_genome_sweep_bitwise(keys, rng):
    a = ckks.encrypt_vector(rand_slots(rng), keys, 18)
    b = ckks.encrypt_vector(rand_slots(rng), keys, 19)
    ref_mul = ckks.he_mul(a, b, keys.rlk)
    ref_rot = ckks.he_rot(a, 1, keys)
    exact = [g for g in enumerate_space("ckks_keyswitch_inner") if not g.elide_cast or g.lane_width_bits == 32]
    assert len(exact) == 192
    for g in exact[::7] + [exact[-1]]:
        assert ckks.he_mul(a, b, keys.rlk, g) == ref_mul, g
        assert ckks.he_rot(a, 1, keys, g) == ref_rot, g


def test_narrow_elided_lanes_break_key_switch(keys, rng):
    a = ckks.encrypt_vector(rand_slots(rng), keys, 20)
    ref = ckks.he_rot(a, 1, keys)
    g = REFERENCE_GENOME.replace(elide_cast=True, lane_width_bits=16)
    assert ckks.he_rot(a, 1, keys, g) != ref


def test_rns_restrict_and_errors():
    p = ckks.RnsPoly.from_ints(list(range(P.N)), P.modulus_chain)
    assert p.restrict(P.modulus_chain[:2]).level == 2
    with pytest.raises(ckks.LevelError):
        p.restrict(P.special_primes)
    with pytest.raises(ValueError):
        ckks.RnsPoly([RingPoly.zero(RingParams(64, 17)), RingPoly.zero(RingParams(32, 17))])
