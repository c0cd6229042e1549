import json
import math
import time
from importlib import resources

import numpy as np
import pytest

from fhevolve import ckks, tfhe
from fhevolve.costmodel import cost_model_latency, cycles_to_us
from fhevolve.evaluator import (
    EvaluationError,
    Evaluator,
    correctness_gate,
    evaluate,
    measure_latency,
    profile,
)
from fhevolve.modring import toeplitz_rows
from fhevolve.report import EvaluationReport, GateResult
from fhevolve.security import conforms, max_log_q, security_gate
from fhevolve.variants import REFERENCE_GENOME, KernelDescriptor, enumerate_space, run_variant
from fhevolve.workloads import ConfigError, descriptor_for, load_params

TOY_TFHE = tfhe.TOY_PARAMS
TOY_CKKS = ckks.TOY_PARAMS
OVERFLOW = REFERENCE_GENOME.replace(elide_cast=True, lane_width_bits=8)


def zero_kernel(desc, operands):
    digits, keys = np.asarray(operands[0]), operands[1]
    return np.zeros(digits.shape[:-2] + (keys.shape[1], keys.shape[2]), dtype=np.uint64)


# ---------------------------------------------------------------------------
# security gate

def test_security_table_lookup():
    assert max_log_q(4096) == 109
    assert max_log_q(5000) == 109
    assert max_log_q(512) is None
    assert conforms(4096, 109) and not conforms(4096, 109.5)
    assert not conforms(1024, 500)


def test_security_gate_flags():
    assert not security_gate(TOY_TFHE).passed
    ok = security_gate(TOY_TFHE, allow_insecure=True)
    assert ok.passed and any("insecure_test_only" in n for n in ok.notes)
    std = load_params(resources.files("fhevolve.data.params").joinpath("ckks_n4096.json"))
    assert security_gate(std).passed
    assert std.log_q_total <= 109


def test_security_gate_oversized_standard_params():
    big = ckks.CkksParams(64, TOY_CKKS.modulus_chain, TOY_CKKS.special_primes, security_flag="standard_validated")
    r = security_gate(big, allow_insecure=True)
    assert not r.passed and r.witness


# ---------------------------------------------------------------------------
# reports

def test_report_invariants():
    ok = tuple(GateResult(t, True) for t in ("security", "unit", "module", "end_to_end"))
    with pytest.raises(ValueError):
        GateResult("unit", False)
    with pytest.raises(ValueError):
        EvaluationReport(REFERENCE_GENOME, ok, 2.0, score=-3.0)
    with pytest.raises(ValueError):
        EvaluationReport(REFERENCE_GENOME, ok[:2], 2.0, score=-2.0)
    r = EvaluationReport(REFERENCE_GENOME, ok, 2.0, {"a": 2.0}, 0.5, -2.0)
    assert EvaluationReport.from_dict(r.to_dict()) == r


# ---------------------------------------------------------------------------
# gates

def test_reference_passes_all_tiers_tfhe():
    ev = Evaluator("blind-rotate", TOY_TFHE, allow_insecure=True)
    rep = ev.evaluate(REFERENCE_GENOME)
    assert [g.gate for g in rep.gates] == ["security", "unit", "module", "end_to_end"]
    assert rep.passed
    want = cycles_to_us(cost_model_latency(descriptor_for("blind-rotate", TOY_TFHE, REFERENCE_GENOME)))
    assert rep.score == -rep.latency_us == -want


@pytest.mark.parametrize("kernel", ["he-mul", "he-rot"])
def test_reference_passes_all_tiers_ckks(kernel):
    rep = Evaluator(kernel, TOY_CKKS, allow_insecure=True).evaluate(REFERENCE_GENOME)
    assert rep.passed and rep.score == -rep.latency_us


def test_correctness_gate_function():
    desc = descriptor_for("blind-rotate", TOY_TFHE, REFERENCE_GENOME)
    for tier in ("unit", "module", "end_to_end"):
        assert correctness_gate(desc, tier, 0, params=TOY_TFHE).passed
    with pytest.raises(ValueError):
        correctness_gate(desc, "security", 0, params=TOY_TFHE)


def test_overflow_rejected_at_unit_with_witness():
    rep = Evaluator("he-mul", TOY_CKKS, allow_insecure=True).evaluate(OVERFLOW)
    assert rep.score is None and rep.rejected_at == "unit"
    assert "oracle" in rep.failed_gate.witness
    desc = KernelDescriptor(OVERFLOW, "toeplitz_matvec", (16, 16))
    r = correctness_gate(desc, "unit", 0)
    assert not r.passed and "oracle" in r.witness


def test_zero_kernel_canary_rejected():
    for kernel, params in (("blind-rotate", TOY_TFHE), ("he-rot", TOY_CKKS)):
        rep = Evaluator(kernel, params, allow_insecure=True, kernel_impl=zero_kernel).evaluate(REFERENCE_GENOME)
        assert rep.score is None and rep.failed_gate is not None


def test_canary_alone_fails_end_to_end():
    """With the unit and module tiers answered honestly the zero kernel still dies end to end."""
    ctx = Evaluator("blind-rotate", TOY_TFHE, allow_insecure=True).context
    from fhevolve.workloads import TfheContext

    fake = TfheContext(TOY_TFHE, 0, zero_kernel)
    witness = fake.end_to_end_check(REFERENCE_GENOME)
    assert witness and "bootstrap" in witness
    assert ctx.end_to_end_check(REFERENCE_GENOME) is None


def test_insecure_rejected_before_correctness_work():
    ev = Evaluator("blind-rotate", TOY_TFHE)
    rep = ev.evaluate(REFERENCE_GENOME)
    assert rep.rejected_at == "security" and len(rep.gates) == 1
    assert ev.context_builds == 0


def test_crashing_kernel_is_rejected_not_raised():
    def boom(desc, operands):
        raise RuntimeError("kaboom")

    rep = Evaluator("external-product", TOY_TFHE, allow_insecure=True, kernel_impl=boom).evaluate(REFERENCE_GENOME)
    assert rep.rejected_at == "unit" and "kaboom" in rep.failed_gate.witness


def test_evaluator_config_errors():
    with pytest.raises(ConfigError):
        Evaluator("he-mul", TOY_TFHE)
    with pytest.raises(ConfigError):
        Evaluator("nope", TOY_TFHE)
    with pytest.raises(ConfigError):
        Evaluator("blind-rotate", TOY_TFHE, reps=2)


def test_module_level_evaluate_is_deterministic():
    desc = descriptor_for("blind-rotate", TOY_TFHE, REFERENCE_GENOME.replace(unroll_factor=8))
    a = evaluate(desc, TOY_TFHE, "modeled", 3, allow_insecure=True)
    b = evaluate(desc, TOY_TFHE, "modeled", 3, allow_insecure=True)
    assert a == b and a.passed


# ---------------------------------------------------------------------------
# gate soundness: admitted genomes survive a 10^4-input sweep

def _independent_oracle(digits, keys, q):
    """Object-integer digits @ stacked Toeplitz rows, reduced at the end."""
    K, C, N = keys.shape
    t = toeplitz_rows(keys, q).transpose(0, 2, 1, 3).reshape(K * N, C * N).astype(object)
    flat = digits.reshape(digits.shape[0], K * N).astype(object)
    return np.array((flat @ t) % q, dtype=np.uint64).reshape(digits.shape[0], C, N)


@pytest.mark.parametrize("kernel,params", [("external-product", TOY_TFHE), ("he-mul", TOY_CKKS)])
def test_admitted_genomes_pass_large_sweep(kernel, params):
    ev = Evaluator(kernel, params, allow_insecure=True)
    admitted = [g for g in enumerate_space("external_product") if ev.evaluate(g).passed]
    assert admitted
    rng = np.random.default_rng(99)
    if kernel == "external-product":
        q, bound, K = params.q, params.base, 2 * params.decomp_levels
    else:
        q = bound = params.modulus_chain[0]
        K = params.max_level
    N = 8
    keys = rng.integers(0, q, (K, 2, N), dtype=np.uint64)
    digits = rng.integers(0, bound, (10_000, K, N), dtype=np.uint64)
    digits[0] = bound - 1
    want = _independent_oracle(digits, keys, q)
    for g in admitted:
        got = run_variant(KernelDescriptor(g, "external_product", (K, 2 * N)), (digits, keys, q))
        assert np.array_equal(got, want), g


# ---------------------------------------------------------------------------
# timing and profiling

def _work(size):
    a = np.random.default_rng(0).random((size, size))
    return lambda: a @ a


def test_measure_latency_minimum_config():
    desc = KernelDescriptor(REFERENCE_GENOME, "toeplitz_matvec", (8, 8))
    v = measure_latency(desc, _work(20), reps=3, warmup=1)
    assert math.isfinite(v) and v > 0
    with pytest.raises(ValueError):
        measure_latency(desc, _work(20), reps=2)


def test_measure_latency_stable_and_monotone():
    desc = KernelDescriptor(REFERENCE_GENOME, "toeplitz_matvec", (8, 8))
    work = _work(160)
    first = measure_latency(desc, work, reps=9, warmup=2)
    second = measure_latency(desc, work, reps=9, warmup=2)
    assert abs(first - second) / min(first, second) < 0.2

    def double():
        work()
        work()

    assert measure_latency(desc, double, reps=9, warmup=2) > min(first, second)


def test_measure_latency_failure_is_evaluation_error():
    desc = KernelDescriptor(REFERENCE_GENOME, "toeplitz_matvec", (8, 8))
    with pytest.raises(EvaluationError):
        measure_latency(desc, lambda: 1 / 0, reps=3)


def test_modeled_profile_breakdown_sums():
    desc = descriptor_for("blind-rotate", TOY_TFHE, REFERENCE_GENOME)
    breakdown, util = profile(desc, "modeled")
    total = cycles_to_us(cost_model_latency(desc))
    assert abs(sum(breakdown.values()) - total) <= 0.01 * total
    assert 0 < util <= 1


def test_measured_mode_report():
    ev = Evaluator("he-rot", TOY_CKKS, mode="measured", allow_insecure=True, reps=3, warmup=1)
    t0 = time.perf_counter()
    rep = ev.evaluate(REFERENCE_GENOME)
    assert time.perf_counter() - t0 < 60
    assert rep.passed and rep.latency_us > 0 and rep.score == -rep.latency_us
    assert {"automorphism", "keyswitch", "moddown"} <= set(rep.breakdown)
    assert abs(sum(rep.breakdown.values()) - rep.latency_us) <= 0.01 * rep.latency_us


def test_profile_rejects_unknown_mode():
    with pytest.raises(ValueError):
        profile(descriptor_for("blind-rotate", TOY_TFHE, REFERENCE_GENOME), "magic")


def test_params_loader_round_trip(tmp_path):
    path = tmp_path / "p.json"
    path.write_text(json.dumps(TOY_TFHE.to_dict()))
    assert load_params(path) == TOY_TFHE
    path.write_text(json.dumps({"scheme": "bgv"}))
    with pytest.raises(ValueError):
        load_params(path)
