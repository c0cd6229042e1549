"""Tiered gates, latency (measured or modeled), profiling feedback and the score.

Gates run security -> unit -> module -> end_to_end and stop at the first
failure.  A candidate is scored (score = -latency_us) only if all four pass.
"""

from __future__ import annotations

import statistics
import threading
import time
from contextlib import contextmanager
from typing import Callable

import numpy as np

from .costmodel import DEFAULT_COST_MODEL, CostModelConfig, cost_breakdown, cycles_to_us, vreg_utilization
from .modring import RingParams, RingPoly, toeplitz_polymul
from .report import GATE_TIERS, EvaluationReport, GateResult
from .security import security_gate
from .variants import Genome, KernelDescriptor, run_variant
from .workloads import KERNELS, ConfigError, descriptor_for, get_context, scheme_of

MODES = ("measured", "modeled")
CORRECTNESS_TIERS = ("unit", "module", "end_to_end")


class EvaluationError(RuntimeError):
    pass


class StageProfiler:
    """Accumulates wall time per named stage."""

    def __init__(self):
        self.times: dict[str, float] = {}

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.times[name] = self.times.get(name, 0.0) + time.perf_counter() - t0


# one measurement at a time, so candidates never share the CPU while being timed
_TIMING_LOCK = threading.Lock()


def measure_latency(desc: KernelDescriptor, workload: Callable[[], object], reps: int = 5, warmup: int = 1) -> float:
    """Median wall-clock microseconds of ``workload`` over ``reps`` timed runs."""
    if reps < 3:
        raise ValueError("reps must be >= 3")
    if warmup < 0:
        raise ValueError("warmup must be >= 0")
    samples = []
    with _TIMING_LOCK:
        try:
            for _ in range(warmup):
                workload()
            for _ in range(reps):
                t0 = time.perf_counter()
                workload()
                samples.append(time.perf_counter() - t0)
        except Exception as exc:
            raise EvaluationError(f"workload for {desc.op_kind} failed: {exc}") from exc
    return statistics.median(samples) * 1e6


# ---------------------------------------------------------------------------
# correctness gates

def _failure(tier: str, exc: Exception) -> GateResult:
    return GateResult(tier, False, witness=f"{type(exc).__name__}: {exc}")


def _unit_gate(context, genome: Genome) -> GateResult:
    desc = context.unit_desc(genome)
    for case in context.unit_cases:
        got = np.asarray(context.kernel_impl(desc, (case.digits, case.keys, case.q)), dtype=np.uint64)
        if got.shape != case.expected.shape or not np.array_equal(got, case.expected):
            if got.shape != case.expected.shape:
                return GateResult("unit", False, witness=f"{case.label}: output shape {got.shape}, "
                                                         f"expected {case.expected.shape}")
            b, c, j = (int(i) for i in np.argwhere(got != case.expected)[0])
            digit_max = int(case.digits[b].max())
            return GateResult("unit", False, witness=(
                f"{case.label}, input {b} (max digit {digit_max}, lane width {genome.lane_width_bits} bits, "
                f"elide_cast={genome.elide_cast}): component {c} coefficient {j} variant={int(got[b, c, j])} "
                f"oracle={int(case.expected[b, c, j])}"))
    n = sum(case.digits.shape[0] for case in context.unit_cases)
    return GateResult("unit", True, notes=(f"{n} inputs matched the oracle",))


def matvec_unit_gate(desc: KernelDescriptor, rng_seed, q: int = 1 << 32, kernel_impl: Callable = run_variant,
                     inputs: int = 32) -> GateResult:
    """Unit tier for a bare toeplitz_matvec descriptor over full-range residues."""
    n = desc.shape[0]
    ring = RingParams(n, q)
    rng = np.random.default_rng(rng_seed)
    vecs = [rng.integers(0, q, size=n, dtype=np.uint64) for _ in range(inputs)]
    vecs.append(np.full(n, q - 1, dtype=np.uint64))
    for i, vec in enumerate(vecs):
        src = rng.integers(0, q, size=n, dtype=np.uint64)
        want = toeplitz_polymul(RingPoly(ring, src), RingPoly(ring, vec)).coeffs
        got = np.asarray(kernel_impl(desc, (vec, src, q)), dtype=np.uint64)
        if not np.array_equal(got, want):
            j = int(np.argwhere(got != want)[0][0])
            return GateResult("unit", False, witness=(
                f"input {i} (max operand {int(vec.max())}): coefficient {j} variant={int(got[j])} "
                f"oracle={int(want[j])}"))
    return GateResult("unit", True, notes=(f"{len(vecs)} inputs matched the oracle",))


def run_tier(context, genome: Genome, tier: str) -> GateResult:
    try:
        if tier == "unit":
            return _unit_gate(context, genome)
        check = context.module_check if tier == "module" else context.end_to_end_check
        witness = check(genome)
    except Exception as exc:  # a crashing candidate is a rejected candidate
        return _failure(tier, exc)
    return GateResult(tier, True) if witness is None else GateResult(tier, False, witness=witness)


def correctness_gate(desc: KernelDescriptor, tier: str, rng_seed=0, *, params=None, context=None,
                     kernel_impl: Callable = run_variant) -> GateResult:
    """One correctness tier for ``desc.genome``; deterministic given the seed."""
    if tier not in CORRECTNESS_TIERS:
        raise ValueError(f"tier must be one of {CORRECTNESS_TIERS}")
    if desc.op_kind == "toeplitz_matvec":
        if tier == "unit":
            q = params.q if params is not None and hasattr(params, "q") else 1 << 32
            return matvec_unit_gate(desc, rng_seed, q, kernel_impl)
        return GateResult(tier, True, notes=("toeplitz_matvec has no module or end-to-end workload",))
    if context is None:
        if params is None:
            raise ValueError("correctness_gate needs params or a context")
        context = get_context(params, rng_seed, kernel_impl)
    return run_tier(context, desc.genome, tier)


# gate outcomes for the default kernel are pure functions of (params, seed, genome)
_GATE_CACHE: dict = {}
_GATE_LOCK = threading.Lock()


def clear_gate_cache() -> None:
    with _GATE_LOCK:
        _GATE_CACHE.clear()


# ---------------------------------------------------------------------------
# profiling and the report

def modeled_profile(desc: KernelDescriptor, cfg: CostModelConfig = DEFAULT_COST_MODEL) -> tuple[float, dict, float]:
    b = cost_breakdown(desc, cfg)
    breakdown = {k: cycles_to_us(v, cfg) for k, v in b.as_dict().items()}
    return cycles_to_us(b.total, cfg), breakdown, vreg_utilization(desc, cfg)


def profile(desc: KernelDescriptor, mode: str, *, workload_factory=None, latency_us: float | None = None,
            cost_model: CostModelConfig = DEFAULT_COST_MODEL) -> tuple[dict, float]:
    """Per-stage latency map and VReg utilization.

    Modeled mode splits the cost-model total into its components; measured
    mode times one run per stage (``workload_factory(profiler)`` builds the
    run) and scales the stages to ``latency_us`` when given.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    util = vreg_utilization(desc, cost_model)
    if mode == "modeled":
        _, breakdown, _ = modeled_profile(desc, cost_model)
        return breakdown, util
    if workload_factory is None:
        raise ValueError("measured profiling needs a workload")
    prof = StageProfiler()
    t0 = time.perf_counter()
    workload_factory(prof)()
    total = time.perf_counter() - t0
    times = dict(prof.times)
    other = total - sum(times.values())
    if other > 0:
        times["other"] = other
    target = latency_us if latency_us is not None else total * 1e6
    scale = target / sum(times.values()) if times else 0.0
    return {k: v * scale for k, v in times.items()}, util


class Evaluator:
    """Evaluates genomes of one kernel against one parameter set."""

    def __init__(
        self,
        kernel: str,
        params,
        *,
        mode: str = "modeled",
        allow_insecure: bool = False,
        cost_model: CostModelConfig = DEFAULT_COST_MODEL,
        gate_seed: int = 0,
        reps: int = 5,
        warmup: int = 1,
        kernel_impl: Callable = run_variant,
    ):
        scheme_of(kernel)
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        descriptor_for(kernel, params, Genome())  # type check of params vs kernel
        if reps < 3:
            raise ConfigError("reps must be >= 3")
        self.kernel = kernel
        self.params = params
        self.mode = mode
        self.allow_insecure = allow_insecure
        self.cost_model = cost_model
        self.gate_seed = gate_seed
        self.reps = reps
        self.warmup = warmup
        self.kernel_impl = kernel_impl
        self.security = security_gate(params, allow_insecure)
        self._context = None
        self.context_builds = 0

    @property
    def context(self):
        if self._context is None:
            self._context = get_context(self.params, self.gate_seed, self.kernel_impl)
            self.context_builds += 1
        return self._context

    def descriptor(self, genome: Genome) -> KernelDescriptor:
        return descriptor_for(self.kernel, self.params, genome)

    def gates(self, genome: Genome) -> tuple:
        if not self.security.passed:
            return (self.security,)
        cacheable = self.kernel_impl is run_variant
        key = (repr(self.params), self.gate_seed, genome)
        if cacheable:
            with _GATE_LOCK:
                hit = _GATE_CACHE.get(key)
            if hit is not None:
                return (self.security,) + hit
        results = []
        try:
            self.descriptor(genome)
        except Exception as exc:
            results.append(_failure("unit", exc))
        else:
            for tier in CORRECTNESS_TIERS:
                r = run_tier(self.context, genome, tier)
                results.append(r)
                if not r.passed:
                    break
        results = tuple(results)
        if cacheable:
            with _GATE_LOCK:
                _GATE_CACHE[key] = results
        return (self.security,) + results

    def evaluate(self, genome: Genome, rng_seed=0) -> EvaluationReport:
        gates = self.gates(genome)
        if not all(g.passed for g in gates) or len(gates) != len(GATE_TIERS):
            return EvaluationReport(genome, gates, mode=self.mode, kernel=self.kernel)
        desc = self.descriptor(genome)
        if self.mode == "modeled":
            latency, breakdown, util = modeled_profile(desc, self.cost_model)
        else:
            ctx = self.context
            try:
                latency = measure_latency(desc, ctx.workload(self.kernel, genome), self.reps, self.warmup)
                breakdown, util = profile(
                    desc, "measured", latency_us=latency, cost_model=self.cost_model,
                    workload_factory=lambda prof: ctx.workload(self.kernel, genome, prof))
            except EvaluationError as exc:
                failed = GateResult("end_to_end", False, witness=f"timing run failed: {exc}")
                return EvaluationReport(genome, gates[:-1] + (failed,), mode=self.mode, kernel=self.kernel)
        return EvaluationReport(genome, gates, latency, breakdown, util, -latency, self.mode, self.kernel)


_OP_TO_KERNEL = {
    "blind_rotate_loop": "blind-rotate",
    "external_product": "external-product",
    "ckks_keyswitch_inner": "he-mul",
}


def evaluate(desc: KernelDescriptor, params, mode: str = "modeled", rng_seed=0, *, kernel: str | None = None,
             allow_insecure: bool = False, kernel_impl: Callable = run_variant,
             cost_model: CostModelConfig = DEFAULT_COST_MODEL) -> EvaluationReport:
    """Gate and score one descriptor (see :class:`Evaluator`)."""
    kernel = kernel or _OP_TO_KERNEL.get(desc.op_kind)
    if kernel is None or kernel not in KERNELS:
        raise ConfigError(f"no end-to-end kernel for op_kind {desc.op_kind!r}")
    ev = Evaluator(kernel, params, mode=mode, allow_insecure=allow_insecure, cost_model=cost_model,
                   gate_seed=rng_seed, kernel_impl=kernel_impl)
    return ev.evaluate(desc.genome, rng_seed)
