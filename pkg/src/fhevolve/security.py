"""Parameter admission against the published homomorphic-encryption standard table.

Ring-LWE with ternary secrets, classical attacks.  A parameter set passes when
its total modulus (every chain and special prime) is within the bound for the
largest tabulated ring degree not exceeding its own; degrees below the table
have no bound and fail.
"""

from __future__ import annotations

import csv
import io
import math
from functools import lru_cache
from importlib import resources

from .report import GateResult

TARGET_BITS = 128


@lru_cache(maxsize=None)
def security_table(bits: int = TARGET_BITS) -> dict[int, int]:
    text = resources.files("fhevolve.data").joinpath("security_table.csv").read_text(encoding="utf-8")
    out = {}
    for row in csv.DictReader(io.StringIO(text)):
        if int(row["security_bits"]) == bits:
            out[int(row["ring_degree"])] = int(row["max_log_q"])
    if not out:
        raise ValueError(f"no table rows for {bits}-bit security")
    return out


def max_log_q(ring_degree: int, bits: int = TARGET_BITS) -> int | None:
    table = security_table(bits)
    eligible = [n for n in table if n <= ring_degree]
    return table[max(eligible)] if eligible else None


def describe(params) -> tuple[int, float, str]:
    """(ring degree, total log2 modulus, security flag) for TFHE or CKKS params."""
    if hasattr(params, "modulus_chain"):
        return params.ring_degree, params.log_q_total, params.security_flag
    return params.ring.n, math.log2(params.ring.q), params.security_flag


def conforms(ring_degree: int, log_q: float, bits: int = TARGET_BITS) -> bool:
    bound = max_log_q(ring_degree, bits)
    return bound is not None and log_q <= bound


def security_gate(params, allow_insecure: bool = False) -> GateResult:
    n, log_q, flag = describe(params)
    bound = max_log_q(n)
    if bound is not None and log_q <= bound:
        return GateResult("security", True, notes=(f"N={n}, log2 Q={log_q:.2f} <= {bound}",))
    why = (f"N={n}, log2 Q={log_q:.2f} exceeds the {TARGET_BITS}-bit bound {bound}" if bound is not None
           else f"N={n} is below the smallest tabulated ring degree")
    if flag == "insecure_test_only" and allow_insecure:
        return GateResult("security", True, notes=(why, "insecure_test_only parameters admitted by explicit override"))
    if flag == "insecure_test_only":
        why += "; parameters are marked insecure_test_only and no override was given"
    return GateResult("security", False, witness=why)
