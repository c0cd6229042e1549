"""Gate results and evaluation reports (immutable, JSON round-trippable)."""

from __future__ import annotations

from dataclasses import dataclass, field

from .variants import Genome

GATE_TIERS = ("security", "unit", "module", "end_to_end")


@dataclass(frozen=True)
class GateResult:
    gate: str
    passed: bool
    witness: str | None = None
    notes: tuple = ()

    def __post_init__(self):
        if self.gate not in GATE_TIERS:
            raise ValueError(f"unknown gate {self.gate!r}")
        if not self.passed and not self.witness:
            raise ValueError("a failed gate must carry a witness")
        object.__setattr__(self, "notes", tuple(self.notes))

    def to_dict(self) -> dict:
        return {"gate": self.gate, "passed": self.passed, "witness": self.witness, "notes": list(self.notes)}

    @classmethod
    def from_dict(cls, data: dict) -> GateResult:
        return cls(data["gate"], bool(data["passed"]), data.get("witness"), tuple(data.get("notes", ())))


@dataclass(frozen=True)
class EvaluationReport:
    genome: Genome
    gates: tuple
    latency_us: float | None = None
    breakdown: dict = field(default_factory=dict)
    vreg_utilization: float | None = None
    score: float | None = None
    mode: str = "modeled"
    kernel: str = ""

    def __post_init__(self):
        object.__setattr__(self, "gates", tuple(self.gates))
        if self.score is not None:
            if not self.passed:
                raise ValueError("only fully gated reports may carry a score")
            if self.score != -self.latency_us:
                raise ValueError("score must equal -latency_us")

    @property
    def passed(self) -> bool:
        return bool(self.gates) and all(g.passed for g in self.gates) and len(self.gates) == len(GATE_TIERS)

    @property
    def rejected_at(self) -> str | None:
        for g in self.gates:
            if not g.passed:
                return g.gate
        return None

    @property
    def failed_gate(self) -> GateResult | None:
        return next((g for g in self.gates if not g.passed), None)

    def to_dict(self) -> dict:
        return {
            "genome": self.genome.to_dict(),
            "kernel": self.kernel,
            "mode": self.mode,
            "gates": [g.to_dict() for g in self.gates],
            "latency_us": self.latency_us,
            "breakdown": dict(self.breakdown),
            "vreg_utilization": self.vreg_utilization,
            "score": self.score,
            "rejected_at": self.rejected_at,
        }

    @classmethod
    def from_dict(cls, data: dict) -> EvaluationReport:
        return cls(
            genome=Genome.from_dict(data["genome"]),
            gates=tuple(GateResult.from_dict(g) for g in data["gates"]),
            latency_us=data.get("latency_us"),
            breakdown=dict(data.get("breakdown") or {}),
            vreg_utilization=data.get("vreg_utilization"),
            score=data.get("score"),
            mode=data.get("mode", "modeled"),
            kernel=data.get("kernel", ""),
        )
