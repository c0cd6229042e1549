"""Island-model MAP-Elites search over kernel genomes."""

from __future__ import annotations

import json
import logging
import os
import subprocess
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ckks, tfhe
from .costmodel import DEFAULT_COST_MODEL, CostModelConfig
from .evaluator import MODES, Evaluator
from .report import EvaluationReport
from .variants import REFERENCE_GENOME, Genome, GenomeError, crossover, genome_diff, mutate
from .workloads import KERNELS, ConfigError, load_params, scheme_of

log = logging.getLogger(__name__)

PROVIDERS = ("mutate", "crossover", "mixed", "external")
BUCKETS = ("low", "mid", "high")
UNIFORM_FLOOR = 0.2


class SecurityRefusal(RuntimeError):
    pass


class ProviderError(RuntimeError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    kernel: str = "blind-rotate"
    params_path: str | None = None
    islands: int = 4
    population_per_island: int = 8
    generations: int = 30
    migration_interval: int = 5
    proposals_per_generation: int = 4
    evaluator_mode: str = "modeled"
    rng_seed: int = 0
    gate_seed: int = 0
    provider: str = "mixed"
    external_command: tuple | None = None
    allow_insecure: bool = False
    reps: int = 5
    warmup: int = 1

    def __post_init__(self):
        scheme_of(self.kernel)
        if self.islands < 1:
            raise ConfigError("islands must be >= 1")
        if self.generations < 1:
            raise ConfigError("generations must be >= 1")
        if self.migration_interval < 1:
            raise ConfigError("migration_interval must be >= 1")
        if self.population_per_island < 1 or self.proposals_per_generation < 1:
            raise ConfigError("population_per_island and proposals_per_generation must be >= 1")
        if self.evaluator_mode not in MODES:
            raise ConfigError(f"evaluator_mode must be one of {MODES}")
        if self.provider not in PROVIDERS:
            raise ConfigError(f"provider must be one of {PROVIDERS}")
        if self.provider == "external" and not self.external_command:
            raise ConfigError("the external provider needs external_command")
        if self.external_command is not None:
            object.__setattr__(self, "external_command", tuple(self.external_command))

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["external_command"] is not None:
            d["external_command"] = list(d["external_command"])
        return d

    @classmethod
    def from_dict(cls, data: dict) -> SearchConfig:
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown search config keys: {sorted(unknown)}")
        return cls(**data)

    def load_params(self):
        if self.params_path is None:
            return tfhe.TOY_PARAMS if scheme_of(self.kernel) == "tfhe" else ckks.TOY_PARAMS
        try:
            return load_params(self.params_path)
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"cannot load parameters from {self.params_path}: {exc}") from exc


@dataclass(frozen=True)
class GenerationRecord:
    generation: int
    island: int
    proposals: int
    admissions: int
    best_score_so_far: float
    wall_time: float | None
    invalid_proposals: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> GenerationRecord:
        data = json.loads(line)
        if not isinstance(data, dict):
            raise ValueError("ledger line is not a JSON object")
        return cls(**data)


# ---------------------------------------------------------------------------
# population database

def _bucket(value: int, low: int, mid: int) -> str:
    return "low" if value <= low else "mid" if value <= mid else "high"


def map_elites_bin(g: Genome, report: EvaluationReport | None = None) -> tuple[str, str]:
    """(complexity, footprint) cell from unroll*tile and lane width*tile."""
    return (_bucket(g.unroll_factor * g.tile_split, 2, 8), _bucket(g.lane_width_bits * g.tile_split, 16, 32))


@dataclass
class Elite:
    genome: Genome
    report: EvaluationReport

    @property
    def score(self) -> float:
        return self.report.score


class PopulationDb:
    def __init__(self, islands: int, capacity: int):
        self.capacity = capacity
        self.islands: list[dict] = [{} for _ in range(islands)]

    def elites(self, island: int) -> list[Elite]:
        # deterministic order: by cell key
        return [self.islands[island][c] for c in sorted(self.islands[island])]

    def best(self, island: int) -> Elite | None:
        elites = self.elites(island)
        if not elites:
            return None
        return max(elites, key=lambda e: e.score)

    def global_best(self) -> Elite | None:
        bests = [b for b in (self.best(i) for i in range(len(self.islands))) if b is not None]
        return max(bests, key=lambda e: e.score) if bests else None

    def all_elites(self) -> list[Elite]:
        return [e for i in range(len(self.islands)) for e in self.elites(i)]


def admit(db: PopulationDb, island: int, genome: Genome, report: EvaluationReport) -> bool:
    """Keep the candidate iff it passed every gate and strictly beats its cell's incumbent."""
    if not report.passed or report.score is None:
        return False
    cells = db.islands[island]
    cell = map_elites_bin(genome, report)
    incumbent = cells.get(cell)
    if incumbent is not None:
        if report.score <= incumbent.score:
            return False
    elif len(cells) >= db.capacity:
        worst_cell = min(sorted(cells), key=lambda c: cells[c].score)
        if report.score <= cells[worst_cell].score:
            return False
        del cells[worst_cell]
    cells[cell] = Elite(genome, report)
    return True


def sample_parents(db: PopulationDb, island: int, rng_seed, seed_genome: Genome = REFERENCE_GENOME) -> list[Genome]:
    """One or two parents, fitness-proportional with a 20% uniform floor."""
    elites = db.elites(island)
    if not elites:
        return [seed_genome]
    if len(elites) == 1:
        return [elites[0].genome]
    rng = np.random.default_rng(rng_seed)
    fitness = np.array([1.0 / max(-e.score, 1e-12) for e in elites])
    probs = (1 - UNIFORM_FLOOR) * fitness / fitness.sum() + UNIFORM_FLOOR / len(elites)
    picks = rng.choice(len(elites), size=2, p=probs)
    return [elites[int(i)].genome for i in picks]


# ---------------------------------------------------------------------------
# proposal providers

class ExternalProvider:
    """Line-delimited JSON over a child process's standard streams.

    One request line ``{"parents": [...], "feedback": {...}, "seed": n}`` is
    written to the child's stdin, which is then closed; every stdout line is
    parsed as a genome.  Lines that are not valid genomes are dropped and
    counted in ``dropped``.
    """

    def __init__(self, command: Sequence[str], timeout: float = 30.0):
        self.command = list(command)
        self.timeout = timeout
        self.dropped = 0

    def __call__(self, parents: Sequence[Genome], feedback: dict, rng_seed: int) -> list[Genome]:
        request = json.dumps({"parents": [p.to_dict() for p in parents], "feedback": feedback, "seed": rng_seed},
                             sort_keys=True)
        try:
            proc = subprocess.run(self.command, input=request + "\n", capture_output=True, text=True,
                                  timeout=self.timeout, check=False)
        except (OSError, subprocess.SubprocessError) as exc:
            raise ProviderError(f"external provider failed to run: {exc}") from exc
        if proc.returncode != 0:
            raise ProviderError(f"external provider exited with {proc.returncode}: {proc.stderr.strip()[:200]}")
        out = []
        for line in proc.stdout.splitlines():
            if not line.strip():
                continue
            try:
                out.append(Genome.from_json(line))
            except (GenomeError, TypeError):
                self.dropped += 1
        return out


def propose(provider, parents: Sequence[Genome], feedback: dict | None, rng_seed) -> list[Genome]:
    """Children of ``parents`` from a built-in provider name or an ExternalProvider."""
    if not parents:
        raise ValueError("propose needs at least one parent")
    rng = np.random.default_rng(rng_seed)
    s1, s2 = (int(x) for x in rng.integers(0, 2**63 - 1, size=2))
    p1, p2 = parents[0], parents[-1]
    if provider == "mutate":
        return [mutate(p1, s1)]
    if provider == "crossover":
        return [crossover(p1, p2, s1)]
    if provider == "mixed":
        child = crossover(p1, p2, s1) if len(parents) > 1 else p1
        return [mutate(child, s2)]
    if isinstance(provider, ExternalProvider):
        return provider(parents, feedback or {}, s1)
    raise ValueError(f"unknown provider {provider!r}")


def migrate(db: PopulationDb, rng_seed=None) -> int:
    """Ring migration of each island's best elite; returns the number admitted."""
    n = len(db.islands)
    if n < 2:
        return 0
    bests = [db.best(i) for i in range(n)]
    moved = 0
    for i, elite in enumerate(bests):
        if elite is not None and admit(db, (i + 1) % n, elite.genome, elite.report):
            moved += 1
    return moved


# ---------------------------------------------------------------------------
# the search loop

@dataclass
class SearchResult:
    best_genome: Genome
    best_report: EvaluationReport
    ledger: list
    db: PopulationDb
    evaluations: int = 0
    provider_errors: int = 0


def worker_count() -> int:
    env = os.environ.get("FHEVOLVE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"FHEVOLVE_THREADS must be an integer, got {env!r}") from None
    return max(1, os.cpu_count() or 1)


def _feedback(elite: Elite | None) -> dict:
    if elite is None:
        return {}
    r = elite.report
    return {"score": r.score, "latency_us": r.latency_us, "breakdown": r.breakdown,
            "vreg_utilization": r.vreg_utilization}


def run_search(config: SearchConfig, *, evaluator: Evaluator | None = None,
               cost_model: CostModelConfig = DEFAULT_COST_MODEL, ledger_path=None) -> SearchResult:
    params = config.load_params()
    if evaluator is None:
        evaluator = Evaluator(config.kernel, params, mode=config.evaluator_mode,
                              allow_insecure=config.allow_insecure, cost_model=cost_model,
                              gate_seed=config.gate_seed, reps=config.reps, warmup=config.warmup)
    if not evaluator.security.passed:
        raise SecurityRefusal(evaluator.security.witness)
    modeled = config.evaluator_mode == "modeled"
    db = PopulationDb(config.islands, config.population_per_island)
    external = ExternalProvider(config.external_command) if config.provider == "external" else None
    ledger: list[GenerationRecord] = []
    sink = open(ledger_path, "w", encoding="utf-8") if ledger_path is not None else None
    evaluations = 0
    provider_errors = 0

    def record(rec: GenerationRecord):
        ledger.append(rec)
        if sink is not None:
            sink.write(rec.to_json() + "\n")
            sink.flush()

    try:
        t0 = time.perf_counter()
        seed_report = evaluator.evaluate(REFERENCE_GENOME, config.rng_seed)
        evaluations += 1
        for island in range(config.islands):
            if not admit(db, island, REFERENCE_GENOME, seed_report):
                failed = seed_report.failed_gate
                raise ConfigError("reference genome was rejected: "
                                  + (failed.witness if failed else "no score"))
            record(GenerationRecord(0, island, 1, 1, db.global_best().score,
                                    None if modeled else time.perf_counter() - t0))

        with ThreadPoolExecutor(max_workers=worker_count()) as pool:
            for gen in range(1, config.generations + 1):
                t_gen = time.perf_counter()
                batches = []
                for island in range(config.islands):
                    children, invalid = [], 0
                    for k in range(config.proposals_per_generation):
                        seed = np.random.default_rng([config.rng_seed, gen, island, k])
                        parent_seed, child_seed = (int(x) for x in seed.integers(0, 2**63 - 1, size=2))
                        parents = sample_parents(db, island, parent_seed)
                        provider = external if external is not None else config.provider
                        try:
                            before = external.dropped if external is not None else 0
                            kids = propose(provider, parents, _feedback(db.best(island)), child_seed)
                            invalid += (external.dropped - before) if external is not None else 0
                        except ProviderError as exc:
                            provider_errors += 1
                            log.warning("%s; falling back to built-in proposals", exc)
                            kids = propose("mixed", parents, None, child_seed)
                        children.extend(kids)
                    batches.append((children, invalid))
                jobs = [(island, child) for island, (children, _) in enumerate(batches) for child in children]
                reports = list(pool.map(lambda job: evaluator.evaluate(job[1], config.rng_seed), jobs))
                evaluations += len(reports)
                admitted = [0] * config.islands
                for (island, child), rep in zip(jobs, reports):
                    if admit(db, island, child, rep):
                        admitted[island] += 1
                elapsed = None if modeled else time.perf_counter() - t_gen
                best = db.global_best().score
                for island, (children, invalid) in enumerate(batches):
                    record(GenerationRecord(gen, island, len(children), admitted[island], best, elapsed, invalid))
                if gen % config.migration_interval == 0:
                    migrate(db, [config.rng_seed, gen])
    finally:
        if sink is not None:
            sink.close()

    best = db.global_best()
    return SearchResult(best.genome, best.report, ledger, db, evaluations, provider_errors)


# ---------------------------------------------------------------------------
# run directories and reports

def write_run_directory(out_dir, config: SearchConfig, result: SearchResult) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if not (out / "ledger.jsonl").exists() or _ledger_len(out / "ledger.jsonl") != len(result.ledger):
        (out / "ledger.jsonl").write_text("".join(r.to_json() + "\n" for r in result.ledger), encoding="utf-8")
    best = {"genome": result.best_genome.to_dict(), "report": result.best_report.to_dict()}
    (out / "best.json").write_text(json.dumps(best, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    md, csv_text = build_report(read_ledger(out / "ledger.jsonl"), result.best_genome)
    (out / "report.md").write_text(md, encoding="utf-8")
    (out / "report.csv").write_text(csv_text, encoding="utf-8")
    return out


def _ledger_len(path: Path) -> int:
    with open(path, encoding="utf-8") as fh:
        return sum(1 for line in fh if line.strip())


def read_ledger(path) -> list[GenerationRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(GenerationRecord.from_json(line))
            except (ValueError, TypeError) as exc:
                raise ValueError(f"ledger line {n} is corrupt: {exc}") from exc
    return records


@dataclass(frozen=True)
class RunSummary:
    baseline_latency_us: float
    best_latency_us: float
    speedup: float
    changes: tuple


def summarize(records: Sequence[GenerationRecord], best_genome: Genome) -> RunSummary:
    if not records:
        raise ValueError("ledger is empty")
    baseline = -max(r.best_score_so_far for r in records if r.generation == 0)
    best = -max(r.best_score_so_far for r in records)
    return RunSummary(baseline, best, baseline / best, tuple(genome_diff(REFERENCE_GENOME, best_genome)))


def build_report(records: Sequence[GenerationRecord], best_genome: Genome) -> tuple[str, str]:
    s = summarize(records, best_genome)
    changes = "; ".join(s.changes) if s.changes else "no change"
    md = (
        "| variant | latency (us) | speedup | changes |\n"
        "|---|---:|---:|---|\n"
        f"| reference genome | {s.baseline_latency_us:.3f} | 1.00x | |\n"
        f"| best found | {s.best_latency_us:.3f} | {s.speedup:.2f}x | {changes} |\n"
    )
    csv_text = (
        "variant,latency_us,speedup,changes\n"
        f"reference,{s.baseline_latency_us!r},1.0,\n"
        f"best,{s.best_latency_us!r},{s.speedup!r},\"{changes}\"\n"
    )
    return md, csv_text
