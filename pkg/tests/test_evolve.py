import json
import sys
from collections import Counter

import pytest

from fhevolve import tfhe
from fhevolve.evaluator import Evaluator
from fhevolve.evolve import (
    ExternalProvider,
    GenerationRecord,
    PopulationDb,
    SearchConfig,
    SecurityRefusal,
    admit,
    build_report,
    map_elites_bin,
    migrate,
    propose,
    read_ledger,
    run_search,
    sample_parents,
    summarize,
    worker_count,
    write_run_directory,
)
from fhevolve.report import EvaluationReport, GateResult
from fhevolve.variants import DOMAINS, REFERENCE_GENOME, Genome, enumerate_space
from fhevolve.workloads import ConfigError

PASSED = tuple(GateResult(t, True) for t in ("security", "unit", "module", "end_to_end"))


def scored(g: Genome, latency: float) -> EvaluationReport:
    return EvaluationReport(g, PASSED, latency, {}, 1.0, -latency)


def failed(g: Genome) -> EvaluationReport:
    return EvaluationReport(g, PASSED[:1] + (GateResult("unit", False, witness="x"),))


# ---------------------------------------------------------------------------
# binning and admission

def test_bins():
    assert map_elites_bin(REFERENCE_GENOME) == ("low", "mid")
    assert map_elites_bin(Genome(unroll_factor=8, tile_split=2))[0] == "high"
    assert map_elites_bin(Genome(lane_width_bits=8)) == ("low", "low")
    assert map_elites_bin(Genome(lane_width_bits=32, tile_split=4)) == ("mid", "high")
    # equal complexity and width proxies land in the same cell
    a, b = Genome(unroll_factor=2), Genome(tile_split=2, lane_width_bits=16)
    assert map_elites_bin(a) == map_elites_bin(b)


def test_admit_rules():
    db = PopulationDb(1, 9)
    g = REFERENCE_GENOME
    assert not admit(db, 0, g, failed(g))
    assert admit(db, 0, g, scored(g, 10.0))
    same_cell = g.replace(schedule="interleaved")
    assert not admit(db, 0, same_cell, scored(same_cell, 10.0))  # ties do not evict
    assert admit(db, 0, same_cell, scored(same_cell, 9.0))
    assert db.elites(0)[0].genome == same_cell


def test_capacity_evicts_only_for_better_candidates():
    db = PopulationDb(1, 2)
    cells = [Genome(lane_width_bits=8), Genome(lane_width_bits=32), Genome(lane_width_bits=32, tile_split=4)]
    assert admit(db, 0, cells[0], scored(cells[0], 5.0))
    assert admit(db, 0, cells[1], scored(cells[1], 7.0))
    assert not admit(db, 0, cells[2], scored(cells[2], 8.0))
    assert admit(db, 0, cells[2], scored(cells[2], 6.0))
    assert {e.genome for e in db.elites(0)} == {cells[0], cells[2]}


def test_stored_scores_are_cell_maxima():
    db = PopulationDb(1, 9)
    best = {}
    for i, g in enumerate(enumerate_space("blind_rotate_loop")[:60]):
        lat = 1.0 + (i * 37 % 23)
        admit(db, 0, g, scored(g, lat))
        cell = map_elites_bin(g)
        best[cell] = max(best.get(cell, float("-inf")), -lat)
    assert {map_elites_bin(e.genome): e.score for e in db.elites(0)} == best


# ---------------------------------------------------------------------------
# sampling, proposals, migration

def test_single_elite_and_empty_island():
    db = PopulationDb(2, 8)
    g = Genome(unroll_factor=4)
    admit(db, 0, g, scored(g, 3.0))
    assert all(sample_parents(db, 0, s) == [g] for s in range(20))
    assert sample_parents(db, 1, 0) == [REFERENCE_GENOME]


def test_fitter_elite_sampled_more_often():
    db = PopulationDb(1, 8)
    fast, slow = Genome(lane_width_bits=8), Genome(lane_width_bits=32)
    admit(db, 0, fast, scored(fast, 1.0))
    admit(db, 0, slow, scored(slow, 10.0))
    counts = Counter()
    for s in range(10_000):
        counts.update(sample_parents(db, 0, s))
    assert counts[fast] > counts[slow]
    # 20% uniform floor: the slow elite keeps at least ~10% of draws
    assert counts[slow] / sum(counts.values()) > 0.1
    assert sample_parents(db, 0, 5) == sample_parents(db, 0, 5)


def test_builtin_providers():
    p1, p2 = REFERENCE_GENOME, Genome(8, 2, 8, True, "interleaved", True)
    for seed in range(50):
        kids = propose("mixed", [p1, p2], None, seed)
        assert len(kids) >= 1
        for k in kids:
            for f, dom in DOMAINS.items():
                assert getattr(k, f) in dom
    assert propose("mutate", [p1], None, 3) == propose("mutate", [p1], None, 3)
    with pytest.raises(ValueError):
        propose("llm", [p1], None, 0)


ECHO = "import sys, json\nreq = json.loads(sys.stdin.readline())\nfor p in req['parents']:\n    print(json.dumps(p))\n"
MALFORMED = ECHO + "print('not json')\nprint(json.dumps({'unroll_factor': 3}))\n"


def test_external_echo_stub_round_trip():
    prov = ExternalProvider([sys.executable, "-c", ECHO])
    parents = [REFERENCE_GENOME, Genome(unroll_factor=8)]
    assert propose(prov, parents, {"score": -1.0}, 0) == parents
    assert prov.dropped == 0


def test_external_malformed_lines_dropped_and_counted():
    prov = ExternalProvider([sys.executable, "-c", MALFORMED])
    assert propose(prov, [REFERENCE_GENOME], {}, 0) == [REFERENCE_GENOME]
    assert prov.dropped == 2


def test_external_failure_falls_back(tmp_path):
    cfg = SearchConfig(kernel="blind-rotate", generations=2, allow_insecure=True, provider="external",
                       external_command=(sys.executable, "-c", "import sys; sys.exit(4)"))
    result = run_search(cfg)
    assert result.provider_errors > 0 and result.best_report.passed


def test_migration_ring_propagation():
    n = 5
    db = PopulationDb(n, 8)
    for i in range(n):
        admit(db, i, REFERENCE_GENOME, scored(REFERENCE_GENOME, 10.0))
    star = Genome(unroll_factor=8, tile_split=2, lane_width_bits=8, elide_cast=True)
    admit(db, 2, star, scored(star, 1.0))
    for _ in range(n - 1):
        migrate(db)
    assert all(db.best(i).genome == star for i in range(n))


def test_migration_noops():
    single = PopulationDb(1, 8)
    admit(single, 0, REFERENCE_GENOME, scored(REFERENCE_GENOME, 1.0))
    assert migrate(single) == 0
    same = PopulationDb(3, 8)
    for i in range(3):
        admit(same, i, REFERENCE_GENOME, scored(REFERENCE_GENOME, 1.0))
    assert migrate(same) == 0


# ---------------------------------------------------------------------------
# the loop

def test_config_validation():
    with pytest.raises(ConfigError):
        SearchConfig(islands=0)
    with pytest.raises(ConfigError):
        SearchConfig(generations=0)
    with pytest.raises(ConfigError):
        SearchConfig(migration_interval=0)
    with pytest.raises(ConfigError):
        SearchConfig(kernel="fft")
    with pytest.raises(ConfigError):
        SearchConfig(provider="external")
    cfg = SearchConfig(kernel="he-rot", rng_seed=4)
    assert SearchConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_security_refusal():
    with pytest.raises(SecurityRefusal):
        run_search(SearchConfig(kernel="blind-rotate", generations=1))


def test_search_matches_brute_force_and_ledger_is_monotone():
    ev = Evaluator("blind-rotate", tfhe.TOY_PARAMS, allow_insecure=True)
    optimum = max(ev.evaluate(g).score for g in enumerate_space("blind_rotate_loop"))
    cfg = SearchConfig(kernel="blind-rotate", rng_seed=3, allow_insecure=True)
    result = run_search(cfg)
    assert result.best_report.score == optimum
    assert len(result.ledger) == cfg.islands * (cfg.generations + 1)
    for island in range(cfg.islands):
        trace = [r.best_score_so_far for r in result.ledger if r.island == island]
        assert trace == sorted(trace)
    assert all(r.wall_time is None for r in result.ledger)


def test_run_directory_and_report(tmp_path):
    cfg = SearchConfig(kernel="blind-rotate", generations=6, rng_seed=8, allow_insecure=True)
    result = run_search(cfg, ledger_path=tmp_path / "ledger.jsonl")
    write_run_directory(tmp_path, cfg, result)
    for name in ("config.json", "ledger.jsonl", "best.json", "report.md", "report.csv"):
        assert (tmp_path / name).exists()
    records = read_ledger(tmp_path / "ledger.jsonl")
    assert records == result.ledger
    s = summarize(records, result.best_genome)
    assert s.speedup == s.baseline_latency_us / s.best_latency_us >= 1.0
    md, csv_text = build_report(records, result.best_genome)
    assert f"{s.speedup:.2f}x" in md
    assert csv_text.splitlines()[0] == "variant,latency_us,speedup,changes"


def test_generation_record_round_trip():
    r = GenerationRecord(3, 1, 4, 2, -2.5, None, 1)
    assert GenerationRecord.from_json(r.to_json()) == r
    with pytest.raises(ValueError):
        GenerationRecord.from_json("[1, 2]")


def test_summarize_empty_ledger():
    with pytest.raises(ValueError):
        summarize([], REFERENCE_GENOME)


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("FHEVOLVE_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("FHEVOLVE_THREADS", "many")
    with pytest.raises(ConfigError):
        worker_count()
