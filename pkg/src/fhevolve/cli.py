"""Command-line entry point.

Exit codes: 0 success, 1 gate or validation failure, 2 usage or
configuration error, 3 security refusal.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .evaluator import Evaluator
from .evolve import SearchConfig, SecurityRefusal, build_report, read_ledger, run_search, write_run_directory
from .security import security_gate
from .tfhe import INSECURE
from .variants import Genome, GenomeError
from .workloads import KERNELS, ConfigError, load_params

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_SECURITY = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _err(msg: str) -> None:
    print(f"fhevolve: {msg}", file=sys.stderr)


def _warn_insecure(params) -> None:
    if getattr(params, "security_flag", None) == INSECURE:
        _err("warning: parameters are insecure_test_only; results say nothing about production security")


def cmd_search(args) -> int:
    try:
        config = SearchConfig(
            kernel=args.kernel,
            params_path=args.params,
            islands=args.islands,
            population_per_island=args.population,
            generations=args.generations,
            migration_interval=args.migration_interval,
            proposals_per_generation=args.proposals,
            evaluator_mode=args.evaluator,
            rng_seed=args.seed,
            gate_seed=args.gate_seed,
            provider=args.provider,
            external_command=tuple(args.external_command.split()) if args.external_command else None,
            allow_insecure=args.allow_insecure,
            reps=args.reps,
        )
        params = config.load_params()
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_USAGE
    gate = security_gate(params, args.allow_insecure)
    if not gate.passed:
        _err(f"security gate refused the parameters: {gate.witness}")
        return EXIT_SECURITY
    if args.allow_insecure:
        _warn_insecure(params)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        result = run_search(config, ledger_path=out / "ledger.jsonl")
    except SecurityRefusal as exc:
        _err(f"security gate refused the parameters: {exc}")
        return EXIT_SECURITY
    except (ConfigError, OSError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    write_run_directory(out, config, result)
    r = result.best_report
    print(json.dumps({"best_genome": result.best_genome.to_dict(), "latency_us": r.latency_us,
                      "score": r.score, "evaluations": result.evaluations, "out": str(out)}, sort_keys=True))
    return EXIT_OK


def _read_genome(path) -> Genome:
    text = Path(path).read_text(encoding="utf-8")
    data = json.loads(text)
    # accept either a bare genome or a best.json document
    if isinstance(data, dict) and "genome" in data and isinstance(data["genome"], dict):
        data = data["genome"]
    return Genome.from_dict(data)


def cmd_bench(args) -> int:
    try:
        genome = _read_genome(args.genome)
        params = load_params(args.params) if args.params else SearchConfig(kernel=args.kernel).load_params()
        ev = Evaluator(args.kernel, params, mode=args.evaluator, allow_insecure=args.allow_insecure,
                       gate_seed=args.seed, reps=args.reps, warmup=args.warmup)
    except (OSError, ValueError, KeyError, TypeError, GenomeError, ConfigError) as exc:
        _err(f"cannot set up benchmark: {exc}")
        return EXIT_USAGE
    if args.allow_insecure:
        _warn_insecure(params)
    report = ev.evaluate(genome, args.seed)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    failed = report.failed_gate
    if failed is not None:
        _err(f"{failed.gate} gate failed: {failed.witness}")
        return EXIT_SECURITY if failed.gate == "security" else EXIT_FAIL
    return EXIT_OK


def cmd_report(args) -> int:
    run = Path(args.run_dir)
    try:
        records = read_ledger(run / "ledger.jsonl")
        best = json.loads((run / "best.json").read_text(encoding="utf-8"))
        genome = Genome.from_dict(best["genome"])
        md, csv_text = build_report(records, genome)
    except (OSError, ValueError, KeyError, TypeError, GenomeError) as exc:
        _err(f"cannot build report for {run}: {exc}")
        return EXIT_USAGE
    (run / "report.md").write_text(md, encoding="utf-8")
    (run / "report.csv").write_text(csv_text, encoding="utf-8")
    print(csv_text if args.format == "csv" else md, end="")
    return EXIT_OK


def cmd_validate_params(args) -> int:
    try:
        params = load_params(args.file)
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        _err(f"cannot parse {args.file}: {exc}")
        return EXIT_USAGE
    except ValueError as exc:
        print(f"FAIL structural: {exc}")
        return EXIT_FAIL
    problems = params.structural_problems() if hasattr(params, "structural_problems") else []
    gate = security_gate(params, args.allow_insecure)
    for p in problems:
        print(f"FAIL structural: {p}")
    if gate.passed:
        for note in gate.notes:
            print(f"PASS security: {note}")
    else:
        print(f"FAIL security: {gate.witness}")
    if params.security_flag == INSECURE:
        print("notice: security_flag is insecure_test_only")
    return EXIT_OK if gate.passed and not problems else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fhevolve", description="Evolutionary search over FHE kernel variants.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("search", help="run an island-model search and write a run directory")
    s.add_argument("--kernel", required=True, choices=sorted(KERNELS))
    s.add_argument("--params", help="parameter JSON (default: bundled toy set for the kernel's scheme)")
    s.add_argument("--islands", type=int, default=4)
    s.add_argument("--population", type=int, default=8, help="elites kept per island")
    s.add_argument("--generations", type=int, default=30)
    s.add_argument("--migration-interval", type=int, default=5)
    s.add_argument("--proposals", type=int, default=4, help="proposals per island per generation")
    s.add_argument("--evaluator", choices=("measured", "modeled"), default="modeled")
    s.add_argument("--provider", choices=("mutate", "crossover", "mixed", "external"), default="mixed")
    s.add_argument("--external-command", help="command line of an external proposal process")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--gate-seed", type=int, default=0)
    s.add_argument("--reps", type=int, default=5)
    s.add_argument("--allow-insecure", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_search)

    b = sub.add_parser("bench", help="gate and time a single genome")
    b.add_argument("--genome", required=True)
    b.add_argument("--kernel", required=True, choices=sorted(KERNELS))
    b.add_argument("--params")
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--warmup", type=int, default=1)
    b.add_argument("--evaluator", choices=("measured", "modeled"), default="measured")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--allow-insecure", action="store_true")
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("report", help="baseline vs best comparison table for a run directory")
    r.add_argument("run_dir")
    r.add_argument("--format", choices=("md", "csv"), default="md")
    r.set_defaults(func=cmd_report)

    v = sub.add_parser("validate-params", help="security and structural checks for a parameter file")
    v.add_argument("file")
    v.add_argument("--allow-insecure", action="store_true")
    v.set_defaults(func=cmd_validate_params)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
