"""Pipeline entry point: ingest -> stats -> serialize -> prefs -> rollout ->
score -> report, driven by one JSON config file with flag overrides.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
import zlib
from dataclasses import dataclass, field
from pathlib import Path

from . import analysis
from . import corpus as corpus_mod
from . import grader as grader_mod
from . import metrics as metrics_mod
from . import prefdata
from . import rollout as rollout_mod
from .grader import ExecLimits, MockBackend, SubprocessBackend, exec_report_for_score
from .serializer import (
    HeuristicTokenCounter,
    SerializeMode,
    dialogue_record,
    extract_code,
    save_dialogues,
    serialize_trajectory,
    truncate_dialogue,
)

EXIT_OK = 0
EXIT_DATA = 1
EXIT_CONFIG = 2


def _default_paths() -> dict:
    return {"corpus": None, "assignments": None, "suites": None, "out_dir": "out", "raw_logs": None}


@dataclass
class PipelineConfig:
    paths: dict = field(default_factory=_default_paths)
    filter: dict = field(default_factory=lambda: {
        "apply": True,
        "require_one_pass": True,
        "drop_noncompiling_submissions": True,
        "keep_runtime_errors": True,
    })
    serialize: dict = field(default_factory=lambda: {"mode": "with_feedback", "budget": 4096})
    split: dict = field(default_factory=lambda: {"policy": {}, "sample": None})
    dpo: dict = field(default_factory=lambda: {"beta": 0.5})
    grpo: dict = field(default_factory=lambda: {"group_size": 4, "prefixes_per_traj": 2, "seed": 13})
    rollout: dict = field(default_factory=lambda: {
        "endpoint": None,
        "horizon": 5,
        "concurrency": 1,
        "max_abort_fraction": 0.1,
    })
    grading: dict = field(default_factory=lambda: {
        "backend": "mock",
        "runner_cmd": None,
        "oracle_scores": None,
        "default_score": 0.0,
        "n_cases": 8,
        "limits": {},
    })
    metrics: dict = field(default_factory=lambda: {
        "bins": 20,
        "weights": [0.25, 0.25, 0.25, 0.25],
        "per_assignment": False,
    })
    seed: int = 0

    def as_dict(self) -> dict:
        return {
            "paths": self.paths,
            "filter": self.filter,
            "serialize": self.serialize,
            "split": self.split,
            "dpo": self.dpo,
            "grpo": self.grpo,
            "rollout": self.rollout,
            "grading": self.grading,
            "metrics": self.metrics,
            "seed": self.seed,
        }

    @classmethod
    def load(cls, path: str | None) -> "PipelineConfig":
        cfg = cls()
        if path is None:
            return cfg
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        base = cfg.as_dict()
        for section, value in raw.items():
            if section not in base:
                raise ConfigError(f"unknown config section {section!r}")
            if isinstance(base[section], dict) and isinstance(value, dict):
                merged = copy.deepcopy(base[section])
                merged.update(value)
                setattr(cfg, section, merged)
            else:
                setattr(cfg, section, value)
        return cfg


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def _progress(args, **payload) -> None:
    if getattr(args, "json", False):
        sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
        sys.stderr.flush()


def _out_dir(cfg: PipelineConfig) -> Path:
    out = Path(cfg.paths.get("out_dir") or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(cfg: PipelineConfig, out_dir: Path) -> None:
    (out_dir / "effective_config.json").write_text(
        json.dumps(cfg.as_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _load_corpus(cfg: PipelineConfig, split_label: str = "unsplit") -> corpus_mod.Corpus:
    path = cfg.paths.get("corpus")
    if not path or not Path(path).exists():
        raise DataError(f"corpus file not found: {path}")
    assignments = None
    if cfg.paths.get("assignments"):
        assignments = corpus_mod.load_assignments(cfg.paths["assignments"])
    return corpus_mod.load_corpus(path, assignments, split_label)


def _serialize_mode(cfg: PipelineConfig) -> SerializeMode:
    return SerializeMode(feedback=cfg.serialize.get("mode", "with_feedback"))


def build_grade_fn(cfg: PipelineConfig):
    """Grading callable from config: subprocess backend over the runner
    harness, or a mock replaying an oracle score file."""
    limits = ExecLimits(**cfg.grading.get("limits", {}))
    kind = cfg.grading.get("backend", "mock")
    if kind == "subprocess":
        if not cfg.grading.get("runner_cmd"):
            raise ConfigError("grading.runner_cmd required for the subprocess backend")
        if not cfg.paths.get("suites"):
            raise ConfigError("paths.suites required for the subprocess backend")
        suites = grader_mod.load_suites(cfg.paths["suites"])
        backend = SubprocessBackend(cfg.grading["runner_cmd"], suites)
    elif kind == "mock":
        n_cases = cfg.grading.get("n_cases", 8)
        default = exec_report_for_score(cfg.grading.get("default_score", 0.0), n_cases)
        backend = MockBackend(default=default)
        oracle_path = cfg.grading.get("oracle_scores")
        if oracle_path:
            with open(oracle_path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    obj = json.loads(line)
                    backend.add(obj["program"], exec_report_for_score(obj["score"], n_cases))
    else:
        raise ConfigError(f"unknown grading backend {kind!r}")
    return lambda assignment, program: grader_mod.grade(assignment, program, backend, limits)


def _require_endpoint(cfg: PipelineConfig) -> rollout_mod.EndpointConfig:
    ep = cfg.rollout.get("endpoint")
    if not ep:
        raise ConfigError("rollout.endpoint missing from config")
    decoding = rollout_mod.Decoding(**ep.get("decoding", {}))
    return rollout_mod.EndpointConfig(
        base_url=ep["base_url"],
        model_name=ep["model_name"],
        api_key_env=ep.get("api_key_env"),
        decoding=decoding,
        n_samples=ep.get("n_samples", 1),
        max_new_tokens=ep.get("max_new_tokens", 1024),
        timeout_s=ep.get("timeout_s", 60.0),
        max_retries=ep.get("max_retries", 4),
        retry_base_s=ep.get("retry_base_s", 0.5),
    )


def cmd_ingest(args, cfg: PipelineConfig) -> int:
    logs = args.logs or cfg.paths.get("raw_logs")
    if not logs or not Path(logs).exists():
        raise DataError(f"raw log file not found: {logs}")
    assignments = None
    if cfg.paths.get("assignments"):
        assignments = corpus_mod.load_assignments(cfg.paths["assignments"])
    column_map = json.loads(args.column_map) if args.column_map else None
    result = corpus_mod.ingest_logs(logs, args.format, column_map, assignments)
    out_dir = _out_dir(cfg)
    if result.errors:
        (out_dir / "ingest_errors.json").write_text(
            json.dumps([e._asdict() for e in result.errors], indent=2) + "\n", encoding="utf-8"
        )
    built = result.corpus
    rejected: dict[str, int] = {}
    if cfg.filter.get("apply", True):
        rules = corpus_mod.FilterRules(
            require_one_pass=cfg.filter["require_one_pass"],
            drop_noncompiling_submissions=cfg.filter["drop_noncompiling_submissions"],
            keep_runtime_errors=cfg.filter["keep_runtime_errors"],
        )
        built, rejected = corpus_mod.filter_corpus(built, rules, grader_mod.is_compiling)
    target = cfg.paths.get("corpus") or str(out_dir / "corpus.jsonl")
    corpus_mod.save_corpus(built, target)
    _echo_config(cfg, out_dir)
    _progress(args, event="ingest", trajectories=len(built.trajectories),
              row_errors=len(result.errors), rejected=rejected)
    print(f"ingested {len(built.trajectories)} trajectories -> {target}"
          f" ({len(result.errors)} bad rows, rejected: {rejected or 'none'})")
    return EXIT_OK


def cmd_stats(args, cfg: PipelineConfig) -> int:
    corpus = _load_corpus(cfg)
    table = corpus_mod.corpus_stats(corpus)
    header = "  ".join(corpus_mod.StatsTable.COLUMNS)
    row = (
        f"{table.n_traj}  {table.n_students}  {table.n_success}  {table.n_fail}  "
        f"{table.n_assignments}  {table.avg_len:.1f}  {table.avg_final_grade * 100:.2f}  "
        f"{table.median_final_grade * 100:.2f}"
    )
    print(header)
    print(row)
    out_dir = _out_dir(cfg)
    (out_dir / "stats.json").write_text(json.dumps(table.__dict__, indent=2) + "\n", encoding="utf-8")
    _echo_config(cfg, out_dir)
    return EXIT_OK


def cmd_serialize(args, cfg: PipelineConfig) -> int:
    corpus = _load_corpus(cfg)
    mode = _serialize_mode(cfg)
    budget = cfg.serialize.get("budget", 4096)
    counter = HeuristicTokenCounter()
    out_dir = _out_dir(cfg)
    records = []
    for traj in corpus.trajectories:
        dialogue = serialize_trajectory(corpus.assignment_for(traj), traj, mode)
        dialogue = truncate_dialogue(dialogue, budget, counter)
        records.append(
            dialogue_record(dialogue, {
                "student_id": traj.student_id,
                "assignment_id": traj.assignment_id,
                "mode": mode.feedback.value,
            })
        )
    path = out_dir / "dialogues.jsonl"
    n = save_dialogues(records, path)
    _echo_config(cfg, out_dir)
    _progress(args, event="serialize", dialogues=n)
    print(f"serialized {n} dialogues -> {path}")
    return EXIT_OK


def cmd_prefs(args, cfg: PipelineConfig) -> int:
    corpus = _load_corpus(cfg)
    build = prefdata.build_dpo_dataset(
        corpus, _serialize_mode(cfg), cfg.serialize.get("budget", 4096)
    )
    out_dir = _out_dir(cfg)
    path = out_dir / "preference_pairs.jsonl"
    prefdata.save_preference_pairs(build.pairs, path)
    _echo_config(cfg, out_dir)
    _progress(args, event="prefs", pairs=len(build.pairs), skipped=build.positions_skipped)
    print(
        f"built {len(build.pairs)} preference pairs -> {path} "
        f"({build.positions_skipped}/{build.positions_seen} positions without contrast)"
    )
    return EXIT_OK


def cmd_grpo_data(args, cfg: PipelineConfig) -> int:
    corpus = _load_corpus(cfg)
    endpoint = _require_endpoint(cfg)
    if endpoint.decoding.kind == "greedy":
        endpoint = rollout_mod.EndpointConfig(
            base_url=endpoint.base_url,
            model_name=endpoint.model_name,
            api_key_env=endpoint.api_key_env,
            decoding=rollout_mod.Decoding("top_p", p=0.95, temperature=0.7),
            n_samples=cfg.grpo["group_size"],
            max_new_tokens=endpoint.max_new_tokens,
            timeout_s=endpoint.timeout_s,
            max_retries=endpoint.max_retries,
            retry_base_s=endpoint.retry_base_s,
        )
    client = rollout_mod.HttpChatClient(endpoint)
    grade_fn = build_grade_fn(cfg)
    mode = _serialize_mode(cfg)
    budget = cfg.serialize.get("budget", 4096)
    out_dir = _out_dir(cfg)
    path = out_dir / "grpo_samples.jsonl"
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for traj in corpus.trajectories:
            if len(traj) < 2:
                continue
            assignment = corpus.assignment_for(traj)
            traj_seed = cfg.grpo["seed"] ^ zlib.crc32(
                f"{traj.student_id}/{traj.assignment_id}".encode()
            )
            prefixes = prefdata.sample_grpo_prefixes(
                traj, assignment, cfg.grpo["prefixes_per_traj"], traj_seed, mode, budget
            )
            for prefix in prefixes:
                candidates = [extract_code(g) for g in client.complete(prefix.prompt)]
                tiers = [
                    prefdata.tiered_reward(
                        cand, prefix.ground_truth_next, prefix.ground_truth_score,
                        lambda program: grade_fn(assignment, program),
                    )
                    for cand in candidates
                ]
                fh.write(json.dumps(prefdata.grpo_sample_record(prefix, candidates, tiers)) + "\n")
                n += 1
    _echo_config(cfg, out_dir)
    _progress(args, event="grpo-data", samples=n)
    print(f"wrote {n} group samples -> {path}")
    return EXIT_OK


def cmd_rollout(args, cfg: PipelineConfig) -> int:
    corpus = _load_corpus(cfg, split_label="test")
    endpoint = _require_endpoint(cfg)
    client = rollout_mod.HttpChatClient(endpoint)
    grade_fn = build_grade_fn(cfg)
    settings = rollout_mod.RolloutSettings(
        mode=_serialize_mode(cfg),
        budget=cfg.serialize.get("budget", 4096),
        horizon=cfg.rollout.get("horizon", 5),
        concurrency=cfg.rollout.get("concurrency", 1),
        max_abort_fraction=cfg.rollout.get("max_abort_fraction", 0.1),
    )
    out_dir = _out_dir(cfg)
    path = out_dir / "records.jsonl"
    if not args.resume and path.exists():
        path.unlink()
    stats = rollout_mod.RunStats()
    for record in rollout_mod.run_eval(corpus, client, grade_fn, settings, path, stats):
        _progress(args, event="record", key=list(record.key()), steps=len(record.steps))
    _echo_config(cfg, out_dir)
    print(
        f"rollout complete: {stats.completed} records ({stats.skipped} resumed, "
        f"{stats.aborted} aborted) -> {path}"
    )
    return EXIT_OK


def cmd_score(args, cfg: PipelineConfig) -> int:
    out_dir = _out_dir(cfg)
    records_path = args.records or (out_dir / "records.jsonl")
    if not Path(records_path).exists():
        raise DataError(f"records file not found: {records_path}")
    records = rollout_mod.load_records(records_path)
    if not records:
        raise DataError("no rollout records to score")
    weights = tuple(cfg.metrics.get("weights", [0.25, 0.25, 0.25, 0.25]))
    report = metrics_mod.aggregate(records, weights, cfg.rollout.get("horizon", 5))
    bins = cfg.metrics.get("bins", 20)
    curves = {"model": metrics_mod.grade_progression(records, bins)}
    if cfg.paths.get("corpus") and Path(cfg.paths["corpus"]).exists():
        curves["ground_truth"] = metrics_mod.grade_progression(_load_corpus(cfg), bins)
    paths = metrics_mod.emit_report(report, curves, ["json"], out_dir)
    if cfg.metrics.get("per_assignment"):
        by_assignment: dict[str, list] = {}
        for rec in records:
            by_assignment.setdefault(rec.assignment_id, []).append(rec)
        for assignment_id in sorted(by_assignment):
            sub = metrics_mod.aggregate(by_assignment[assignment_id], weights,
                                        cfg.rollout.get("horizon", 5))
            metrics_mod.emit_report(sub, None, ["json"],
                                    out_dir / "per_assignment" / assignment_id)
    _echo_config(cfg, out_dir)
    _progress(args, event="score", report=str(paths[0]))
    avg = report.averages
    print(
        f"scored {len(records)} records: Cov={avg['coverage']:.4f} "
        f"GP={avg['grade_proximity']:.4f} CB={avg['codebleu']:.4f} -> {paths[0]}"
    )
    return EXIT_OK


def cmd_codebleu(args, cfg: PipelineConfig) -> int:
    candidate = Path(args.candidate).read_text(encoding="utf-8")
    reference = Path(args.reference).read_text(encoding="utf-8")
    weights = tuple(float(w) for w in args.weights.split(",")) if args.weights else (
        tuple(cfg.metrics.get("weights", [0.25, 0.25, 0.25, 0.25]))
    )
    breakdown = analysis.codebleu(candidate, reference, weights)
    print(json.dumps(breakdown.as_dict(), indent=2))
    return EXIT_OK


def cmd_report(args, cfg: PipelineConfig) -> int:
    out_dir = _out_dir(cfg)
    source = args.report or (out_dir / "report.json")
    if not Path(source).exists():
        raise DataError(f"report file not found: {source}")
    report, curves = metrics_mod.load_report(source)
    formats = args.formats.split(",") if args.formats else ["csv", "markdown"]
    paths = metrics_mod.emit_report(report, curves, formats, out_dir)
    print("wrote " + ", ".join(str(p) for p in paths))
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "stats": cmd_stats,
    "serialize": cmd_serialize,
    "prefs": cmd_prefs,
    "grpo-data": cmd_grpo_data,
    "rollout": cmd_rollout,
    "score": cmd_score,
    "report": cmd_report,
    "codebleu": cmd_codebleu,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stusim", description=__doc__)
    parser.add_argument("--config", help="JSON pipeline config file")
    parser.add_argument("--json", action="store_true", help="machine-readable progress on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="raw submission logs -> corpus JSONL")
    p.add_argument("--logs", help="raw log file (overrides paths.raw_logs)")
    p.add_argument("--format", choices=["jsonl", "csv"], default="jsonl")
    p.add_argument("--column-map", help="JSON object mapping canonical -> source columns")

    sub.add_parser("stats", help="corpus summary statistics")
    sub.add_parser("serialize", help="corpus -> dialogue JSONL")
    sub.add_parser("prefs", help="corpus -> preference pair JSONL")
    sub.add_parser("grpo-data", help="corpus -> group candidate samples with rewards")

    p = sub.add_parser("rollout", help="evaluate endpoint over the test corpus")
    p.add_argument("--resume", action="store_true", help="keep completed records")

    p = sub.add_parser("score", help="rollout records -> metrics report")
    p.add_argument("--records", help="records JSONL (default: out_dir/records.jsonl)")

    p = sub.add_parser("report", help="re-emit a report in other formats")
    p.add_argument("--report", help="report JSON (default: out_dir/report.json)")
    p.add_argument("--formats", help="comma list of csv,markdown,json")

    p = sub.add_parser("codebleu", help="debug: print the similarity breakdown as JSON")
    p.add_argument("--candidate", required=True, help="candidate program file")
    p.add_argument("--reference", required=True, help="reference program file")
    p.add_argument("--weights", help="four comma-separated component weights")
    return parser


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = PipelineConfig.load(args.config)
    except (OSError, json.JSONDecodeError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, corpus_mod.CorpusError, rollout_mod.RolloutError,
            grader_mod.GraderError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
