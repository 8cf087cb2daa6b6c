"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 graph validation
failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .embedding import EmbeddingError
from .evaluation import GoldAnnotation, evaluate, quintuples_from_tkg
from .extraction import AtomicFact, PromptTemplate, extract_all
from .llm import BackendConfig, GatewayError
from .merge import MergeConfig, MergeStats, parallel_merge
from .model import format_timestamp
from .pipeline import BatchFailedError, Pipeline, PipelineConfig, group_by_observation
from .storage import (
    GraphFormatError,
    GraphValidationError,
    dumps,
    load_corpus,
    load_graph,
    read_jsonl,
    save_graph,
    write_atomic,
    write_jsonl,
)
from .synthetic import scaling_corpus

logger = logging.getLogger("dtkg")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2, 3

# config-file key -> default; command-line flags override file values
SETTINGS: dict[str, Any] = {
    "backend": "mock",
    "embed_backend": "mock",
    "embed_cache": None,
    "workers": 8,
    "executor": "process",
    "theta_entity": 0.8,
    "theta_relation": 0.7,
    "max_chunk_tokens": 400,
    "batch_size": 40,
    "granularity": "day",
    "failure_ratio": 0.10,
    "checkpoint_dir": None,
    "prompt_dir": None,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("configuration")
    g.add_argument("--config", type=Path, help="TOML file of settings; flags override it")
    g.add_argument("--backend", choices=("live", "mock"), default=None)
    g.add_argument("--embed-backend", choices=("live", "mock"), default=None)
    g.add_argument("--embed-cache", type=Path, default=None)
    g.add_argument("--workers", type=int, default=None)
    g.add_argument("--executor", choices=("process", "thread"), default=None)
    g.add_argument("--theta-entity", type=float, default=None)
    g.add_argument("--theta-relation", type=float, default=None)
    g.add_argument("--max-chunk-tokens", type=int, default=None)
    g.add_argument("--batch-size", type=int, default=None)
    g.add_argument("--granularity", choices=("day", "exact"), default=None)
    g.add_argument("-v", "--verbose", action="count", default=0)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="dtkg", description="Build dynamic temporal knowledge graphs from text.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", parents=[common], help="group a corpus into observation batches")
    p.add_argument("corpus", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True)

    p = sub.add_parser("decompose", parents=[common], help="corpus -> atomic facts (JSONL)")
    p.add_argument("corpus", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True)

    p = sub.add_parser("extract", parents=[common], help="atomic facts -> directory of atomic graphs")
    p.add_argument("facts", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True)

    p = sub.add_parser("merge", parents=[common], help="directory of graphs -> one merged graph")
    p.add_argument("graphs", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True)

    p = sub.add_parser("build", parents=[common], help="corpus -> graph, end to end")
    p.add_argument("corpus", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True)
    p.add_argument("--checkpoint-dir", type=Path, default=None)
    p.add_argument("--report", type=Path, default=None, help="write the stage report here")

    p = sub.add_parser("update", parents=[common], help="fold new documents into an existing graph")
    p.add_argument("graph", type=Path)
    p.add_argument("corpus", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True)
    p.add_argument("--report", type=Path, default=None)

    p = sub.add_parser("eval", parents=[common], help="score a graph against gold annotations")
    p.add_argument("predicted", type=Path)
    p.add_argument("gold", type=Path)
    p.add_argument("-o", "--output", type=Path, default=None)
    p.add_argument("--similarity", action="store_true", help="allow near-paraphrase triple matches")
    p.add_argument("--runs", type=Path, nargs="*", default=(), help="graphs of repeated runs for stability")

    p = sub.add_parser("bench", parents=[common], help="latency over a series of corpus sizes")
    p.add_argument("--sizes", default="500,1000,2000,4000")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", type=Path, required=True)
    p.add_argument("--json", type=Path, default=None)
    return parser


# -- settings -----------------------------------------------------------------


def resolve_settings(args: argparse.Namespace) -> dict[str, Any]:
    settings = dict(SETTINGS)
    if args.config is not None:
        try:
            with open(args.config, "rb") as fh:
                data = tomllib.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"invalid config {args.config}: {exc}") from exc
        unknown = sorted(set(data) - set(settings))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        settings.update(data)
    for key in settings:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    return settings


def pipeline_config(settings: dict[str, Any]) -> PipelineConfig:
    try:
        merge = MergeConfig(
            theta_entity=float(settings["theta_entity"]),
            theta_relation=float(settings["theta_relation"]),
            workers=int(settings["workers"]),
            executor=settings["executor"],
        )
        if settings["backend"] == "live":
            backend = BackendConfig.from_env("live", max_concurrent_requests=int(settings["batch_size"]))
        else:
            backend = BackendConfig(kind="mock", max_concurrent_requests=int(settings["batch_size"]))
        optional = {k: Path(settings[k]) if settings[k] else None
                    for k in ("embed_cache", "checkpoint_dir", "prompt_dir")}
        return PipelineConfig(
            max_chunk_tokens=int(settings["max_chunk_tokens"]),
            extraction_batch_size=int(settings["batch_size"]),
            merge=merge,
            backend=backend,
            embed_backend=settings["embed_backend"],
            granularity=settings["granularity"],
            max_failure_ratio=float(settings["failure_ratio"]),
            **optional,
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


# -- commands -----------------------------------------------------------------


def cmd_ingest(args, cfg: PipelineConfig) -> int:
    batches = group_by_observation(load_corpus(args.corpus), cfg.granularity)
    write_atomic(args.output, dumps({
        "format_version": 1,
        "granularity": cfg.granularity,
        "batches": [
            {"observed_at": b.observed_at, "observed_iso": format_timestamp(b.observed_at),
             "doc_ids": [d.doc_id for d in b.documents]}
            for b in batches
        ],
    }))
    print(f"{len(batches)} batch(es)")
    return EXIT_OK


def cmd_decompose(args, cfg: PipelineConfig) -> int:
    pipe = Pipeline(cfg)
    records = []
    for batch in group_by_observation(load_corpus(args.corpus), cfg.granularity):
        for f in pipe.facts_for(batch):
            records.append({"fact_id": f.fact_id, "text": f.text, "observed_at": f.observed_at,
                            "source_chunk": f.source_chunk})
    write_jsonl(args.output, records)
    print(f"{len(records)} fact(s)")
    return EXIT_OK


def _safe_name(fact_id: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in fact_id)


def cmd_extract(args, cfg: PipelineConfig) -> int:
    pipe = Pipeline(cfg)
    try:
        facts = [AtomicFact(r["fact_id"], r["text"], int(r["observed_at"]), tuple(r.get("source_chunk", ("", 0))))
                 for r in read_jsonl(args.facts)]
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphFormatError(f"{args.facts}: malformed fact record ({exc})") from exc
    results = extract_all(facts, pipe.gateway, pipe.embedder, PromptTemplate.load("extract", cfg.prompt_dir))
    pipe._check_budget(0, "extraction", results)
    args.output.mkdir(parents=True, exist_ok=True)
    written = 0
    for i, (fact, g) in enumerate(zip(facts, results)):
        if isinstance(g, Exception):
            continue
        save_graph(g, args.output / f"{i:06d}-{_safe_name(fact.fact_id)}.json")
        written += 1
    print(f"{written} atomic graph(s)")
    return EXIT_OK


def _graph_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.glob("*.json") if not p.name.endswith(".embeddings.json"))


def cmd_merge(args, cfg: PipelineConfig) -> int:
    graphs = [load_graph(p) for p in _graph_files(args.graphs)]
    stats = MergeStats()
    merged = parallel_merge(graphs, cfg.merge, stats)
    save_graph(merged, args.output)
    print(f"merged {len(graphs)} graph(s) in {stats.rounds} round(s): "
          f"{len(merged.entities)} entities, {len(merged.relations)} relations")
    return EXIT_OK


def _write_report(pipe: Pipeline, path: Path | None) -> None:
    text = dumps(pipe.report.as_dict())
    if path is None:
        sys.stdout.write(text)
    else:
        write_atomic(path, text)


def cmd_build(args, cfg: PipelineConfig) -> int:
    if args.checkpoint_dir is not None:
        cfg = replace(cfg, checkpoint_dir=args.checkpoint_dir)
    pipe = Pipeline(cfg)
    dtkg = pipe.run_stream(group_by_observation(load_corpus(args.corpus), cfg.granularity))
    save_graph(dtkg, args.output)
    _write_report(pipe, args.report)
    return EXIT_OK


def cmd_update(args, cfg: PipelineConfig) -> int:
    pipe = Pipeline(replace(cfg, checkpoint_dir=None))
    dtkg = pipe.run_stream(group_by_observation(load_corpus(args.corpus), cfg.granularity),
                           initial=load_graph(args.graph))
    save_graph(dtkg, args.output)
    _write_report(pipe, args.report)
    return EXIT_OK


def cmd_eval(args, cfg: PipelineConfig) -> int:
    predicted = load_graph(args.predicted)
    gold = GoldAnnotation.load(args.gold)
    embedder = None
    if args.similarity or args.runs:
        from .pipeline import default_embedder

        embedder = default_embedder(cfg)
    runs = [quintuples_from_tkg(load_graph(p)) for p in args.runs]
    report = evaluate(predicted, gold, embedder, args.similarity, runs, cfg.merge.similarity)
    text = dumps(report.as_dict())
    if args.output is None:
        sys.stdout.write(text)
    else:
        write_atomic(args.output, text)
    return EXIT_OK


STAGES = ("decompose", "extract", "merge", "update", "total")


def cmd_bench(args, cfg: PipelineConfig) -> int:
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--sizes must be comma-separated integers, got {args.sizes!r}") from None
    if not sizes or min(sizes) < 1:
        raise UsageError("--sizes needs positive integers")
    cfg = replace(cfg, checkpoint_dir=None)
    rows, points = [], []
    for n in sizes:
        pipe = Pipeline(cfg)
        report = pipe.bench(group_by_observation(scaling_corpus(n, args.seed), cfg.granularity))
        ms = {s: 1000.0 * getattr(report, f"{s}_s") for s in STAGES}
        rows.extend({"n_facts": n, "stage": s, "millis": f"{ms[s]:.3f}"} for s in STAGES)
        points.append({"n_facts": n, "facts": report.facts, "millis": ms,
                       "merge_share": report.merge_share, "backend": report.backend})
        logger.info("n=%d total=%.1f ms merge share=%.1f%%", n, ms["total"], 100 * report.merge_share)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["n_facts", "stage", "millis"], lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    write_atomic(args.csv, buf.getvalue())
    if args.json is not None:
        write_atomic(args.json, dumps({"backend": cfg.backend.kind, "points": points}))
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "decompose": cmd_decompose,
    "extract": cmd_extract,
    "merge": cmd_merge,
    "build": cmd_build,
    "update": cmd_update,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = pipeline_config(resolve_settings(args))
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"dtkg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GraphValidationError as exc:
        print(f"dtkg: invalid graph: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (GatewayError, EmbeddingError, BatchFailedError, GraphFormatError, OSError, ValueError, KeyError) as exc:
        print(f"dtkg: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
