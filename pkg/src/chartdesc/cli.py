"""Command-line entry point: ``chartdesc {extract,generate,evaluate,report,srcc}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, build_clients, load_config, parse_metrics
from .extraction import extract_facts, extract_schema, segment_levels
from .harness import (
    REPORT_FORMATS,
    DatasetError,
    EvaluationReport,
    aggregate_report,
    compute_srcc,
    evaluate,
    generate_descriptions,
    load_dataset,
    load_outputs,
    merge_external_scores,
    write_jsonl,
)
from .model import FactValidationError
from .providers import ProviderError

log = logging.getLogger("chartdesc")

EXIT_OK, EXIT_VALIDATION, EXIT_PROVIDER = 0, 1, 2


def _need(client, role: str):
    if client is None:
        raise ConfigError(f"no '{role}' provider profile in the config file")
    return client


def cmd_extract(args, config) -> int:
    clients = build_clients(config, args.cache_dir)
    records = load_dataset(args.dataset)
    out_dir = Path(args.out).resolve().parent
    if args.outputs:
        rows = []
        by_id = {r.id: r for r in records}
        for out in load_outputs(args.outputs, records):
            row = out.to_dict()
            schema = by_id[out.record_id].schema
            row["facts"] = [f.to_dict() for f in extract_facts(out.description, schema, _need(clients.extractor, "extractor"), config.prompt_overrides)]
            row["units"] = [u.to_dict() for u in segment_levels(out.description, clients.extractor, config.prompt_overrides)]
            rows.append(row)
    else:
        rows = []
        for rec in records:
            extractor = _need(clients.extractor, "extractor")
            schema = rec.schema or extract_schema(rec.image_bytes(), extractor, config.prompt_overrides)
            rows.append({
                "id": rec.id,
                "image_path": os.path.relpath(rec.image_path, out_dir),
                "reference_description": rec.reference_description,
                "schema": schema.to_dict(),
                "domain": rec.domain,
                "chart_type": rec.chart_type,
                "reference_facts": [f.to_dict() for f in extract_facts(rec.reference_description, schema, extractor, config.prompt_overrides)],
                "reference_units": [u.to_dict() for u in segment_levels(rec.reference_description, extractor, config.prompt_overrides)],
            })
    write_jsonl(rows, args.out)
    log.info("wrote %d rows to %s", len(rows), args.out)
    return EXIT_OK


def cmd_generate(args, config) -> int:
    clients = build_clients(config, args.cache_dir)
    records = load_dataset(args.dataset)
    failures: list = []
    outputs = generate_descriptions(
        records, _need(clients.generator, "generator"), args.model_name, config.concurrency, failures
    )
    write_jsonl((o.to_dict() for o in outputs), args.out)
    log.info("wrote %d outputs to %s", len(outputs), args.out)
    if failures:
        for rid, err in failures:
            log.error("record %s: %s", rid, err)
        return EXIT_PROVIDER
    return EXIT_OK


def cmd_evaluate(args, config) -> int:
    metrics = parse_metrics(args.metrics) if args.metrics else config.metrics
    clients = build_clients(config, args.cache_dir)
    records = load_dataset(args.dataset)
    outputs = [o for path in args.outputs for o in load_outputs(path, records)]
    report = evaluate(
        records, outputs, config,
        extractor=clients.extractor, adjudicator=clients.adjudicator,
        embedder=clients.embedder, metrics=metrics,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n", encoding="utf-8")
    write_jsonl(report.audit, out.with_suffix(".audit.jsonl"))
    print(aggregate_report(report, args.format), end="")
    return EXIT_OK


def cmd_report(args, config) -> int:
    report = EvaluationReport.load(args.report)
    if args.external:
        report = merge_external_scores(report, args.external)
    text = aggregate_report(report, args.format)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text, end="")
    return EXIT_OK


def cmd_srcc(args, config) -> int:
    rho = compute_srcc(EvaluationReport.load(args.report), args.human)
    print(json.dumps(rho, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chartdesc", description="Chart description evaluation toolkit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML harness config")
    common.add_argument("--cache-dir", help="response cache directory")
    common.add_argument("--concurrency", type=int, help="max in-flight requests / workers")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", parents=[common], help="extract schema, facts and level units to JSONL")
    p.add_argument("--dataset", required=True)
    p.add_argument("--outputs", help="extract from model outputs instead of references")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("generate", parents=[common], help="generate descriptions with the generator profile")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model-name", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", parents=[common], help="score model outputs")
    p.add_argument("--dataset", required=True)
    p.add_argument("--outputs", required=True, action="append", help="model outputs JSONL (repeatable)")
    p.add_argument("--metrics", help="comma-separated subset of faithfulness,coverage,informativeness,acuity,bleu,rouge")
    p.add_argument("--out", default="report.json")
    p.add_argument("--format", choices=REPORT_FORMATS, default="markdown")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="render a saved report")
    p.add_argument("--report", required=True)
    p.add_argument("--format", choices=REPORT_FORMATS, default="markdown")
    p.add_argument("--external", help="JSONL with externally computed meteor/bleurt per record")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("srcc", parents=[common], help="Spearman correlation against human scores")
    p.add_argument("--report", required=True)
    p.add_argument("--human", required=True)
    p.set_defaults(func=cmd_srcc)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(args.config)
        if args.concurrency:
            config = replace(config, concurrency=args.concurrency)
        return args.func(args, config)
    except ProviderError as exc:
        log.error("provider failure: %s", exc)
        return EXIT_PROVIDER
    except (ConfigError, DatasetError, FactValidationError, FileNotFoundError, ValueError, KeyError) as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
