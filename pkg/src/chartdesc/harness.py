"""Benchmark orchestration: ingest, generate, evaluate, aggregate, correlate."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

from . import prompts
from .config import ALL_METRICS, HarnessConfig
from .extraction import LevelUnit, extract_facts, extract_schema, image_part, segment_levels
from .informativeness import context_weights, informativeness_score, level_proportions
from .judge import (
    ACUITY_DIMENSIONS,
    ERROR_CATEGORIES,
    acuity_score,
    faithfulness_score,
    judge_acuity,
    judge_faithfulness,
)
from .matching import assign
from .model import ChartSchema, DataFact, FactValidationError
from .textmetrics import ScorePair, bleu, rouge_l, spearman

logger = logging.getLogger(__name__)

SCORE_FIELDS = (
    "faithfulness",
    "coverage",
    "precision",
    "recall",
    "f1",
    "informativeness",
    "acuity",
    "bleu",
    "rouge_l",
    "meteor",
    "bleurt",
)
OVERALL_COLUMNS = (
    ("BLEU", "bleu"),
    ("METEOR", "meteor"),
    ("ROUGE", "rouge_l"),
    ("BLEURT", "bleurt"),
    ("Faithfulness", "faithfulness"),
    ("Coverage", "coverage"),
    ("Informativeness", "informativeness"),
    ("Acuity", "acuity"),
)
ACUITY_COLUMNS = (
    ("Acc.", "accuracy"),
    ("Integ.", "integration"),
    ("Insight", "insight"),
    ("Etiol.", "etiological"),
    ("Multi.", "multivariate"),
)
REPORT_FORMATS = ("markdown", "csv", "json")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class BenchmarkRecord:
    id: str
    image_path: Path
    reference_description: str
    schema: Optional[ChartSchema] = None
    domain: str = ""
    chart_type: Optional[str] = None
    reference_facts: Optional[tuple] = None
    reference_units: Optional[tuple] = None

    def image_bytes(self) -> bytes:
        return Path(self.image_path).read_bytes()


@dataclass(frozen=True)
class ModelOutput:
    record_id: str
    model_name: str
    description: str
    facts: Optional[tuple] = None
    units: Optional[tuple] = None

    def to_dict(self) -> dict:
        out: dict[str, Any] = {
            "record_id": self.record_id,
            "model_name": self.model_name,
            "description": self.description,
        }
        if self.facts is not None:
            out["facts"] = [f.to_dict() for f in self.facts]
        if self.units is not None:
            out["units"] = [u.to_dict() for u in self.units]
        return out


def _read_jsonl(path: Path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(row, dict):
                raise DatasetError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, row


def _facts(raw: Any, where: str) -> Optional[tuple]:
    if raw is None:
        return None
    try:
        return tuple(DataFact.from_dict(f) for f in raw)
    except (FactValidationError, TypeError) as exc:
        raise DatasetError(f"{where}: {exc}") from exc


def _units(raw: Any, where: str) -> Optional[tuple]:
    if raw is None:
        return None
    try:
        return tuple(LevelUnit.from_dict(u) for u in raw)
    except (FactValidationError, TypeError) as exc:
        raise DatasetError(f"{where}: {exc}") from exc


def load_dataset(path: Union[str, Path]) -> list[BenchmarkRecord]:
    """Read and validate a JSONL dataset; image paths resolve against the file's directory."""
    path = Path(path)
    records: list[BenchmarkRecord] = []
    seen: dict[str, int] = {}
    missing: list[str] = []
    for lineno, row in _read_jsonl(path):
        where = f"{path}:{lineno}"
        for key in ("id", "image_path", "reference_description"):
            if not isinstance(row.get(key), str) or not row[key].strip():
                raise DatasetError(f"{where}: field {key!r} must be a non-empty string")
        rid = row["id"]
        if rid in seen:
            raise DatasetError(f"{where}: duplicate id {rid!r} (first seen on line {seen[rid]})")
        seen[rid] = lineno
        image = (path.parent / row["image_path"]).resolve()
        if not image.is_file():
            missing.append(f"line {lineno}: {row['image_path']}")
        try:
            schema = ChartSchema.from_dict(row["schema"]) if row.get("schema") is not None else None
        except FactValidationError as exc:
            raise DatasetError(f"{where}: schema {exc}") from exc
        records.append(
            BenchmarkRecord(
                id=rid,
                image_path=image,
                reference_description=row["reference_description"],
                schema=schema,
                domain=str(row.get("domain") or ""),
                chart_type=row.get("chart_type"),
                reference_facts=_facts(row.get("reference_facts"), where),
                reference_units=_units(row.get("reference_units"), where),
            )
        )
    if missing:
        raise DatasetError(f"{path}: missing image files: " + "; ".join(missing))
    return records


def load_outputs(path: Union[str, Path], records: Optional[Sequence[BenchmarkRecord]] = None) -> list[ModelOutput]:
    path = Path(path)
    known = {r.id for r in records} if records is not None else None
    outputs = []
    seen: set[tuple[str, str]] = set()
    for lineno, row in _read_jsonl(path):
        where = f"{path}:{lineno}"
        for key in ("record_id", "model_name", "description"):
            if not isinstance(row.get(key), str):
                raise DatasetError(f"{where}: field {key!r} must be a string")
        key = (row["record_id"], row["model_name"])
        if known is not None and key[0] not in known:
            raise DatasetError(f"{where}: unknown record_id {key[0]!r}")
        if key in seen:
            raise DatasetError(f"{where}: duplicate output for {key}")
        seen.add(key)
        outputs.append(
            ModelOutput(
                record_id=row["record_id"],
                model_name=row["model_name"],
                description=row["description"],
                facts=_facts(row.get("facts"), where),
                units=_units(row.get("units"), where),
            )
        )
    return outputs


def write_jsonl(rows: Iterable[Mapping], path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
    os.replace(tmp, path)


def generate_descriptions(
    records: Sequence[BenchmarkRecord],
    client,
    model_name: str,
    concurrency: int = 4,
    failures: Optional[list] = None,
) -> list[ModelOutput]:
    """Ask ``client`` to describe each chart with the fixed generation prompt.

    Failed records are logged, appended to ``failures`` as ``(record_id, error)``
    and left out of the result; cached responses make reruns resumable.
    """

    def one(record: BenchmarkRecord):
        try:
            req = client.request("", prompts.GENERATION_PROMPT, images=[image_part(record.image_bytes())])
            return ModelOutput(record.id, model_name, client.chat_complete(req).text.strip())
        except Exception as exc:
            logger.error("generation failed for %s: %s", record.id, exc)
            return exc

    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        results = list(pool.map(one, records))
    outputs = []
    for record, result in zip(records, results):
        if isinstance(result, Exception):
            if failures is not None:
                failures.append((record.id, str(result)))
        else:
            outputs.append(result)
    return outputs


@dataclass
class EvaluationReport:
    per_record: dict  # (record_id, model_name) -> entry
    per_model: dict  # model_name -> metric -> mean or None
    metadata: dict
    audit: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "per_model": self.per_model,
            "per_record": [self.per_record[k] for k in sorted(self.per_record)],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EvaluationReport":
        per_record = {(e["record_id"], e["model_name"]): dict(e) for e in data["per_record"]}
        return cls(per_record, dict(data.get("per_model") or {}), dict(data.get("metadata") or {}))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "EvaluationReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _mean(values: Iterable[Optional[float]]) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None


def compute_per_model(per_record: Mapping, model_order: Optional[Sequence[str]] = None) -> dict:
    """Means over the records where each metric is defined."""
    by_model: dict[str, list] = {}
    for key in sorted(per_record):
        by_model.setdefault(key[1], []).append(per_record[key])
    order = list(model_order or []) + sorted(set(by_model) - set(model_order or []))
    out = {}
    for model in order:
        if model not in by_model:
            continue
        entries = by_model[model]
        stats: dict[str, Any] = {name: _mean(e.get(name) for e in entries) for name in SCORE_FIELDS}
        for dim in ACUITY_DIMENSIONS:
            stats[f"acuity_{dim}"] = _mean((e.get("acuity_subscores") or {}).get(dim) for e in entries)
        errors: Counter = Counter()
        for e in entries:
            errors.update(e.get("faithfulness_errors") or [])
        stats["faithfulness_errors"] = {c: errors.get(c, 0) for c in ERROR_CATEGORIES}
        stats["n_records"] = len(entries)
        out[model] = stats
    return out


def _guard(flags: dict, metric: str, fn):
    try:
        return fn()
    except Exception as exc:
        logger.warning("%s failed: %s", metric, exc)
        flags[metric] = f"{type(exc).__name__}: {exc}"
        return None


@dataclass
class _ReferenceSide:
    schema: Optional[ChartSchema] = None
    facts: Optional[tuple] = None
    units: Optional[tuple] = None
    errors: dict = field(default_factory=dict)


def evaluate(
    records: Sequence[BenchmarkRecord],
    outputs: Sequence[ModelOutput],
    config: Optional[HarnessConfig] = None,
    *,
    extractor=None,
    adjudicator=None,
    embedder=None,
    metrics: Optional[Sequence[str]] = None,
) -> EvaluationReport:
    """Score every model output; per-metric failures become N/A flags, never aborts."""
    config = config or HarnessConfig()
    metrics = tuple(metrics or config.metrics)
    unknown = set(metrics) - set(ALL_METRICS)
    if unknown:
        raise ValueError(f"unknown metrics {sorted(unknown)}")
    by_id = {r.id: r for r in records}
    for out in outputs:
        if out.record_id not in by_id:
            raise ValueError(f"output references unknown record {out.record_id!r}")
    overrides = config.prompt_overrides
    used_ids = sorted({o.record_id for o in outputs})

    def reference_side(rid: str) -> _ReferenceSide:
        rec = by_id[rid]
        side = _ReferenceSide(schema=rec.schema)
        if "coverage" in metrics:
            if side.schema is None and rec.reference_facts is None:
                side.schema = _guard(side.errors, "coverage", lambda: extract_schema(rec.image_bytes(), extractor, overrides))
            if "coverage" not in side.errors:
                side.facts = rec.reference_facts
                if side.facts is None:
                    side.facts = _guard(
                        side.errors, "coverage",
                        lambda: tuple(extract_facts(rec.reference_description, side.schema, extractor, overrides)),
                    )
        if "informativeness" in metrics:
            side.units = rec.reference_units
            if side.units is None:
                side.units = _guard(
                    side.errors, "informativeness",
                    lambda: tuple(segment_levels(rec.reference_description, extractor, overrides)),
                )
        return side

    with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
        refs = dict(zip(used_ids, pool.map(reference_side, used_ids)))

    def score(out: ModelOutput):
        rec = by_id[out.record_id]
        ref = refs[out.record_id]
        flags: dict[str, str] = dict(ref.errors)
        audit: dict[str, Any] = {"record_id": out.record_id, "model_name": out.model_name}
        entry: dict[str, Any] = {name: None for name in SCORE_FIELDS}
        entry.update(
            record_id=out.record_id,
            model_name=out.model_name,
            acuity_subscores=None,
            faithfulness_errors=[],
            flags=flags,
        )
        desc = out.description
        if not desc.strip():
            flags["description"] = "empty description"

        if "bleu" in metrics:
            entry["bleu"] = _guard(flags, "bleu", lambda: bleu(desc, [rec.reference_description]))
        if "rouge" in metrics:
            entry["rouge_l"] = _guard(flags, "rouge", lambda: rouge_l(desc, rec.reference_description).f1)

        if "coverage" in metrics and ref.facts is not None:
            def coverage():
                facts = out.facts if out.facts is not None else (
                    extract_facts(desc, ref.schema, extractor, overrides) if desc.strip() else []
                )
                return assign(list(ref.facts), list(facts), config.match, ref.schema, embedder)

            result = _guard(flags, "coverage", coverage)
            if result is not None:
                if not ref.facts:
                    flags["coverage"] = "reference has no facts"
                else:
                    entry.update(
                        coverage=result.coverage, precision=result.precision,
                        recall=result.recall, f1=result.f1,
                    )
                audit["match"] = result.to_dict()

        if "informativeness" in metrics and ref.units is not None:
            def informativeness():
                units = out.units if out.units is not None else (
                    segment_levels(desc, extractor, overrides) if desc.strip() else []
                )
                weights = context_weights(level_proportions(ref.units), config.base_weights)
                audit["informativeness"] = {
                    "p": weights.to_dict()["proportions"],
                    "w": weights.to_dict()["normalized"],
                    "levels_generated": [str(u.level) for u in units],
                }
                return informativeness_score(units, weights)

            entry["informativeness"] = _guard(flags, "informativeness", informativeness)

        if "faithfulness" in metrics:
            verdict = _guard(flags, "faithfulness", lambda: judge_faithfulness(rec.image_bytes(), desc, adjudicator, overrides))
            if verdict is not None:
                audit["faithfulness"] = verdict.to_dict()
                entry["faithfulness"] = faithfulness_score(verdict)
                entry["faithfulness_errors"] = sorted(e.category for e in verdict.errors)
                if entry["faithfulness"] is None:
                    flags["faithfulness"] = "no verifiable claims (N_df = 0)"

        if "acuity" in metrics:
            verdict = _guard(flags, "acuity", lambda: judge_acuity(rec.image_bytes(), desc, adjudicator, overrides))
            if verdict is not None:
                audit["acuity"] = verdict.to_dict()
                entry["acuity"] = acuity_score(verdict)
                entry["acuity_subscores"] = dict(zip(ACUITY_DIMENSIONS, verdict.scores()))
        return entry, audit

    with ThreadPoolExecutor(max_workers=config.concurrency) as pool:
        results = list(pool.map(score, outputs))

    per_record = {(e["record_id"], e["model_name"]): e for e, _ in results}
    audit = [a for _, a in sorted(results, key=lambda t: (t[0]["record_id"], t[0]["model_name"]))]
    model_order = list(dict.fromkeys(o.model_name for o in outputs))
    metadata = {
        "config_hash": config.config_hash(),
        "prompt_versions": prompts.versions(overrides),
        "adjudicator_id": getattr(adjudicator, "model_id", None),
        "extractor_id": getattr(extractor, "model_id", None),
        "embedder_id": getattr(embedder, "model_id", None),
        "metrics": list(metrics),
        "models": model_order,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    return EvaluationReport(per_record, compute_per_model(per_record, model_order), metadata, audit)


def merge_external_scores(report: EvaluationReport, path: Union[str, Path]) -> EvaluationReport:
    """Fold externally computed METEOR/BLEURT values into the report columns."""
    for lineno, row in _read_jsonl(Path(path)):
        key = (row.get("record_id"), row.get("model_name"))
        if key not in report.per_record:
            raise DatasetError(f"{path}:{lineno}: no report entry for {key}")
        for metric in ("meteor", "bleurt"):
            if metric in row:
                report.per_record[key][metric] = None if row[metric] is None else float(row[metric])
    report.per_model = compute_per_model(report.per_record, report.metadata.get("models"))
    return report


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.4f}"


def report_tables(report: EvaluationReport) -> dict[str, list[list[str]]]:
    overall = [["Model", *(title for title, _ in OVERALL_COLUMNS)]]
    acuity = [["Model", *(title for title, _ in ACUITY_COLUMNS)]]
    errors = [["Model", *ERROR_CATEGORIES]]
    listed = [m for m in report.metadata.get("models") or [] if m in report.per_model]
    for model in listed + sorted(set(report.per_model) - set(listed)):
        stats = report.per_model[model]
        overall.append([model, *(_fmt(stats.get(key)) for _, key in OVERALL_COLUMNS)])
        acuity.append([model, *(_fmt(stats.get(f"acuity_{key}")) for _, key in ACUITY_COLUMNS)])
        counts = stats.get("faithfulness_errors") or {}
        errors.append([model, *(str(counts.get(c, 0)) for c in ERROR_CATEGORIES)])
    return {"overall": overall, "acuity_breakdown": acuity, "faithfulness_errors": errors}


_TITLES = {
    "overall": "Overall scores",
    "acuity_breakdown": "Acuity breakdown",
    "faithfulness_errors": "Faithfulness error categories",
}


def aggregate_report(report: EvaluationReport, fmt: str = "markdown") -> str:
    if fmt not in REPORT_FORMATS:
        raise ValueError(f"unknown format {fmt!r}; choose from {list(REPORT_FORMATS)}")
    tables = report_tables(report)
    if fmt == "json":
        doc = {name: [dict(zip(rows[0], row)) for row in rows[1:]] for name, rows in tables.items()}
        return json.dumps(doc, ensure_ascii=False, indent=2) + "\n"
    parts = []
    for name, rows in tables.items():
        if fmt == "markdown":
            lines = [f"### {_TITLES[name]}", "", "| " + " | ".join(rows[0]) + " |"]
            lines.append("|" + "|".join(["---"] + [":---:"] * (len(rows[0]) - 1)) + "|")
            lines += ["| " + " | ".join(row) + " |" for row in rows[1:]]
            parts.append("\n".join(lines) + "\n")
        else:
            buf = io.StringIO()
            buf.write(f"# {name}\n")
            csv.writer(buf, lineterminator="\n").writerows(rows)
            parts.append(buf.getvalue())
    return "\n".join(parts)


def compute_srcc(report: EvaluationReport, human_scores_path: Union[str, Path]) -> dict[str, Optional[float]]:
    """Spearman between automatic and human scores per metric.

    The human file is JSONL with ``record_id``, ``model_name``, ``metric`` and
    ``score``. Pairs where the automatic score is N/A are skipped; fewer than two
    aligned pairs (or a constant side) gives ``None``.
    """
    aligned: dict[str, list[tuple[float, float]]] = {}
    for lineno, row in _read_jsonl(Path(human_scores_path)):
        try:
            key = (row["record_id"], row["model_name"])
            metric = row["metric"]
            human = float(row["score"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{human_scores_path}:{lineno}: bad human score row ({exc})") from exc
        aligned.setdefault(metric, [])
        entry = report.per_record.get(key)
        auto = entry.get(metric) if entry else None
        if auto is not None:
            aligned[metric].append((float(auto), human))
    out: dict[str, Optional[float]] = {}
    for metric in sorted(aligned):
        pairs = aligned[metric]
        out[metric] = None if len(pairs) < 2 else spearman(ScorePair([a for a, _ in pairs], [h for _, h in pairs]))
    return out
