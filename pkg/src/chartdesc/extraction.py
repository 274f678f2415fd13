"""LLM-driven decomposition of descriptions and charts into structured pieces."""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass
from typing import Any, Mapping, Optional

from PIL import Image, UnidentifiedImageError

from . import prompts
from .model import ChartSchema, DataFact, FactValidationError, SemanticLevel

logger = logging.getLogger(__name__)


class ExtractionError(ValueError):
    pass


@dataclass(frozen=True)
class LevelUnit:
    text: str
    level: SemanticLevel
    fact: Optional[DataFact] = None

    def __post_init__(self) -> None:
        if not isinstance(self.text, str) or not self.text.strip():
            raise FactValidationError("text", "unit text must be a non-empty string")
        level = SemanticLevel.parse(self.level)
        object.__setattr__(self, "level", level)
        if level in (SemanticLevel.L2, SemanticLevel.L3) and self.fact is None:
            raise FactValidationError("fact", f"{level} units must carry a data fact")
        if self.fact is not None and self.fact.level != level:
            raise FactValidationError(
                "fact", f"fact type {self.fact.type.value} is {self.fact.level}, unit is {level}"
            )

    def to_dict(self) -> dict:
        return {"text": self.text, "level": str(self.level), "fact": self.fact.to_dict() if self.fact else None}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "LevelUnit":
        if not isinstance(data, Mapping):
            raise FactValidationError("unit", f"expected an object, got {type(data).__name__}")
        fact = data.get("fact")
        return cls(
            text=data.get("text"),
            level=data.get("level"),
            fact=DataFact.from_dict(fact) if fact is not None else None,
        )


def image_part(data: bytes) -> tuple[str, bytes]:
    """Return ``(mime_type, bytes)`` for a decodable image, else raise ValueError."""
    try:
        with Image.open(io.BytesIO(data)) as img:
            fmt = img.format
            img.verify()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ValueError(f"undecodable image: {exc}") from exc
    return Image.MIME.get(fmt, "application/octet-stream"), data


def _items(data: Any, key: str) -> list:
    if isinstance(data, list):
        return data
    if isinstance(data, Mapping) and isinstance(data.get(key), list):
        return data[key]
    raise ExtractionError(f"expected a JSON list or an object with a {key!r} list")


def _schema_text(schema: Optional[ChartSchema]) -> str:
    if schema is None:
        return "(none)"
    return json.dumps(schema.to_dict(), ensure_ascii=False)


def _repair(client, broken: list[tuple[Any, str]], overrides=None) -> list[Optional[DataFact]]:
    """One repair round-trip; returns a repaired fact or None per input."""
    tpl = prompts.load("repair_facts", overrides)
    problems = json.dumps([{"fact": raw, "problem": err} for raw, err in broken], ensure_ascii=False, indent=1)
    system, user = tpl.render(rules=prompts.fact_rules(), problems=problems)
    data, _ = client.complete_json(client.request(system, user, json_mode=True))
    try:
        items = _items(data, "facts")
    except ExtractionError:
        items = []
    out: list[Optional[DataFact]] = []
    for idx in range(len(broken)):
        try:
            out.append(DataFact.from_dict(items[idx]))
        except (IndexError, FactValidationError):
            out.append(None)
    return out


def extract_facts(
    description: str,
    schema: Optional[ChartSchema],
    client,
    overrides: Optional[Mapping[str, str]] = None,
    warnings: Optional[list] = None,
) -> list[DataFact]:
    """Decompose a description into vocabulary-valid data facts.

    Facts that break the vocabulary get one repair re-prompt; whatever still
    fails is dropped and reported through logging (and ``warnings`` if given).
    """
    if not isinstance(description, str) or not description.strip():
        raise ValueError("description must be non-empty")
    tpl = prompts.load("extract_facts", overrides)
    system, user = tpl.render(schema=_schema_text(schema), description=description.strip())
    data, _ = client.complete_json(client.request(system, user, json_mode=True))

    slots: list[Optional[DataFact]] = []
    broken: list[tuple[int, Any, str]] = []
    for raw in _items(data, "facts"):
        try:
            slots.append(DataFact.from_dict(raw))
        except FactValidationError as exc:
            broken.append((len(slots), raw, str(exc)))
            slots.append(None)

    if broken:
        repaired = _repair(client, [(raw, err) for _, raw, err in broken], overrides)
        for (pos, raw, err), fact in zip(broken, repaired):
            if fact is None:
                msg = f"dropped fact after repair attempt ({err}): {json.dumps(raw, ensure_ascii=False)}"
                logger.warning(msg)
                if warnings is not None:
                    warnings.append(msg)
            slots[pos] = fact
    return [f for f in slots if f is not None]


def _dedup(values) -> tuple:
    seen: set[str] = set()
    out = []
    for v in values or ():
        if not isinstance(v, str) or not v.strip():
            continue
        key = " ".join(v.lower().split())
        if key not in seen:
            seen.add(key)
            out.append(v.strip())
    return tuple(out)


def extract_schema(chart_image: bytes, client, overrides: Optional[Mapping[str, str]] = None) -> ChartSchema:
    image = image_part(chart_image)
    tpl = prompts.load("extract_schema", overrides)
    system, user = tpl.render()
    data, _ = client.complete_json(client.request(system, user, images=[image], json_mode=True))
    if not isinstance(data, Mapping):
        raise ExtractionError("schema reply must be a JSON object")
    title = data.get("title")
    return ChartSchema(
        axis_labels=_dedup(data.get("axis_labels")),
        legend_entries=_dedup(data.get("legend_entries")),
        categories=_dedup(data.get("categories")),
        title=title.strip() if isinstance(title, str) and title.strip() else None,
    )


def segment_levels(
    description: str,
    client,
    overrides: Optional[Mapping[str, str]] = None,
    warnings: Optional[list] = None,
) -> list[LevelUnit]:
    """Split a description into level-tagged units; L2/L3 units carry a data fact."""
    if not isinstance(description, str) or not description.strip():
        raise ValueError("description must be non-empty")
    tpl = prompts.load("segment_levels", overrides)
    system, user = tpl.render(description=description.strip())
    data, _ = client.complete_json(client.request(system, user, json_mode=True))

    def drop(msg: str) -> None:
        logger.warning(msg)
        if warnings is not None:
            warnings.append(msg)

    slots: list[Optional[LevelUnit]] = []
    broken: list[tuple[int, str, SemanticLevel, Any, str]] = []
    for raw in _items(data, "units"):
        try:
            slots.append(LevelUnit.from_dict(raw))
            continue
        except FactValidationError as exc:
            error = exc
        # only a bad fact on an otherwise sound unit is worth a repair round
        text, level = raw.get("text") if isinstance(raw, Mapping) else None, None
        try:
            level = SemanticLevel.parse(raw.get("level"))
        except (FactValidationError, AttributeError):
            pass
        if isinstance(text, str) and text.strip() and level is not None and raw.get("fact") is not None:
            broken.append((len(slots), text, level, raw.get("fact"), str(error)))
        else:
            drop(f"dropped unit ({error}): {json.dumps(raw, ensure_ascii=False)}")
        slots.append(None)

    if broken:
        problems = [
            (fact, f"{err}; the fact must be of a type belonging to {level}")
            for _, _, level, fact, err in broken
        ]
        for (pos, text, level, raw_fact, err), fact in zip(broken, _repair(client, problems, overrides)):
            try:
                slots[pos] = LevelUnit(text, level, fact) if fact is not None else None
            except FactValidationError as exc:
                err = str(exc)
            if slots[pos] is None:
                drop(f"dropped unit after repair attempt ({err}): {text!r}")
    return [u for u in slots if u is not None]
