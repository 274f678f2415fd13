"""Domain types: fact taxonomy, semantic levels, data facts and chart schemas.

A data fact is the 6-tuple ``(type, parameters, measures, context, breakdowns,
focus)``. ``None`` stands for N/A throughout; it is deliberately distinct from
an empty list.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Any, Iterable, Mapping, Optional, Sequence, Union


class FactValidationError(ValueError):
    """Raised when a fact or schema violates its vocabulary or shape rules."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name
        self.message = message


class SemanticLevel(IntEnum):
    L1 = 1
    L2 = 2
    L3 = 3
    L4 = 4

    def __str__(self) -> str:
        return self.name

    @classmethod
    def parse(cls, value: Any) -> "SemanticLevel":
        if isinstance(value, SemanticLevel):
            return value
        if isinstance(value, int) and not isinstance(value, bool) and 1 <= value <= 4:
            return cls(value)
        if isinstance(value, str):
            key = value.strip().upper()
            if key in cls.__members__:
                return cls[key]
        raise FactValidationError("level", f"unknown semantic level {value!r}")


class FactType(str, Enum):
    CHART_CONSTRUCTION = "chart-construction"
    VALUE = "value"
    DISTRIBUTION = "distribution"
    EXTREMA = "extrema"
    RANGE = "range"
    OUTLIER = "outlier"
    PROPORTION = "proportion"
    COMPARISON = "comparison"
    TREND = "trend"
    CORRELATION = "correlation"
    RANK = "rank"
    HIERARCHY = "hierarchy"
    DOMAIN_SPECIFIC = "domain-specific"

    def __str__(self) -> str:
        return self.value

    @classmethod
    def parse(cls, value: Any) -> "FactType":
        if isinstance(value, FactType):
            return value
        if isinstance(value, str):
            key = "-".join(value.strip().lower().replace("_", " ").split())
            for member in cls:
                if member.value == key:
                    return member
        raise FactValidationError("type", f"unknown fact type {value!r}")


_LEVEL_OF = {
    FactType.CHART_CONSTRUCTION: SemanticLevel.L1,
    FactType.VALUE: SemanticLevel.L2,
    FactType.DISTRIBUTION: SemanticLevel.L2,
    FactType.EXTREMA: SemanticLevel.L2,
    FactType.OUTLIER: SemanticLevel.L2,
    FactType.PROPORTION: SemanticLevel.L2,
    FactType.RANGE: SemanticLevel.L2,
    FactType.COMPARISON: SemanticLevel.L3,
    FactType.TREND: SemanticLevel.L3,
    FactType.CORRELATION: SemanticLevel.L3,
    FactType.RANK: SemanticLevel.L3,
    FactType.HIERARCHY: SemanticLevel.L3,
    FactType.DOMAIN_SPECIFIC: SemanticLevel.L4,
}


def semantic_level_of(fact_type: FactType) -> SemanticLevel:
    return _LEVEL_OF[FactType.parse(fact_type)]


# Controlled parameter vocabularies. Extending these is a code change on purpose.
TREND_STATES = ("Increase", "Decrease", "Peak", "Valley", "Stable", "Fluctuate")
RELATIONS = ("Positive", "Negative", "Greater", "Less", "Equal")
DEGREES = ("Slightly", "Moderately", "Highly")
DISTRIBUTION_STATES = ("Clustered", "Dispersed", "Skewed", "Uniform", "Bimodal")
EXTREMA_KINDS = ("Maximum", "Minimum")
RANK_KEYWORDS = ("First", "Last")

NUMERIC_TYPES = frozenset(
    {FactType.VALUE, FactType.RANK, FactType.PROPORTION, FactType.RANGE, FactType.EXTREMA}
)
RELATIONAL_TYPES = frozenset({FactType.COMPARISON, FactType.CORRELATION})

Scalar = Union[str, float, int]
Param = Union[Scalar, tuple]

DIMENSIONS = ("parameters", "measures", "context", "breakdowns", "focus")


def _keyword(token: Any, vocab: Sequence[str]) -> Optional[str]:
    if isinstance(token, str):
        low = token.strip().lower()
        for word in vocab:
            if word.lower() == low:
                return word
    return None


def is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _clean_str(value: Any, field_name: str) -> str:
    if not isinstance(value, str) or not value.strip():
        raise FactValidationError(field_name, f"expected a non-empty string, got {value!r}")
    return value.strip()


def _clean_scalar(value: Any, field_name: str) -> Scalar:
    if is_number(value):
        if not math.isfinite(value):
            raise FactValidationError(field_name, f"non-finite quantity {value!r}")
        return value
    return _clean_str(value, field_name)


def _clean_str_list(value: Any, field_name: str) -> Optional[tuple]:
    if value is None:
        return None
    if isinstance(value, str):
        value = [value]
    if not isinstance(value, (list, tuple)):
        raise FactValidationError(field_name, f"expected a list of strings or null, got {value!r}")
    out = []
    for item in value:
        if is_number(item):
            item = format(item, "g")
        out.append(_clean_str(item, field_name))
    return tuple(out)


def _clean_parameters(fact_type: FactType, params: Any) -> Optional[tuple]:
    if params is None:
        return None
    if not isinstance(params, (list, tuple)):
        params = [params]
    if fact_type is FactType.TREND:
        states = []
        for tok in params:
            kw = _keyword(tok, TREND_STATES)
            if kw is None:
                raise FactValidationError(
                    "parameters", f"trend state {tok!r} not in {list(TREND_STATES)}"
                )
            states.append(kw)
        if not states:
            raise FactValidationError("parameters", "trend needs at least one directional state")
        return tuple(states)
    if fact_type in RELATIONAL_TYPES:
        if len(params) != 3:
            raise FactValidationError(
                "parameters", "expected [relation, entity, entity] for a relational fact"
            )
        rel = _keyword(params[0], RELATIONS)
        if rel is None:
            raise FactValidationError(
                "parameters", f"relation {params[0]!r} not in {list(RELATIONS)}"
            )
        return (rel, _clean_str(params[1], "parameters"), _clean_str(params[2], "parameters"))
    if fact_type is FactType.DISTRIBUTION:
        pairs = []
        for pair in params:
            if not isinstance(pair, (list, tuple)) or len(pair) != 2:
                raise FactValidationError(
                    "parameters", f"distribution expects [degree, state] pairs, got {pair!r}"
                )
            degree = _keyword(pair[0], DEGREES)
            state = _keyword(pair[1], DISTRIBUTION_STATES)
            if degree is None:
                raise FactValidationError("parameters", f"degree {pair[0]!r} not in {list(DEGREES)}")
            if state is None:
                raise FactValidationError(
                    "parameters", f"distribution state {pair[1]!r} not in {list(DISTRIBUTION_STATES)}"
                )
            pairs.append((degree, state))
        if not pairs:
            raise FactValidationError("parameters", "distribution needs at least one pair")
        return tuple(pairs)
    if fact_type is FactType.EXTREMA:
        out = []
        kinds = 0
        for tok in params:
            kw = _keyword(tok, EXTREMA_KINDS)
            if kw is not None:
                kinds += 1
                out.append(kw)
            else:
                out.append(_clean_scalar(tok, "parameters"))
        if kinds != 1:
            raise FactValidationError("parameters", "extrema needs exactly one of Maximum/Minimum")
        return tuple(out)
    if fact_type is FactType.RANK:
        out = []
        positions = 0
        for tok in params:
            kw = _keyword(tok, RANK_KEYWORDS)
            if kw is not None:
                positions += 1
                out.append(kw)
            elif is_number(tok):
                if tok != int(tok) or tok < 1:
                    raise FactValidationError("parameters", f"rank position {tok!r} must be a positive integer")
                positions += 1
                out.append(int(tok))
            else:
                out.append(_clean_str(tok, "parameters"))
        if positions != 1:
            raise FactValidationError("parameters", "rank needs exactly one position (integer, First or Last)")
        return tuple(out)
    for tok in params:
        if isinstance(tok, (list, tuple)):
            raise FactValidationError("parameters", f"unexpected nested parameter {tok!r}")
    return tuple(_clean_scalar(tok, "parameters") for tok in params)


@dataclass(frozen=True, eq=False)
class DataFact:
    """One atomic insight. Equality and hashing go through ``canonical_serialize``."""

    type: FactType
    parameters: Optional[tuple] = None
    measures: Optional[tuple] = None
    context: Optional[str] = None
    breakdowns: Optional[tuple] = None
    focus: Optional[tuple] = None

    def __post_init__(self) -> None:
        ftype = FactType.parse(self.type)
        object.__setattr__(self, "type", ftype)
        object.__setattr__(self, "parameters", _clean_parameters(ftype, self.parameters))
        for name in ("measures", "breakdowns", "focus"):
            object.__setattr__(self, name, _clean_str_list(getattr(self, name), name))
        ctx = self.context
        if isinstance(ctx, (list, tuple)) and len(ctx) == 1:
            ctx = ctx[0]
        if ctx is not None:
            ctx = _clean_str(ctx, "context")
        object.__setattr__(self, "context", ctx)

    @property
    def level(self) -> SemanticLevel:
        return semantic_level_of(self.type)

    def field_value(self, dimension: str) -> Any:
        return getattr(self, dimension)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DataFact):
            return NotImplemented
        return canonical_serialize(self) == canonical_serialize(other)

    def __hash__(self) -> int:
        return hash(canonical_serialize(self))

    def to_dict(self) -> dict:
        def listify(value):
            return None if value is None else [list(v) if isinstance(v, tuple) else v for v in value]

        return {
            "type": self.type.value,
            "parameters": listify(self.parameters),
            "measures": listify(self.measures),
            "context": self.context,
            "breakdowns": listify(self.breakdowns),
            "focus": listify(self.focus),
            "level": str(self.level),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DataFact":
        if not isinstance(data, Mapping):
            raise FactValidationError("fact", f"expected an object, got {type(data).__name__}")
        if data.get("type") is None:
            raise FactValidationError("type", "missing fact type")
        fact = cls(
            type=data["type"],
            parameters=data.get("parameters"),
            measures=data.get("measures", data.get("measure")),
            context=data.get("context"),
            breakdowns=data.get("breakdowns", data.get("breakdown")),
            focus=data.get("focus"),
        )
        if data.get("level") is not None and SemanticLevel.parse(data["level"]) != fact.level:
            raise FactValidationError(
                "level", f"{data['level']!r} disagrees with type {fact.type.value} ({fact.level})"
            )
        return fact


def _canon_scalar(value: Any) -> Any:
    if is_number(value):
        return float(value) + 0.0
    if isinstance(value, tuple):
        return [_canon_scalar(v) for v in value]
    return value


def canonical_serialize(fact: DataFact) -> str:
    """Byte-stable encoding used for tie-breaking and cache keys.

    Measures, breakdowns and focus are sorted; parameter order is kept since it
    carries meaning for trends and relational pairs. N/A encodes as ``null``.
    """

    def unordered(values: Optional[tuple]):
        return None if values is None else sorted(values)

    payload = [
        fact.type.value,
        None if fact.parameters is None else [_canon_scalar(p) for p in fact.parameters],
        unordered(fact.measures),
        fact.context,
        unordered(fact.breakdowns),
        unordered(fact.focus),
    ]
    return json.dumps(payload, ensure_ascii=False, separators=(",", ":"))


@dataclass(frozen=True)
class ChartSchema:
    axis_labels: tuple = ()
    legend_entries: tuple = ()
    categories: tuple = ()
    title: Optional[str] = None

    def __post_init__(self) -> None:
        for name in ("axis_labels", "legend_entries", "categories"):
            values = getattr(self, name) or ()
            if isinstance(values, str):
                values = (values,)
            object.__setattr__(self, name, tuple(_clean_str(v, name) for v in values))
        if self.title is not None:
            object.__setattr__(self, "title", _clean_str(self.title, "title"))

    def entries(self) -> list[str]:
        """Canonical variable names in schema order, without the title."""
        seen: set[str] = set()
        out = []
        for value in (*self.axis_labels, *self.legend_entries, *self.categories):
            if value not in seen:
                seen.add(value)
                out.append(value)
        return out

    def to_dict(self) -> dict:
        return {
            "axis_labels": list(self.axis_labels),
            "legend_entries": list(self.legend_entries),
            "categories": list(self.categories),
            "title": self.title,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ChartSchema":
        if not isinstance(data, Mapping):
            raise FactValidationError("schema", f"expected an object, got {type(data).__name__}")
        return cls(
            axis_labels=tuple(data.get("axis_labels") or ()),
            legend_entries=tuple(data.get("legend_entries") or ()),
            categories=tuple(data.get("categories") or ()),
            title=data.get("title"),
        )


@dataclass(frozen=True)
class LevelWeights:
    base: Mapping[SemanticLevel, float]
    proportions: Mapping[SemanticLevel, float]
    normalized: Mapping[SemanticLevel, float] = field(default_factory=dict)

    def __getitem__(self, level: SemanticLevel) -> float:
        return self.normalized[level]

    def to_dict(self) -> dict:
        return {
            key: {str(level): value for level, value in sorted(getattr(self, key).items())}
            for key in ("base", "proportions", "normalized")
        }


def level_map(values: Iterable[float]) -> dict[SemanticLevel, float]:
    """Build an L1..L4 map from four numbers in level order."""
    values = list(values)
    if len(values) != 4:
        raise ValueError(f"expected 4 values (L1..L4), got {len(values)}")
    return {level: float(v) for level, v in zip(SemanticLevel, values)}
