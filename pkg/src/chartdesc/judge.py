"""Adjudicator-based metrics: faithfulness verdicts and the acuity rubric."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

from . import prompts
from .extraction import image_part

logger = logging.getLogger(__name__)

ERROR_CATEGORIES = (
    "color",
    "trend",
    "numerical value",
    "comparison",
    "ranking",
    "range",
    "stability",
    "extrema",
    "distribution",
)
ACUITY_DIMENSIONS = ("accuracy", "integration", "insight", "etiological", "multivariate")


class JudgeError(ValueError):
    """The adjudicator's verdict broke its contract."""


class VerdictInconsistencyError(JudgeError):
    pass


class VerdictRangeError(JudgeError):
    pass


def _as_int(value: Any, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
        raise VerdictInconsistencyError(f"{name} must be an integer, got {value!r}")
    return int(value)


@dataclass(frozen=True)
class ErrorItem:
    claim_text: str
    category: str
    explanation: str = ""

    def to_dict(self) -> dict:
        return {"claim_text": self.claim_text, "category": self.category, "explanation": self.explanation}


@dataclass(frozen=True)
class FaithfulnessVerdict:
    n_total_claims: int
    n_erroneous: int
    errors: tuple = ()
    raw_text: str = field(default="", compare=False)
    model_id: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        if self.n_total_claims < 0 or self.n_erroneous < 0:
            raise VerdictInconsistencyError("claim counts must be non-negative")
        if self.n_erroneous > self.n_total_claims:
            raise VerdictInconsistencyError(
                f"n_erroneous ({self.n_erroneous}) exceeds n_total_claims ({self.n_total_claims})"
            )
        if len(self.errors) != self.n_erroneous:
            raise VerdictInconsistencyError(
                f"n_erroneous is {self.n_erroneous} but {len(self.errors)} errors were listed"
            )
        for item in self.errors:
            if item.category not in ERROR_CATEGORIES:
                raise VerdictInconsistencyError(f"unknown error category {item.category!r}")

    @classmethod
    def from_json(cls, data: Any, raw_text: str = "", model_id: str = "") -> "FaithfulnessVerdict":
        if not isinstance(data, Mapping):
            raise VerdictInconsistencyError("verdict must be a JSON object")
        errors_raw = data.get("errors") or []
        if not isinstance(errors_raw, list):
            raise VerdictInconsistencyError("errors must be a list")
        errors = []
        for e in errors_raw:
            if not isinstance(e, Mapping):
                raise VerdictInconsistencyError(f"error item must be an object, got {e!r}")
            errors.append(
                ErrorItem(
                    claim_text=str(e.get("claim_text", "")),
                    category=" ".join(str(e.get("category", "")).lower().split()),
                    explanation=str(e.get("explanation", "")),
                )
            )
        total = data.get("n_total_claims", data.get("n_total"))
        if total is None and isinstance(data.get("claims"), list):
            total = len(data["claims"])
        if total is None:
            raise VerdictInconsistencyError("missing n_total_claims")
        n_err = data.get("n_erroneous", len(errors))
        return cls(
            _as_int(total, "n_total_claims"),
            _as_int(n_err, "n_erroneous"),
            tuple(errors),
            raw_text,
            model_id,
        )

    def to_dict(self) -> dict:
        return {
            "n_total_claims": self.n_total_claims,
            "n_erroneous": self.n_erroneous,
            "errors": [e.to_dict() for e in self.errors],
            "model_id": self.model_id,
            "raw_text": self.raw_text,
        }


@dataclass(frozen=True)
class AcuityVerdict:
    accuracy: int
    integration: int
    insight: int
    etiological: int
    multivariate: int
    rationales: Mapping[str, str] = field(default_factory=dict, compare=False)
    raw_text: str = field(default="", compare=False)
    model_id: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        for name in ACUITY_DIMENSIONS:
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int):
                raise VerdictRangeError(f"{name} must be an integer, got {value!r}")
            if not 1 <= value <= 5:
                raise VerdictRangeError(f"{name} score {value} is outside 1-5")

    def scores(self) -> tuple:
        return tuple(getattr(self, name) for name in ACUITY_DIMENSIONS)

    @classmethod
    def from_json(cls, data: Any, raw_text: str = "", model_id: str = "") -> "AcuityVerdict":
        if not isinstance(data, Mapping):
            raise VerdictRangeError("verdict must be a JSON object")
        scores = {}
        for name in ACUITY_DIMENSIONS:
            value = data.get(name)
            if isinstance(value, float) and value == int(value):
                value = int(value)
            scores[name] = value
        rationales = data.get("rationales") or {}
        if not isinstance(rationales, Mapping):
            rationales = {}
        return cls(**scores, rationales={k: str(v) for k, v in rationales.items()}, raw_text=raw_text, model_id=model_id)

    def to_dict(self) -> dict:
        out = {name: getattr(self, name) for name in ACUITY_DIMENSIONS}
        out.update({"rationales": dict(self.rationales), "model_id": self.model_id, "raw_text": self.raw_text})
        return out


def _judge(template: str, parse, chart_image: bytes, description: str, adjudicator, overrides):
    if not isinstance(description, str) or not description.strip():
        raise ValueError("description must be non-empty")
    image = image_part(chart_image)
    system, user = prompts.load(template, overrides).render(description=description.strip())
    data, resp = adjudicator.complete_json(adjudicator.request(system, user, images=[image], json_mode=True))
    try:
        return parse(data, resp.text, adjudicator.model_id)
    except JudgeError as exc:
        logger.warning("%s verdict rejected (%s); re-prompting once", template, exc)
        retry_text = (
            f"{user}\n\nYour previous reply was rejected: {exc}.\n"
            f"Previous reply:\n{resp.text}\n\nReply again with corrected JSON."
        )
        data, resp = adjudicator.complete_json(
            adjudicator.request(system, retry_text, images=[image], json_mode=True)
        )
        return parse(data, resp.text, adjudicator.model_id)


def judge_faithfulness(chart_image: bytes, description: str, adjudicator, overrides=None) -> FaithfulnessVerdict:
    """One vision call over the chart and the whole description; no fact decomposition."""
    return _judge("faithfulness", FaithfulnessVerdict.from_json, chart_image, description, adjudicator, overrides)


def judge_acuity(chart_image: bytes, description: str, adjudicator, overrides=None) -> AcuityVerdict:
    return _judge("acuity", AcuityVerdict.from_json, chart_image, description, adjudicator, overrides)


def faithfulness_score(verdict: FaithfulnessVerdict) -> Optional[float]:
    """``1 - errors/claims``; ``None`` when the description made no checkable claim."""
    if verdict.n_total_claims == 0:
        logger.info("faithfulness undefined: adjudicator found no claims")
        return None
    return 1.0 - verdict.n_erroneous / verdict.n_total_claims


def acuity_score(verdict: AcuityVerdict) -> float:
    return sum(verdict.scores()) / len(ACUITY_DIMENSIONS)
