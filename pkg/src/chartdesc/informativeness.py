"""Informativeness: level-weighted value of a description's units."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

from .model import LevelWeights, SemanticLevel, level_map

DEFAULT_BASE_WEIGHTS = level_map((1, 6, 7, 7))


def _levels(units: Iterable) -> list[SemanticLevel]:
    return [u if isinstance(u, SemanticLevel) else SemanticLevel.parse(u.level) for u in units]


def level_proportions(reference_units: Sequence) -> dict[SemanticLevel, float]:
    """Share of reference units at each level. Accepts LevelUnits or bare levels."""
    levels = _levels(reference_units)
    if not levels:
        raise ValueError("reference description has no units; proportions are undefined")
    counts = Counter(levels)
    return {level: counts[level] / len(levels) for level in SemanticLevel}


def context_weights(
    proportions: Mapping[SemanticLevel, float],
    base: Optional[Mapping[SemanticLevel, float]] = None,
) -> LevelWeights:
    """Normalized ``b_l * exp(p_l)`` over the four levels."""
    base = dict(DEFAULT_BASE_WEIGHTS if base is None else base)
    if set(base) != set(SemanticLevel):
        raise ValueError("base weights must cover L1..L4")
    if any(b <= 0 for b in base.values()):
        raise ValueError("base weights must be positive")
    p = {level: float(proportions.get(level, 0.0)) for level in SemanticLevel}
    if any(v < 0 for v in p.values()):
        raise ValueError("proportions must be non-negative")
    total_p = sum(p.values())
    if total_p != 0 and abs(total_p - 1.0) > 1e-9:
        raise ValueError(f"proportions must sum to 1 (or all be 0), got {total_p}")
    raw = {level: base[level] * math.exp(p[level]) for level in SemanticLevel}
    z = math.fsum(raw.values())
    return LevelWeights(base=base, proportions=p, normalized={level: raw[level] / z for level in SemanticLevel})


@dataclass(frozen=True)
class InformativenessResult:
    score: float
    weights: LevelWeights
    generated_histogram: Mapping[SemanticLevel, int]
    empty: bool = False

    def to_dict(self) -> dict:
        w = self.weights.to_dict()
        return {
            "p": w["proportions"],
            "w": w["normalized"],
            "level_histogram_generated": {str(l): self.generated_histogram.get(l, 0) for l in SemanticLevel},
            "score": self.score,
            "empty_description": self.empty,
        }


def informativeness_score(generated_units: Sequence, weights: LevelWeights) -> float:
    """Mean level weight over the generated units; 0.0 for an empty description."""
    levels = _levels(generated_units)
    if not levels:
        return 0.0
    return math.fsum(weights[l] for l in levels) / len(levels)


def evaluate_informativeness(
    reference_units: Sequence,
    generated_units: Sequence,
    base: Optional[Mapping[SemanticLevel, float]] = None,
) -> InformativenessResult:
    weights = context_weights(level_proportions(reference_units), base)
    levels = _levels(generated_units)
    return InformativenessResult(
        score=informativeness_score(levels, weights),
        weights=weights,
        generated_histogram=dict(Counter(levels)),
        empty=not levels,
    )
