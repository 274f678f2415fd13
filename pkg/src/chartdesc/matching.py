"""Coverage engine: fact-field normalization, per-dimension scoring and greedy assignment."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Optional, Sequence

from .model import (
    DIMENSIONS,
    EXTREMA_KINDS,
    RANK_KEYWORDS,
    RELATIONAL_TYPES,
    ChartSchema,
    DataFact,
    FactType,
    FactValidationError,
    canonical_serialize,
    is_number,
)
from .providers import cosine_similarity
from .textmetrics import lcs_length

logger = logging.getLogger(__name__)

DEFAULT_WEIGHTS = {"parameters": 0.3, "measures": 0.3, "context": 0.2, "breakdowns": 0.1, "focus": 0.1}

# Swapping the entity pair of a relational fact flips an ordering relation; the rest are symmetric.
INVERSE_RELATION = {"Greater": "Less", "Less": "Greater", "Equal": "Equal", "Positive": "Positive", "Negative": "Negative"}

DEGREE_RANK = {"Slightly": 0, "Moderately": 1, "Highly": 2}

# φ is rounded so that sums like 0.3+0.3+0.1 compare against τ without float noise.
SCORE_DECIMALS = 12


@dataclass(frozen=True)
class MatchConfig:
    tau: float = 0.7
    weights: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    numeric_rel_tolerance: float = 0.05
    numeric_abs_tolerance: float = 1e-9
    embed_fallback_threshold: float = 0.8
    distribution_partial_credit: float = 0.5
    equivalence_groups: tuple = (frozenset({FactType.EXTREMA, FactType.RANK}),)

    def __post_init__(self) -> None:
        if not 0 < self.tau <= 1:
            raise ValueError(f"tau must be in (0, 1], got {self.tau}")
        if set(self.weights) != set(DIMENSIONS):
            raise ValueError(f"weights must cover exactly {DIMENSIONS}")
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("weights must be non-negative")
        if abs(sum(self.weights.values()) - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {sum(self.weights.values())}")
        if not 0 < self.embed_fallback_threshold < 1:
            raise ValueError("embed_fallback_threshold must be in (0, 1)")
        if self.numeric_rel_tolerance < 0 or self.numeric_abs_tolerance < 0:
            raise ValueError("numeric tolerances must be non-negative")
        groups = tuple(frozenset(FactType.parse(t) for t in g) for g in self.equivalence_groups)
        object.__setattr__(self, "equivalence_groups", groups)
        object.__setattr__(self, "weights", {d: float(self.weights[d]) for d in DIMENSIONS})

    def equivalent(self, a: FactType, b: FactType) -> bool:
        return a == b or any(a in g and b in g for g in self.equivalence_groups)

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "weights": dict(self.weights),
            "numeric_rel_tolerance": self.numeric_rel_tolerance,
            "numeric_abs_tolerance": self.numeric_abs_tolerance,
            "embed_fallback_threshold": self.embed_fallback_threshold,
            "distribution_partial_credit": self.distribution_partial_credit,
            "equivalence_groups": sorted(sorted(t.value for t in g) for g in self.equivalence_groups),
        }

    @classmethod
    def from_dict(cls, data: Optional[Mapping[str, Any]]) -> "MatchConfig":
        data = dict(data or {})
        if "equivalence_groups" in data:
            data["equivalence_groups"] = tuple(frozenset(g) for g in data["equivalence_groups"])
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown match config keys: {sorted(unknown)}")
        return cls(**data)


def _lexical(token: str) -> str:
    return " ".join(token.lower().split())


class TokenNormalizer:
    """Maps free-text field tokens onto a chart schema.

    Exact case/whitespace-insensitive matches win; otherwise the most similar
    schema entry by embedding cosine is used if it clears the threshold.
    Results are memoized per token.
    """

    def __init__(self, schema: Optional[ChartSchema] = None, embedder=None, threshold: float = 0.8):
        self.entries = schema.entries() if schema is not None else []
        self.embedder = embedder
        self.threshold = threshold
        self._by_key: dict[str, str] = {}
        for entry in self.entries:
            self._by_key.setdefault(_lexical(entry), entry)
        self._entry_vectors = None
        self._memo: dict[str, str] = {}
        self._embedding_broken = False

    def __call__(self, token: str) -> str:
        if token not in self._memo:
            self._memo[token] = self._normalize(token)
        return self._memo[token]

    def _normalize(self, token: str) -> str:
        if not token or not token.strip():
            raise ValueError("cannot normalize an empty token")
        key = _lexical(token)
        if key in self._by_key:
            return self._by_key[key]
        if self.entries and self.embedder is not None and not self._embedding_broken:
            try:
                if self._entry_vectors is None:
                    self._entry_vectors = self.embedder.embed(self.entries)
                (vec,) = self.embedder.embed([token])
                best, best_sim = None, -2.0
                for entry, evec in zip(self.entries, self._entry_vectors):
                    sim = cosine_similarity(vec, evec)
                    if sim > best_sim:
                        best, best_sim = entry, sim
                if best is not None and best_sim >= self.threshold:
                    return best
            except Exception as exc:  # embedding problems never abort matching
                logger.warning("embedding fallback unavailable, using lexical match: %s", exc)
                self._embedding_broken = True
        return key


def normalize_token(token: str, schema: Optional[ChartSchema], embedder=None, threshold: float = 0.8) -> str:
    return TokenNormalizer(schema, embedder, threshold)(token)


def lcs_ratio(a: Sequence, b: Sequence) -> float:
    if not a and not b:
        return 1.0
    if not a or not b:
        return 0.0
    return lcs_length(a, b) / max(len(a), len(b))


def _identity(token: str) -> str:
    return _lexical(token)


def _set_overlap(ref: Optional[Iterable[str]], model: Optional[Iterable[str]], norm) -> float:
    rs = {norm(x) for x in ref or ()}
    ms = {norm(x) for x in model or ()}
    if not rs and not ms:
        return 1.0
    if not rs:
        return 0.0
    return len(rs & ms) / len(rs)


_PARAM_KEYWORDS = frozenset(EXTREMA_KINDS) | frozenset(RANK_KEYWORDS)


def _item_score(ref: Sequence, model: Sequence, cfg: MatchConfig, norm) -> float:
    """Fraction of parameter items that agree, over the longer side.

    Keywords must match exactly, entity names after normalization, and
    quantities pair up positionally within the numeric tolerance.
    """
    def split(items):
        keys, names, nums = Counter(), Counter(), []
        for item in items:
            if is_number(item):
                nums.append(float(item))
            elif item in _PARAM_KEYWORDS:
                keys[item] += 1
            else:
                names[norm(item)] += 1
        return keys, names, nums

    rk, rn, rq = split(ref)
    mk, mn, mq = split(model)
    total = max(len(ref), len(model))
    if total == 0:
        return 1.0
    hits = sum((rk & mk).values()) + sum((rn & mn).values())
    for b, a in zip(rq, mq):
        if abs(a - b) <= max(cfg.numeric_abs_tolerance, cfg.numeric_rel_tolerance * abs(b)):
            hits += 1
    return hits / total


def _relation_score(ref: Sequence, model: Sequence, norm) -> float:
    if len(ref) != 3 or len(model) != 3:
        return 0.0
    rel_r, a_r, b_r = ref[0], norm(ref[1]), norm(ref[2])
    rel_m, a_m, b_m = model[0], norm(model[1]), norm(model[2])
    if (a_r, b_r) == (a_m, b_m):
        return 1.0 if rel_r == rel_m else 0.0
    if (a_r, b_r) == (b_m, a_m):
        return 1.0 if rel_r == INVERSE_RELATION[rel_m] else 0.0
    return 0.0


def _distribution_score(ref: Sequence, model: Sequence, cfg: MatchConfig) -> float:
    if not ref and not model:
        return 1.0
    if not ref or not model:
        return 0.0
    total = 0.0
    for degree, state in ref:
        best = 0.0
        for m_degree, m_state in model:
            if m_state != state:
                continue
            gap = abs(DEGREE_RANK[degree] - DEGREE_RANK[m_degree])
            credit = 1.0 if gap == 0 else cfg.distribution_partial_credit if gap == 1 else 0.0
            best = max(best, credit)
        total += best
    return total / len(ref)


def _parameter_score(r: DataFact, m: DataFact, cfg: MatchConfig, norm) -> float:
    ref, model = r.parameters or (), m.parameters or ()
    if r.type is FactType.TREND:
        return lcs_ratio(ref, model)
    if r.type in RELATIONAL_TYPES:
        if not ref and not model:
            return 1.0
        return _relation_score(ref, model, norm)
    if r.type is FactType.DISTRIBUTION:
        return _distribution_score(ref, model, cfg)
    return _item_score(ref, model, cfg, norm)


def _as_set(fact: DataFact, dimension: str):
    value = getattr(fact, dimension)
    if dimension == "context":
        return None if value is None else (value,)
    return value


def cross_type_convert(m: DataFact, target: FactType, cfg: Optional[MatchConfig] = None) -> Optional[DataFact]:
    """Re-express ``m`` as a fact of ``target`` type, or ``None`` if no faithful analogue exists.

    Rank 1 / First <-> Maximum and rank Last <-> Minimum; the four descriptive
    fields are carried over. Extreme values have no slot in a rank fact and are
    dropped on the way to rank.
    """
    cfg = cfg or DEFAULT_CONFIG
    target = FactType.parse(target)
    if not cfg.equivalent(m.type, target):
        raise ValueError(f"{m.type.value} and {target.value} share no equivalence group")
    if m.type is target:
        return m
    params = list(m.parameters or ())
    if m.type is FactType.RANK and target is FactType.EXTREMA:
        out = []
        for item in params:
            if item in RANK_KEYWORDS or is_number(item):
                if item == "First" or item == 1:
                    out.append("Maximum")
                elif item == "Last":
                    out.append("Minimum")
                else:
                    return None
            else:
                out.append(item)
        return replace(m, type=FactType.EXTREMA, parameters=tuple(out))
    if m.type is FactType.EXTREMA and target is FactType.RANK:
        out = []
        for item in params:
            if item == "Maximum":
                out.append(1)
            elif item == "Minimum":
                out.append("Last")
            elif not is_number(item):
                out.append(item)
        return replace(m, type=FactType.RANK, parameters=tuple(out))
    try:
        return replace(m, type=target)
    except FactValidationError:
        return None


def _aligned(r: DataFact, m: DataFact, cfg: MatchConfig) -> Optional[DataFact]:
    if r.type is m.type:
        return m
    if not cfg.equivalent(r.type, m.type):
        return None
    return cross_type_convert(m, r.type, cfg)


def sigma_dimension(
    r: DataFact,
    m: DataFact,
    dimension: str,
    cfg: Optional[MatchConfig] = None,
    normalizer=None,
) -> float:
    cfg = cfg or DEFAULT_CONFIG
    norm = normalizer or _identity
    if dimension not in DIMENSIONS:
        raise ValueError(f"unknown dimension {dimension!r}")
    m = _aligned(r, m, cfg)
    if m is None:
        return 0.0
    if dimension == "parameters":
        return _parameter_score(r, m, cfg, norm)
    return _set_overlap(_as_set(r, dimension), _as_set(m, dimension), norm)


def reallocate_weights(r: DataFact, m: DataFact, cfg: Optional[MatchConfig] = None) -> dict[str, float]:
    """Drop dimensions that are N/A on both sides and rescale the rest to sum to 1."""
    cfg = cfg or DEFAULT_CONFIG
    active = {
        d: w
        for d, w in cfg.weights.items()
        if not (getattr(r, d) is None and getattr(m, d) is None)
    }
    total = sum(active.values())
    if total <= 0:
        return {"parameters": 1.0}
    return {d: w / total for d, w in active.items()}


def phi(
    r: DataFact,
    m: DataFact,
    cfg: Optional[MatchConfig] = None,
    schema: Optional[ChartSchema] = None,
    embedder=None,
    normalizer=None,
) -> float:
    cfg = cfg or DEFAULT_CONFIG
    if normalizer is None:
        normalizer = TokenNormalizer(schema, embedder, cfg.embed_fallback_threshold)
    m = _aligned(r, m, cfg)
    if m is None:
        return 0.0
    weights = reallocate_weights(r, m, cfg)
    score = sum(w * sigma_dimension(r, m, d, cfg, normalizer) for d, w in weights.items())
    return round(min(1.0, max(0.0, score)), SCORE_DECIMALS)


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple  # ((reference_index, model_index, score), ...) in acceptance order
    matched_count: int
    precision: float
    recall: float
    f1: float
    coverage: float

    def to_dict(self) -> dict:
        return {
            "pairs": [list(p) for p in self.pairs],
            "matched_count": self.matched_count,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "coverage": self.coverage,
        }


def score_matrix(
    R: Sequence[DataFact],
    M: Sequence[DataFact],
    cfg: Optional[MatchConfig] = None,
    schema: Optional[ChartSchema] = None,
    embedder=None,
) -> list[list[float]]:
    cfg = cfg or DEFAULT_CONFIG
    norm = TokenNormalizer(schema, embedder, cfg.embed_fallback_threshold)
    return [[phi(r, m, cfg, normalizer=norm) for m in M] for r in R]


def prf(k: int, n_ref: int, n_model: int) -> tuple[float, float, float]:
    precision = k / n_model if n_model else 0.0
    recall = k / n_ref if n_ref else 0.0
    f1 = 2 * precision * recall / (precision + recall) if k else 0.0
    return precision, recall, f1


def assign(
    R: Sequence[DataFact],
    M: Sequence[DataFact],
    cfg: Optional[MatchConfig] = None,
    schema: Optional[ChartSchema] = None,
    embedder=None,
) -> MatchResult:
    """Global greedy one-to-one matching of reference facts ``R`` to model facts ``M``.

    All pairs are scored, sorted by descending φ with canonical serializations
    as tie-breakers, and accepted greedily while both ends are free and φ >= τ.
    """
    cfg = cfg or DEFAULT_CONFIG
    scores = score_matrix(R, M, cfg, schema, embedder)
    r_keys = [canonical_serialize(f) for f in R]
    m_keys = [canonical_serialize(f) for f in M]
    candidates = sorted(
        ((scores[i][j], i, j) for i in range(len(R)) for j in range(len(M))),
        key=lambda t: (-t[0], r_keys[t[1]], m_keys[t[2]], t[1], t[2]),
    )
    used_r: set[int] = set()
    used_m: set[int] = set()
    pairs = []
    for score, i, j in candidates:
        if score < cfg.tau:
            break
        if i in used_r or j in used_m:
            continue
        used_r.add(i)
        used_m.add(j)
        pairs.append((i, j, score))
    k = len(pairs)
    precision, recall, f1 = prf(k, len(R), len(M))
    return MatchResult(tuple(pairs), k, precision, recall, f1, recall)


DEFAULT_CONFIG = MatchConfig()
