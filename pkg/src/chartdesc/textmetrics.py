"""Reference-based text metrics and Spearman correlation."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Optional, Sequence

import numpy as np
from scipy import stats

_TOKEN = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase; words and punctuation marks become separate tokens."""
    return _TOKEN.findall(text.lower())


def lcs_length(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    """Length of the longest common subsequence, O(len(a)*len(b)) time, O(len(b)) memory."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


@dataclass(frozen=True)
class BleuResult:
    score: float
    precisions: tuple  # modified n-gram precisions, None where the candidate has no n-grams
    brevity_penalty: float
    candidate_length: int
    reference_length: int


def _closest_ref_length(c: int, ref_lengths: Sequence[int]) -> int:
    return min(ref_lengths, key=lambda r: (abs(r - c), r))


def _bleu_from_counts(matches, totals, c, r, max_n) -> BleuResult:
    precisions = tuple(m / t if t else None for m, t in zip(matches, totals))
    bp = 1.0 if c > r else (math.exp(1 - r / c) if c else 0.0)
    if any(p is None or p == 0 for p in precisions):
        score = 0.0
    else:
        score = bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return BleuResult(score, precisions, bp, c, r)


def bleu_details(candidate: str, references: Sequence[str], max_n: int = 4) -> BleuResult:
    """BLEU with uniform weights, clipped counts, brevity penalty and no smoothing."""
    return corpus_bleu([candidate], [references], max_n)


def bleu(candidate: str, references: Sequence[str]) -> float:
    return bleu_details(candidate, references).score


def corpus_bleu(candidates: Sequence[str], references: Sequence[Sequence[str]], max_n: int = 4) -> BleuResult:
    if len(candidates) != len(references):
        raise ValueError("need one reference list per candidate")
    matches = [0] * max_n
    totals = [0] * max_n
    c_total = r_total = 0
    for cand, refs in zip(candidates, references):
        if isinstance(refs, str):
            refs = [refs]
        ref_toks = [t for t in (tokenize(r) for r in refs) if t]
        if not ref_toks:
            raise ValueError("at least one non-empty reference is required")
        cand_toks = tokenize(cand)
        c_total += len(cand_toks)
        r_total += _closest_ref_length(len(cand_toks), [len(t) for t in ref_toks])
        for n in range(1, max_n + 1):
            cand_counts = _ngrams(cand_toks, n)
            max_ref: Counter = Counter()
            for toks in ref_toks:
                for gram, count in _ngrams(toks, n).items():
                    max_ref[gram] = max(max_ref[gram], count)
            matches[n - 1] += sum(min(count, max_ref[gram]) for gram, count in cand_counts.items())
            totals[n - 1] += sum(cand_counts.values())
    return _bleu_from_counts(matches, totals, c_total, r_total, max_n)


@dataclass(frozen=True)
class RougeL:
    precision: float
    recall: float
    f1: float


def rouge_l(candidate: str, reference: str) -> RougeL:
    cand, ref = tokenize(candidate), tokenize(reference)
    if not cand or not ref:
        return RougeL(0.0, 0.0, 0.0)
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return RougeL(0.0, 0.0, 0.0)
    p, r = lcs / len(cand), lcs / len(ref)
    return RougeL(p, r, 2 * p * r / (p + r))


@dataclass(frozen=True)
class ScorePair:
    automatic: tuple
    human: tuple

    def __post_init__(self) -> None:
        object.__setattr__(self, "automatic", tuple(float(x) for x in self.automatic))
        object.__setattr__(self, "human", tuple(float(x) for x in self.human))
        if len(self.automatic) != len(self.human):
            raise ValueError("automatic and human score lists differ in length")
        if len(self.automatic) < 2:
            raise ValueError("Spearman needs at least two pairs")


def spearman(pairs: ScorePair) -> Optional[float]:
    """Spearman's rho with average ranks for ties; ``None`` when a list is constant."""
    a = np.asarray(pairs.automatic)
    h = np.asarray(pairs.human)
    if np.all(a == a[0]) or np.all(h == h[0]):
        return None
    rho = stats.spearmanr(a, h).statistic
    return float(np.clip(rho, -1.0, 1.0))
