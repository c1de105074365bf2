"""spBLEU and copy-mechanism diagnostics."""

from __future__ import annotations

import math
import statistics
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

MAX_ORDER = 4


class MetricError(ValueError):
    pass


@dataclass
class BleuReport:
    score: float
    precisions: list[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    smoothing: str = "zero precision -> 1/(2 * hypothesis n-gram count)"

    def to_dict(self) -> dict:
        return asdict(self)


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _ids(seq) -> list:
    return list(seq.ids) if hasattr(seq, "ids") else list(seq)


def sp_bleu(hypotheses: Sequence, references: Sequence) -> BleuReport:
    """Corpus BLEU-4 over subword ids (or any hashable tokens).

    Clipped n-gram matches and hypothesis n-gram totals are summed over the
    corpus. A zero precision is replaced by ``1 / (2 * total)`` where
    ``total`` is the hypothesis n-gram count of that order (at least 1).
    """
    if len(hypotheses) != len(references):
        raise MetricError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise MetricError("sp_bleu needs a non-empty corpus")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for h, r in zip(hypotheses, references):
        h, r = _ids(h), _ids(r)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, MAX_ORDER + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    precisions = []
    for m, t in zip(matches, totals):
        precisions.append(m / t if m > 0 else 1.0 / (2 * max(t, 1)))
    if hyp_len == 0:
        return BleuReport(0.0, precisions, 0.0, hyp_len, ref_len)
    bp = min(1.0, math.exp(1.0 - ref_len / hyp_len))
    geo = math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    return BleuReport(100.0 * bp * geo, precisions, bp, hyp_len, ref_len)


def attention_entropy(a) -> float:
    """Natural-log entropy of an attention row, with ``0 ln 0 = 0``."""
    a = np.asarray(a, dtype=np.float64)
    total = a.sum()
    if abs(total - 1.0) > 1e-6 or np.any(a < 0):
        raise MetricError(f"attention row is not a distribution (sum {total:.8f})")
    nz = a[a > 0]
    return float(-(nz * np.log(nz)).sum())


@dataclass
class CopyUsageRecord:
    token_id: int
    p_copy: float
    entropy: float
    in_source: bool
    sentence_id: int = 0
    step: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2 or x.size != y.size:
        raise MetricError("correlation needs two equal-length samples of size >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt((dx * dx).sum()), math.sqrt((dy * dy).sum())
    if sx == 0.0 or sy == 0.0:
        raise MetricError("correlation is undefined for a zero-variance sample")
    r = float((dx * dy).sum() / (sx * sy))
    # an exactly linear relation can land a few ulps short of +-1
    if abs(abs(r) - 1.0) <= 1e-14:
        return math.copysign(1.0, r)
    return r


def pcopy_entropy_correlation(records: Sequence[CopyUsageRecord]) -> float:
    return pearson([r.p_copy for r in records], [r.entropy for r in records])


@dataclass
class GroupSummary:
    count: int
    mean: float | None
    median: float | None


@dataclass
class CopyUsageSummary:
    in_source: GroupSummary
    not_in_source: GroupSummary
    top_tokens: list[tuple[int, float, int]] = field(default_factory=list)  # id, mean, count

    def to_dict(self) -> dict:
        return asdict(self)


def _group(values: list[float]) -> GroupSummary:
    if not values:
        return GroupSummary(0, None, None)
    return GroupSummary(len(values), float(np.mean(values)), float(statistics.median(values)))


def copy_usage_summary(records: Sequence[CopyUsageRecord], top_k: int = 20) -> CopyUsageSummary:
    """p_copy split by whether the emitted token occurs in the source, plus top tokens.

    Top tokens are ordered by mean p_copy descending, then token id ascending.
    """
    by_token: dict[int, list[float]] = defaultdict(list)
    for r in records:
        by_token[r.token_id].append(r.p_copy)
    top = sorted(((tok, float(np.mean(v)), len(v)) for tok, v in by_token.items()),
                 key=lambda t: (-t[1], t[0]))[:top_k]
    return CopyUsageSummary(
        in_source=_group([r.p_copy for r in records if r.in_source]),
        not_in_source=_group([r.p_copy for r in records if not r.in_source]),
        top_tokens=top)
