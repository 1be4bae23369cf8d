"""Span decoding and answer metrics.

normalize_answer / overlap_f1 follow the official SQuAD v1.1 normalization:
lowercase, strip punctuation, drop the articles a/an/the, collapse whitespace.
"""

from __future__ import annotations

import re
import string
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

QUESTION_TYPES = ("what", "who", "which", "how", "why", "when", "where")

_PUNCT = set(string.punctuation)
_ARTICLE_RE = re.compile(r"\b(a|an|the)\b")


def normalize_answer(text: str) -> str:
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = _ARTICLE_RE.sub(" ", text)
    return " ".join(text.split())


def overlap_f1(gold_text: str, candidate_text: str) -> float:
    """Bag-of-tokens F1 between two answer strings after normalization."""
    gold = normalize_answer(gold_text).split()
    cand = normalize_answer(candidate_text).split()
    common = Counter(gold) & Counter(cand)
    num_same = sum(common.values())
    if num_same == 0:
        return 0.0
    precision = num_same / len(cand)
    recall = num_same / len(gold)
    return 2 * precision * recall / (precision + recall)


def exact_match(gold_text: str, candidate_text: str) -> bool:
    return normalize_answer(gold_text) == normalize_answer(candidate_text)


@dataclass
class SpanPrediction:
    """Candidate answer span, token indices inclusive."""

    start: int
    end: int
    score: float
    text: str = ""


def topk_spans(
    p1: np.ndarray,
    p2: np.ndarray,
    k: int,
    max_span_len: int = 15,
    example=None,
) -> list[SpanPrediction]:
    """The k highest-scoring spans with start <= end and end - start < max_span_len.

    Score is p1[start] * p2[end]. Ties break toward the smaller start, then the
    smaller end, so the ordering matches exhaustive enumeration exactly. When
    an example is given, each span's detokenized text is filled in from its
    character offsets.
    """
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    if p1.ndim != 1 or p1.shape != p2.shape:
        raise ValueError(f"topk_spans: need matching 1-d distributions, got {p1.shape}, {p2.shape}")
    if k < 1 or max_span_len < 1:
        raise ValueError("topk_spans: k and max_span_len must be >= 1")
    m = p1.shape[0]
    scores = np.outer(p1, p2)
    starts, ends = np.nonzero(
        np.triu(np.ones((m, m), dtype=bool)) & ~np.triu(np.ones((m, m), dtype=bool), k=max_span_len)
    )
    vals = scores[starts, ends]
    # descending score, then ascending start, then ascending end
    order = np.lexsort((ends, starts, -vals))[:k]
    out = []
    for i in order:
        s, e = int(starts[i]), int(ends[i])
        text = span_text(example, s, e) if example is not None else ""
        out.append(SpanPrediction(s, e, float(vals[i]), text))
    return out


def span_text(example, start: int, end: int) -> str:
    """Detokenized passage text covered by an inclusive token span."""
    begin = example.token_char_offsets[start][0]
    stop = example.token_char_offsets[end][1]
    return example.raw_context[begin:stop]


@dataclass
class EvalReport:
    em: float
    f1: float
    total: int
    missing: int
    adversarial_count: int
    per_type: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "em": self.em,
            "f1": self.f1,
            "total": self.total,
            "missing_predictions": self.missing,
            "adversarial_count": self.adversarial_count,
            "per_type": self.per_type,
        }


def question_type(question_tokens) -> str:
    first = question_tokens[0].lower() if question_tokens else "other"
    return first if first in QUESTION_TYPES else "other"


def evaluate(predictions: dict, examples) -> EvalReport:
    """Corpus EM/F1 (x100) with a per-question-type breakdown.

    predictions maps example id to an answer string. EM counts a hit when the
    normalized prediction equals any normalized gold; F1 is the max overlap_f1
    over golds. Missing predictions score 0 and are tallied.
    """
    buckets: dict[str, list[tuple[float, float]]] = {}
    missing = 0
    adversarial = 0
    rows = []
    for ex in examples:
        golds = ex.gold_texts()
        pred = predictions.get(ex.id)
        if pred is None:
            missing += 1
            em_i, f1_i = 0.0, 0.0
        else:
            em_i = float(any(exact_match(g, pred) for g in golds)) if golds else 0.0
            f1_i = max((overlap_f1(g, pred) for g in golds), default=0.0)
        if getattr(ex, "adversarial", False):
            adversarial += 1
        rows.append((em_i, f1_i))
        buckets.setdefault(question_type(ex.question_tokens), []).append((em_i, f1_i))

    n = len(rows)
    em = 100.0 * sum(r[0] for r in rows) / n if n else 0.0
    f1 = 100.0 * sum(r[1] for r in rows) / n if n else 0.0
    per_type = {
        qt: {
            "count": len(vals),
            "em": 100.0 * sum(v[0] for v in vals) / len(vals),
            "f1": 100.0 * sum(v[1] for v in vals) / len(vals),
        }
        for qt, vals in sorted(buckets.items())
    }
    return EvalReport(em, f1, n, missing, adversarial, per_type)
