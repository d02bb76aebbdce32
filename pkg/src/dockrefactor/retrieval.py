"""Score-based demonstration retrieval.

Each demonstration gets five equally weighted components: BM25 similarity
of its original Dockerfile to the query (divided by the best BM25 value in
the corpus for that query), the understandability and maintainability
annotations, and the relative image size and build duration improvements.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .corpus import Corpus, CorpusStats, Demonstration, tokenize
from .dockerfile import DockerfileAst, serialize
from .quality import DomainError, build_duration_score, image_size_score

__all__ = [
    "DomainError",
    "ScoreBreakdown",
    "SelectionError",
    "bm25",
    "build_duration_score",
    "demonstration_score",
    "image_size_score",
    "score_corpus",
    "select_demonstrations",
]

COMPONENT_WEIGHT = 0.2
K1 = 1.2
B = 0.75


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreBreakdown:
    textual_similarity: float
    understandability: int
    maintainability: int
    image_size: float
    build_duration: float
    total: float

    @classmethod
    def of(cls, similarity, understandability, maintainability, image_size, build_duration):
        total = COMPONENT_WEIGHT * (similarity + understandability + maintainability + image_size + build_duration)
        return cls(similarity, understandability, maintainability, image_size, build_duration, total)

    def to_json(self) -> dict:
        return {
            "textual_similarity": self.textual_similarity,
            "understandability": self.understandability,
            "maintainability": self.maintainability,
            "image_size": self.image_size,
            "build_duration": self.build_duration,
            "total": self.total,
        }


def bm25(query_tokens: Sequence[str], doc_tokens: Sequence[str], stats: CorpusStats,
         k1: float = K1, b: float = B) -> float:
    """Okapi BM25 of one document for a tokenized query."""
    if not query_tokens or not doc_tokens:
        return 0.0
    tf = Counter(doc_tokens)
    norm = k1 * (1 - b + b * len(doc_tokens) / stats.avg_doc_len)
    n = stats.doc_count
    score = 0.0
    for term in query_tokens:
        freq = tf.get(term, 0)
        if not freq:
            continue
        df = stats.doc_freq.get(term, 0)
        idf = math.log((n - df + 0.5) / (df + 0.5) + 1)
        score += idf * freq * (k1 + 1) / (freq + norm)
    return score


def demonstration_score(demo: Demonstration, query_tokens: Sequence[str], stats: CorpusStats,
                        normalizer: float, doc_tokens: Sequence[str] | None = None) -> ScoreBreakdown:
    if doc_tokens is None:
        doc_tokens = tokenize(demo.v_before)
    raw = bm25(query_tokens, doc_tokens, stats)
    similarity = raw / normalizer if normalizer > 0 else 0.0
    ann = demo.annotation
    return ScoreBreakdown.of(similarity, ann.understandability, ann.maintainability,
                             demo.size_score, demo.duration_score)


def score_corpus(corpus: Corpus, query: DockerfileAst | str) -> list[tuple[Demonstration, ScoreBreakdown]]:
    """Score every demonstration against ``query``, in corpus order."""
    text = query if isinstance(query, str) else serialize(query)
    q = tokenize(text)
    raws = [bm25(q, corpus.doc_tokens[d.id], corpus.stats) for d in corpus.demos]
    normalizer = max(raws, default=0.0)
    return [
        (d, demonstration_score(d, q, corpus.stats, normalizer, corpus.doc_tokens[d.id]))
        for d in corpus.demos
    ]


def select_demonstrations(corpus: Corpus, query: DockerfileAst | str, n: int
                          ) -> list[tuple[Demonstration, ScoreBreakdown]]:
    """The ``n`` best demonstrations, ordered from lowest to highest total.

    Ranking ties are broken by ascending id, so the returned list is the exact
    reverse of that ranking: the best demonstration comes last.
    """
    if n < 0:
        raise SelectionError("n must be non-negative")
    if n == 0:
        return []
    if n > len(corpus):
        raise SelectionError(f"requested {n} demonstrations from a corpus of {len(corpus)}")
    scored = score_corpus(corpus, query)
    ranked = sorted(scored, key=lambda pair: (-pair[1].total, pair[0].id))
    return list(reversed(ranked[:n]))
