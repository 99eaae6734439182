"""Deterministic evaluation math: focus distributions, smoothed KL divergence,
pair-multiset F1, text-similarity metrics, and point-count statistics.

Everything here is a pure function of its inputs. Facet-pair agreement keeps
multiset counts (reviewers repeat facet pairs); the set-collapse variant is
available behind a flag for sensitivity analysis.
"""

from __future__ import annotations

import logging
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .facets import AspectFacet, FacetKind, Polarity, TargetFacet
from .records import (
    PROFILE_QUADRANTS,
    AnnotatedPoint,
    FocusDistribution,
    FocusProfile,
    ReviewPoint,
)

logger = logging.getLogger(__name__)

TOKENIZER_VERSION = "uniword-1"
DEFAULT_EPSILON = 1e-6
BLEU_SMOOTHING_EPSILON = 1e-9

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


class EmptySupportError(ValueError):
    def __init__(self, facet_kind: FacetKind, polarity: Polarity):
        self.facet_kind = facet_kind
        self.polarity = polarity
        super().__init__(f"no points for ({facet_kind.value}, {polarity.value})")


class KindMismatchError(ValueError):
    pass


class EmptyTextError(ValueError):
    pass


class BackendUnavailableError(RuntimeError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase unicode word segments, punctuation and underscores dropped."""
    return _TOKEN_RE.findall(text.lower())


# ---------------------------------------------------------------------------
# Focus distributions and KL divergence


def focus_distribution(
    points: Sequence[AnnotatedPoint], facet_kind: FacetKind, polarity: Polarity
) -> FocusDistribution:
    """Normalized facet frequency over the points of one polarity."""
    counts: Counter = Counter()
    for annotated in points:
        if annotated.point.polarity is not polarity:
            continue
        facet = annotated.target if facet_kind is FacetKind.TARGET else annotated.aspect
        counts[facet] += 1
    if not counts:
        raise EmptySupportError(facet_kind, polarity)
    return FocusDistribution.from_counts(facet_kind, polarity, counts)


def focus_profile(points: Sequence[AnnotatedPoint], group_id: str) -> FocusProfile:
    """All four distributions of one reviewer group; raises on an empty quadrant."""
    return FocusProfile(
        group_id=group_id,
        distributions=tuple(
            focus_distribution(points, kind, polarity) for polarity, kind in PROFILE_QUADRANTS
        ),
    )


def kl_divergence(
    p: FocusDistribution, q: FocusDistribution, epsilon: float = DEFAULT_EPSILON
) -> float:
    """KL(p || q) in nats after add-epsilon smoothing of both sides.

    Each weight becomes (w + epsilon) / (1 + N * epsilon), so a facet with
    zero mass on either side still yields a finite value. Direction matters;
    callers pass the reference distribution first.
    """
    if p.facet_kind is not q.facet_kind or p.polarity is not q.polarity:
        raise KindMismatchError(
            f"({p.facet_kind.value}, {p.polarity.value}) vs ({q.facet_kind.value}, {q.polarity.value})"
        )
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if p.support == 0 or q.support == 0:
        raise EmptySupportError(p.facet_kind, p.polarity)
    vocab = list(p.weights)
    n = len(vocab)
    denom = 1.0 + n * epsilon
    total = 0.0
    for facet in vocab:
        pw = (p.weights[facet] + epsilon) / denom
        qw = (q.weights[facet] + epsilon) / denom
        total += pw * math.log(pw / qw)
    return total


def avg_focus_kl(
    reference: FocusProfile, candidate: FocusProfile, epsilon: float = DEFAULT_EPSILON
) -> float:
    """Arithmetic mean of the four quadrant KLs between two profiles."""
    values = [
        kl_divergence(reference.get(pol, kind), candidate.get(pol, kind), epsilon)
        for pol, kind in PROFILE_QUADRANTS
    ]
    return math.fsum(values) / 4.0


# ---------------------------------------------------------------------------
# Facet-pair agreement


Pair = tuple[TargetFacet, AspectFacet]


@dataclass(frozen=True)
class PairSet:
    """Polarity-partitioned multiset of (target, aspect) pairs for one paper."""

    paper_id: str
    strength_pairs: dict[Pair, int] = field(default_factory=dict)
    weakness_pairs: dict[Pair, int] = field(default_factory=dict)

    def __post_init__(self):
        for pairs in (self.strength_pairs, self.weakness_pairs):
            if any(count < 1 for count in pairs.values()):
                raise ValueError("pair counts must be >= 1")

    def pairs(self, polarity_filter: Polarity | None = None) -> Counter:
        merged: Counter = Counter()
        if polarity_filter in (None, Polarity.STRENGTH):
            merged.update(self.strength_pairs)
        if polarity_filter in (None, Polarity.WEAKNESS):
            merged.update(self.weakness_pairs)
        return merged

    def total(self, polarity_filter: Polarity | None = None) -> int:
        return sum(self.pairs(polarity_filter).values())


def build_pair_sets(annotations: Iterable[AnnotatedPoint]) -> list[PairSet]:
    """Group annotations into one PairSet per paper, sorted by paper_id."""
    strengths: dict[str, Counter] = defaultdict(Counter)
    weaknesses: dict[str, Counter] = defaultdict(Counter)
    paper_ids: set[str] = set()
    for annotated in annotations:
        paper_ids.add(annotated.point.paper_id)
        bucket = (
            strengths if annotated.point.polarity is Polarity.STRENGTH else weaknesses
        )
        bucket[annotated.point.paper_id][(annotated.target, annotated.aspect)] += 1
    return [
        PairSet(
            paper_id=paper_id,
            strength_pairs=dict(strengths.get(paper_id, {})),
            weakness_pairs=dict(weaknesses.get(paper_id, {})),
        )
        for paper_id in sorted(paper_ids)
    ]


@dataclass(frozen=True)
class F1Result:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int) -> "F1Result":
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        return cls(precision=precision, recall=recall, f1=f1, tp=tp, fp=fp, fn=fn)

    def to_dict(self) -> dict[str, Any]:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
        }


def _joined(
    reference: Sequence[PairSet], candidate: Sequence[PairSet]
) -> list[tuple[PairSet, PairSet]]:
    ref_by_paper = {ps.paper_id: ps for ps in reference}
    cand_by_paper = {ps.paper_id: ps for ps in candidate}
    if len(ref_by_paper) != len(reference) or len(cand_by_paper) != len(candidate):
        raise ValueError("duplicate paper_id within one side")
    papers = sorted(set(ref_by_paper) | set(cand_by_paper))
    return [
        (ref_by_paper.get(p, PairSet(p)), cand_by_paper.get(p, PairSet(p)))
        for p in papers
    ]


def pair_multiset_f1(
    reference: Sequence[PairSet],
    candidate: Sequence[PairSet],
    polarity_filter: Polarity | None = None,
    collapse_to_set: bool = False,
) -> F1Result:
    """Micro-averaged agreement on (target, aspect) pairs across papers.

    Per paper, tp is the multiset intersection size (min of the two counts
    per pair key); papers present on one side only contribute fp or fn mass.
    ``collapse_to_set`` caps every count at 1 first, for sensitivity analysis.
    """
    tp = fp = fn = 0
    for ref_set, cand_set in _joined(reference, candidate):
        ref_pairs = ref_set.pairs(polarity_filter)
        cand_pairs = cand_set.pairs(polarity_filter)
        if collapse_to_set:
            ref_pairs = Counter(set(ref_pairs))
            cand_pairs = Counter(set(cand_pairs))
        matched = sum(min(ref_pairs[k], cand_pairs[k]) for k in ref_pairs.keys() & cand_pairs.keys())
        tp += matched
        fp += sum(cand_pairs.values()) - matched
        fn += sum(ref_pairs.values()) - matched
    return F1Result.from_counts(tp, fp, fn)


def macro_pair_f1(
    reference: Sequence[PairSet],
    candidate: Sequence[PairSet],
    polarity_filter: Polarity | None = None,
) -> float:
    """Mean of per-paper F1 scores; the secondary aggregation next to micro."""
    scores: list[float] = []
    for ref_set, cand_set in _joined(reference, candidate):
        ref_pairs = ref_set.pairs(polarity_filter)
        cand_pairs = cand_set.pairs(polarity_filter)
        if not ref_pairs and not cand_pairs:
            continue
        matched = sum(min(ref_pairs[k], cand_pairs[k]) for k in ref_pairs.keys() & cand_pairs.keys())
        scores.append(
            F1Result.from_counts(
                matched,
                sum(cand_pairs.values()) - matched,
                sum(ref_pairs.values()) - matched,
            ).f1
        )
    return math.fsum(scores) / len(scores) if scores else 0.0


def per_label_f1(
    reference: Sequence[PairSet],
    candidate: Sequence[PairSet],
    axis: FacetKind,
    polarity_filter: Polarity | None = None,
) -> dict[TargetFacet | AspectFacet, F1Result]:
    """Pair-level matching attributed to one axis.

    Full (target, aspect) pairs are matched exactly as in pair_multiset_f1;
    matched and unmatched mass is then credited to the pair's facet on the
    chosen axis. A pair agreeing on the axis facet but not on the other facet
    therefore counts as both a fp and a fn for that facet, not a tp.
    """
    idx = 0 if axis is FacetKind.TARGET else 1
    tp: Counter = Counter()
    fp: Counter = Counter()
    fn: Counter = Counter()
    for ref_set, cand_set in _joined(reference, candidate):
        ref_pairs = ref_set.pairs(polarity_filter)
        cand_pairs = cand_set.pairs(polarity_filter)
        for key in ref_pairs.keys() | cand_pairs.keys():
            matched = min(ref_pairs[key], cand_pairs[key])
            facet = key[idx]
            tp[facet] += matched
            fp[facet] += cand_pairs[key] - matched
            fn[facet] += ref_pairs[key] - matched
    vocab = tuple(TargetFacet) if axis is FacetKind.TARGET else tuple(AspectFacet)
    return {f: F1Result.from_counts(tp[f], fp[f], fn[f]) for f in vocab}


# ---------------------------------------------------------------------------
# Text similarity


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    # Two-row DP; O(len(a) * len(b)) time, O(len(b)) space.
    previous = [0] * (len(b) + 1)
    for token_a in a:
        current = [0]
        for j, token_b in enumerate(b, start=1):
            if token_a == token_b:
                current.append(previous[j - 1] + 1)
            else:
                current.append(max(previous[j], current[j - 1]))
        previous = current
    return previous[len(b)]


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> float:
    """LCS-based F-measure (beta = 1) over token sequences."""
    if not candidate or not reference:
        raise EmptyTextError("both token sequences must be non-empty")
    lcs = _lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    precision = lcs / len(candidate)
    recall = lcs / len(reference)
    return 2 * precision * recall / (precision + recall)


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_4(candidate: Sequence[str], reference: Sequence[str]) -> float:
    """Geometric mean of clipped 1..4-gram precisions with a brevity penalty.

    A zero (or undefined) precision is replaced by epsilon / max(denominator, 1)
    so short candidates still score, just vanishingly low.
    """
    if not candidate or not reference:
        raise EmptyTextError("both token sequences must be non-empty")
    log_sum = 0.0
    for n in range(1, 5):
        cand_ngrams = _ngram_counts(candidate, n)
        total = max(len(candidate) - n + 1, 0)
        if total > 0:
            ref_ngrams = _ngram_counts(reference, n)
            matched = sum(min(count, ref_ngrams[gram]) for gram, count in cand_ngrams.items())
        else:
            matched = 0
        if matched > 0:
            precision = matched / total
        else:
            precision = BLEU_SMOOTHING_EPSILON / max(total, 1)
        log_sum += math.log(precision)
    brevity = min(1.0, math.exp(1.0 - len(reference) / len(candidate)))
    return brevity * math.exp(log_sum / 4.0)


class EmbeddingBackend(Protocol):
    """Token-embedding provider; model hosting stays outside this package."""

    def embed_tokens(self, tokens: Sequence[str]) -> np.ndarray: ...


def greedy_embed_score(
    cand_tokens: Sequence[str],
    cand_vectors: np.ndarray,
    ref_tokens: Sequence[str],
    ref_vectors: np.ndarray,
    idf: Mapping[str, float] | None = None,
) -> tuple[float, float, float]:
    """Greedy cosine matching with idf weighting; pure math, no inference.

    Recall averages, over reference tokens, each token's best similarity to
    any candidate token; precision is the symmetric quantity. Tokens missing
    from a non-empty idf map weigh 1.0; an empty/None map means uniform.
    """
    if len(cand_tokens) == 0 or len(ref_tokens) == 0:
        raise EmptyTextError("both sides need at least one token")
    cand = np.asarray(cand_vectors, dtype=float)
    ref = np.asarray(ref_vectors, dtype=float)
    if cand.shape[0] != len(cand_tokens) or ref.shape[0] != len(ref_tokens):
        raise ValueError("one vector per token required")
    cand_norms = np.linalg.norm(cand, axis=1)
    ref_norms = np.linalg.norm(ref, axis=1)
    if np.any(cand_norms == 0) or np.any(ref_norms == 0):
        raise ValueError("zero vectors are not embeddable")
    if not idf:
        if idf is not None:
            logger.info("empty idf map; assuming uniform weights")
        idf = {}
        weight = lambda token: 1.0  # noqa: E731
    else:
        weight = lambda token: idf.get(token, 1.0)  # noqa: E731

    similarity = (cand / cand_norms[:, None]) @ (ref / ref_norms[:, None]).T
    ref_weights = np.array([weight(t) for t in ref_tokens])
    cand_weights = np.array([weight(t) for t in cand_tokens])
    recall = float(similarity.max(axis=0) @ ref_weights / ref_weights.sum())
    precision = float(similarity.max(axis=1) @ cand_weights / cand_weights.sum())
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def idf_weights(documents: Sequence[Sequence[str]]) -> dict[str, float]:
    """Smoothed inverse document frequency: log((N + 1) / (df + 1))."""
    df: Counter = Counter()
    for tokens in documents:
        df.update(set(tokens))
    n = len(documents)
    return {token: math.log((n + 1) / (count + 1)) for token, count in df.items()}


def embed_review_score(
    candidate_text: str,
    reference_text: str,
    backend: EmbeddingBackend | None,
    idf: Mapping[str, float] | None = None,
) -> tuple[float, float, float]:
    """Tokenize, embed through the configured backend, and greedy-match."""
    if backend is None:
        raise BackendUnavailableError("no embedding backend configured")
    cand_tokens = tokenize(candidate_text)
    ref_tokens = tokenize(reference_text)
    if not cand_tokens or not ref_tokens:
        raise EmptyTextError("no tokens on one side")
    return greedy_embed_score(
        cand_tokens,
        backend.embed_tokens(cand_tokens),
        ref_tokens,
        backend.embed_tokens(ref_tokens),
        idf,
    )


# ---------------------------------------------------------------------------
# Count statistics


POOLED_MODEL_GROUP = "llm_pooled"


@dataclass
class CountStats:
    n_reviews: int
    mean_strengths: float
    mean_weaknesses: float
    mean_total: float
    histogram: dict[int, int]
    mean_length_chars: float | None = None
    mean_length_tokens: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_reviews": self.n_reviews,
            "mean_strengths": self.mean_strengths,
            "mean_weaknesses": self.mean_weaknesses,
            "mean_total": self.mean_total,
            "histogram": {str(k): v for k, v in sorted(self.histogram.items())},
            "mean_length_chars": self.mean_length_chars,
            "mean_length_tokens": self.mean_length_tokens,
        }


def count_stats(
    points: Sequence[ReviewPoint],
    review_texts: Mapping[tuple[str, str], str] | None = None,
) -> dict[str, CountStats]:
    """Per-group point counts; one review is one (group, paper) cell.

    Model-origin reviews additionally pool into POOLED_MODEL_GROUP. Length
    statistics (characters and whitespace tokens) come from review_texts,
    keyed by (group_id, paper_id); groups without texts report None.
    """
    per_review: dict[tuple[str, str], Counter] = defaultdict(Counter)
    for point in points:
        per_review[(point.origin.group_id, point.paper_id)][point.polarity] += 1

    # Review keys keep their original group so pooled lookups still find texts.
    grouped: dict[str, list[tuple[tuple[str, str], Counter]]] = defaultdict(list)
    for key, counts in per_review.items():
        grouped[key[0]].append((key, counts))
        if key[0] != "human":
            grouped[POOLED_MODEL_GROUP].append((key, counts))

    stats: dict[str, CountStats] = {}
    for group_id, reviews in grouped.items():
        totals = [c[Polarity.STRENGTH] + c[Polarity.WEAKNESS] for _, c in reviews]
        n = len(reviews)
        histogram: dict[int, int] = {}
        for t in totals:
            histogram[t] = histogram.get(t, 0) + 1
        lengths_chars: list[int] = []
        lengths_tokens: list[int] = []
        if review_texts:
            for key, _ in reviews:
                text = review_texts.get(key)
                if text is not None:
                    lengths_chars.append(len(text))
                    lengths_tokens.append(len(text.split()))
        stats[group_id] = CountStats(
            n_reviews=n,
            mean_strengths=math.fsum(c[Polarity.STRENGTH] for _, c in reviews) / n,
            mean_weaknesses=math.fsum(c[Polarity.WEAKNESS] for _, c in reviews) / n,
            mean_total=math.fsum(totals) / n,
            histogram=histogram,
            mean_length_chars=(math.fsum(lengths_chars) / len(lengths_chars)) if lengths_chars else None,
            mean_length_tokens=(math.fsum(lengths_tokens) / len(lengths_tokens)) if lengths_tokens else None,
        )
    return stats
