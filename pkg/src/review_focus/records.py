"""Core review data types and their JSON-stable serialization.

Every pipeline stage persists these as line-delimited JSON with an explicit
schema_version, so stage files written by one run are exact inputs for the
next. All types are immutable values; to_dict/from_dict are exact inverses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping

from .facets import AspectFacet, Decision, FacetKind, Polarity, TargetFacet

SCHEMA_VERSION = 1

WEIGHT_SUM_TOLERANCE = 1e-9


@dataclass(frozen=True)
class Origin:
    """Who produced a review point: a human expert or a named model."""

    kind: str  # "expert" or "model"
    model_id: str | None = None

    def __post_init__(self):
        if self.kind not in ("expert", "model"):
            raise ValueError(f"bad origin kind: {self.kind!r}")
        if self.kind == "model" and not self.model_id:
            raise ValueError("model origin requires a model_id")
        if self.kind == "expert" and self.model_id is not None:
            raise ValueError("expert origin carries no model_id")

    @classmethod
    def expert(cls) -> "Origin":
        return cls(kind="expert")

    @classmethod
    def model(cls, model_id: str) -> "Origin":
        return cls(kind="model", model_id=model_id)

    @property
    def group_id(self) -> str:
        """Reviewer-group key used throughout reporting."""
        return "human" if self.kind == "expert" else self.model_id  # type: ignore[return-value]

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind}
        if self.model_id is not None:
            out["model_id"] = self.model_id
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Origin":
        return cls(kind=data["kind"], model_id=data.get("model_id"))


@dataclass(frozen=True)
class PaperRecord:
    paper_id: str
    title: str
    venue_year: int
    decision: Decision
    body_text: str
    source_meta: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "paper_id": self.paper_id,
            "title": self.title,
            "venue_year": self.venue_year,
            "decision": self.decision.value,
            "body_text": self.body_text,
            "source_meta": dict(self.source_meta),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PaperRecord":
        return cls(
            paper_id=data["paper_id"],
            title=data["title"],
            venue_year=int(data["venue_year"]),
            decision=Decision(data["decision"]),
            body_text=data["body_text"],
            source_meta=dict(data.get("source_meta", {})),
        )


@dataclass(frozen=True)
class ReviewBundle:
    paper_id: str
    meta_review: str
    individual_reviews: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        reviewer_ids = [rid for rid, _ in self.individual_reviews]
        if len(reviewer_ids) != len(set(reviewer_ids)):
            raise ValueError(f"duplicate reviewer_id in bundle {self.paper_id}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "paper_id": self.paper_id,
            "meta_review": self.meta_review,
            "individual_reviews": [[rid, text] for rid, text in self.individual_reviews],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ReviewBundle":
        return cls(
            paper_id=data["paper_id"],
            meta_review=data["meta_review"],
            individual_reviews=tuple((rid, text) for rid, text in data["individual_reviews"]),
        )


@dataclass(frozen=True)
class ReviewPoint:
    """One self-contained strength or weakness attributed to a paper."""

    point_id: str
    paper_id: str
    polarity: Polarity
    body: str
    origin: Origin
    header: str | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.body:
            raise ValueError(f"review point {self.point_id} has empty body")

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "point_id": self.point_id,
            "paper_id": self.paper_id,
            "polarity": self.polarity.value,
            "header": self.header,
            "body": self.body,
            "origin": self.origin.to_dict(),
            "meta": dict(self.meta),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ReviewPoint":
        return cls(
            point_id=data["point_id"],
            paper_id=data["paper_id"],
            polarity=Polarity(data["polarity"]),
            header=data.get("header"),
            body=data["body"],
            origin=Origin.from_dict(data["origin"]),
            meta=dict(data.get("meta", {})),
        )


@dataclass(frozen=True)
class AnnotatedPoint:
    """A review point plus its resolved (target, aspect) pair."""

    point: ReviewPoint
    target: TargetFacet
    aspect: AspectFacet
    annotator_id: str
    raw_annotator_output: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "point": self.point.to_dict(),
            "target": self.target.value,
            "aspect": self.aspect.value,
            "annotator_id": self.annotator_id,
            "raw_annotator_output": self.raw_annotator_output,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AnnotatedPoint":
        return cls(
            point=ReviewPoint.from_dict(data["point"]),
            target=TargetFacet(data["target"]),
            aspect=AspectFacet(data["aspect"]),
            annotator_id=data["annotator_id"],
            raw_annotator_output=data.get("raw_annotator_output", ""),
        )


def _facet_vocab(kind: FacetKind) -> tuple:
    return tuple(TargetFacet) if kind is FacetKind.TARGET else tuple(AspectFacet)


@dataclass(frozen=True)
class FocusDistribution:
    """Normalized relative frequency of review points over one facet vocabulary.

    Keys always cover the full vocabulary; absent facets carry weight 0.
    A zero-support distribution (all weights 0) is representable so that
    aggregation stays total, but metric operations reject it.
    """

    facet_kind: FacetKind
    polarity: Polarity
    weights: dict[TargetFacet | AspectFacet, float]
    support: int

    def __post_init__(self):
        vocab = _facet_vocab(self.facet_kind)
        if set(self.weights) != set(vocab):
            raise ValueError(f"weights must cover the full {self.facet_kind.value} vocabulary")
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("negative weight")
        total = math.fsum(self.weights.values())
        if self.support > 0:
            if abs(total - 1.0) > WEIGHT_SUM_TOLERANCE:
                raise ValueError(f"weights sum to {total}, expected 1")
        elif total != 0.0:
            raise ValueError("zero-support distribution must have all-zero weights")

    @classmethod
    def from_counts(
        cls,
        facet_kind: FacetKind,
        polarity: Polarity,
        counts: Mapping[TargetFacet | AspectFacet, int],
    ) -> "FocusDistribution":
        vocab = _facet_vocab(facet_kind)
        total = sum(counts.get(f, 0) for f in vocab)
        if total == 0:
            return cls.zero(facet_kind, polarity)
        weights = {f: counts.get(f, 0) / total for f in vocab}
        return cls(facet_kind=facet_kind, polarity=polarity, weights=weights, support=total)

    @classmethod
    def zero(cls, facet_kind: FacetKind, polarity: Polarity) -> "FocusDistribution":
        vocab = _facet_vocab(facet_kind)
        return cls(
            facet_kind=facet_kind,
            polarity=polarity,
            weights={f: 0.0 for f in vocab},
            support=0,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "facet_kind": self.facet_kind.value,
            "polarity": self.polarity.value,
            "weights": {f.value: w for f, w in self.weights.items()},
            "support": self.support,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "FocusDistribution":
        kind = FacetKind(data["facet_kind"])
        enum_cls = TargetFacet if kind is FacetKind.TARGET else AspectFacet
        return cls(
            facet_kind=kind,
            polarity=Polarity(data["polarity"]),
            weights={enum_cls(k): float(w) for k, w in data["weights"].items()},
            support=int(data["support"]),
        )


PROFILE_QUADRANTS: tuple[tuple[Polarity, FacetKind], ...] = (
    (Polarity.STRENGTH, FacetKind.TARGET),
    (Polarity.WEAKNESS, FacetKind.TARGET),
    (Polarity.STRENGTH, FacetKind.ASPECT),
    (Polarity.WEAKNESS, FacetKind.ASPECT),
)


@dataclass(frozen=True)
class FocusProfile:
    """The four focus distributions of one reviewer group."""

    group_id: str
    distributions: tuple[FocusDistribution, ...]

    def __post_init__(self):
        keys = [(d.polarity, d.facet_kind) for d in self.distributions]
        if sorted(k for k in keys) != sorted(PROFILE_QUADRANTS):
            raise ValueError("profile needs exactly one distribution per (polarity, kind)")

    def get(self, polarity: Polarity, facet_kind: FacetKind) -> FocusDistribution:
        for d in self.distributions:
            if d.polarity is polarity and d.facet_kind is facet_kind:
                return d
        raise KeyError((polarity, facet_kind))

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "group_id": self.group_id,
            "distributions": [d.to_dict() for d in self.distributions],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "FocusProfile":
        return cls(
            group_id=data["group_id"],
            distributions=tuple(FocusDistribution.from_dict(d) for d in data["distributions"]),
        )
