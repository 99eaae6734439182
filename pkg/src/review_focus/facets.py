"""Closed facet vocabularies and the parser that maps free text onto them.

Two fixed vocabularies describe every review point: the *target* (what part
of the submission is being discussed) and the *aspect* (which evaluation
criterion is applied). Both are closed: anything outside them is an error,
never a silent coercion.
"""

from __future__ import annotations

import json
import re
import unicodedata
from enum import Enum
from importlib import resources


class TargetFacet(str, Enum):
    """What a review point talks about."""

    PROBLEM = "problem"
    PRIOR_RESEARCH = "prior_research"
    METHOD = "method"
    THEORY = "theory"
    EXPERIMENT = "experiment"
    CONCLUSION = "conclusion"
    PAPER = "paper"


class AspectFacet(str, Enum):
    """Which criterion a review point applies."""

    IMPACT = "impact"
    NOVELTY = "novelty"
    CLARITY = "clarity"
    VALIDITY = "validity"
    NOT_SPECIFIC = "not_specific"


class Polarity(str, Enum):
    STRENGTH = "strength"
    WEAKNESS = "weakness"


class Decision(str, Enum):
    ACCEPTED = "accepted"
    REJECTED = "rejected"
    UNKNOWN = "unknown"


class FacetKind(str, Enum):
    TARGET = "target"
    ASPECT = "aspect"


FACETS_BY_KIND: dict[FacetKind, type[Enum]] = {
    FacetKind.TARGET: TargetFacet,
    FacetKind.ASPECT: AspectFacet,
}


class UnknownLabelError(ValueError):
    """Raised when text cannot be resolved to any facet in the vocabulary."""

    def __init__(self, kind: FacetKind, raw: str):
        self.kind = kind
        self.raw = raw
        super().__init__(f"unknown {kind.value} label: {raw!r}")


def _normalize(text: str) -> str:
    # Canonical comparison form: casefold, strip accents/punct, collapse
    # separators so "Prior-Research", "prior_research" and " prior research. "
    # all compare equal.
    text = unicodedata.normalize("NFKD", text).casefold()
    text = re.sub(r"[_\-]+", " ", text)
    text = re.sub(r"[^\w\s]", "", text)
    return re.sub(r"\s+", " ", text).strip()


def _load_synonyms() -> dict[FacetKind, dict[str, str]]:
    payload = json.loads(
        resources.files("review_focus.data").joinpath("facet_synonyms.json").read_text("utf-8")
    )
    return {
        FacetKind.TARGET: {_normalize(k): v for k, v in payload["target"].items()},
        FacetKind.ASPECT: {_normalize(k): v for k, v in payload["aspect"].items()},
    }


_SYNONYMS = _load_synonyms()

_CANONICAL = {
    kind: {_normalize(f.value): f for f in enum_cls} for kind, enum_cls in FACETS_BY_KIND.items()
}


def format_facet(facet: TargetFacet | AspectFacet) -> str:
    """Canonical lowercase snake identifier for a facet."""
    return facet.value


def parse_facet(kind: FacetKind, raw: str) -> TargetFacet | AspectFacet:
    """Resolve arbitrary annotator text to a facet of the given kind.

    Matching is case-, whitespace- and punctuation-insensitive against the
    canonical names plus the fixed synonym table shipped with the package.
    Raises UnknownLabelError when nothing matches; callers retry or discard.
    """
    normalized = _normalize(raw)
    enum_cls = FACETS_BY_KIND[kind]
    hit = _CANONICAL[kind].get(normalized)
    if hit is not None:
        return hit
    synonym = _SYNONYMS[kind].get(normalized)
    if synonym is not None:
        return enum_cls(synonym)
    raise UnknownLabelError(kind, raw)


def parse_target(raw: str) -> TargetFacet:
    return parse_facet(FacetKind.TARGET, raw)  # type: ignore[return-value]


def parse_aspect(raw: str) -> AspectFacet:
    return parse_facet(FacetKind.ASPECT, raw)  # type: ignore[return-value]
