"""Load review exports, filter and sample papers, track corpus provenance.

Two export schemas are accepted: ``generic`` (the documented flat layout
below) and ``openreview_v1``, whose field names vary by venue year and are
resolved through a key map that lives in configuration, not code.

Generic layout, one JSON object per line::

    {"paper_id": "...", "title": "...", "venue_year": 2023,
     "decision": "Reject", "body_text": "...", "meta_review": "...",
     "reviews": [{"reviewer_id": "r1", "text": "..."}]}
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from importlib import resources
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence

from .facets import Decision
from .records import PaperRecord, ReviewBundle

logger = logging.getLogger(__name__)


class MalformedRecordError(ValueError):
    def __init__(self, line_no: int, reason: str):
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"line {line_no}: {reason}")


class InvalidFractionError(ValueError):
    pass


@dataclass
class ExportLoad:
    """load_export output plus the bookkeeping the manifest records."""

    papers: list[PaperRecord]
    bundles: list[ReviewBundle]
    malformed_lines: list[int] = field(default_factory=list)
    missing_meta_review: list[str] = field(default_factory=list)

    def __iter__(self) -> Iterator:
        # Unpacks as (papers, bundles) for callers that only need the data.
        return iter((self.papers, self.bundles))


def normalize_decision(text: str | None) -> Decision:
    if not text:
        return Decision.UNKNOWN
    lowered = text.lower()
    if "reject" in lowered:
        return Decision.REJECTED
    if "accept" in lowered:
        return Decision.ACCEPTED
    return Decision.UNKNOWN


def _get_path(record: Mapping[str, Any], dotted: str) -> Any:
    value: Any = record
    for part in dotted.split("."):
        if not isinstance(value, Mapping) or part not in value:
            return None
        value = value[part]
    return value


def default_key_map() -> dict[str, Any]:
    return json.loads(
        resources.files("review_focus.data").joinpath("openreview_keys.json").read_text("utf-8")
    )


def _keys_for_year(key_map: Mapping[str, Any], year: Any) -> dict[str, str]:
    keys = dict(key_map["default"])
    overrides = key_map.get("by_year", {}).get(str(year))
    if overrides:
        keys.update(overrides)
    return keys


def _parse_openreview_line(raw: Mapping[str, Any], key_map: Mapping[str, Any]) -> dict[str, Any]:
    year = _get_path(raw, key_map["default"].get("venue_year", "year"))
    keys = _keys_for_year(key_map, year)
    reviews_raw = _get_path(raw, keys["reviews"]) or []
    reviews = []
    for i, item in enumerate(reviews_raw):
        reviewer_id = _get_path(item, keys["reviewer_id"]) or f"reviewer_{i + 1}"
        reviews.append({"reviewer_id": reviewer_id, "text": _get_path(item, keys["review_text"]) or ""})
    return {
        "paper_id": _get_path(raw, keys["paper_id"]),
        "title": _get_path(raw, keys["title"]) or "",
        "venue_year": year,
        "decision": _get_path(raw, keys["decision"]),
        "body_text": _get_path(raw, keys["body_text"]),
        "meta_review": _get_path(raw, keys["meta_review"]),
        "reviews": reviews,
    }


def load_export(
    path: Path | str,
    schema_hint: str = "generic",
    strict: bool = False,
    key_map: Mapping[str, Any] | None = None,
) -> ExportLoad:
    """Parse an export file into one PaperRecord and one ReviewBundle per submission.

    Unparseable lines raise MalformedRecordError under ``strict``, otherwise
    they are skipped and counted. A submission without a meta-review keeps its
    PaperRecord (usable for review generation) but gets no ReviewBundle, so it
    is excluded from expert extraction.
    """
    if schema_hint not in ("generic", "openreview_v1"):
        raise ValueError(f"unknown schema_hint: {schema_hint!r}")
    if key_map is None and schema_hint == "openreview_v1":
        key_map = default_key_map()

    result = ExportLoad(papers=[], bundles=[])
    seen_ids: set[str] = set()
    with Path(path).open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
                if schema_hint == "openreview_v1":
                    flat = _parse_openreview_line(raw, key_map)  # type: ignore[arg-type]
                else:
                    flat = raw
                paper, bundle = _build_records(flat)
            except MalformedRecordError:
                if strict:
                    raise
                result.malformed_lines.append(line_no)
                continue
            except (ValueError, KeyError, TypeError) as exc:
                if strict:
                    raise MalformedRecordError(line_no, str(exc)) from exc
                result.malformed_lines.append(line_no)
                continue
            if paper.paper_id in seen_ids:
                if strict:
                    raise MalformedRecordError(line_no, f"duplicate paper_id {paper.paper_id}")
                result.malformed_lines.append(line_no)
                continue
            seen_ids.add(paper.paper_id)
            result.papers.append(paper)
            if bundle is None:
                result.missing_meta_review.append(paper.paper_id)
            else:
                result.bundles.append(bundle)
    if result.malformed_lines:
        logger.warning(
            "%s: skipped %d malformed line(s)", path, len(result.malformed_lines)
        )
    if result.missing_meta_review:
        logger.info(
            "%s: %d paper(s) lack a meta-review; excluded from expert extraction",
            path,
            len(result.missing_meta_review),
        )
    return result


def _build_records(flat: Mapping[str, Any]) -> tuple[PaperRecord, ReviewBundle | None]:
    paper_id = flat.get("paper_id")
    if not paper_id or not isinstance(paper_id, str):
        raise MalformedRecordError(0, "missing paper_id")
    body_text = flat.get("body_text")
    if not body_text or not isinstance(body_text, str):
        raise MalformedRecordError(0, f"{paper_id}: missing body_text")
    try:
        venue_year = int(flat.get("venue_year") or 0)
    except (TypeError, ValueError):
        venue_year = 0
    paper = PaperRecord(
        paper_id=paper_id,
        title=flat.get("title") or "",
        venue_year=venue_year,
        decision=normalize_decision(flat.get("decision")),
        body_text=body_text,
        source_meta={"decision_text": flat.get("decision") or ""},
    )
    meta_review = flat.get("meta_review")
    if not meta_review:
        return paper, None
    reviews = []
    for i, item in enumerate(flat.get("reviews") or []):
        text = item.get("text", "")
        if not text:
            continue
        reviews.append((item.get("reviewer_id") or f"reviewer_{i + 1}", text))
    bundle = ReviewBundle(
        paper_id=paper_id,
        meta_review=meta_review,
        individual_reviews=tuple(reviews),
    )
    return paper, bundle


def filter_decision(
    papers: Sequence[PaperRecord], keep: Decision | Sequence[Decision]
) -> list[PaperRecord]:
    """Order-preserving subset of papers whose decision matches the filter."""
    wanted = {keep} if isinstance(keep, Decision) else set(keep)
    return [p for p in papers if p.decision in wanted]


def filter_years(
    papers: Sequence[PaperRecord], first: int | None, last: int | None
) -> list[PaperRecord]:
    lo = first if first is not None else -1
    hi = last if last is not None else 10**9
    return [p for p in papers if lo <= p.venue_year <= hi]


def sample(papers: Sequence[PaperRecord], fraction: float, seed: int) -> list[PaperRecord]:
    """Deterministic sample without replacement: seeded shuffle, prefix, sort.

    Output size is round-half-up of fraction * n, so a 7.5% draw from 9,139
    papers yields exactly 685.
    """
    if not 0 < fraction <= 1:
        raise InvalidFractionError(f"fraction must be in (0, 1], got {fraction}")
    k = int(
        (Decimal(len(papers)) * Decimal(str(fraction))).quantize(
            Decimal("1"), rounding=ROUND_HALF_UP
        )
    )
    shuffled = list(papers)
    random.Random(seed).shuffle(shuffled)
    return sorted(shuffled[:k], key=lambda p: p.paper_id)


@dataclass
class CorpusManifest:
    """Provenance for one corpus: filters, sampling parameters, stage counts."""

    source_paths: list[str] = field(default_factory=list)
    venue_year_range: tuple[int | None, int | None] = (None, None)
    decision_filter: list[str] = field(default_factory=list)
    sample_fraction: float = 1.0
    sample_seed: int = 0
    counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.sample_fraction <= 1:
            raise InvalidFractionError(
                f"sample_fraction must be in (0, 1], got {self.sample_fraction}"
            )

    def to_dict(self) -> dict[str, Any]:
        return {
            "source_paths": list(self.source_paths),
            "venue_year_range": list(self.venue_year_range),
            "decision_filter": list(self.decision_filter),
            "sample_fraction": self.sample_fraction,
            "sample_seed": self.sample_seed,
            "counts": dict(self.counts),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CorpusManifest":
        lo, hi = data.get("venue_year_range", [None, None])
        return cls(
            source_paths=list(data.get("source_paths", [])),
            venue_year_range=(lo, hi),
            decision_filter=list(data.get("decision_filter", [])),
            sample_fraction=data.get("sample_fraction", 1.0),
            sample_seed=data.get("sample_seed", 0),
            counts=dict(data.get("counts", {})),
        )
