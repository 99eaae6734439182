"""Produce review points: the expert three-stage chain and model review generation.

Expert points come from a prompt chain over the review bundle: pull the
decisive strengths/weaknesses out of the meta-review, augment each with the
matching detail from individual reviews, then paraphrase every item into a
self-contained statement. Model points come from a single generation prompt
whose output carries a machine-readable block; a markdown fallback parser
covers models that ignore it.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Any, Mapping, Sequence

from .facets import Polarity
from .gateway import ChatRequest, LLMGateway
from .records import SCHEMA_VERSION, Origin, PaperRecord, ReviewBundle, ReviewPoint

logger = logging.getLogger(__name__)

STAGE_ORDER = ("meta_extracted", "augmented", "paraphrased")

STRICT_RETRY_SUFFIX = (
    "\n\nYour previous answer could not be used. Respond with exactly one fenced JSON"
    " block in the requested form and absolutely nothing else."
)

SELF_REFERENCE_RE = re.compile(r"reviewer\s*\d|meta-?review", re.IGNORECASE)


class EmptyMetaReviewError(ValueError):
    pass


class ParseFailedError(RuntimeError):
    def __init__(self, raw: str, detail: str = "unparseable model output"):
        self.raw = raw
        super().__init__(detail)


class CardinalityDriftError(RuntimeError):
    def __init__(self, expected: tuple[int, int], got: tuple[int, int]):
        self.expected = expected
        self.got = got
        super().__init__(
            f"expected {expected[0]} strengths / {expected[1]} weaknesses, "
            f"got {got[0]} / {got[1]}"
        )


@dataclass(frozen=True)
class ModelSpec:
    """Everything needed to address one model behind one endpoint."""

    endpoint_id: str
    model_id: str
    temperature: float = 0.0
    max_output_tokens: int = 2048

    def request(self, prompt: str, response_hint: str = "free_text") -> ChatRequest:
        return ChatRequest(
            endpoint_id=self.endpoint_id,
            model_id=self.model_id,
            messages=(("user", prompt),),
            temperature=self.temperature,
            max_output_tokens=self.max_output_tokens,
            response_hint=response_hint,
        )


# ---------------------------------------------------------------------------
# Prompt templates


PROMPT_NAMES = (
    "meta_extract",
    "augment",
    "paraphrase",
    "generate_review",
    "annotate_target_strength",
    "annotate_target_weakness",
    "annotate_aspect_strength",
    "annotate_aspect_weakness",
)


def load_prompt(name: str) -> str:
    if name not in PROMPT_NAMES:
        raise KeyError(f"unknown prompt template: {name}")
    return resources.files("review_focus.prompts").joinpath(f"{name}.txt").read_text("utf-8")


def prompt_manifest_hash() -> str:
    """Hash over every shipped template; recorded into chain outputs."""
    digest = hashlib.sha256()
    for name in PROMPT_NAMES:
        digest.update(name.encode("utf-8"))
        digest.update(b"\x00")
        digest.update(load_prompt(name).encode("utf-8"))
        digest.update(b"\x00")
    return digest.hexdigest()


def render_prompt(name: str, **params: str) -> str:
    return load_prompt(name).format(**params)


# ---------------------------------------------------------------------------
# Structured output parsing


_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL | re.IGNORECASE)


def _fenced_json(text: str) -> Any | None:
    candidates = [m.group(1).strip() for m in _FENCE_RE.finditer(text)]
    stripped = text.strip()
    if stripped.startswith("{"):
        candidates.append(stripped)
    for candidate in candidates:
        try:
            return json.loads(candidate)
        except json.JSONDecodeError:
            continue
    return None


def _item_text(item: Any) -> tuple[str | None, str]:
    # Items may be plain strings or {"header": ..., "body": ...} objects.
    if isinstance(item, str):
        return None, item.strip()
    if isinstance(item, Mapping):
        header = item.get("header")
        body = str(item.get("body", "")).strip()
        if not body and header:
            body = str(header).strip()
        return (str(header).strip() if header else None), body
    return None, str(item).strip()


def _parse_point_lists(raw: str) -> tuple[list[tuple[str | None, str]], list[tuple[str | None, str]]] | None:
    data = _fenced_json(raw)
    if not isinstance(data, Mapping):
        return None
    strengths = data.get("strengths")
    weaknesses = data.get("weaknesses")
    if not isinstance(strengths, list) or not isinstance(weaknesses, list):
        return None
    out_s = [(h, b) for h, b in map(_item_text, strengths) if b]
    out_w = [(h, b) for h, b in map(_item_text, weaknesses) if b]
    return out_s, out_w


# ---------------------------------------------------------------------------
# Expert chain


@dataclass(frozen=True)
class DraftPoint:
    polarity: Polarity
    text: str
    stage: str

    def __post_init__(self):
        if not self.text:
            raise ValueError("draft point has empty text")
        if self.stage not in STAGE_ORDER:
            raise ValueError(f"unknown stage {self.stage!r}")


def _require_stage(drafts: Sequence[DraftPoint], stage: str) -> None:
    for draft in drafts:
        if draft.stage != stage:
            raise ValueError(f"expected stage {stage!r}, found {draft.stage!r}")


def _format_points(drafts: Sequence[DraftPoint]) -> str:
    strengths = [d.text for d in drafts if d.polarity is Polarity.STRENGTH]
    weaknesses = [d.text for d in drafts if d.polarity is Polarity.WEAKNESS]
    lines = ["Strengths:"]
    lines += [f"{i + 1}. {text}" for i, text in enumerate(strengths)] or ["(none)"]
    lines.append("Weaknesses:")
    lines += [f"{i + 1}. {text}" for i, text in enumerate(weaknesses)] or ["(none)"]
    return "\n".join(lines)


def _format_reviews(reviews: Sequence[tuple[str, str]]) -> str:
    blocks = [f"[{reviewer_id}]\n{text}" for reviewer_id, text in reviews]
    return "\n\n".join(blocks)


def _chain_call(
    gateway: LLMGateway,
    model: ModelSpec,
    prompt: str,
    expected: tuple[int, int] | None,
) -> tuple[list[tuple[str | None, str]], list[tuple[str | None, str]]]:
    """One chain stage with a single stricter retry on bad output.

    ``expected`` is the (strengths, weaknesses) cardinality contract; None
    skips the check (stage 1 discovers the counts).
    """
    raw = gateway.complete(model.request(prompt, "structured")).text
    lists = _parse_point_lists(raw)
    if lists is not None and (expected is None or (len(lists[0]), len(lists[1])) == expected):
        return lists
    raw = gateway.complete(model.request(prompt + STRICT_RETRY_SUFFIX, "structured")).text
    retried = _parse_point_lists(raw)
    if retried is None:
        raise ParseFailedError(raw)
    if expected is not None and (len(retried[0]), len(retried[1])) != expected:
        raise CardinalityDriftError(expected, (len(retried[0]), len(retried[1])))
    return retried


def extract_meta_points(
    meta_review: str, gateway: LLMGateway, model: ModelSpec
) -> list[DraftPoint]:
    """Stage 1: pull polarity-tagged points out of the meta-review."""
    if not meta_review.strip():
        raise EmptyMetaReviewError("meta-review is empty")
    prompt = render_prompt("meta_extract", meta_review=meta_review)
    strengths, weaknesses = _chain_call(gateway, model, prompt, expected=None)
    return [
        DraftPoint(Polarity.STRENGTH, body, "meta_extracted") for _, body in strengths
    ] + [DraftPoint(Polarity.WEAKNESS, body, "meta_extracted") for _, body in weaknesses]


def augment_points(
    drafts: Sequence[DraftPoint],
    reviews: Sequence[tuple[str, str]],
    gateway: LLMGateway,
    model: ModelSpec,
) -> list[DraftPoint]:
    """Stage 2: fold individual-review detail into each extracted point."""
    _require_stage(drafts, "meta_extracted")
    if not drafts:
        return []
    if not reviews:
        logger.warning("no individual reviews available; passing %d draft(s) through", len(drafts))
        return [replace(d, stage="augmented") for d in drafts]
    expected = (
        sum(1 for d in drafts if d.polarity is Polarity.STRENGTH),
        sum(1 for d in drafts if d.polarity is Polarity.WEAKNESS),
    )
    prompt = render_prompt(
        "augment",
        points=_format_points(drafts),
        individual_reviews=_format_reviews(reviews),
    )
    strengths, weaknesses = _chain_call(gateway, model, prompt, expected)
    return _realign(drafts, strengths, weaknesses, "augmented")


def _realign(
    drafts: Sequence[DraftPoint],
    strengths: list[tuple[str | None, str]],
    weaknesses: list[tuple[str | None, str]],
    stage: str,
) -> list[DraftPoint]:
    # Rebuild the input order so polarity is preserved per position.
    out: list[DraftPoint] = []
    next_s, next_w = 0, 0
    for draft in drafts:
        if draft.polarity is Polarity.STRENGTH:
            _, body = strengths[next_s]
            next_s += 1
        else:
            _, body = weaknesses[next_w]
            next_w += 1
        out.append(DraftPoint(draft.polarity, body, stage))
    return out


def paraphrase_points(
    drafts: Sequence[DraftPoint],
    gateway: LLMGateway,
    model: ModelSpec,
    paper_id: str,
) -> list[ReviewPoint]:
    """Stage 3: emit final self-contained expert points with fresh ids."""
    _require_stage(drafts, "augmented")
    if not drafts:
        return []
    expected = (
        sum(1 for d in drafts if d.polarity is Polarity.STRENGTH),
        sum(1 for d in drafts if d.polarity is Polarity.WEAKNESS),
    )
    prompt = render_prompt("paraphrase", points=_format_points(drafts))
    strengths, weaknesses = _chain_call(gateway, model, prompt, expected)
    aligned = _realign(drafts, strengths, weaknesses, "paraphrased")
    manifest = prompt_manifest_hash()
    points: list[ReviewPoint] = []
    counters = {Polarity.STRENGTH: 0, Polarity.WEAKNESS: 0}
    for draft in aligned:
        index = counters[draft.polarity]
        counters[draft.polarity] += 1
        points.append(
            ReviewPoint(
                point_id=f"{paper_id}::expert::{draft.polarity.value}::{index:03d}",
                paper_id=paper_id,
                polarity=draft.polarity,
                body=draft.text,
                origin=Origin.expert(),
                meta={"prompt_manifest": manifest},
            )
        )
    return points


def screen_self_references(points: Sequence[ReviewPoint]) -> list[ReviewPoint]:
    """Points still mentioning reviewers or the meta-review after stage 3."""
    return [p for p in points if SELF_REFERENCE_RE.search(p.body)]


def run_expert_chain(
    bundle: ReviewBundle, gateway: LLMGateway, model: ModelSpec
) -> list[ReviewPoint]:
    """Full stage 1-3 chain for one paper; stage errors propagate to the caller."""
    drafts = extract_meta_points(bundle.meta_review, gateway, model)
    augmented = augment_points(drafts, bundle.individual_reviews, gateway, model)
    points = paraphrase_points(augmented, gateway, model, bundle.paper_id)
    leaking = screen_self_references(points)
    if leaking:
        logger.warning(
            "%s: %d point(s) still reference the review process", bundle.paper_id, len(leaking)
        )
    return points


# ---------------------------------------------------------------------------
# Model review generation


@dataclass(frozen=True)
class GeneratedReview:
    paper_id: str
    model_id: str
    raw_text: str
    parsed: tuple[ReviewPoint, ...] = ()
    parse_mode: str | None = None  # "structured" | "fallback_markdown" | None when failed
    parse_failed: bool = False
    source_meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.parse_failed and not self.parsed:
            raise ValueError("parsed may be empty only when parse_failed is set")

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "paper_id": self.paper_id,
            "model_id": self.model_id,
            "raw_text": self.raw_text,
            "parsed": [p.to_dict() for p in self.parsed],
            "parse_mode": self.parse_mode,
            "parse_failed": self.parse_failed,
            "source_meta": dict(self.source_meta),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "GeneratedReview":
        return cls(
            paper_id=data["paper_id"],
            model_id=data["model_id"],
            raw_text=data["raw_text"],
            parsed=tuple(ReviewPoint.from_dict(p) for p in data["parsed"]),
            parse_mode=data.get("parse_mode"),
            parse_failed=data.get("parse_failed", False),
            source_meta=dict(data.get("source_meta", {})),
        )


def truncate_to_budget(text: str, max_tokens: int) -> tuple[str, int, int]:
    """Clip text to a whitespace-token budget; returns (text, kept, total)."""
    tokens = text.split()
    if len(tokens) <= max_tokens:
        return text, len(tokens), len(tokens)
    return " ".join(tokens[:max_tokens]), max_tokens, len(tokens)


def generate_review(
    paper: PaperRecord,
    model: ModelSpec,
    gateway: LLMGateway,
    max_input_tokens: int = 60000,
) -> GeneratedReview:
    """One generation call; raw output is durable (cached) before parsing."""
    if not paper.body_text.strip():
        raise ValueError(f"{paper.paper_id}: empty body_text")
    body, kept, total = truncate_to_budget(paper.body_text, max_input_tokens)
    source_meta: dict[str, Any] = {"prompt_manifest": prompt_manifest_hash()}
    if kept < total:
        note = f"body truncated from {total} to {kept} whitespace tokens"
        source_meta["truncation_note"] = note
        logger.info("%s: %s", paper.paper_id, note)
    prompt = render_prompt("generate_review", paper_text=body)
    raw_text = gateway.complete(model.request(prompt, "structured")).text
    try:
        points, parse_mode = parse_review_points(raw_text, paper.paper_id, model.model_id)
    except ParseFailedError:
        logger.warning("%s/%s: review output unparseable", paper.paper_id, model.model_id)
        return GeneratedReview(
            paper_id=paper.paper_id,
            model_id=model.model_id,
            raw_text=raw_text,
            parsed=(),
            parse_mode=None,
            parse_failed=True,
            source_meta=source_meta,
        )
    return GeneratedReview(
        paper_id=paper.paper_id,
        model_id=model.model_id,
        raw_text=raw_text,
        parsed=tuple(points),
        parse_mode=parse_mode,
        parse_failed=False,
        source_meta=source_meta,
    )


# ---------------------------------------------------------------------------
# Review-text parsing


_SECTION_RE = re.compile(
    r"^\s{0,3}(?:#{1,6}\s*|\*\*)?\s*(strengths?|weaknesses?)\b[\s:*]*$",
    re.IGNORECASE,
)
_BULLET_RE = re.compile(r"^\s{0,3}(?:[-*•]|\d+[.)])\s+(.*)$")
_HEADER_RE = re.compile(r"^\*\*(.+?)\*\*[:\s]*(.*)$", re.DOTALL)


def _markdown_points(raw_text: str) -> list[tuple[Polarity, str | None, str]]:
    points: list[tuple[Polarity, str | None, str]] = []
    polarity: Polarity | None = None
    current: list[str] | None = None

    def flush():
        nonlocal current
        if polarity is not None and current:
            text = "\n".join(current).strip()
            if text:
                match = _HEADER_RE.match(text)
                if match:
                    header = match.group(1).strip()
                    body = match.group(2).strip() or header
                    points.append((polarity, header, body))
                else:
                    points.append((polarity, None, text))
        current = None

    for line in raw_text.splitlines():
        section = _SECTION_RE.match(line)
        if section:
            flush()
            name = section.group(1).lower()
            polarity = Polarity.STRENGTH if name.startswith("strength") else Polarity.WEAKNESS
            continue
        if polarity is None:
            continue
        bullet = _BULLET_RE.match(line)
        if bullet:
            flush()
            current = [bullet.group(1)]
        elif current is not None:
            if line.strip():
                current.append(line.strip())
            else:
                flush()
    flush()
    return points


def parse_review_points(
    raw_text: str, paper_id: str, model_id: str
) -> tuple[list[ReviewPoint], str]:
    """Structured block first, markdown section scan second.

    Raises ParseFailedError when neither mode yields a single point.
    """
    triples: list[tuple[Polarity, str | None, str]] = []
    parse_mode = "structured"
    lists = _parse_point_lists(raw_text)
    if lists is not None and (lists[0] or lists[1]):
        for header, body in lists[0]:
            triples.append((Polarity.STRENGTH, header, body))
        for header, body in lists[1]:
            triples.append((Polarity.WEAKNESS, header, body))
    else:
        triples = _markdown_points(raw_text)
        parse_mode = "fallback_markdown"
    if not triples:
        raise ParseFailedError(raw_text, "no review points found in either parse mode")

    points: list[ReviewPoint] = []
    counters = {Polarity.STRENGTH: 0, Polarity.WEAKNESS: 0}
    for polarity, header, body in triples:
        index = counters[polarity]
        counters[polarity] += 1
        points.append(
            ReviewPoint(
                point_id=f"{paper_id}::{model_id}::{polarity.value}::{index:03d}",
                paper_id=paper_id,
                polarity=polarity,
                header=header,
                body=body,
                origin=Origin.model(model_id),
            )
        )
    return points, parse_mode
