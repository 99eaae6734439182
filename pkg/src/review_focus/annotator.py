"""Automatic facet annotation of review points, validated against human labels.

Each point gets two independent calls, one per facet kind, through the
polarity-specific prompt pair. Outputs are forced onto the closed
vocabularies by parse_facet; anything unresolvable is retried once with a
stricter instruction and then excluded, never coerced.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Hashable, Mapping, Sequence

from .extraction import ModelSpec, render_prompt
from .facets import (
    AspectFacet,
    FacetKind,
    Polarity,
    TargetFacet,
    UnknownLabelError,
    parse_facet,
)
from .gateway import GatewayError, LLMGateway
from .records import AnnotatedPoint, ReviewPoint

logger = logging.getLogger(__name__)


class AnnotationFailedError(RuntimeError):
    def __init__(self, point_id: str, kind: FacetKind, detail: str):
        self.point_id = point_id
        self.kind = kind
        super().__init__(f"{point_id}: could not annotate {kind.value}: {detail}")


class LengthMismatchError(ValueError):
    pass


class MissingPredictionError(KeyError):
    def __init__(self, point_id: str):
        self.point_id = point_id
        super().__init__(f"no prediction for gold point {point_id}")


@dataclass(frozen=True)
class GoldLabel:
    point_id: str
    human_target: TargetFacet
    human_aspect: AspectFacet

    @classmethod
    def from_annotated(cls, annotated: AnnotatedPoint) -> "GoldLabel":
        return cls(
            point_id=annotated.point.point_id,
            human_target=annotated.target,
            human_aspect=annotated.aspect,
        )


def _point_text(point: ReviewPoint) -> str:
    if point.header:
        return f"**{point.header}**: {point.body}"
    return point.body


def _facet_labels(kind: FacetKind) -> str:
    enum_cls = TargetFacet if kind is FacetKind.TARGET else AspectFacet
    return ", ".join(f.value for f in enum_cls)


def _annotate_kind(
    point: ReviewPoint, kind: FacetKind, gateway: LLMGateway, model: ModelSpec
) -> tuple[TargetFacet | AspectFacet, str]:
    prompt_name = f"annotate_{kind.value}_{point.polarity.value}"
    prompt = render_prompt(prompt_name, point=_point_text(point))
    raw = gateway.complete(model.request(prompt, "structured")).text
    try:
        return parse_facet(kind, raw), raw
    except UnknownLabelError:
        pass
    strict = (
        prompt
        + f"\n\nYour previous answer was not a valid label. Answer with exactly one of:"
        f" {_facet_labels(kind)}. No other words."
    )
    raw = gateway.complete(model.request(strict, "structured")).text
    try:
        return parse_facet(kind, raw), raw
    except UnknownLabelError as exc:
        raise AnnotationFailedError(point.point_id, kind, f"unparseable label {raw!r}") from exc


def annotate_point(
    point: ReviewPoint, gateway: LLMGateway, model: ModelSpec
) -> AnnotatedPoint:
    """Assign (target, aspect) to one point; raw model outputs are retained."""
    if not point.body.strip():
        raise ValueError(f"{point.point_id}: empty body")
    target, raw_target = _annotate_kind(point, FacetKind.TARGET, gateway, model)
    aspect, raw_aspect = _annotate_kind(point, FacetKind.ASPECT, gateway, model)
    return AnnotatedPoint(
        point=point,
        target=target,  # type: ignore[arg-type]
        aspect=aspect,  # type: ignore[arg-type]
        annotator_id=model.model_id,
        raw_annotator_output=f"target: {raw_target}\naspect: {raw_aspect}",
    )


@dataclass
class AnnotationRun:
    """Batch outcome: annotations in input order plus isolated failures.

    len(annotations) + len(failures) always equals the input size.
    """

    annotations: list[AnnotatedPoint]
    failures: list[tuple[str, str]]  # (point_id, reason)


def annotate_corpus(
    points: Sequence[ReviewPoint],
    gateway: LLMGateway,
    model: ModelSpec,
    parallelism: int = 4,
) -> AnnotationRun:
    if not points:
        return AnnotationRun(annotations=[], failures=[])
    results: list[AnnotatedPoint | tuple[str, str]] = [None] * len(points)  # type: ignore[list-item]

    def run(index: int, point: ReviewPoint) -> None:
        try:
            results[index] = annotate_point(point, gateway, model)
        except (AnnotationFailedError, GatewayError, ValueError) as exc:
            results[index] = (point.point_id, str(exc))

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        futures = [pool.submit(run, i, p) for i, p in enumerate(points)]
        for future in futures:
            future.result()

    run_result = AnnotationRun(annotations=[], failures=[])
    for item in results:
        if isinstance(item, AnnotatedPoint):
            run_result.annotations.append(item)
        else:
            run_result.failures.append(item)
    if run_result.failures:
        logger.warning("%d of %d point(s) excluded", len(run_result.failures), len(points))
    return run_result


# ---------------------------------------------------------------------------
# Inter-rater reliability


def cohens_kappa(labels_a: Sequence[Hashable], labels_b: Sequence[Hashable]) -> float:
    """Chance-corrected agreement between two raters over one category set.

    kappa = (p_o - p_e) / (1 - p_e), with p_o the observed agreement fraction
    and p_e the chance agreement from the product of the raters' marginals.
    Computed in exact rational arithmetic, converted to float at the end.
    """
    if len(labels_a) != len(labels_b):
        raise LengthMismatchError(f"{len(labels_a)} vs {len(labels_b)} labels")
    n = len(labels_a)
    if n == 0:
        raise LengthMismatchError("need at least one item")
    agreements = sum(1 for a, b in zip(labels_a, labels_b) if a == b)
    p_o = Fraction(agreements, n)
    marginals_a: dict[Hashable, int] = {}
    marginals_b: dict[Hashable, int] = {}
    for a, b in zip(labels_a, labels_b):
        marginals_a[a] = marginals_a.get(a, 0) + 1
        marginals_b[b] = marginals_b.get(b, 0) + 1
    p_e = Fraction(
        sum(count * marginals_b.get(cat, 0) for cat, count in marginals_a.items()), n * n
    )
    if p_e == 1:
        # Both raters constant on the same category; agreement is trivially
        # perfect but chance correction is undefined.
        logger.warning("degenerate marginals (p_e = 1); returning 1.0 by convention")
        return 1.0
    if p_o == 1:
        return 1.0
    return float((p_o - p_e) / (1 - p_e))


def confusion_matrix(
    gold: Sequence[Hashable], predicted: Sequence[Hashable], categories: Sequence[Hashable]
) -> list[list[int]]:
    """Dense integer grid, rows = gold, columns = predicted."""
    index = {cat: i for i, cat in enumerate(categories)}
    grid = [[0] * len(categories) for _ in categories]
    for g, p in zip(gold, predicted):
        grid[index[g]][index[p]] += 1
    return grid


@dataclass
class IrrReport:
    kappa_target: float
    kappa_aspect: float
    n_items: int
    confusion_target: list[list[int]]
    confusion_aspect: list[list[int]]

    def to_dict(self) -> dict[str, Any]:
        return {
            "kappa_target": self.kappa_target,
            "kappa_aspect": self.kappa_aspect,
            "n_items": self.n_items,
            "confusion": {
                "target": {
                    "labels": [f.value for f in TargetFacet],
                    "matrix": self.confusion_target,
                },
                "aspect": {
                    "labels": [f.value for f in AspectFacet],
                    "matrix": self.confusion_aspect,
                },
            },
        }


def validate_annotator(
    gold: Sequence[GoldLabel], predicted: Sequence[AnnotatedPoint]
) -> IrrReport:
    """Score predictions against the human gold set, with confusion grids."""
    by_id: Mapping[str, AnnotatedPoint] = {a.point.point_id: a for a in predicted}
    gold_targets: list[TargetFacet] = []
    gold_aspects: list[AspectFacet] = []
    pred_targets: list[TargetFacet] = []
    pred_aspects: list[AspectFacet] = []
    for label in gold:
        prediction = by_id.get(label.point_id)
        if prediction is None:
            raise MissingPredictionError(label.point_id)
        gold_targets.append(label.human_target)
        gold_aspects.append(label.human_aspect)
        pred_targets.append(prediction.target)
        pred_aspects.append(prediction.aspect)
    return IrrReport(
        kappa_target=cohens_kappa(gold_targets, pred_targets),
        kappa_aspect=cohens_kappa(gold_aspects, pred_aspects),
        n_items=len(gold),
        confusion_target=confusion_matrix(gold_targets, pred_targets, list(TargetFacet)),
        confusion_aspect=confusion_matrix(gold_aspects, pred_aspects, list(AspectFacet)),
    )
