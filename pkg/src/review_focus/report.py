"""Assemble per-model metric rows and render human- and machine-readable reports.

The metric report mirrors one row per model: focus similarity (averaged KL
and pair F1) plus text similarity (ROUGE-L, BLEU-4, optional embedding
score), with a provenance header that pins every knob the numbers depend on.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from typing import Any, Mapping, Sequence

from .extraction import GeneratedReview
from .facets import FacetKind, Polarity
from .metrics import (
    DEFAULT_EPSILON,
    POOLED_MODEL_GROUP,
    TOKENIZER_VERSION,
    BackendUnavailableError,
    EmbeddingBackend,
    EmptySupportError,
    EmptyTextError,
    avg_focus_kl,
    build_pair_sets,
    count_stats,
    bleu_4,
    embed_review_score,
    focus_profile,
    idf_weights,
    kl_divergence,
    macro_pair_f1,
    pair_multiset_f1,
    per_label_f1,
    rouge_l,
    tokenize,
)
from .records import PROFILE_QUADRANTS, AnnotatedPoint, FocusProfile, ReviewPoint

logger = logging.getLogger(__name__)

REPORT_VERSION = 1


def expert_reference_text(points: Sequence[ReviewPoint]) -> str:
    """The text treated as 'the expert review' of one paper for text metrics:
    final expert points, strengths then weaknesses, double-newline joined."""
    strengths = [p.body for p in points if p.polarity is Polarity.STRENGTH]
    weaknesses = [p.body for p in points if p.polarity is Polarity.WEAKNESS]
    return "\n\n".join(strengths + weaknesses)


def group_annotations(
    annotations: Sequence[AnnotatedPoint],
) -> tuple[list[AnnotatedPoint], dict[str, list[AnnotatedPoint]]]:
    human: list[AnnotatedPoint] = []
    models: dict[str, list[AnnotatedPoint]] = {}
    for annotated in annotations:
        group = annotated.point.origin.group_id
        if group == "human":
            human.append(annotated)
        else:
            models.setdefault(group, []).append(annotated)
    return human, models


def _kl_quadrants(
    reference: FocusProfile, candidate: FocusProfile, epsilon: float, direction: str
) -> dict[str, float]:
    out: dict[str, float] = {}
    for polarity, kind in PROFILE_QUADRANTS:
        p = reference.get(polarity, kind)
        q = candidate.get(polarity, kind)
        if direction == "model_to_human":
            p, q = q, p
        out[f"{polarity.value}_{kind.value}"] = kl_divergence(p, q, epsilon)
    return out


def _text_similarity(
    model_id: str,
    reviews: Sequence[GeneratedReview],
    reference_texts: Mapping[str, str],
    backend: EmbeddingBackend | None,
) -> dict[str, Any]:
    rouge_scores: list[float] = []
    bleu_scores: list[float] = []
    embed_scores: list[float] = []
    embed_absent_reason = None
    reference_tokens = [tokenize(t) for t in reference_texts.values()]
    idf = idf_weights(reference_tokens) if reference_tokens else {}
    for review in reviews:
        if review.model_id != model_id:
            continue
        reference = reference_texts.get(review.paper_id)
        if not reference or not review.raw_text.strip():
            continue
        cand_tokens = tokenize(review.raw_text)
        ref_tokens = tokenize(reference)
        try:
            rouge_scores.append(rouge_l(cand_tokens, ref_tokens))
            bleu_scores.append(bleu_4(cand_tokens, ref_tokens))
        except EmptyTextError:
            continue
        if backend is not None:
            try:
                _, _, f1 = embed_review_score(review.raw_text, reference, backend, idf)
                embed_scores.append(f1)
            except BackendUnavailableError as exc:
                backend = None
                embed_absent_reason = str(exc)
    result: dict[str, Any] = {
        "rouge_l": math.fsum(rouge_scores) / len(rouge_scores) if rouge_scores else None,
        "bleu_4": math.fsum(bleu_scores) / len(bleu_scores) if bleu_scores else None,
        "embed_score": math.fsum(embed_scores) / len(embed_scores) if embed_scores else None,
        "n_text_pairs": len(rouge_scores),
    }
    if embed_absent_reason:
        result["embed_absent_reason"] = embed_absent_reason
    return result


def evaluate_annotations(
    annotations: Sequence[AnnotatedPoint],
    expert_points: Sequence[ReviewPoint] | None = None,
    model_reviews: Sequence[GeneratedReview] | None = None,
    epsilon: float = DEFAULT_EPSILON,
    kl_direction: str = "human_to_model",
    collapse_to_set: bool = False,
    backend: EmbeddingBackend | None = None,
    extra_provenance: Mapping[str, Any] | None = None,
) -> dict[str, Any]:
    """Build the full metric report as a JSON-ready dict."""
    if kl_direction not in ("human_to_model", "model_to_human"):
        raise ValueError(f"bad kl_direction: {kl_direction!r}")
    human, models = group_annotations(annotations)
    if not human:
        raise EmptySupportError(FacetKind.TARGET, Polarity.STRENGTH)
    human_profile = focus_profile(human, "human")
    reference_sets = build_pair_sets(human)

    reference_texts: dict[str, str] = {}
    if expert_points:
        by_paper: dict[str, list[ReviewPoint]] = {}
        for point in expert_points:
            by_paper.setdefault(point.paper_id, []).append(point)
        reference_texts = {pid: expert_reference_text(pts) for pid, pts in by_paper.items()}

    all_points = [a.point for a in annotations]
    review_texts: dict[tuple[str, str], str] = {
        ("human", pid): text for pid, text in reference_texts.items()
    }
    for review in model_reviews or ():
        review_texts[(review.model_id, review.paper_id)] = review.raw_text
    counts = count_stats(all_points, review_texts or None)

    rows: dict[str, Any] = {}
    for model_id in sorted(models):
        annotated = models[model_id]
        row: dict[str, Any] = {}
        try:
            profile = focus_profile(annotated, model_id)
            if kl_direction == "human_to_model":
                row["avg_kl"] = avg_focus_kl(human_profile, profile, epsilon)
            else:
                row["avg_kl"] = avg_focus_kl(profile, human_profile, epsilon)
            row["kl_by_quadrant"] = _kl_quadrants(human_profile, profile, epsilon, kl_direction)
        except EmptySupportError as exc:
            logger.warning("%s: %s; KL omitted", model_id, exc)
            row["avg_kl"] = None
            row["kl_error"] = str(exc)
        candidate_sets = build_pair_sets(annotated)
        row["f1_overall"] = pair_multiset_f1(
            reference_sets, candidate_sets, None, collapse_to_set
        ).to_dict()
        row["f1_strength"] = pair_multiset_f1(
            reference_sets, candidate_sets, Polarity.STRENGTH, collapse_to_set
        ).to_dict()
        row["f1_weakness"] = pair_multiset_f1(
            reference_sets, candidate_sets, Polarity.WEAKNESS, collapse_to_set
        ).to_dict()
        row["f1_overall_macro"] = macro_pair_f1(reference_sets, candidate_sets)
        row["per_label_f1"] = {
            axis.value: {
                scope_name: {
                    facet.value: result.to_dict()
                    for facet, result in per_label_f1(
                        reference_sets, candidate_sets, axis, scope
                    ).items()
                }
                for scope_name, scope in (
                    ("all", None),
                    ("strength", Polarity.STRENGTH),
                    ("weakness", Polarity.WEAKNESS),
                )
            }
            for axis in (FacetKind.TARGET, FacetKind.ASPECT)
        }
        if model_reviews and reference_texts:
            row.update(_text_similarity(model_id, model_reviews, reference_texts, backend))
        else:
            row.update({"rouge_l": None, "bleu_4": None, "embed_score": None, "n_text_pairs": 0})
        row["counts"] = counts[model_id].to_dict() if model_id in counts else None
        rows[model_id] = row

    header: dict[str, Any] = {
        "report_version": REPORT_VERSION,
        "epsilon": epsilon,
        "kl_direction": kl_direction,
        "tokenizer_version": TOKENIZER_VERSION,
        "matching_mode": "set" if collapse_to_set else "multiset",
        "f1_aggregation": "micro (macro emitted per row)",
        "n_annotations": len(annotations),
        "n_human_points": len(human),
        "model_groups": sorted(models),
    }
    if extra_provenance:
        header.update(extra_provenance)
    return {
        "provenance": header,
        "human": {
            "profile": human_profile.to_dict(),
            "counts": counts.get("human").to_dict() if "human" in counts else None,
        },
        "pooled_llm_counts": counts[POOLED_MODEL_GROUP].to_dict()
        if POOLED_MODEL_GROUP in counts
        else None,
        "models": rows,
    }


# ---------------------------------------------------------------------------
# Rendering


def radar_rows(annotations: Sequence[AnnotatedPoint]) -> list[dict[str, Any]]:
    """Plot-ready rows: one weight per facet x group x polarity x kind."""
    human, models = group_annotations(annotations)
    rows: list[dict[str, Any]] = []
    for group_id, group_points in [("human", human)] + sorted(models.items()):
        for polarity, kind in PROFILE_QUADRANTS:
            try:
                dist = focus_profile(group_points, group_id).get(polarity, kind)
            except EmptySupportError:
                continue
            for facet, weight in dist.weights.items():
                rows.append(
                    {
                        "group": group_id,
                        "facet_kind": kind.value,
                        "polarity": polarity.value,
                        "facet": facet.value,
                        "weight": weight,
                    }
                )
    return rows


def render_radar_csv(annotations: Sequence[AnnotatedPoint]) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(
        buffer, fieldnames=["group", "facet_kind", "polarity", "facet", "weight"]
    )
    writer.writeheader()
    for row in radar_rows(annotations):
        writer.writerow(row)
    return buffer.getvalue()


def _fmt(value: Any, width: int = 8) -> str:
    if value is None:
        return "-".rjust(width)
    if isinstance(value, float):
        return f"{value:.3f}".rjust(width)
    return str(value).rjust(width)


def render_text_table(report: Mapping[str, Any]) -> str:
    """Fixed-width grid of the headline metric row per model."""
    lines: list[str] = []
    header = report["provenance"]
    lines.append(
        f"metric report (epsilon={header['epsilon']}, direction={header['kl_direction']}, "
        f"matching={header['matching_mode']}, tokenizer={header['tokenizer_version']})"
    )
    columns = ["avg_kl", "f1_all", "f1_str", "f1_weak", "rouge_l", "bleu_4", "embed"]
    name_width = max([len(m) for m in report["models"]] + [12])
    lines.append("model".ljust(name_width) + "".join(h.rjust(9) for h in columns))
    ordered = sorted(
        report["models"].items(),
        key=lambda kv: (kv[1].get("avg_kl") is None, kv[1].get("avg_kl", 0.0)),
    )
    for model_id, row in ordered:
        lines.append(
            model_id.ljust(name_width)
            + _fmt(row.get("avg_kl"), 9)
            + _fmt(row["f1_overall"]["f1"], 9)
            + _fmt(row["f1_strength"]["f1"], 9)
            + _fmt(row["f1_weakness"]["f1"], 9)
            + _fmt(row.get("rouge_l"), 9)
            + _fmt(row.get("bleu_4"), 9)
            + _fmt(row.get("embed_score"), 9)
        )
    human_counts = report.get("human", {}).get("counts")
    if human_counts:
        lines.append("")
        lines.append(
            f"human points per paper: mean {human_counts['mean_total']:.2f} "
            f"({human_counts['mean_strengths']:.2f} strengths, "
            f"{human_counts['mean_weaknesses']:.2f} weaknesses, n={human_counts['n_reviews']})"
        )
    pooled = report.get("pooled_llm_counts")
    if pooled:
        lines.append(
            f"pooled LLM points per review: mean {pooled['mean_total']:.2f} "
            f"({pooled['mean_strengths']:.2f} strengths, "
            f"{pooled['mean_weaknesses']:.2f} weaknesses, n={pooled['n_reviews']})"
        )
    return "\n".join(lines) + "\n"
