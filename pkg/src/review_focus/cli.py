"""Command-line orchestration of the pipeline.

Each command reads its upstream stage files from the work directory, writes
its own stage file atomically plus a manifest entry, and is resumable: an
existing output is left alone unless --force is given, and LLM-backed stages
replay byte-identically from a warm response cache.

Exit codes: 0 ok, 1 quality floor violated, 2 config error, 3 missing stage,
4 excluded-paper loss above the configured threshold.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Sequence

from . import __version__
from .annotator import GoldLabel, annotate_corpus, validate_annotator
from .config import (
    EXIT_CONFIG,
    EXIT_LOSS,
    EXIT_MISSING_STAGE,
    EXIT_OK,
    EXIT_QUALITY,
    ConfigError,
    MissingStageError,
    RunConfig,
)
from .extraction import (
    CardinalityDriftError,
    EmptyMetaReviewError,
    GeneratedReview,
    ParseFailedError,
    generate_review,
    prompt_manifest_hash,
    run_expert_chain,
)
from .facets import Decision
from .gateway import GatewayError
from .ingest import (
    CorpusManifest,
    InvalidFractionError,
    filter_decision,
    filter_years,
    load_export,
    sample,
)
from .records import AnnotatedPoint, PaperRecord, ReviewBundle, ReviewPoint
from .report import evaluate_annotations, render_radar_csv, render_text_table
from .storage import atomic_write_text, load_stage, persist_stage, read_json, write_json

logger = logging.getLogger(__name__)

PAPERS_FILE = "papers.jsonl"
BUNDLES_FILE = "bundles.jsonl"
EXPERT_POINTS_FILE = "expert_points.jsonl"
MODEL_REVIEWS_FILE = "model_reviews.jsonl"
ANNOTATIONS_FILE = "annotations.jsonl"
GOLD_LABELS_FILE = "gold_labels.jsonl"
MANIFEST_FILE = "manifest.json"
METRIC_REPORT_FILE = "metric_report.json"
IRR_REPORT_FILE = "irr_report.json"
REPORT_TEXT_FILE = "report.txt"
RADAR_CSV_FILE = "radar.csv"


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _update_manifest(cfg: RunConfig, stage: str, entry: dict[str, Any]) -> None:
    path = cfg.stage_file(MANIFEST_FILE)
    manifest = read_json(path) if path.exists() else {"stages": {}}
    manifest["stages"][stage] = entry
    write_json(path, manifest)


def _skip_existing(cfg: RunConfig, path: Path, force: bool) -> bool:
    if path.exists() and not force:
        logger.info("%s exists; skipping (use --force to recompute)", path)
        return True
    return False


def _check_loss(excluded: int, total: int, threshold: float, stage: str) -> int:
    if total and excluded / total > threshold:
        logger.error(
            "%s: excluded %d of %d papers (%.1f%%), above the %.1f%% threshold",
            stage,
            excluded,
            total,
            100 * excluded / total,
            100 * threshold,
        )
        return EXIT_LOSS
    return EXIT_OK


# ---------------------------------------------------------------------------
# Commands


def cmd_ingest(cfg: RunConfig, args: argparse.Namespace) -> int:
    export = Path(args.export) if args.export else cfg.export_path
    if export is None:
        raise ConfigError("no export file: pass --export or set export_path in the config")
    if not export.exists():
        raise ConfigError(f"export file does not exist: {export}")
    schema = args.schema or cfg.export_schema
    fraction = args.fraction if args.fraction is not None else cfg.sample_fraction
    seed = args.seed if args.seed is not None else cfg.sample_seed
    try:
        decisions = [
            Decision(d) for d in (args.decisions.split(",") if args.decisions else cfg.decision_filter)
        ]
    except ValueError as exc:
        raise ConfigError(f"bad decision filter: {exc}") from exc

    papers_path = cfg.stage_file(PAPERS_FILE)
    if _skip_existing(cfg, papers_path, args.force):
        return EXIT_OK

    key_map = read_json(args.key_map) if args.key_map else None
    loaded = load_export(export, schema_hint=schema, strict=args.strict, key_map=key_map)
    papers = filter_years(loaded.papers, *cfg.venue_years)
    papers = filter_decision(papers, decisions)
    sampled = sample(papers, fraction, seed)
    sampled_ids = {p.paper_id for p in sampled}
    bundles = [b for b in loaded.bundles if b.paper_id in sampled_ids]

    # bundles first: once papers.jsonl exists the stage is complete, so a
    # killed run never leaves a skippable half-written stage
    n_bundles = persist_stage(bundles, cfg.stage_file(BUNDLES_FILE))
    n_papers = persist_stage(sampled, papers_path)
    manifest = CorpusManifest(
        source_paths=[str(export)],
        venue_year_range=cfg.venue_years,
        decision_filter=[d.value for d in decisions],
        sample_fraction=fraction,
        sample_seed=seed,
        counts={"papers": n_papers, "bundles": n_bundles},
    )
    _update_manifest(
        cfg,
        "ingest",
        {
            **manifest.to_dict(),
            "schema": schema,
            "loaded": len(loaded.papers),
            "after_filters": len(papers),
            "malformed_lines": len(loaded.malformed_lines),
            "missing_meta_review": loaded.missing_meta_review,
        },
    )
    logger.info("ingested %d papers (%d with bundles) from %s", n_papers, n_bundles, export)
    return EXIT_OK


def _parallel_map(
    items: Sequence, worker: Callable, parallelism: int
) -> list:
    results = [None] * len(items)

    def run(index: int) -> None:
        results[index] = worker(items[index])

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        futures = [pool.submit(run, i) for i in range(len(items))]
        for future in futures:
            future.result()
    return results


def cmd_extract_expert(cfg: RunConfig, args: argparse.Namespace) -> int:
    cfg.validate(require_llm=True)
    if cfg.chain_model is None:
        raise ConfigError("chain_model is not set in the config")
    cfg.require_stage("ingest", PAPERS_FILE)
    bundles_path = cfg.require_stage("ingest", BUNDLES_FILE)
    out_path = cfg.stage_file(EXPERT_POINTS_FILE)
    if _skip_existing(cfg, out_path, args.force):
        return EXIT_OK

    bundles = load_stage(bundles_path, ReviewBundle.from_dict)
    gateway = cfg.gateway()
    model = cfg.model_spec(cfg.chain_model, "chain")

    def worker(bundle: ReviewBundle):
        try:
            return run_expert_chain(bundle, gateway, model)
        except (ParseFailedError, CardinalityDriftError, EmptyMetaReviewError, GatewayError) as exc:
            return (bundle.paper_id, f"{type(exc).__name__}: {exc}")

    outcomes = _parallel_map(bundles, worker, cfg.parallelism)
    points: list[ReviewPoint] = []
    excluded: list[tuple[str, str]] = []
    for outcome in outcomes:
        if isinstance(outcome, tuple):
            excluded.append(outcome)
        else:
            points.extend(outcome)
    n_points = persist_stage(points, out_path)
    _update_manifest(
        cfg,
        "extract-expert",
        {
            "papers": len(bundles),
            "points": n_points,
            "excluded": [{"paper_id": pid, "reason": reason} for pid, reason in excluded],
            "prompt_manifest": prompt_manifest_hash(),
            "chain_model": cfg.chain_model,
        },
    )
    logger.info("extracted %d expert points from %d papers (%d excluded)", n_points, len(bundles), len(excluded))
    return _check_loss(len(excluded), len(bundles), cfg.loss_threshold, "extract-expert")


def cmd_generate(cfg: RunConfig, args: argparse.Namespace) -> int:
    cfg.validate(require_llm=True)
    model_ids = args.models.split(",") if args.models else cfg.generation_models
    if not model_ids:
        raise ConfigError("no generation models: pass --models or set generation_models")
    specs = {mid: cfg.model_spec(mid, "generation") for mid in model_ids}
    papers_path = cfg.require_stage("ingest", PAPERS_FILE)
    out_path = cfg.stage_file(MODEL_REVIEWS_FILE)
    if _skip_existing(cfg, out_path, args.force):
        return EXIT_OK

    papers = load_stage(papers_path, PaperRecord.from_dict)
    gateway = cfg.gateway()
    jobs = [(paper, mid) for paper in papers for mid in model_ids]

    def worker(job: tuple[PaperRecord, str]):
        paper, mid = job
        try:
            return generate_review(paper, specs[mid], gateway, cfg.max_input_tokens)
        except GatewayError as exc:
            return (paper.paper_id, mid, f"{type(exc).__name__}: {exc}")

    outcomes = _parallel_map(jobs, worker, cfg.parallelism)
    reviews: list[GeneratedReview] = []
    failed: list[tuple[str, str, str]] = []
    for outcome in outcomes:
        if isinstance(outcome, tuple):
            failed.append(outcome)
        else:
            reviews.append(outcome)
    n_reviews = persist_stage(reviews, out_path)
    parse_failed = sum(1 for r in reviews if r.parse_failed)
    _update_manifest(
        cfg,
        "generate",
        {
            "papers": len(papers),
            "models": model_ids,
            "reviews": n_reviews,
            "parse_failed": parse_failed,
            "failed": [{"paper_id": p, "model_id": m, "reason": r} for p, m, r in failed],
            "prompt_manifest": prompt_manifest_hash(),
        },
    )
    logger.info(
        "generated %d reviews (%d parse-flagged, %d failed)", n_reviews, parse_failed, len(failed)
    )
    return _check_loss(len(failed), len(jobs), cfg.loss_threshold, "generate")


def cmd_annotate(cfg: RunConfig, args: argparse.Namespace) -> int:
    cfg.validate(require_llm=True)
    if cfg.annotator_model is None:
        raise ConfigError("annotator_model is not set in the config")
    expert_path = cfg.require_stage("extract-expert", EXPERT_POINTS_FILE)
    out_path = cfg.stage_file(ANNOTATIONS_FILE)
    if _skip_existing(cfg, out_path, args.force):
        return EXIT_OK

    points = load_stage(expert_path, ReviewPoint.from_dict)
    reviews_path = cfg.stage_file(MODEL_REVIEWS_FILE)
    if reviews_path.exists():
        for review in load_stage(reviews_path, GeneratedReview.from_dict):
            points.extend(review.parsed)
    else:
        logger.warning("%s missing; annotating expert points only", reviews_path)

    gateway = cfg.gateway()
    model = cfg.model_spec(cfg.annotator_model, "annotation")
    run = annotate_corpus(points, gateway, model, cfg.parallelism)
    n_annotations = persist_stage(run.annotations, out_path)
    _update_manifest(
        cfg,
        "annotate",
        {
            "points": len(points),
            "annotations": n_annotations,
            "excluded": [{"point_id": pid, "reason": reason} for pid, reason in run.failures],
            "annotator_model": cfg.annotator_model,
            "prompt_manifest": prompt_manifest_hash(),
        },
    )
    logger.info("annotated %d of %d points", n_annotations, len(points))
    return _check_loss(len(run.failures), len(points), cfg.loss_threshold, "annotate")


def cmd_irr(cfg: RunConfig, args: argparse.Namespace) -> int:
    cfg.validate(require_llm=True)
    if cfg.annotator_model is None:
        raise ConfigError("annotator_model is not set in the config")
    gold_path = Path(args.gold) if args.gold else cfg.stage_file(GOLD_LABELS_FILE)
    if not gold_path.exists():
        raise MissingStageError("gold-labels", gold_path)
    gold_records = load_stage(gold_path, AnnotatedPoint.from_dict)
    gold = [GoldLabel.from_annotated(g) for g in gold_records]

    gateway = cfg.gateway()
    model = cfg.model_spec(cfg.annotator_model, "annotation")
    run = annotate_corpus([g.point for g in gold_records], gateway, model, cfg.parallelism)
    if run.failures:
        logger.error("%d gold point(s) could not be annotated", len(run.failures))
        return EXIT_QUALITY
    report = validate_annotator(gold, run.annotations)
    write_json(
        cfg.stage_file(IRR_REPORT_FILE),
        {**report.to_dict(), "annotator_model": cfg.annotator_model, "irr_floor": cfg.irr_floor},
    )
    _update_manifest(
        cfg,
        "irr",
        {
            "gold_file": str(gold_path),
            "n_items": report.n_items,
            "kappa_target": report.kappa_target,
            "kappa_aspect": report.kappa_aspect,
        },
    )
    logger.info(
        "IRR on %d items: kappa_target=%.3f kappa_aspect=%.3f",
        report.n_items,
        report.kappa_target,
        report.kappa_aspect,
    )
    if min(report.kappa_target, report.kappa_aspect) < cfg.irr_floor:
        logger.error("kappa below configured floor %.2f", cfg.irr_floor)
        return EXIT_QUALITY
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args: argparse.Namespace) -> int:
    annotations_path = cfg.require_stage("annotate", ANNOTATIONS_FILE)
    annotations = load_stage(annotations_path, AnnotatedPoint.from_dict)
    provenance: dict[str, Any] = {"inputs": {ANNOTATIONS_FILE: _file_digest(annotations_path)}}

    expert_points = None
    expert_path = cfg.stage_file(EXPERT_POINTS_FILE)
    if expert_path.exists():
        expert_points = load_stage(expert_path, ReviewPoint.from_dict)
        provenance["inputs"][EXPERT_POINTS_FILE] = _file_digest(expert_path)
    model_reviews = None
    reviews_path = cfg.stage_file(MODEL_REVIEWS_FILE)
    if reviews_path.exists():
        model_reviews = load_stage(reviews_path, GeneratedReview.from_dict)
        provenance["inputs"][MODEL_REVIEWS_FILE] = _file_digest(reviews_path)
    if expert_points is None or model_reviews is None:
        logger.warning("text-similarity inputs incomplete; those metrics will be absent")

    kl_direction = args.kl_direction or cfg.kl_direction
    collapse = args.set_matching or cfg.collapse_pairs_to_set
    report = evaluate_annotations(
        annotations,
        expert_points=expert_points,
        model_reviews=model_reviews,
        epsilon=cfg.epsilon,
        kl_direction=kl_direction,
        collapse_to_set=collapse,
        backend=cfg.load_embedding_backend(),
        extra_provenance=provenance,
    )
    write_json(cfg.stage_file(METRIC_REPORT_FILE), report)
    _update_manifest(cfg, "evaluate", {"models": report["provenance"]["model_groups"]})
    logger.info("wrote %s for %d model group(s)", METRIC_REPORT_FILE, len(report["models"]))
    return EXIT_OK


def cmd_report(cfg: RunConfig, args: argparse.Namespace) -> int:
    report_path = cfg.require_stage("evaluate", METRIC_REPORT_FILE)
    annotations_path = cfg.require_stage("annotate", ANNOTATIONS_FILE)
    report = read_json(report_path)
    annotations = load_stage(annotations_path, AnnotatedPoint.from_dict)

    table = render_text_table(report)
    atomic_write_text(cfg.stage_file(REPORT_TEXT_FILE), table)
    atomic_write_text(cfg.stage_file(RADAR_CSV_FILE), render_radar_csv(annotations))
    _update_manifest(cfg, "report", {"files": [REPORT_TEXT_FILE, RADAR_CSV_FILE]})
    sys.stdout.write(table)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point


COMMANDS = {
    "ingest": cmd_ingest,
    "extract-expert": cmd_extract_expert,
    "generate": cmd_generate,
    "annotate": cmd_annotate,
    "irr": cmd_irr,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="review-focus",
        description="Focus-level evaluation of paper reviews: where praise and criticism land.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--config", default="config.json", help="path to the JSON run config")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="load an export, filter, sample, persist the corpus")
    p_ingest.add_argument("--export", help="export file (overrides config export_path)")
    p_ingest.add_argument("--schema", choices=["generic", "openreview_v1"])
    p_ingest.add_argument("--decisions", help="comma-separated: accepted,rejected,unknown")
    p_ingest.add_argument("--fraction", type=float, help="sample fraction in (0, 1]")
    p_ingest.add_argument("--seed", type=int, help="sampling seed")
    p_ingest.add_argument("--key-map", help="JSON key map for openreview_v1 exports")
    p_ingest.add_argument("--strict", action="store_true", help="fail on malformed lines")
    p_ingest.add_argument("--force", action="store_true")

    for name, help_text in (
        ("extract-expert", "run the three-stage expert chain over review bundles"),
        ("annotate", "assign (target, aspect) to every point"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--force", action="store_true")

    p_generate = sub.add_parser("generate", help="generate model reviews for the corpus")
    p_generate.add_argument("--models", help="comma-separated model ids (overrides config)")
    p_generate.add_argument("--force", action="store_true")

    p_irr = sub.add_parser("irr", help="validate the annotator against human gold labels")
    p_irr.add_argument("--gold", help="gold labels file (annotations.jsonl format)")

    p_evaluate = sub.add_parser("evaluate", help="compute the metric report from annotations")
    p_evaluate.add_argument("--kl-direction", choices=["human_to_model", "model_to_human"])
    p_evaluate.add_argument(
        "--set-matching", action="store_true", help="collapse pair multisets to sets"
    )

    sub.add_parser("report", help="render the text table and radar CSV")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = RunConfig.from_file(args.config) if Path(args.config).exists() else RunConfig()
        cfg.validate()
        if not cfg.stage_enabled(args.command):
            logger.info("stage %s disabled by config; nothing to do", args.command)
            return EXIT_OK
        cfg.work_dir.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, InvalidFractionError) as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except MissingStageError as exc:
        logger.error("%s", exc)
        return EXIT_MISSING_STAGE


if __name__ == "__main__":
    sys.exit(main())
