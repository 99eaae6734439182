import json

import pytest

from review_focus.extraction import (
    CardinalityDriftError,
    DraftPoint,
    EmptyMetaReviewError,
    GeneratedReview,
    ModelSpec,
    ParseFailedError,
    augment_points,
    extract_meta_points,
    generate_review,
    paraphrase_points,
    parse_review_points,
    prompt_manifest_hash,
    render_prompt,
    run_expert_chain,
    screen_self_references,
    truncate_to_budget,
    _format_points,
    _format_reviews,
)
from review_focus.facets import Polarity
from review_focus.gateway import cache_key
from review_focus.records import Origin

from .conftest import ExplodingTransport, FakeTransport, make_bundle, make_paper, openai_body

MODEL = ModelSpec(endpoint_id="fake", model_id="fake-model", temperature=0.0, max_output_tokens=2048)


def _stage_json(strengths, weaknesses):
    return "```json\n" + json.dumps({"strengths": strengths, "weaknesses": weaknesses}) + "\n```"


# ---------------------------------------------------------------------------
# parse_review_points


def test_structured_parse():
    raw = "Some preamble.\n" + _stage_json(
        [{"header": "Clear method", "body": "Well specified."}, "Good writing", "Nice idea"],
        ["Missing baselines", {"header": "Scope", "body": "Narrow evaluation."}],
    )
    points, mode = parse_review_points(raw, "p1", "m1")
    assert mode == "structured"
    assert len(points) == 5
    assert sum(1 for p in points if p.polarity is Polarity.STRENGTH) == 3
    assert points[0].header == "Clear method"
    assert points[0].origin == Origin.model("m1")
    assert points[0].point_id == "p1::m1::strength::000"


def test_markdown_fallback():
    raw = (
        "## Summary\nFine paper.\n\n## Strengths\n- Solid theoretical grounding\n\n"
        "## Weaknesses\n- **Limited baselines**: only two baselines are compared\n"
    )
    points, mode = parse_review_points(raw, "p1", "m1")
    assert mode == "fallback_markdown"
    weaknesses = [p for p in points if p.polarity is Polarity.WEAKNESS]
    assert len(points) == 2
    assert weaknesses[0].header == "Limited baselines"
    assert weaknesses[0].body == "only two baselines are compared"


def test_markdown_fallback_variants():
    raw = (
        "**Strengths**\n1. First strength point\n2. Second strength point\n"
        "spread over two lines\n\nWeaknesses:\n* Only one weakness\n"
    )
    points, mode = parse_review_points(raw, "p", "m")
    assert mode == "fallback_markdown"
    strengths = [p for p in points if p.polarity is Polarity.STRENGTH]
    assert len(strengths) == 2
    assert "spread over two lines" in strengths[1].body
    assert sum(1 for p in points if p.polarity is Polarity.WEAKNESS) == 1


def test_parse_failed_on_prose():
    with pytest.raises(ParseFailedError):
        parse_review_points("This review has no recognizable sections at all.", "p", "m")


# ---------------------------------------------------------------------------
# expert chain stages


def test_extract_meta_points_contract(make_gateway):
    transport = FakeTransport(
        by_prompt={"Meta-review:": _stage_json(["Strong idea"], ["Weak eval", "Poor clarity"])}
    )
    gw = make_gateway(transport)
    drafts = extract_meta_points("The meta review text.", gw, MODEL)
    assert [d.polarity for d in drafts] == [Polarity.STRENGTH, Polarity.WEAKNESS, Polarity.WEAKNESS]
    assert all(d.stage == "meta_extracted" for d in drafts)


def test_extract_meta_points_empty_input(make_gateway):
    gw = make_gateway(ExplodingTransport())
    with pytest.raises(EmptyMetaReviewError):
        extract_meta_points("   ", gw, MODEL)


def test_extract_retries_once_then_fails(make_gateway):
    transport = FakeTransport(script=[(200, openai_body("no json")), (200, openai_body("still none"))])
    gw = make_gateway(transport)
    with pytest.raises(ParseFailedError):
        extract_meta_points("meta", gw, MODEL)
    assert len(transport.calls) == 2


def test_extract_retry_recovers(make_gateway):
    transport = FakeTransport(
        script=[(200, openai_body("garbled")), (200, openai_body(_stage_json(["S"], ["W"])))]
    )
    gw = make_gateway(transport)
    drafts = extract_meta_points("meta", gw, MODEL)
    assert len(drafts) == 2


def _drafts(n_s, n_w, stage="meta_extracted"):
    return [DraftPoint(Polarity.STRENGTH, f"strength {i}", stage) for i in range(n_s)] + [
        DraftPoint(Polarity.WEAKNESS, f"weakness {i}", stage) for i in range(n_w)
    ]


def test_augment_preserves_cardinality_and_polarity(make_gateway):
    transport = FakeTransport(
        by_prompt={
            "Individual reviews:": _stage_json(
                ["strength 0 with detail", "strength 1 with detail"],
                ["weakness 0 with detail", "weakness 1 with detail"],
            )
        }
    )
    gw = make_gateway(transport)
    drafts = _drafts(2, 2)
    out = augment_points(drafts, [("r1", "review text")], gw, MODEL)
    assert [d.polarity for d in out] == [d.polarity for d in drafts]
    assert all(d.stage == "augmented" for d in out)
    assert out[0].text == "strength 0 with detail"


def test_augment_without_reviews_passes_through(make_gateway, caplog):
    gw = make_gateway(ExplodingTransport())
    drafts = _drafts(1, 2)
    with caplog.at_level("WARNING"):
        out = augment_points(drafts, [], gw, MODEL)
    assert [d.text for d in out] == [d.text for d in drafts]
    assert all(d.stage == "augmented" for d in out)
    assert any("no individual reviews" in r.message for r in caplog.records)


def test_augment_cardinality_drift_raises_after_retry(make_gateway):
    short = _stage_json(["only one"], ["w0", "w1"])
    transport = FakeTransport(script=[(200, openai_body(short)), (200, openai_body(short))])
    gw = make_gateway(transport)
    with pytest.raises(CardinalityDriftError) as excinfo:
        augment_points(_drafts(2, 2), [("r1", "text")], gw, MODEL)
    assert excinfo.value.expected == (2, 2)
    assert excinfo.value.got == (1, 2)
    assert len(transport.calls) == 2


def test_augment_drift_recovers_on_retry(make_gateway):
    transport = FakeTransport(
        script=[
            (200, openai_body(_stage_json(["only one"], ["w0"]))),
            (200, openai_body(_stage_json(["s0", "s1"], ["w0"]))),
        ]
    )
    gw = make_gateway(transport)
    out = augment_points(_drafts(2, 1), [("r1", "text")], gw, MODEL)
    assert len(out) == 3


def test_paraphrase_assigns_expert_ids(make_gateway):
    transport = FakeTransport(
        by_prompt={"Paraphrase each item": _stage_json(["final s"], ["final w"])}
    )
    gw = make_gateway(transport)
    points = paraphrase_points(_drafts(1, 1, stage="augmented"), gw, MODEL, paper_id="p9")
    assert [p.point_id for p in points] == [
        "p9::expert::strength::000",
        "p9::expert::weakness::000",
    ]
    assert all(p.origin == Origin.expert() for p in points)
    assert all(p.meta["prompt_manifest"] == prompt_manifest_hash() for p in points)


def test_paraphrase_empty_makes_no_call(make_gateway):
    gw = make_gateway(ExplodingTransport())
    assert paraphrase_points([], gw, MODEL, paper_id="p") == []


def test_stage_ordering_enforced(make_gateway):
    gw = make_gateway(ExplodingTransport())
    with pytest.raises(ValueError):
        paraphrase_points(_drafts(1, 0, stage="meta_extracted"), gw, MODEL, paper_id="p")
    with pytest.raises(ValueError):
        augment_points(_drafts(1, 0, stage="augmented"), [("r", "t")], gw, MODEL)


def test_self_containment_screen():
    from .conftest import make_point

    clean = make_point(body="The evaluation lacks baselines.")
    leaking = make_point(point_id="pt2", body="As Reviewer 2 noted, the proof is wrong.")
    meta = make_point(point_id="pt3", body="The meta-review highlights clarity problems.")
    assert screen_self_references([clean]) == []
    assert screen_self_references([clean, leaking, meta]) == [leaking, meta]


# ---------------------------------------------------------------------------
# golden chain run from a pinned cache


GOLDEN_BUNDLE = make_bundle(
    paper_id="paper42",
    meta="Reviewers agreed the method is novel but the experiments are thin.",
    reviews=(("r1", "The idea is fresh. Needs CIFAR baselines."), ("r2", "Sect. 3 unclear.")),
)

STAGE1_OUT = _stage_json(
    ["The method is novel"],
    ["The experimental evaluation is thin", "Section 3 is unclear"],
)
STAGE2_OUT = _stage_json(
    ["The method is novel; reviewers called the idea fresh"],
    [
        "The experimental evaluation is thin; Reviewer 1 asked for CIFAR baselines",
        "Section 3 is unclear according to Reviewer 2",
    ],
)
STAGE3_OUT = _stage_json(
    ["The proposed method is novel, offering a fresh idea"],
    [
        "The experimental evaluation is thin and lacks CIFAR baselines",
        "Section 3 of the paper is unclear",
    ],
)


def _seed_chain_cache(gw):
    drafts1 = [DraftPoint(Polarity.STRENGTH, "The method is novel", "meta_extracted")] + [
        DraftPoint(Polarity.WEAKNESS, t, "meta_extracted")
        for t in ("The experimental evaluation is thin", "Section 3 is unclear")
    ]
    drafts2 = [
        DraftPoint(Polarity.STRENGTH, "The method is novel; reviewers called the idea fresh", "augmented"),
        DraftPoint(
            Polarity.WEAKNESS,
            "The experimental evaluation is thin; Reviewer 1 asked for CIFAR baselines",
            "augmented",
        ),
        DraftPoint(Polarity.WEAKNESS, "Section 3 is unclear according to Reviewer 2", "augmented"),
    ]
    prompt1 = render_prompt("meta_extract", meta_review=GOLDEN_BUNDLE.meta_review)
    prompt2 = render_prompt(
        "augment",
        points=_format_points(drafts1),
        individual_reviews=_format_reviews(GOLDEN_BUNDLE.individual_reviews),
    )
    prompt3 = render_prompt("paraphrase", points=_format_points(drafts2))
    for prompt, out in ((prompt1, STAGE1_OUT), (prompt2, STAGE2_OUT), (prompt3, STAGE3_OUT)):
        gw.put_cached(MODEL.request(prompt, "structured"), out)


GOLDEN_POINTS = [
    ("paper42::expert::strength::000", Polarity.STRENGTH, "The proposed method is novel, offering a fresh idea"),
    (
        "paper42::expert::weakness::000",
        Polarity.WEAKNESS,
        "The experimental evaluation is thin and lacks CIFAR baselines",
    ),
    ("paper42::expert::weakness::001", Polarity.WEAKNESS, "Section 3 of the paper is unclear"),
]


def test_chain_golden_run_is_cache_only_and_exact(make_gateway):
    gw = make_gateway(ExplodingTransport())
    _seed_chain_cache(gw)
    points = run_expert_chain(GOLDEN_BUNDLE, gw, MODEL)
    assert [(p.point_id, p.polarity, p.body) for p in points] == GOLDEN_POINTS
    assert screen_self_references(points) == []


def test_chain_idempotent_under_warm_cache(make_gateway):
    gw = make_gateway(ExplodingTransport())
    _seed_chain_cache(gw)
    first = [p.to_dict() for p in run_expert_chain(GOLDEN_BUNDLE, gw, MODEL)]
    second = [p.to_dict() for p in run_expert_chain(GOLDEN_BUNDLE, gw, MODEL)]
    assert json.dumps(first, sort_keys=True) == json.dumps(second, sort_keys=True)


def test_polarity_conservation_across_stages(make_gateway):
    gw = make_gateway(ExplodingTransport())
    _seed_chain_cache(gw)
    drafts = extract_meta_points(GOLDEN_BUNDLE.meta_review, gw, MODEL)
    augmented = augment_points(drafts, GOLDEN_BUNDLE.individual_reviews, gw, MODEL)
    final = paraphrase_points(augmented, gw, MODEL, GOLDEN_BUNDLE.paper_id)
    expected = sorted(d.polarity.value for d in drafts)
    assert sorted(d.polarity.value for d in augmented) == expected
    assert sorted(p.polarity.value for p in final) == expected


# ---------------------------------------------------------------------------
# review generation


def test_generate_review_golden(make_gateway):
    transport = FakeTransport(
        by_prompt={
            "expert reviewer": "My review.\n"
            + _stage_json(
                [{"header": "Novel", "body": "Fresh idea."}],
                [{"header": "Thin eval", "body": "Few baselines."}],
            )
        }
    )
    gw = make_gateway(transport)
    paper = make_paper("p1", body="word " * 50)
    review = generate_review(paper, MODEL, gw, max_input_tokens=1000)
    assert review.parse_mode == "structured"
    assert not review.parse_failed
    assert [p.point_id for p in review.parsed] == [
        "p1::fake-model::strength::000",
        "p1::fake-model::weakness::000",
    ]
    assert review.source_meta["prompt_manifest"] == prompt_manifest_hash()
    assert "truncation_note" not in review.source_meta
    assert GeneratedReview.from_dict(review.to_dict()) == review


def test_generate_review_raw_text_durable_before_parsing(make_gateway):
    transport = FakeTransport(by_prompt={"expert reviewer": "unstructured rambling"})
    gw = make_gateway(transport)
    paper = make_paper("p2")
    review = generate_review(paper, MODEL, gw)
    assert review.parse_failed and review.parsed == () and review.parse_mode is None
    assert review.raw_text == "unstructured rambling"
    # the raw response was cached (durable) before parsing was attempted
    prompt = transport.calls[0]["payload"]["messages"][0]["content"]
    key = cache_key(MODEL.request(prompt, "structured"))
    assert gw.cache.get(key)["response"]["text"] == "unstructured rambling"


def test_generate_review_truncation_note(make_gateway):
    transport = FakeTransport(by_prompt={"expert reviewer": _stage_json(["S"], ["W"])})
    gw = make_gateway(transport)
    paper = make_paper("p3", body="tok " * 500)
    review = generate_review(paper, MODEL, gw, max_input_tokens=100)
    assert review.source_meta["truncation_note"] == "body truncated from 500 to 100 whitespace tokens"
    prompt = transport.calls[0]["payload"]["messages"][0]["content"]
    assert prompt.count("tok") == 100


def test_truncate_to_budget():
    text, kept, total = truncate_to_budget("a b c d", 10)
    assert (text, kept, total) == ("a b c d", 4, 4)
    text, kept, total = truncate_to_budget("a b c d", 2)
    assert (text, kept, total) == ("a b", 2, 4)


def test_generated_review_invariant():
    with pytest.raises(ValueError):
        GeneratedReview(paper_id="p", model_id="m", raw_text="x", parsed=(), parse_failed=False)
