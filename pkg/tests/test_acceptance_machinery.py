"""Validates the dataset-driven acceptance checks on a constructed corpus.

The released benchmark data is an external input that may not be present in
every environment. These tests build a corpus that reproduces its published
statistics (point-count means, the fine-tuned model's KL lead, the
best-matching model's agreement level, the novelty blind spot) and run the
exact criterion checks against it, so the checking code is known-good before
the real dataset is plugged in. They validate the harness, not the criteria.
"""

from __future__ import annotations

import json
import random
from collections import Counter

import pytest

from review_focus.facets import AspectFacet, FacetKind, Polarity, TargetFacet
from review_focus.metrics import avg_focus_kl, focus_profile
from review_focus.records import AnnotatedPoint, FocusDistribution, Origin, ReviewPoint
from review_focus.storage import persist_stage

from .test_acceptance import (
    check_count_statistics,
    check_novelty_blind_spot,
    check_table_reproduction,
)

N_PAPERS = 100

HUMAN_WEIGHTS = {
    (Polarity.STRENGTH, FacetKind.TARGET): {
        TargetFacet.METHOD: 0.34,
        TargetFacet.EXPERIMENT: 0.26,
        TargetFacet.PROBLEM: 0.14,
        TargetFacet.THEORY: 0.10,
        TargetFacet.PRIOR_RESEARCH: 0.06,
        TargetFacet.CONCLUSION: 0.05,
        TargetFacet.PAPER: 0.05,
    },
    (Polarity.STRENGTH, FacetKind.ASPECT): {
        AspectFacet.VALIDITY: 0.30,
        AspectFacet.NOVELTY: 0.25,
        AspectFacet.IMPACT: 0.20,
        AspectFacet.CLARITY: 0.15,
        AspectFacet.NOT_SPECIFIC: 0.10,
    },
    (Polarity.WEAKNESS, FacetKind.TARGET): {
        TargetFacet.EXPERIMENT: 0.36,
        TargetFacet.METHOD: 0.28,
        TargetFacet.THEORY: 0.12,
        TargetFacet.PRIOR_RESEARCH: 0.10,
        TargetFacet.PROBLEM: 0.06,
        TargetFacet.CONCLUSION: 0.04,
        TargetFacet.PAPER: 0.04,
    },
    (Polarity.WEAKNESS, FacetKind.ASPECT): {
        AspectFacet.VALIDITY: 0.45,
        AspectFacet.CLARITY: 0.20,
        AspectFacet.NOVELTY: 0.15,
        AspectFacet.IMPACT: 0.10,
        AspectFacet.NOT_SPECIFIC: 0.10,
    },
}

# Technical-validity skew with the novelty blind spot in weaknesses.
LLM_SKEW = {
    (Polarity.STRENGTH, FacetKind.TARGET): {
        TargetFacet.METHOD: 0.45,
        TargetFacet.EXPERIMENT: 0.35,
        TargetFacet.THEORY: 0.08,
        TargetFacet.PROBLEM: 0.04,
        TargetFacet.PRIOR_RESEARCH: 0.02,
        TargetFacet.CONCLUSION: 0.03,
        TargetFacet.PAPER: 0.03,
    },
    (Polarity.STRENGTH, FacetKind.ASPECT): {
        AspectFacet.VALIDITY: 0.55,
        AspectFacet.NOVELTY: 0.15,
        AspectFacet.IMPACT: 0.12,
        AspectFacet.CLARITY: 0.10,
        AspectFacet.NOT_SPECIFIC: 0.08,
    },
    (Polarity.WEAKNESS, FacetKind.TARGET): {
        TargetFacet.EXPERIMENT: 0.45,
        TargetFacet.METHOD: 0.35,
        TargetFacet.THEORY: 0.09,
        TargetFacet.PRIOR_RESEARCH: 0.04,
        TargetFacet.PROBLEM: 0.03,
        TargetFacet.CONCLUSION: 0.02,
        TargetFacet.PAPER: 0.02,
    },
    (Polarity.WEAKNESS, FacetKind.ASPECT): {
        AspectFacet.VALIDITY: 0.70,
        AspectFacet.CLARITY: 0.18,
        AspectFacet.IMPACT: 0.06,
        AspectFacet.NOVELTY: 0.03,
        AspectFacet.NOT_SPECIFIC: 0.03,
    },
}

QUADRANTS = list(HUMAN_WEIGHTS)


def apportion(weights: dict, n: int) -> dict:
    """Largest-remainder apportionment of n units over the weight keys."""
    quotas = {k: w * n for k, w in weights.items()}
    counts = {k: int(q) for k, q in quotas.items()}
    remaining = n - sum(counts.values())
    by_fraction = sorted(quotas, key=lambda k: (quotas[k] - counts[k], str(k)), reverse=True)
    for k in by_fraction[:remaining]:
        counts[k] += 1
    return counts


def mix(a: dict, b: dict, lam: float) -> dict:
    return {k: (1 - lam) * a[k] + lam * b[k] for k in a}


def expand(counts: dict) -> list:
    out = []
    for key in counts:
        out.extend([key] * counts[key])
    return out


def paired_labels(target_counts, aspect_counts, rng):
    targets = expand(target_counts)
    aspects = expand(aspect_counts)
    assert len(targets) == len(aspects)
    rng.shuffle(targets)
    rng.shuffle(aspects)
    return list(zip(targets, aspects))


def annotated(point_id, paper_id, polarity, target, aspect, origin):
    return AnnotatedPoint(
        point=ReviewPoint(
            point_id=point_id,
            paper_id=paper_id,
            polarity=polarity,
            body=f"synthetic point {point_id}",
            origin=origin,
        ),
        target=target,
        aspect=aspect,
        annotator_id="auto",
    )


def _human_sizes():
    # 39 papers with 2s+4w, 61 with 2s+3w: 539 points, mean 5.39
    return [(2, 4) if i < 39 else (2, 3) for i in range(N_PAPERS)]


def _llm_sizes():
    # 88 reviews with 4s+4w, 12 with 3s+4w: 788 points per model;
    # pooled over four models the mean is exactly 7.88
    return [(4, 4) if i < 88 else (3, 4) for i in range(N_PAPERS)]


def _build_group_from_counts(group_counts, sizes, origin, rng, id_prefix):
    labels = {
        Polarity.STRENGTH: paired_labels(
            group_counts[(Polarity.STRENGTH, FacetKind.TARGET)],
            group_counts[(Polarity.STRENGTH, FacetKind.ASPECT)],
            rng,
        ),
        Polarity.WEAKNESS: paired_labels(
            group_counts[(Polarity.WEAKNESS, FacetKind.TARGET)],
            group_counts[(Polarity.WEAKNESS, FacetKind.ASPECT)],
            rng,
        ),
    }
    cursor = {Polarity.STRENGTH: 0, Polarity.WEAKNESS: 0}
    out = []
    for i, (n_s, n_w) in enumerate(sizes):
        paper = f"paper{i:03d}"
        for polarity, count in ((Polarity.STRENGTH, n_s), (Polarity.WEAKNESS, n_w)):
            for j in range(count):
                target, aspect = labels[polarity][cursor[polarity]]
                cursor[polarity] += 1
                out.append(
                    annotated(
                        f"{id_prefix}-{paper}-{polarity.value[0]}{j}",
                        paper,
                        polarity,
                        target,
                        aspect,
                        origin,
                    )
                )
    return out


def _quadrant_totals(sizes):
    total_s = sum(s for s, _ in sizes)
    total_w = sum(w for _, w in sizes)
    return {
        (Polarity.STRENGTH, FacetKind.TARGET): total_s,
        (Polarity.STRENGTH, FacetKind.ASPECT): total_s,
        (Polarity.WEAKNESS, FacetKind.TARGET): total_w,
        (Polarity.WEAKNESS, FacetKind.ASPECT): total_w,
    }


def _realized_weights(annotations):
    weights = {}
    for polarity, kind in QUADRANTS:
        counts = Counter()
        for a in annotations:
            if a.point.polarity is polarity:
                counts[a.target if kind is FacetKind.TARGET else a.aspect] += 1
        total = sum(counts.values())
        vocab = list(TargetFacet) if kind is FacetKind.TARGET else list(AspectFacet)
        weights[(polarity, kind)] = {f: counts[f] / total for f in vocab}
    return weights


def _tune_ft_counts(human_weights, totals):
    """Perturb an exact copy of the human mix until avg KL lands near 0.022."""
    human_dists = {
        (pol, kind): FocusDistribution.from_counts(
            kind, pol, apportion(human_weights[(pol, kind)], totals[(pol, kind)])
        )
        for pol, kind in QUADRANTS
    }
    base = {
        key: apportion(human_weights[key], totals[key]) for key in QUADRANTS
    }
    best = None
    for m in range(0, 60):
        counts = {key: dict(base[key]) for key in QUADRANTS}
        for key in QUADRANTS:
            ranked = sorted(counts[key], key=counts[key].get, reverse=True)
            donor, receiver = ranked[0], ranked[1]
            moved = min(m, counts[key][donor] - 1)
            counts[key][donor] -= moved
            counts[key][receiver] += moved
        profile = tuple(
            FocusDistribution.from_counts(kind, pol, counts[(pol, kind)])
            for pol, kind in QUADRANTS
        )
        value = sum(
            _kl(human_dists[(pol, kind)], dist)
            for (pol, kind), dist in zip(QUADRANTS, profile)
        ) / 4.0
        distance = abs(value - 0.022)
        if best is None or distance < best[0]:
            best = (distance, counts, value)
    assert best is not None and abs(best[2] - 0.022) < 0.008, f"tuning failed: {best[2]:.4f}"
    return best[1]


def _kl(p, q):
    from review_focus.metrics import kl_divergence

    return kl_divergence(p, q, 1e-6)


def build_synthetic_dataset(root):
    rng = random.Random(20250810)
    human_sizes = _human_sizes()
    llm_sizes = _llm_sizes()

    human_counts = {
        key: apportion(HUMAN_WEIGHTS[key], total)
        for key, total in _quadrant_totals(human_sizes).items()
    }
    human = _build_group_from_counts(human_counts, human_sizes, Origin.expert(), rng, "h")
    human_realized = _realized_weights(human)

    annotations = list(human)

    # fine-tuned stand-in: human mix, nudged until avg KL sits near 0.022
    ft_counts = _tune_ft_counts(human_realized, _quadrant_totals(llm_sizes))
    annotations += _build_group_from_counts(
        ft_counts, llm_sizes, Origin.model("ft-model"), rng, "ft"
    )

    # model-a: copies 248 human points exactly (tp = 248 against 539 ref and
    # 788 cand totals -> overall F1 = 496/1327 = 0.3738), fills the rest from
    # the skewed mix avoiding that paper's human pair keys
    human_by_paper = {}
    for a in human:
        human_by_paper.setdefault(a.point.paper_id, []).append(a)
    model_a = []
    for i, (n_s, n_w) in enumerate(llm_sizes):
        paper = f"paper{i:03d}"
        k = 3 if i < 48 else 2
        sources = human_by_paper[paper]
        strengths = [a for a in sources if a.point.polarity is Polarity.STRENGTH]
        weaknesses = [a for a in sources if a.point.polarity is Polarity.WEAKNESS]
        non_novelty = [a for a in weaknesses if a.aspect is not AspectFacet.NOVELTY]
        copies = strengths[:2]
        if k == 3:
            copies = copies + (non_novelty[:1] or weaknesses[:1])
        human_keys = {(a.target, a.aspect) for a in sources}
        counters = {Polarity.STRENGTH: 0, Polarity.WEAKNESS: 0}

        def add(polarity, target, aspect):
            j = counters[polarity]
            counters[polarity] += 1
            model_a.append(
                annotated(
                    f"a-{paper}-{polarity.value[0]}{j}",
                    paper,
                    polarity,
                    target,
                    aspect,
                    Origin.model("model-a"),
                )
            )

        for copy in copies:
            add(copy.point.polarity, copy.target, copy.aspect)
        for polarity, total in ((Polarity.STRENGTH, n_s), (Polarity.WEAKNESS, n_w)):
            fill = total - counters[polarity]
            t_weights = LLM_SKEW[(polarity, FacetKind.TARGET)]
            a_weights = LLM_SKEW[(polarity, FacetKind.ASPECT)]
            for _ in range(fill):
                for _ in range(80):
                    target = rng.choices(list(t_weights), weights=t_weights.values())[0]
                    aspect = rng.choices(list(a_weights), weights=a_weights.values())[0]
                    if (target, aspect) not in human_keys:
                        break
                else:
                    target, aspect = next(
                        (t, asp)
                        for t in TargetFacet
                        for asp in AspectFacet
                        if (t, asp) not in human_keys
                    )
                add(polarity, target, aspect)
    annotations += model_a

    # model-b / model-c: increasingly skewed pure mixes
    for model_id, lam in (("model-b", 0.6), ("model-c", 1.0)):
        counts = {
            key: apportion(mix(human_realized[key], LLM_SKEW[key], lam), total)
            for key, total in _quadrant_totals(llm_sizes).items()
        }
        annotations += _build_group_from_counts(
            counts, llm_sizes, Origin.model(model_id), rng, model_id[-1]
        )

    persist_stage(annotations, root / "annotations.jsonl")
    (root / "dataset_meta.json").write_text(
        json.dumps(
            {
                "ft_model": "ft-model",
                "deepseek_r1": "model-a",
                "highest_expected": ["model-c"],
                "off_the_shelf": ["model-a", "model-b", "model-c"],
            }
        )
    )
    return annotations


@pytest.fixture(scope="module")
def synthetic_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic_dataset")
    build_synthetic_dataset(root)
    return root


def test_generator_hits_published_statistics(synthetic_dataset):
    # sanity on the construction itself before trusting the checks
    from review_focus.records import AnnotatedPoint
    from review_focus.storage import load_stage

    annotations = load_stage(synthetic_dataset / "annotations.jsonl", AnnotatedPoint.from_dict)
    human = [a for a in annotations if a.point.origin.group_id == "human"]
    ft = [a for a in annotations if a.point.origin.group_id == "ft-model"]
    assert len(human) == 539
    assert len(ft) == 788
    kl = avg_focus_kl(focus_profile(human, "human"), focus_profile(ft, "ft-model"))
    assert abs(kl - 0.022) < 0.008


def test_check_table_reproduction_machinery(synthetic_dataset):
    check_table_reproduction(synthetic_dataset)


def test_check_count_statistics_machinery(synthetic_dataset):
    check_count_statistics(synthetic_dataset)


def test_check_novelty_blind_spot_machinery(synthetic_dataset):
    check_novelty_blind_spot(synthetic_dataset)


def test_checks_detect_violations(tmp_path):
    # the count check must fail when the corpus does not have the published
    # means; dropping one human point from 30 papers moves the human mean to
    # 5.09, well outside 5.39 +/- 0.05
    root = tmp_path / "broken"
    root.mkdir()
    annotations = build_synthetic_dataset(root)
    dropped = {f"h-paper{i:03d}-w0" for i in range(30)}
    thinned = [a for a in annotations if a.point.point_id not in dropped]
    assert len(thinned) == len(annotations) - 30
    persist_stage(thinned, root / "annotations.jsonl")
    with pytest.raises(AssertionError):
        check_count_statistics(root)
