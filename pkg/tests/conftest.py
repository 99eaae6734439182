from __future__ import annotations

import json
import threading

import pytest

from review_focus.facets import Polarity
from review_focus.gateway import EndpointConfig, LLMGateway
from review_focus.records import Origin, PaperRecord, ReviewBundle, ReviewPoint


def openai_body(text: str, prompt_tokens: int = 10, completion_tokens: int = 20) -> dict:
    return {
        "choices": [{"message": {"content": text}}],
        "usage": {"prompt_tokens": prompt_tokens, "completion_tokens": completion_tokens},
    }


class FakeTransport:
    """Scripted transport: answers from a queue or a prompt->text table.

    Tracks every call and the maximum number of concurrent in-flight calls so
    tests can assert retry and parallelism contracts.
    """

    def __init__(self, script=None, by_prompt=None, delay: float = 0.0):
        self.script = list(script or [])
        self.by_prompt = dict(by_prompt or {})
        self.delay = delay
        self.calls: list[dict] = []
        self.lock = threading.Lock()
        self.in_flight = 0
        self.max_in_flight = 0

    def __call__(self, url, headers, payload, timeout_s):
        with self.lock:
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
            self.calls.append({"url": url, "headers": dict(headers), "payload": json.loads(json.dumps(payload))})
        try:
            if self.delay:
                import time

                time.sleep(self.delay)
            with self.lock:
                if self.script:
                    item = self.script.pop(0)
                    if isinstance(item, Exception):
                        raise item
                    return item
            prompt = payload["messages"][-1]["content"]
            for needle, text in self.by_prompt.items():
                if needle in prompt:
                    return 200, openai_body(text)
            raise AssertionError(f"no scripted response for prompt: {prompt[:120]!r}")
        finally:
            with self.lock:
                self.in_flight -= 1


class ExplodingTransport:
    """Fails the test if any network call is attempted (cache-only runs)."""

    def __init__(self):
        self.calls = 0

    def __call__(self, url, headers, payload, timeout_s):
        self.calls += 1
        raise AssertionError("transport was called; expected a pure cache replay")


@pytest.fixture
def fake_endpoint(monkeypatch):
    monkeypatch.setenv("FAKE_API_KEY", "test-key")
    return EndpointConfig(
        endpoint_id="fake",
        base_url="https://fake.example/v1",
        rpm_limit=100000,
        max_parallel=8,
        retry_cap=5,
        timeout_s=5.0,
    )


@pytest.fixture
def make_gateway(tmp_path, fake_endpoint):
    def build(transport, **kwargs) -> LLMGateway:
        kwargs.setdefault("sleep", lambda s: None)
        return LLMGateway(
            {"fake": fake_endpoint}, tmp_path / "cache", transport=transport, **kwargs
        )

    return build


def make_paper(paper_id="p1", body="Full text of the submission.", decision="rejected", year=2023):
    from review_focus.facets import Decision

    return PaperRecord(
        paper_id=paper_id,
        title=f"Title of {paper_id}",
        venue_year=year,
        decision=Decision(decision),
        body_text=body,
    )


def make_bundle(paper_id="p1", meta="Meta review praising method, criticizing evaluation.", reviews=(("r1", "Detailed comments."),)):
    return ReviewBundle(paper_id=paper_id, meta_review=meta, individual_reviews=tuple(reviews))


def make_point(
    point_id="pt1",
    paper_id="p1",
    polarity=Polarity.STRENGTH,
    body="The method is sound.",
    origin=None,
    header=None,
):
    return ReviewPoint(
        point_id=point_id,
        paper_id=paper_id,
        polarity=polarity,
        body=body,
        origin=origin or Origin.expert(),
        header=header,
    )
