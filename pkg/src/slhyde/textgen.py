"""Generator clients: prompt templates, sampling, retries, deterministic mocks.

Two client flavors share one calling convention (`request_completions`):
the remote client speaks the de-facto chat-completions JSON protocol, the
mock client is fully deterministic given (prompt, seed, sample index) so
that every pipeline can run offline and reproduce byte-identically.
"""
from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
import logging
import re
import time
from dataclasses import dataclass
from importlib import resources
from typing import Callable, Sequence

import numpy as np
import requests

from .corpus import Document
from .errors import (
    DegenerateOutputError,
    ProtocolError,
    TransportError,
    ValidationError,
)

logger = logging.getLogger(__name__)

_SLOT_RE = re.compile(r"\{([A-Z][A-Z0-9_]*)\}")
_ROLE_PREFIX_RE = re.compile(r"^(assistant|system|user)\s*[:：]\s*", re.IGNORECASE)

TEMPLATE_FILES = {
    "Q2P": "q2p.txt",
    "T2P": "t2p.txt",
    "P2P": "p2p.txt",
    "QUERY_GEN": "query_gen.txt",
    "PSEUDO_GEN": "pseudo_gen.txt",
    "MED_RELEVANCE": "med_relevance.txt",
    "RERANK": "rerank.txt",
    "EVIDENCE": "evidence.txt",
    "ANSWER_BY_EVIDENCE": "answer_by_evidence.txt",
    "VALIDATE_ANSWER": "validate_answer.txt",
    "QD_RELEVANCE": "qd_relevance.txt",
}

# Task templates usable for hypothetical-document generation, and the slot
# each one fills with the incoming query text.
HYPOTHETICAL_TEMPLATES = ("Q2P", "T2P", "P2P")
_HYPOTHETICAL_SLOT = {"Q2P": "QUESTION", "T2P": "TITLE", "P2P": "TEXT"}


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str

    def slots(self) -> set[str]:
        return set(_SLOT_RE.findall(self.body))


@functools.lru_cache(maxsize=None)
def load_template(name: str) -> PromptTemplate:
    """Load a shipped template by name. Bodies live as editable package files."""
    try:
        filename = TEMPLATE_FILES[name]
    except KeyError:
        raise ValidationError(f"unknown prompt template {name!r}") from None
    body = resources.files("slhyde").joinpath("prompts", filename).read_text("utf-8")
    return PromptTemplate(name=name, body=body.rstrip("\n"))


def render_prompt(template: PromptTemplate, slots: dict[str, str]) -> str:
    """Substitute {SLOT} markers. Pure; values are inserted verbatim and never rescanned."""

    def _sub(match: re.Match) -> str:
        name = match.group(1)
        if name not in slots:
            raise ValidationError(f"missing slot {name!r} for template {template.name!r}")
        return slots[name]

    return _SLOT_RE.sub(_sub, template.body)


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = 0.7
    max_output_tokens: int = 512
    seed: int | None = None
    num_samples: int = 1

    def __post_init__(self):
        if self.temperature < 0:
            raise ValidationError("temperature must be >= 0")
        if self.num_samples < 1:
            raise ValidationError("num_samples must be >= 1")
        if self.max_output_tokens < 1:
            raise ValidationError("max_output_tokens must be >= 1")


def _clean_completion(text: str) -> str:
    cleaned = text.strip()
    cleaned = _ROLE_PREFIX_RE.sub("", cleaned, count=1)
    return cleaned.strip()


def _prompt_payload(prompt: str) -> str:
    """Content tokens of a rendered prompt: drops the instruction line and field markers."""
    lines = prompt.splitlines()
    body = lines[1:] if len(lines) > 1 else lines
    tokens = []
    for line in body:
        for tok in line.split():
            if tok.endswith(":") or tok.endswith("："):
                continue
            tokens.append(tok)
    return " ".join(tokens) if tokens else prompt.strip()


def hash_paraphrase(
    text: str,
    seed: int = 0,
    index: int = 0,
    max_tokens: int | None = None,
    drop_rate: float = 0.0,
) -> str:
    """Deterministic token-shuffle paraphrase of `text`.

    Keeps the bag of tokens (minus optional drops), changes their order, and is
    guaranteed not to return `text` itself when it has more than one token.
    """
    tokens = text.split()
    if not tokens:
        return text
    digest = hashlib.blake2b(f"{seed}|{index}|{text}".encode("utf-8"), digest_size=8).digest()
    rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest, "little")))
    if drop_rate > 0 and len(tokens) > 1:
        keep = rng.random(len(tokens)) >= drop_rate
        if not keep.any():
            keep[0] = True
        tokens = [t for t, k in zip(tokens, keep) if k]
    order = rng.permutation(len(tokens))
    shuffled = [tokens[i] for i in order]
    if shuffled == tokens and len(tokens) > 1:
        shuffled = shuffled[1:] + shuffled[:1]
    if max_tokens is not None:
        shuffled = shuffled[:max_tokens]
    return " ".join(shuffled)


_JUDGE_TEMPLATES = (
    "MED_RELEVANCE",
    "RERANK",
    "EVIDENCE",
    "ANSWER_BY_EVIDENCE",
    "VALIDATE_ANSWER",
    "QD_RELEVANCE",
)


@functools.lru_cache(maxsize=1)
def _judge_prefixes() -> dict[str, str]:
    return {load_template(name).body.splitlines()[0]: name for name in _JUDGE_TEMPLATES}


def _judge_autopilot(prompt: str) -> str | None:
    """Deterministic valid-JSON verdicts for the shipped judge prompts.

    This is what lets the whole benchmark-construction pipeline run offline:
    an unscripted mock still answers every judge call in the format the
    pipeline expects (keep, rerank as given, non-empty evidence, consistent
    answer, mid-high scores).
    """
    matched = None
    for prefix, name in _judge_prefixes().items():
        if prompt.startswith(prefix):
            matched = name
            break
    if matched is None:
        return None
    if matched == "MED_RELEVANCE":
        return json.dumps({"reason": "mock judge: default keep", "label": 1})
    if matched == "RERANK":
        return json.dumps({"ranking": [1, 2, 3]})
    if matched == "EVIDENCE":
        span = " ".join(_prompt_payload(prompt).split()[:12]) or "evidence"
        return json.dumps({"evidence_spans": [span]}, ensure_ascii=False)
    if matched == "ANSWER_BY_EVIDENCE":
        answer = " ".join(_prompt_payload(prompt).split()[:16]) or "answer"
        return json.dumps({"answer": answer, "reason": "mock judge"}, ensure_ascii=False)
    if matched == "VALIDATE_ANSWER":
        return json.dumps({"similarity_score": 0.8, "explanation": "mock judge"})
    return json.dumps({"quality_score": 4, "explanation": "mock judge"})


class MockGeneratorClient:
    """Offline deterministic generator.

    Resolution order per request: exact scripted response for the prompt,
    then the `responder` callable, then canned JSON verdicts for the shipped
    judge prompts, then a hashing paraphrase of the prompt payload. Scripted
    values may be a single string or a per-sample-index list. `fail_times`
    simulates transport failures for retry tests.
    """

    max_retries = 2
    backoff = 0.0

    def __init__(
        self,
        responses: dict[str, str | Sequence[str]] | None = None,
        responder: Callable[[str, SamplingConfig], str | Sequence[str]] | None = None,
        seed: int = 0,
        max_retries: int = 2,
        fail_times: int = 0,
    ):
        self.responses = dict(responses or {})
        self.responder = responder
        self.seed = seed
        self.max_retries = max_retries
        self.calls = 0
        self._fail_remaining = fail_times

    def request_completions(self, prompt: str, cfg: SamplingConfig) -> list[str]:
        self.calls += 1
        if self._fail_remaining > 0:
            self._fail_remaining -= 1
            raise TransportError("mock transport failure")
        scripted = self.responses.get(prompt)
        if scripted is None and self.responder is not None:
            scripted = self.responder(prompt, cfg)
        if scripted is not None:
            if isinstance(scripted, str):
                return [scripted] * cfg.num_samples
            scripted = list(scripted)
            if len(scripted) < cfg.num_samples:
                raise ValidationError(
                    f"scripted response has {len(scripted)} entries, need {cfg.num_samples}"
                )
            return scripted[: cfg.num_samples]
        autopilot = _judge_autopilot(prompt)
        if autopilot is not None:
            return [autopilot] * cfg.num_samples
        seed = cfg.seed if cfg.seed is not None else self.seed
        payload = _prompt_payload(prompt)
        return [
            hash_paraphrase(payload, seed=seed, index=i, max_tokens=cfg.max_output_tokens)
            for i in range(cfg.num_samples)
        ]


class RemoteGeneratorClient:
    """Chat-completions HTTP client (POST JSON: model, messages, temperature, n)."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: str | None = None,
        timeout: float = 30.0,
        max_retries: int = 2,
        backoff: float = 1.0,
        session=None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self._session = session if session is not None else requests.Session()

    def request_completions(self, prompt: str, cfg: SamplingConfig) -> list[str]:
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": cfg.temperature,
            "n": cfg.num_samples,
            "max_tokens": cfg.max_output_tokens,
        }
        if cfg.seed is not None:
            body["seed"] = cfg.seed
        headers = {}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            response = self._session.post(
                self.endpoint, json=body, timeout=self.timeout, headers=headers
            )
        except Exception as exc:
            raise TransportError(f"request to {self.endpoint} failed: {exc}") from exc
        if getattr(response, "status_code", 200) != 200:
            raise TransportError(f"endpoint returned HTTP {response.status_code}")
        try:
            data = response.json()
            return [choice["message"]["content"] for choice in data["choices"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed completion response: {exc}") from exc


def generate(client, prompt: str, cfg: SamplingConfig | None = None) -> list[str]:
    """Request `cfg.num_samples` completions with retries.

    Empty completions are filtered; transport failures and shortfalls are
    retried up to the client's retry limit.
    """
    cfg = cfg or SamplingConfig()
    attempts = client.max_retries + 1
    backoff = getattr(client, "backoff", 0.0)
    collected: list[str] = []
    for attempt in range(1, attempts + 1):
        try:
            raw = client.request_completions(prompt, cfg)
        except TransportError as exc:
            logger.warning("generation attempt %d/%d failed: %s", attempt, attempts, exc)
            if attempt == attempts:
                raise TransportError("generation failed", attempts=attempts) from exc
            if backoff > 0:
                time.sleep(backoff * 2 ** (attempt - 1))
            continue
        collected.extend(c for c in (_clean_completion(r) for r in raw) if c)
        if len(collected) >= cfg.num_samples:
            return collected[: cfg.num_samples]
        logger.warning(
            "attempt %d/%d yielded %d/%d usable completions",
            attempt,
            attempts,
            len(collected),
            cfg.num_samples,
        )
    raise DegenerateOutputError(
        f"got {len(collected)} usable completions, needed {cfg.num_samples}"
    )


def generate_query_for_doc(client, doc: Document, cfg: SamplingConfig | None = None) -> str:
    """Synthesize one search query that the given document answers."""
    if not doc.text.strip():
        raise ValidationError(f"document {doc.id!r} has empty text")
    prompt = render_prompt(load_template("QUERY_GEN"), {"DOCUMENT": doc.indexed_text})
    cfg = dataclasses.replace(cfg or SamplingConfig(), num_samples=1)
    return generate(client, prompt, cfg)[0]


def generate_pseudo_docs(
    client, query: str, target: Document, count: int, cfg: SamplingConfig | None = None
) -> list[str]:
    """Generate `count` candidate pseudo-documents for (query, target document)."""
    if count < 1:
        raise ValidationError("candidate count must be >= 1")
    prompt = render_prompt(
        load_template("PSEUDO_GEN"),
        {"QUESTION": query, "DOCUMENT": target.indexed_text},
    )
    cfg = dataclasses.replace(cfg or SamplingConfig(), num_samples=count)
    return generate(client, prompt, cfg)


def generate_hypothetical(
    client,
    query_text: str,
    template_name: str = "Q2P",
    count: int = 1,
    cfg: SamplingConfig | None = None,
) -> list[str]:
    """Generate `count` hypothetical documents for a query. count=0 returns []."""
    if template_name not in HYPOTHETICAL_TEMPLATES:
        raise ValidationError(
            f"template {template_name!r} is not one of {HYPOTHETICAL_TEMPLATES}"
        )
    if count < 0:
        raise ValidationError("count must be >= 0")
    if count == 0:
        return []
    slot = _HYPOTHETICAL_SLOT[template_name]
    prompt = render_prompt(load_template(template_name), {slot: query_text})
    cfg = dataclasses.replace(cfg or SamplingConfig(), num_samples=count)
    return generate(client, prompt, cfg)
