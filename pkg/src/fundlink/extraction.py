"""Closed-domain QA extraction of funding metadata.

Six fields are extracted per opportunity, each with its own retrieval
context and completion call: minimum/maximum award, total funding, the
funder contribution percentage, and minimum/maximum funding duration.
Answers come back as single-key JSON objects and are normalized to
integer pounds, integer percent, or (magnitude, unit) durations with a
canonical month count for month/year units.

The completion port is pluggable: an offline replay client keyed by
(doc_id, field) for reproducible runs, or an HTTP chat-completions
adapter for live services.
"""

from __future__ import annotations

import json
import logging
import re
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal, InvalidOperation
from enum import Enum
from pathlib import Path
from typing import Callable, Protocol

from .doctree import OpportunityDoc, serialize_markdown
from .errors import CompletionFailure, MalformedResponse, TransportError
from .retrieval import (DenseScorer, Reranker, RetrievalConfig, ScoredChunk,
                        build_chunks, build_index, retrieve_from_index,
                        trace_record)

logger = logging.getLogger(__name__)


class MetadataField(str, Enum):
    MINIMUM_AWARD = "minimum_award"
    MAXIMUM_AWARD = "maximum_award"
    TOTAL_FUNDING = "total_funding"
    FUNDING_PERCENTAGE = "funding_percentage"
    MINIMUM_FUNDING_DURATION = "minimum_funding_duration"
    MAXIMUM_FUNDING_DURATION = "maximum_funding_duration"


MONEY_FIELDS = {MetadataField.MINIMUM_AWARD, MetadataField.MAXIMUM_AWARD,
                MetadataField.TOTAL_FUNDING}
PERCENT_FIELDS = {MetadataField.FUNDING_PERCENTAGE}
DURATION_FIELDS = {MetadataField.MINIMUM_FUNDING_DURATION,
                   MetadataField.MAXIMUM_FUNDING_DURATION}

FIELD_QUESTIONS: dict[MetadataField, str] = {
    MetadataField.MINIMUM_AWARD: "What is the minimum fund value (£)?",
    MetadataField.MAXIMUM_AWARD: "What is the maximum fund value (£)?",
    MetadataField.TOTAL_FUNDING:
        "What is the total fund value (£) split among successful applications?",
    MetadataField.FUNDING_PERCENTAGE:
        "What percentage (%) of the project's funding will UKRI fund?",
    MetadataField.MINIMUM_FUNDING_DURATION:
        "What is the minimum duration of the project/funding?",
    MetadataField.MAXIMUM_FUNDING_DURATION:
        "What is the maximum duration of the project/funding?",
}

SYSTEM_PROMPT = """You extract metadata from UKRI funding opportunity documents.

You will be given a document and a set of questions. Extract the answer strictly from the provided text. If the information is not explicitly stated, respond with null.

Rules:
- Only use information explicitly stated in the document.
- Monetary values should be the nearest integer pounds without currency symbols or commas.
- Percentages should be the nearest integer without the % symbol.
- Durations should be quoted using the unit they appear with in the text. Duration strings may be rewritten to make sense (e.g. "36 months", "3 years").

Respond with a JSON object only: {"<key>": "plain-text answer"} or {"<key>": null} if unknown. No other text."""

USER_TEMPLATE = "## CONTEXT\n{context}\n\n## QUESTION\n{question}"


def build_prompt(context: str, question: str) -> tuple[str, str]:
    """(system, user) texts for one field question."""
    if question not in FIELD_QUESTIONS.values():
        raise ValueError(f"not one of the published field questions: {question!r}")
    return SYSTEM_PROMPT, USER_TEMPLATE.format(context=context, question=question)


# ---------------------------------------------------------------------------
# Answer parsing and normalization


def parse_answer(response: str, expected_key: str) -> str | None:
    """Value for expected_key from the first JSON object in the response
    that carries it; JSON null and the string "null" map to None."""
    decoder = json.JSONDecoder()
    for pos, char in enumerate(response):
        if char != "{":
            continue
        try:
            obj, _ = decoder.raw_decode(response, pos)
        except json.JSONDecodeError:
            continue
        if not isinstance(obj, dict) or expected_key not in obj:
            continue
        value = obj[expected_key]
        if value is None:
            return None
        if isinstance(value, str):
            return None if value.strip().lower() == "null" else value
        if isinstance(value, bool):
            break
        if isinstance(value, (int, float)):
            return json.dumps(value)
        break
    raise MalformedResponse(f"no JSON object with key {expected_key!r} in response")


UNKNOWN = "unknown"
MONEY = "money"
PERCENT = "percent"
DURATION = "duration"

DURATION_UNITS = ("days", "weeks", "months", "years")


@dataclass(frozen=True)
class NormalizedAnswer:
    kind: str = UNKNOWN
    money: int | None = None
    percent: int | None = None
    magnitude: int | None = None
    unit: str | None = None
    canonical_months: int | None = None

    @property
    def is_unknown(self) -> bool:
        return self.kind == UNKNOWN

    def rendered(self) -> str:
        """Plain-text form used for report output and value tracing."""
        if self.kind == MONEY:
            return str(self.money)
        if self.kind == PERCENT:
            return str(self.percent)
        if self.kind == DURATION:
            return f"{self.magnitude} {self.unit}"
        return "null"

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind}
        if self.kind == MONEY:
            d["money"] = self.money
        elif self.kind == PERCENT:
            d["percent"] = self.percent
        elif self.kind == DURATION:
            d["magnitude"] = self.magnitude
            d["unit"] = self.unit
            if self.canonical_months is not None:
                d["canonical_months"] = self.canonical_months
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizedAnswer":
        return cls(kind=d.get("kind", UNKNOWN),
                   money=d.get("money"),
                   percent=d.get("percent"),
                   magnitude=d.get("magnitude"),
                   unit=d.get("unit"),
                   canonical_months=d.get("canonical_months"))


def unknown_answer() -> NormalizedAnswer:
    return NormalizedAnswer()


def money_answer(pounds: int) -> NormalizedAnswer:
    return NormalizedAnswer(kind=MONEY, money=pounds)


def percent_answer(value: int) -> NormalizedAnswer:
    return NormalizedAnswer(kind=PERCENT, percent=value)


def duration_answer(magnitude: int, unit: str) -> NormalizedAnswer:
    canonical = None
    if unit == "months":
        canonical = magnitude
    elif unit == "years":
        canonical = magnitude * 12
    return NormalizedAnswer(kind=DURATION, magnitude=magnitude, unit=unit,
                            canonical_months=canonical)


def normalized_equal(a: NormalizedAnswer, b: NormalizedAnswer) -> bool:
    """Equality under the evaluation rules: money and percent compare
    exactly; durations compare canonical months when both sides have them,
    else (magnitude, unit) exactly."""
    if a.kind != b.kind:
        return False
    if a.kind == MONEY:
        return a.money == b.money
    if a.kind == PERCENT:
        return a.percent == b.percent
    if a.kind == DURATION:
        if a.canonical_months is not None and b.canonical_months is not None:
            return a.canonical_months == b.canonical_months
        return (a.magnitude, a.unit) == (b.magnitude, b.unit)
    return True  # both unknown


_MONEY_SCALE = {"k": 1_000, "thousand": 1_000, "m": 1_000_000,
                "million": 1_000_000, "bn": 1_000_000_000,
                "billion": 1_000_000_000}
_MONEY_RE = re.compile(
    r"^(\d+(?:,\d{3})*(?:\.\d+)?|\.\d+)\s*(k|thousand|m|million|bn|billion)?$",
    re.IGNORECASE)
_PERCENT_RE = re.compile(r"^(\d+(?:\.\d+)?)\s*%?$")
_DURATION_RE = re.compile(r"^(\d+)\s*(day|week|month|year)s?$", re.IGNORECASE)


def _round_half_up(value: Decimal) -> int:
    return int(value.quantize(Decimal("1"), rounding=ROUND_HALF_UP))


def _parse_money(raw: str) -> NormalizedAnswer | None:
    cleaned = raw.strip().lstrip("£$€").strip()
    m = _MONEY_RE.match(cleaned)
    if not m:
        return None
    try:
        amount = Decimal(m.group(1).replace(",", ""))
    except InvalidOperation:
        return None
    scale = _MONEY_SCALE.get((m.group(2) or "").lower(), 1)
    return money_answer(_round_half_up(amount * scale))


def _parse_percent(raw: str) -> NormalizedAnswer | None:
    m = _PERCENT_RE.match(raw.strip())
    if not m:
        return None
    value = _round_half_up(Decimal(m.group(1)))
    if not 0 <= value <= 100:
        return None
    return percent_answer(value)


def _parse_duration(raw: str) -> NormalizedAnswer | None:
    m = _DURATION_RE.match(raw.strip())
    if not m:
        return None
    magnitude = int(m.group(1))
    if magnitude < 1:
        return None
    return duration_answer(magnitude, m.group(2).lower() + "s")


def normalize_answer(field_: MetadataField, raw: str | None) -> NormalizedAnswer:
    """Canonical value for a raw answer; None or unparseable text map to
    the unknown answer (callers tally the degraded case)."""
    if raw is None:
        return unknown_answer()
    if field_ in MONEY_FIELDS:
        parsed = _parse_money(raw)
    elif field_ in PERCENT_FIELDS:
        parsed = _parse_percent(raw)
    else:
        parsed = _parse_duration(raw)
    if parsed is None:
        logger.warning("unparseable %s answer: %r", field_.value, raw)
        return unknown_answer()
    return parsed


# ---------------------------------------------------------------------------
# Completion ports


@dataclass(frozen=True)
class CompletionRequest:
    system: str
    user: str
    doc_id: str
    field: str


class CompletionPort(Protocol):
    def complete(self, request: CompletionRequest) -> str:
        """Response text; raises TransportError for retryable failures."""


class ReplayCompletionClient:
    """Offline stub replaying byte-exact responses keyed by (doc_id, field).

    Fixture format is JSON lines: {"doc_id", "field", "response_text"}.
    The response map is immutable after construction, so concurrent reads
    are safe.
    """

    def __init__(self, responses: dict[tuple[str, str], str]):
        self._responses = dict(responses)

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "ReplayCompletionClient":
        responses: dict[tuple[str, str], str] = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            record = json.loads(line)
            responses[(record["doc_id"], record["field"])] = record["response_text"]
        return cls(responses)

    def complete(self, request: CompletionRequest) -> str:
        key = (request.doc_id, request.field)
        try:
            return self._responses[key]
        except KeyError:
            raise CompletionFailure(f"no replay fixture for {key}") from None


class HttpCompletionClient:
    """Chat-completions adapter for an OpenAI-style JSON endpoint.

    The API key comes from the environment (FUNDLINK_API_KEY by default)
    and is never written to any output.
    """

    def __init__(self, base_url: str, model: str, api_key: str | None = None,
                 timeout: float = 60.0):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self._api_key = api_key
        self.timeout = timeout

    def complete(self, request: CompletionRequest) -> str:
        payload = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
            "temperature": 0,
        }
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        req = urllib.request.Request(
            f"{self.base_url}/chat/completions",
            data=json.dumps(payload).encode("utf-8"),
            headers=headers,
            method="POST",
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError, OSError) as exc:
            raise TransportError(f"completion endpoint failed: {exc}") from exc
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unexpected endpoint response shape: {exc}") from exc


# ---------------------------------------------------------------------------
# Orchestration


FULL_DOCUMENT = "full_document"


def mode_label(config: RetrievalConfig | None) -> str:
    if config is None:
        return FULL_DOCUMENT
    rr = "on" if config.use_reranker else "off"
    return f"{config.chunker},alpha={config.alpha:g},rerank={rr}"


@dataclass
class FieldExtraction:
    raw: str | None
    normalized: NormalizedAnswer
    context_chunk_ids: list[str] = field(default_factory=list)


@dataclass
class ExtractionResult:
    opportunity_id: str
    mode: str
    fields: dict[MetadataField, FieldExtraction]
    warnings: int = 0


def extract_fields(doc: OpportunityDoc, config: RetrievalConfig | None,
                   port: CompletionPort,
                   scorer: DenseScorer | None = None,
                   reranker: Reranker | None = None,
                   retries: int = 2, backoff: float = 0.5,
                   sleep: Callable[[float], None] = time.sleep,
                   trace: list[dict] | None = None) -> ExtractionResult:
    """Extract all six fields from one document.

    config=None is full-document baseline mode: the context is the whole
    serialized tree. Otherwise each field retrieves its own context and
    the final chunks are concatenated. Exactly one completion call per
    field (plus transport retries); malformed or unparseable answers
    degrade to unknown with raw=None and count as warnings.
    """
    full_text = serialize_markdown(doc.root)
    index = None
    if config is not None:
        index = build_index(build_chunks(doc, config))

    results: dict[MetadataField, FieldExtraction] = {}
    warnings = 0
    for f in MetadataField:
        question = FIELD_QUESTIONS[f]
        if index is None:
            context, chunk_ids = full_text, []
        else:
            final: list[ScoredChunk] = retrieve_from_index(
                index, question, config, scorer, reranker)
            context = "\n\n".join(s.chunk.text for s in final)
            chunk_ids = [s.chunk.chunk_id for s in final]
            if trace is not None:
                trace.append(trace_record(doc.opportunity_id, question, final))
        system, user = build_prompt(context, question)
        request = CompletionRequest(system=system, user=user,
                                    doc_id=doc.opportunity_id, field=f.value)
        response = _complete_with_retries(port, request, retries, backoff, sleep)
        try:
            raw = parse_answer(response, f.value)
        except MalformedResponse:
            logger.warning("malformed response for (%s, %s)", doc.opportunity_id, f.value)
            raw, warnings = None, warnings + 1
        normalized = normalize_answer(f, raw)
        if raw is not None and normalized.is_unknown:
            raw = None  # degraded: keep raw null <=> unknown
            warnings += 1
        results[f] = FieldExtraction(raw=raw, normalized=normalized,
                                     context_chunk_ids=chunk_ids)
    return ExtractionResult(opportunity_id=doc.opportunity_id,
                            mode=mode_label(config), fields=results,
                            warnings=warnings)


def _complete_with_retries(port: CompletionPort, request: CompletionRequest,
                           retries: int, backoff: float,
                           sleep: Callable[[float], None]) -> str:
    last: TransportError | None = None
    for attempt in range(retries + 1):
        try:
            return port.complete(request)
        except TransportError as exc:
            last = exc
            if attempt < retries:
                sleep(backoff * (2 ** attempt))
    raise CompletionFailure(
        f"completion failed after {retries} retries for "
        f"({request.doc_id}, {request.field}): {last}") from last


def prediction_records(result: ExtractionResult) -> list[dict]:
    """JSON-lines prediction rows: {doc_id, field, raw, normalized,
    context_chunk_ids, mode}."""
    return [
        {
            "doc_id": result.opportunity_id,
            "field": f.value,
            "raw": fx.raw,
            "normalized": fx.normalized.to_dict(),
            "context_chunk_ids": fx.context_chunk_ids,
            "mode": result.mode,
        }
        for f, fx in result.fields.items()
    ]
