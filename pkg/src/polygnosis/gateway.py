"""Chat-completion gateway: prompt rendering, JSON extraction with one repair
round-trip, usage/cost accounting, and interchangeable backends.

Backends implement ``chat(system, user, *, model, template_id, ordinal,
attempt) -> BackendReply``. ``ScriptedBackend`` serves responses from a trace
file keyed by ``(template_id, ordinal)``; a repair round-trip reuses the same
ordinal and consumes the next entry recorded under that key.
"""

from __future__ import annotations

import json
import logging
import math
import os
import threading
import time
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Any, Iterable, Optional, Protocol

import jsonschema

from .prompts import REPAIR_NOTE, get_template

log = logging.getLogger(__name__)

AGENT_OF_TEMPLATE = {
    "clustering_system": "clustering",
    "summary_system": "clustering",
    "keyword_system": "keywords",
    "reflection_base": "cluster_reflection",
    "global_system": "analysis",
    "analysis_system": "analysis",
    "cot_wrapper": "analysis",
    "cot_extract": "analysis",
    "analysis_reflection": "analysis_reflection",
}


class GatewayError(RuntimeError):
    pass


class ExtractionFailed(GatewayError):
    def __init__(self, message: str, raw_texts: Iterable[str] = ()):
        super().__init__(message)
        self.raw_texts = list(raw_texts)


class BackendTimeout(GatewayError):
    pass


class TraceMiss(GatewayError):
    pass


# -- JSON extraction ----------------------------------------------------------


def strip_fences(text: str) -> str:
    """Remove markdown code fences, keeping their contents."""
    lines = [ln for ln in text.strip().splitlines() if not ln.strip().startswith("```")]
    return "\n".join(lines)


def _balanced_spans(text: str):
    """Yield (start, end) of each balanced top-level {...} or [...] span."""
    i, n = 0, len(text)
    while i < n:
        if text[i] not in "{[":
            i += 1
            continue
        depth, in_str, esc = 0, False, False
        for j in range(i, n):
            ch = text[j]
            if in_str:
                if esc:
                    esc = False
                elif ch == "\\":
                    esc = True
                elif ch == '"':
                    in_str = False
            elif ch == '"':
                in_str = True
            elif ch in "{[":
                depth += 1
            elif ch in "}]":
                depth -= 1
                if depth == 0:
                    yield i, j + 1
                    i = j + 1
                    break
        else:
            # unbalanced opener; resume scanning just past it
            i += 1


def extract_json(text: str, last: bool = False) -> Any:
    """Parse the first (or last) balanced JSON object/array found in ``text``.

    Spans that do not parse as JSON are skipped, so prose containing stray
    brackets before the payload is tolerated.
    """
    body = strip_fences(text)
    try:
        return json.loads(body)
    except ValueError:
        pass
    spans = list(_balanced_spans(body))
    if last:
        spans.reverse()
    for start, end in spans:
        try:
            return json.loads(body[start:end])
        except ValueError:
            continue
    raise ExtractionFailed("no JSON value found in response", [text])


def validate_shape(value: Any, schema: Optional[dict]) -> None:
    if schema is None:
        return
    try:
        jsonschema.validate(value, schema)
    except jsonschema.ValidationError as exc:
        raise ExtractionFailed(f"response does not match schema: {exc.message}") from exc


# -- accounting ---------------------------------------------------------------


@dataclass(frozen=True)
class Rates:
    rate_in: float
    rate_out: float

    def __post_init__(self):
        if self.rate_in < 0 or self.rate_out < 0:
            raise ValueError("rates must be nonnegative")


def cost_of(input_tokens: int, output_tokens: int, rates: Rates) -> float:
    """USD cost with rates quoted per million tokens.

    Decimal arithmetic on the rates' shortest repr keeps ``1e6 * 0.30`` at
    exactly 0.30 rather than accumulating binary error.
    """
    total = Decimal(input_tokens) * Decimal(repr(rates.rate_in)) + Decimal(
        output_tokens
    ) * Decimal(repr(rates.rate_out))
    return float(total / Decimal(1_000_000))


class RateCard:
    def __init__(self, rates: dict[str, Rates] | None = None, default: Optional[Rates] = None):
        self.rates = dict(rates or {})
        self.default = default or Rates(0.0, 0.0)

    def for_model(self, model: str) -> Rates:
        return self.rates.get(model, self.default)

    @classmethod
    def from_mapping(cls, data: dict) -> "RateCard":
        rates = {}
        default = None
        for name, spec in data.items():
            if isinstance(spec, dict):
                r = Rates(float(spec["rate_in"]), float(spec["rate_out"]))
            else:
                r = Rates(float(spec[0]), float(spec[1]))
            if name == "default":
                default = r
            else:
                rates[name] = r
        return cls(rates, default)

    @classmethod
    def load(cls, path: str | Path) -> "RateCard":
        from .config import load_toml

        return cls.from_mapping(load_toml(path))


@dataclass(frozen=True)
class UsageLedgerEntry:
    agent_id: str
    input_tokens: int
    output_tokens: int
    wall_ms: float
    cost_usd: float
    template_id: str = ""
    ordinal: int = 0
    attempt: int = 0
    call_seq: int = 0
    model: str = ""
    stage: str = ""

    def __post_init__(self):
        if self.input_tokens < 0 or self.output_tokens < 0 or self.wall_ms < 0:
            raise ValueError("token counts and wall_ms must be nonnegative")

    @property
    def tokens(self) -> int:
        return self.input_tokens + self.output_tokens

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UsageLedgerEntry":
        return cls(**d)


class UsageLedger:
    """Append-only, thread-safe sink of ledger entries."""

    def __init__(self, entries: Iterable[UsageLedgerEntry] = ()):
        self._entries = list(entries)
        self._lock = threading.Lock()

    def append(self, entry: UsageLedgerEntry) -> None:
        with self._lock:
            self._entries.append(entry)

    @property
    def entries(self) -> list[UsageLedgerEntry]:
        with self._lock:
            return sorted(self._entries, key=lambda e: (e.call_seq, e.attempt))

    def total_tokens(self) -> int:
        return sum(e.tokens for e in self.entries)

    def total_cost(self) -> float:
        return math.fsum(e.cost_usd for e in self.entries)

    def total_wall_ms(self) -> float:
        return math.fsum(e.wall_ms for e in self.entries)

    def totals(self) -> dict:
        es = self.entries
        return {
            "calls": len(es),
            "input_tokens": sum(e.input_tokens for e in es),
            "output_tokens": sum(e.output_tokens for e in es),
            "tokens": sum(e.tokens for e in es),
            "cost_usd": self.total_cost(),
            "wall_ms": self.total_wall_ms(),
        }

    def dump(self, path: str | Path) -> None:
        from .model import canonical_json

        text = "".join(canonical_json(e.to_dict()) + "\n" for e in self.entries)
        Path(path).write_text(text, encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "UsageLedger":
        p = Path(path)
        if not p.exists():
            return cls()
        lines = p.read_text(encoding="utf-8").splitlines()
        return cls(UsageLedgerEntry.from_dict(json.loads(ln)) for ln in lines if ln.strip())


# -- backends -----------------------------------------------------------------


@dataclass(frozen=True)
class BackendReply:
    text: str
    input_tokens: int
    output_tokens: int
    wall_ms: float


class Backend(Protocol):
    simulated: bool

    def chat(
        self, system: str, user: str, *, model: str, template_id: str, ordinal: int, attempt: int
    ) -> BackendReply: ...


@dataclass(frozen=True)
class TraceEntry:
    template_id: str
    ordinal: int
    response_text: str
    input_tokens: int = 0
    output_tokens: int = 0
    wall_ms: float = 0.0

    def to_dict(self) -> dict:
        d = {
            "template_id": self.template_id,
            "ordinal": self.ordinal,
            "response_text": self.response_text,
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
        }
        if self.wall_ms:
            d["wall_ms"] = self.wall_ms
        return d


def load_trace(path: str | Path) -> list[TraceEntry]:
    entries = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            entries.append(
                TraceEntry(
                    template_id=d["template_id"],
                    ordinal=int(d["ordinal"]),
                    response_text=d["response_text"],
                    input_tokens=int(d.get("input_tokens", 0)),
                    output_tokens=int(d.get("output_tokens", 0)),
                    wall_ms=float(d.get("wall_ms", 0.0)),
                )
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"{path}:{lineno}: bad trace entry: {exc}") from exc
    return entries


class ScriptedBackend:
    """Replays recorded responses; never touches the network."""

    simulated = True

    def __init__(self, entries: Iterable[TraceEntry]):
        self._by_key: dict[tuple[str, int], list[TraceEntry]] = {}
        for e in entries:
            self._by_key.setdefault((e.template_id, e.ordinal), []).append(e)
        self.calls = 0

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        return cls(load_trace(path))

    def chat(self, system, user, *, model, template_id, ordinal, attempt) -> BackendReply:
        self.calls += 1
        options = self._by_key.get((template_id, ordinal), [])
        if attempt >= len(options):
            raise TraceMiss(f"no trace entry for {template_id}#{ordinal} attempt {attempt}")
        e = options[attempt]
        return BackendReply(e.response_text, e.input_tokens, e.output_tokens, e.wall_ms)


class HttpChatBackend:
    """OpenAI-compatible ``/chat/completions`` endpoint."""

    simulated = False

    def __init__(
        self,
        base_url: str,
        api_key_env: str = "LLM_API_KEY",
        timeout: float = 120.0,
        temperature: Optional[float] = None,
        client=None,
    ):
        import httpx

        self.base_url = base_url.rstrip("/")
        self.api_key_env = api_key_env
        self.temperature = temperature
        self._client = client or httpx.Client(timeout=timeout)

    def chat(self, system, user, *, model, template_id, ordinal, attempt) -> BackendReply:
        import httpx

        payload: dict[str, Any] = {
            "model": model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        }
        if self.temperature is not None:
            payload["temperature"] = self.temperature
        headers = {}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        t0 = time.perf_counter()
        try:
            resp = self._client.post(f"{self.base_url}/chat/completions", json=payload, headers=headers)
        except httpx.TimeoutException as exc:
            raise BackendTimeout(f"{template_id}#{ordinal}: {exc}") from exc
        resp.raise_for_status()
        wall_ms = (time.perf_counter() - t0) * 1000.0
        data = resp.json()
        usage = data.get("usage") or {}
        return BackendReply(
            text=data["choices"][0]["message"]["content"] or "",
            input_tokens=int(usage.get("prompt_tokens", 0)),
            output_tokens=int(usage.get("completion_tokens", 0)),
            wall_ms=wall_ms,
        )


class RecordingBackend:
    """Wraps a live backend and appends every reply to a trace file."""

    def __init__(self, inner: Backend, path: str | Path):
        self.inner = inner
        self.path = Path(path)
        self.simulated = inner.simulated
        self._lock = threading.Lock()

    def chat(self, system, user, *, model, template_id, ordinal, attempt) -> BackendReply:
        reply = self.inner.chat(
            system, user, model=model, template_id=template_id, ordinal=ordinal, attempt=attempt
        )
        entry = TraceEntry(
            template_id, ordinal, reply.text, reply.input_tokens, reply.output_tokens, reply.wall_ms
        )
        with self._lock, self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry.to_dict(), sort_keys=True) + "\n")
        return reply


# -- gateway ------------------------------------------------------------------


@dataclass
class Completion:
    raw_text: str
    value: Any
    entries: list[UsageLedgerEntry] = field(default_factory=list)


@dataclass(frozen=True)
class Reservation:
    ordinal: int
    call_seq: int


class Gateway:
    """Executes agent calls and records their usage.

    Ordinals are assigned per template id in reservation order, so callers
    that fan out concurrently reserve first (in a deterministic order) and
    then dispatch.
    """

    def __init__(
        self,
        backend: Backend,
        rate_card: Optional[RateCard] = None,
        models: Optional[dict[str, str]] = None,
        ledger: Optional[UsageLedger] = None,
        stage: str = "",
    ):
        self.backend = backend
        self.rate_card = rate_card or RateCard()
        self.models = dict(models or {})
        self.ledger = ledger if ledger is not None else UsageLedger()
        self.stage = stage
        self._counters: dict[str, int] = {}
        self._seq = 0
        self._lock = threading.Lock()
        for e in self.ledger.entries:
            self._counters[e.template_id] = max(self._counters.get(e.template_id, 0), e.ordinal + 1)
            self._seq = max(self._seq, e.call_seq + 1)

    def model_for(self, template_id: str) -> str:
        agent = AGENT_OF_TEMPLATE.get(template_id, template_id)
        return self.models.get(agent, self.models.get("default", "scripted"))

    def reserve(self, template_id: str) -> Reservation:
        with self._lock:
            ordinal = self._counters.get(template_id, 0)
            self._counters[template_id] = ordinal + 1
            seq = self._seq
            self._seq += 1
        return Reservation(ordinal, seq)

    def _call(self, template_id, system, user, res: Reservation, attempt: int):
        model = self.model_for(template_id)
        reply = self.backend.chat(
            system, user, model=model, template_id=template_id, ordinal=res.ordinal, attempt=attempt
        )
        entry = UsageLedgerEntry(
            agent_id=AGENT_OF_TEMPLATE.get(template_id, template_id),
            input_tokens=reply.input_tokens,
            output_tokens=reply.output_tokens,
            wall_ms=reply.wall_ms,
            cost_usd=cost_of(reply.input_tokens, reply.output_tokens, self.rate_card.for_model(model)),
            template_id=template_id,
            ordinal=res.ordinal,
            attempt=attempt,
            call_seq=res.call_seq,
            model=model,
            stage=self.stage,
        )
        self.ledger.append(entry)
        return reply.text, entry

    def complete(
        self,
        template_id: str,
        bindings: dict[str, str],
        schema: Optional[dict] = None,
        *,
        expect_json: bool = True,
        system_suffix: str = "",
        reservation: Optional[Reservation] = None,
        last_json: bool = False,
    ) -> Completion:
        """Run one agent call.

        With ``expect_json`` the reply is parsed and validated against
        ``schema``; on failure a single repair request is sent that carries
        the malformed text and the schema. Without it the raw text is
        returned as ``value``.
        """
        template = get_template(template_id)
        system, user = template.render(bindings)
        if system_suffix:
            system = system + "\n\n" + system_suffix
        res = reservation or self.reserve(template_id)

        text, entry = self._call(template_id, system, user, res, attempt=0)
        if not expect_json:
            return Completion(text, text, [entry])
        try:
            value = extract_json(text, last=last_json)
            validate_shape(value, schema)
            return Completion(text, value, [entry])
        except ExtractionFailed as first:
            log.info("%s#%d: extraction failed (%s); requesting repair", template_id, res.ordinal, first)
            repair = REPAIR_NOTE.replace("<ERROR>", str(first))
            repair = repair.replace("<SCHEMA>", json.dumps(schema or {}, indent=1))
            repair = repair.replace("<MALFORMED>", text)
            text2, entry2 = self._call(template_id, system, user + repair, res, attempt=1)
            try:
                value = extract_json(text2, last=last_json)
                validate_shape(value, schema)
            except ExtractionFailed as second:
                raise ExtractionFailed(
                    f"{template_id}#{res.ordinal}: {second} (after repair)", [text, text2]
                ) from second
            return Completion(text2, value, [entry, entry2])
