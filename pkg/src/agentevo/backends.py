"""Uniform generation interface over chat-completion endpoints.

Three interchangeable backends expose ``generate(request) ->
GenerationResponse``:

* :class:`BackendPool` talks to OpenAI-compatible HTTP endpoints
  (``POST <endpoint>/v1/chat/completions``) with round-robin dispatch over
  replicas and bounded retries.
* :class:`ScriptedBackend` replays canned responses keyed by a digest of
  the request messages, a temperature bucket, and the candidate index.
  Deterministic; used as a test oracle.
* ``SyntheticBackend`` (see :mod:`agentevo.synthetic`) is a seeded
  surrogate model for desk-scale evolution dynamics.

Cost is counted in characters of request/response text; a configurable
characters-per-unit divisor converts raw counts into budget units.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import requests

DEFAULT_TEMPERATURE = 0.2
TEMPERATURE_BUCKET_WIDTH = 0.1

# Usage phases mirror the evolution-cost breakdown reported by the harness.
PHASES = ("prompt_optimization", "evaluation", "outer_loop", "structural")


class BackendError(RuntimeError):
    """Base class for generation-layer failures."""


class RetryableBackendError(BackendError):
    """Transport failure that persisted through the bounded retry policy."""


class BackendProtocolError(BackendError):
    """Endpoint replied, but not in the expected chat-completions shape."""


class ScriptMissError(BackendError):
    """A scripted backend was asked for a request it has no entry for."""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"unknown chat role: {self.role!r}")
        if self.role in ("system", "user") and not self.content:
            raise ValueError(f"{self.role} message must have content")


@dataclass(frozen=True)
class GenerationRequest:
    """One batched n-way sampling request.

    ``metadata`` carries routing hints for deterministic surrogates
    (request purpose, sample id); real HTTP backends ignore it and it is
    excluded from scripted-lookup digests.
    """

    messages: tuple[ChatMessage, ...]
    temperature: float = DEFAULT_TEMPERATURE
    n: int = 1
    max_output_units: int = 1024
    output_mode: str = "free_text"
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.max_output_units <= 0:
            raise ValueError("max_output_units must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.output_mode not in ("free_text", "structured_keyed"):
            raise ValueError(f"unknown output mode: {self.output_mode!r}")

    def input_chars(self) -> int:
        return sum(len(m.content) for m in self.messages)


@dataclass(frozen=True)
class GenerationResponse:
    candidates: tuple[str, ...]
    input_units: int
    output_units: int

    def __post_init__(self) -> None:
        if self.input_units < 0 or self.output_units < 0:
            raise ValueError("unit counts must be non-negative")


def message_digest(messages: tuple[ChatMessage, ...] | list[ChatMessage]) -> str:
    """Stable short digest of an ordered message list."""
    payload = json.dumps([[m.role, m.content] for m in messages], ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def temperature_bucket(temperature: float) -> int:
    """Quantise a temperature into 0.1-wide script-key buckets."""
    return int(round(temperature / TEMPERATURE_BUCKET_WIDTH))


def script_key(digest: str, temperature: float, index: int) -> str:
    return f"{digest}|{temperature_bucket(temperature)}|{index}"


@dataclass
class PhaseUsage:
    input_units: int = 0
    output_units: int = 0
    calls: int = 0


class UsageLedger:
    """Accumulates generation usage, partitioned by evolution phase."""

    def __init__(self, chars_per_unit: float = 1.0):
        if chars_per_unit <= 0:
            raise ValueError("chars_per_unit must be positive")
        self.chars_per_unit = chars_per_unit
        self.phases: dict[str, PhaseUsage] = {phase: PhaseUsage() for phase in PHASES}

    def record(self, response: GenerationResponse, phase: str = "evaluation") -> None:
        if phase not in self.phases:
            raise ValueError(f"unknown usage phase: {phase!r}")
        usage = self.phases[phase]
        usage.input_units += response.input_units
        usage.output_units += response.output_units
        usage.calls += 1

    @property
    def input_units(self) -> int:
        return sum(p.input_units for p in self.phases.values())

    @property
    def output_units(self) -> int:
        return sum(p.output_units for p in self.phases.values())

    @property
    def calls(self) -> int:
        return sum(p.calls for p in self.phases.values())

    def total_units(self) -> float:
        """Combined input+output cost in budget units."""
        return (self.input_units + self.output_units) / self.chars_per_unit

    def merge(self, other: "UsageLedger") -> None:
        """Fold a worker's ledger into this one."""
        for phase, usage in other.phases.items():
            mine = self.phases[phase]
            mine.input_units += usage.input_units
            mine.output_units += usage.output_units
            mine.calls += usage.calls

    def add_usage(self, usage, phase: str = "evaluation") -> None:
        """Fold an aggregated per-call usage record (input/output/calls) in."""
        if phase not in self.phases:
            raise ValueError(f"unknown usage phase: {phase!r}")
        mine = self.phases[phase]
        mine.input_units += usage.input_units
        mine.output_units += usage.output_units
        mine.calls += usage.calls

    def snapshot(self) -> dict[str, dict[str, int]]:
        return {
            phase: {
                "input_units": usage.input_units,
                "output_units": usage.output_units,
                "calls": usage.calls,
            }
            for phase, usage in self.phases.items()
        }


def record_usage(ledger: UsageLedger, response: GenerationResponse, phase: str = "evaluation") -> UsageLedger:
    """Functional wrapper over :meth:`UsageLedger.record`."""
    ledger.record(response, phase)
    return ledger


def usage_multiplier(baseline_units: float, evolved_units: float) -> float:
    """Per-query cost multiplier of an evolved solver, one decimal place."""
    if baseline_units <= 0:
        raise ValueError("baseline units must be positive")
    return round(evolved_units / baseline_units, 1)


class BackendPool:
    """Round-robin dispatcher over OpenAI-compatible chat endpoints.

    ``generate`` issues one POST per request (batched n-way sampling) and
    retries transient transport failures up to ``max_attempts`` times with
    exponential backoff.  Retried attempts are billed: the returned
    ``input_units`` covers every attempt actually sent.
    """

    def __init__(
        self,
        endpoints: list[str],
        model: str,
        api_key: str | None = None,
        max_attempts: int = 3,
        backoff_seconds: float = 0.5,
        timeout: float = 120.0,
    ):
        if not endpoints:
            raise ValueError("endpoint list must be non-empty")
        self.endpoints = [e.rstrip("/") for e in endpoints]
        self.model = model
        self.api_key = api_key
        self.max_attempts = max_attempts
        self.backoff_seconds = backoff_seconds
        self.timeout = timeout
        self._next_index = 0
        self._lock = threading.Lock()
        self._session = requests.Session()

    def _take_endpoint(self) -> str:
        with self._lock:
            endpoint = self.endpoints[self._next_index]
            self._next_index = (self._next_index + 1) % len(self.endpoints)
        return endpoint

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        endpoint = self._take_endpoint()
        url = f"{endpoint}/v1/chat/completions"
        body = {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "n": request.n,
            "max_tokens": request.max_output_units,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"

        attempts = 0
        last_error: Exception | None = None
        while attempts < self.max_attempts:
            attempts += 1
            try:
                reply = self._session.post(url, json=body, headers=headers, timeout=self.timeout)
                reply.raise_for_status()
                payload = reply.json()
                return self._parse_reply(request, payload, attempts)
            except (requests.ConnectionError, requests.Timeout, requests.HTTPError) as exc:
                last_error = exc
                if attempts < self.max_attempts:
                    time.sleep(self.backoff_seconds * (2 ** (attempts - 1)))
            except (ValueError, KeyError) as exc:
                raise BackendProtocolError(f"malformed endpoint reply from {url}: {exc}") from exc
        raise RetryableBackendError(
            f"{url} failed after {attempts} attempts: {last_error}"
        )

    def _parse_reply(
        self, request: GenerationRequest, payload: dict, attempts: int
    ) -> GenerationResponse:
        try:
            choices = payload["choices"]
            candidates = tuple(choice["message"]["content"] for choice in choices)
        except (KeyError, TypeError) as exc:
            raise BackendProtocolError(f"reply missing choices/message/content: {exc}") from exc
        if len(candidates) != request.n:
            raise BackendProtocolError(
                f"asked for n={request.n} candidates, endpoint returned {len(candidates)}"
            )
        usage = payload.get("usage") or {}
        input_units = usage.get("prompt_tokens", request.input_chars())
        output_units = usage.get("completion_tokens", sum(len(c) for c in candidates))
        # Failed attempts still consumed serving capacity: bill their input.
        input_units += (attempts - 1) * request.input_chars()
        return GenerationResponse(
            candidates=candidates,
            input_units=int(input_units),
            output_units=int(output_units),
        )


class ScriptedBackend:
    """Deterministic replay backend for tests.

    ``script`` maps :func:`script_key` strings to reply text.  Unscripted
    requests raise :class:`ScriptMissError` naming the digest, unless a
    ``fallback(request, index) -> str`` callable is supplied, in which case
    misses are answered deterministically by the fallback.
    """

    def __init__(
        self,
        script: Mapping[str, str],
        fallback: Callable[[GenerationRequest, int], str] | None = None,
    ):
        self.script = dict(script)
        self.fallback = fallback

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        digest = message_digest(request.messages)
        candidates = []
        for index in range(request.n):
            key = script_key(digest, request.temperature, index)
            if key in self.script:
                candidates.append(self.script[key])
            elif self.fallback is not None:
                candidates.append(self.fallback(request, index))
            else:
                raise ScriptMissError(
                    f"no scripted reply for digest {digest} "
                    f"(bucket {temperature_bucket(request.temperature)}, index {index})"
                )
        return GenerationResponse(
            candidates=tuple(candidates),
            input_units=request.input_chars(),
            output_units=sum(len(c) for c in candidates),
        )


def generate_scripted(script: Mapping[str, str], request: GenerationRequest) -> GenerationResponse:
    """Functional form of the scripted backend (pure in (script, request))."""
    return ScriptedBackend(script).generate(request)


class Script:
    """Helper for assembling scripted replies without hand-built keys."""

    def __init__(self) -> None:
        self.entries: dict[str, str] = {}

    def add(
        self,
        messages: tuple[ChatMessage, ...] | list[ChatMessage],
        temperature: float,
        replies: list[str] | str,
    ) -> "Script":
        digest = message_digest(messages)
        if isinstance(replies, str):
            replies = [replies]
        for index, text in enumerate(replies):
            self.entries[script_key(digest, temperature, index)] = text
        return self

    def backend(self, fallback: Callable[[GenerationRequest, int], str] | None = None) -> ScriptedBackend:
        return ScriptedBackend(self.entries, fallback=fallback)
