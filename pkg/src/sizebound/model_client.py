"""Query layer: prompt rendering, answer judging, caching, HTTP, simulator.

Every exchange is keyed by (model_id, text_id, position, length,
template_id) and persisted to an append-only JSONL cache, so interrupted
runs resume without re-querying and warm-cache reruns make zero network
calls.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import random
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .corpus import PrefixSample, tokenize
from .errors import ConfigError, ReplayMissError, StorageError

log = logging.getLogger(__name__)

PROMPT_PLACEHOLDER = "{prefix}"
N_TEMPLATES = 5
MAX_OUTPUT_TOKENS = 8
RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})

QueryKey = tuple[str, str, int, int, int]


# ---------------------------------------------------------------------------
# Prompt templates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PromptTemplate:
    """A system/user prompt pair with exactly one prefix placeholder."""

    template_id: int
    user_text: str
    system_text: str | None = None

    def __post_init__(self):
        count = self.user_text.count(PROMPT_PLACEHOLDER)
        if count != 1:
            raise ConfigError(
                f"template {self.template_id}: user_text must contain exactly one "
                f"'{PROMPT_PLACEHOLDER}' placeholder, found {count}"
            )


DEFAULT_TEMPLATES: tuple[PromptTemplate, ...] = (
    PromptTemplate(
        template_id=1,
        system_text=(
            "You are next word prediction model, given a phrase you output the next word.\n"
            "You always output a single word without spaces or punctuation.\n"
            "Only respond with the next word, without any additional text or explanation.\n"
            "If you are unsure, provide your best guess."
        ),
        user_text='"{prefix}"',
    ),
    PromptTemplate(
        template_id=2,
        user_text='Output only one next continuation word for this phrase "{prefix}"',
    ),
    PromptTemplate(
        template_id=3,
        user_text=(
            'Text: "{prefix}"\n'
            "What is the precise next word that comes immediately after the text above? "
            "Reply with strictly one word."
        ),
    ),
    PromptTemplate(
        template_id=4,
        user_text=(
            'Context: "{prefix}"\n'
            "Instruction: Provide the immediate next word. "
            "Limit your output strictly to exactly one word."
        ),
    ),
    PromptTemplate(
        template_id=5,
        user_text="[BEGIN PREFIX]\n{prefix}\n[END PREFIX]\nReturn the next word only.",
    ),
)


def render_prompt(template: PromptTemplate, prefix: Sequence[str]) -> tuple[str | None, str]:
    """Substitute the prefix (tokens joined by single spaces) into a template."""
    if not prefix:
        raise ConfigError("cannot render a prompt for an empty prefix")
    joined = " ".join(prefix)
    return template.system_text, template.user_text.replace(PROMPT_PLACEHOLDER, joined)


def normalize_answer(raw: str) -> str:
    """First word of the response under the corpus normalization rule.

    Returns "" when the response contains no word at all; empty answers
    always judge as incorrect.
    """
    tokens = tokenize(raw)
    return tokens[0] if tokens else ""


def judge_correct(target: str, answers: Sequence[str], expected: int = N_TEMPLATES) -> bool:
    """Any-of rule: a position counts as correct if any template's answer
    matches the target. Answers are re-normalized so callers may pass raw
    strings; missing or failed queries must be passed as empty strings."""
    if len(answers) != expected:
        raise ConfigError(f"judge_correct: expected {expected} answers, got {len(answers)}")
    want = normalize_answer(target)
    return any(normalize_answer(a) == want for a in answers if a)


# ---------------------------------------------------------------------------
# Model roster entries
# ---------------------------------------------------------------------------

_ARCHITECTURES = ("dense", "moe", "unknown")
_ROLES = ("reference", "target")


@dataclass(frozen=True)
class SimulatorLink:
    """Logistic link for the synthetic backend.

    Success probability at one position is
    sigma(popularity * (size_coef * ln(size) + popularity_coef)
          + length_coef * ln(l) + intercept),
    so texts with zero popularity carry no size signal at all and accuracy
    rises with both prefix length and simulated size.
    """

    size_coef: float = 0.8
    length_coef: float = 0.5
    popularity_coef: float = 0.5
    intercept: float = -3.6

    def probability(self, pseudo_size: float, length: int, popularity: float) -> float:
        x = (
            popularity * (self.size_coef * math.log(pseudo_size) + self.popularity_coef)
            + self.length_coef * math.log(length)
            + self.intercept
        )
        return 1.0 / (1.0 + math.exp(-x))


@dataclass(frozen=True)
class SimulatedModel:
    """Deterministic synthetic backend standing in for a live endpoint."""

    pseudo_size: float
    popularity_weights: Mapping[str, float] = field(default_factory=dict)
    noise_seed: int = 0
    link: SimulatorLink = SimulatorLink()

    def __post_init__(self):
        if self.pseudo_size <= 0:
            raise ConfigError("simulator.pseudo_size must be > 0")
        for text_id, w in self.popularity_weights.items():
            if not 0.0 <= w <= 1.0:
                raise ConfigError(
                    f"simulator popularity for '{text_id}' must be in [0, 1], got {w}"
                )


@dataclass(frozen=True)
class ModelSpec:
    """One roster entry: either a live chat-completions endpoint or a simulator."""

    model_id: str
    role: str = "target"
    architecture: str = "unknown"
    known_size: float | None = None
    endpoint: str | None = None
    credential_ref: str | None = None
    reasoning_disabled: bool = True
    simulator: SimulatedModel | None = None
    extra_body: Mapping[str, object] | None = None

    def __post_init__(self):
        if self.role not in _ROLES:
            raise ConfigError(f"model {self.model_id}: role must be one of {_ROLES}")
        if self.architecture not in _ARCHITECTURES:
            raise ConfigError(
                f"model {self.model_id}: architecture must be one of {_ARCHITECTURES}"
            )
        if self.role == "reference":
            if self.known_size is None:
                raise ConfigError(f"model {self.model_id}: reference role requires known_size")
            if self.architecture != "dense":
                raise ConfigError(
                    f"model {self.model_id}: reference role requires dense architecture "
                    f"(got {self.architecture})"
                )
        if self.known_size is not None and self.known_size <= 0:
            raise ConfigError(f"model {self.model_id}: known_size must be > 0")
        if self.simulator is None and self.endpoint is None:
            raise ConfigError(
                f"model {self.model_id}: needs either an endpoint or a simulator block"
            )

    @property
    def is_simulated(self) -> bool:
        return self.simulator is not None


# ---------------------------------------------------------------------------
# Query records and the JSONL cache
# ---------------------------------------------------------------------------

_RECORD_FIELDS = (
    "model_id", "text_id", "position", "length", "template_id",
    "raw_response", "normalized_answer", "correct", "timestamp", "transport_status",
)


@dataclass(frozen=True)
class QueryRecord:
    model_id: str
    text_id: str
    position: int
    length: int
    template_id: int
    raw_response: str
    normalized_answer: str
    correct: bool
    timestamp: str
    transport_status: str

    @property
    def key(self) -> QueryKey:
        return (self.model_id, self.text_id, self.position, self.length, self.template_id)

    def to_json_line(self) -> str:
        # Key fields first so `grep model_id cache.jsonl` stays readable.
        return json.dumps({name: getattr(self, name) for name in _RECORD_FIELDS})

    @classmethod
    def from_json(cls, obj: dict) -> "QueryRecord":
        return cls(**{name: obj[name] for name in _RECORD_FIELDS})


def _utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


class QueryCache:
    """Append-only JSONL store of QueryRecords, keyed for cache-first lookups.

    Appends are serialized through one lock; reads of the in-memory index
    are safe from any thread after load().
    """

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        self._records: dict[QueryKey, QueryRecord] = {}
        self._lock = threading.Lock()
        self._fh = None
        if self.path is not None and self.path.exists():
            self._load()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a", encoding="utf-8")

    def _load(self) -> None:
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    record = QueryRecord.from_json(json.loads(line))
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise StorageError(f"cache {self.path}: line {lineno}: {exc}") from exc
                self._records[record.key] = record

    def __len__(self) -> int:
        return len(self._records)

    def get(self, key: QueryKey) -> QueryRecord | None:
        return self._records.get(key)

    def put(self, record: QueryRecord) -> None:
        with self._lock:
            self._records[record.key] = record
            if self._fh is not None:
                self._fh.write(record.to_json_line() + "\n")
                self._fh.flush()

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# Rate limiting and HTTP transport
# ---------------------------------------------------------------------------

class TokenBucket:
    """Process-wide request limiter: `capacity` burst, `refill_rate` per second."""

    def __init__(self, capacity: float, refill_rate: float,
                 clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        if capacity <= 0 or refill_rate <= 0:
            raise ConfigError("token bucket capacity and refill rate must be > 0")
        self.capacity = float(capacity)
        self.refill_rate = float(refill_rate)
        self._tokens = float(capacity)
        self._updated = clock()
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()

    def _refill(self) -> None:
        now = self._clock()
        self._tokens = min(self.capacity, self._tokens + (now - self._updated) * self.refill_rate)
        self._updated = now

    def acquire(self) -> None:
        while True:
            with self._lock:
                self._refill()
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.refill_rate
            self._sleep(wait)


class HttpTransport:
    """Minimal chat-completions POST with retry/backoff on throttles and 5xx."""

    def __init__(self, timeout: float = 60.0, max_attempts: int = 5,
                 backoff_base: float = 0.5, backoff_cap: float = 30.0,
                 rate_limiter: TokenBucket | None = None,
                 sleep: Callable[[float], None] = time.sleep,
                 session=None):
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self.rate_limiter = rate_limiter
        self._sleep = sleep
        self._session = session
        self._jitter = random.Random()

    def _ensure_session(self):
        if self._session is None:
            import requests

            self._session = requests.Session()
        return self._session

    def chat_completion(self, endpoint: str, api_key: str, model: str,
                        messages: list[dict], extra_body: Mapping[str, object] | None = None,
                        ) -> tuple[str | None, str]:
        """Return (content, status); content is None after terminal failure."""
        session = self._ensure_session()
        url = endpoint.rstrip("/") + "/chat/completions"
        body = {
            "model": model,
            "messages": messages,
            "temperature": 0,
            "max_tokens": MAX_OUTPUT_TOKENS,
        }
        if extra_body:
            body.update(extra_body)
        headers = {"Authorization": f"Bearer {api_key}"}
        last_status = "error:no-attempt"
        for attempt in range(self.max_attempts):
            if self.rate_limiter is not None:
                self.rate_limiter.acquire()
            try:
                resp = session.post(url, json=body, headers=headers, timeout=self.timeout)
            except Exception as exc:  # connection/timeout errors are retryable
                last_status = f"error:{type(exc).__name__}"
            else:
                if resp.status_code == 200:
                    try:
                        content = resp.json()["choices"][0]["message"]["content"] or ""
                    except (ValueError, KeyError, IndexError, TypeError):
                        last_status = "error:malformed-response"
                    else:
                        return content, "ok"
                elif resp.status_code in RETRYABLE_STATUS:
                    last_status = f"http:{resp.status_code}"
                else:
                    return None, f"http:{resp.status_code}"
            if attempt + 1 < self.max_attempts:
                delay = min(self.backoff_cap, self.backoff_base * 2 ** attempt)
                self._sleep(delay * (0.5 + self._jitter.random()))
        return None, last_status


# ---------------------------------------------------------------------------
# Synthetic backend
# ---------------------------------------------------------------------------

_DECOYS = (
    "the", "and", "of", "morning", "river", "stone", "light", "answer",
    "window", "silence", "garden", "voice",
)


def _hash_unit(*parts: object) -> tuple[float, int]:
    """Deterministic uniform in [0,1) plus spare bits, from a sha256 of the key."""
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode("utf-8")).digest()
    u = int.from_bytes(digest[:8], "big") / 2.0 ** 64
    return u, int.from_bytes(digest[8:12], "big")


def simulated_verdict(sim: SimulatedModel, model_id: str, text_id: str,
                      position: int, length: int) -> bool:
    """Position-level Bernoulli draw, shared by all five templates.

    Sharing the draw across templates makes the any-of-5 position accuracy
    equal the link probability exactly, which keeps simulator experiments
    interpretable. Different model_ids draw independent noise even at equal
    pseudo_size.
    """
    popularity = sim.popularity_weights.get(text_id, 0.0)
    p = sim.link.probability(sim.pseudo_size, length, popularity)
    u, _ = _hash_unit(sim.noise_seed, model_id, text_id, position, length)
    return u < p


def simulate_query(spec: ModelSpec, sample: PrefixSample, template: PromptTemplate) -> QueryRecord:
    """Produce a deterministic QueryRecord from the synthetic backend."""
    sim = spec.simulator
    if sim is None:
        raise ConfigError(f"model {spec.model_id} has no simulator block")
    correct = simulated_verdict(sim, spec.model_id, sample.text_id, sample.position, sample.length)
    _, spare = _hash_unit(
        sim.noise_seed, spec.model_id, sample.text_id, sample.position,
        sample.length, template.template_id, "style",
    )
    if correct:
        word = sample.target
    else:
        word = _DECOYS[spare % len(_DECOYS)]
        if word == sample.target:
            word = _DECOYS[(spare + 1) % len(_DECOYS)]
    # Vary surface form so the normalization path gets exercised.
    raw = word.capitalize() if spare & 4 else word
    if spare & 1:
        raw += "."
    elif spare & 2:
        raw = f'"{raw}"'
    normalized = normalize_answer(raw)
    return QueryRecord(
        model_id=spec.model_id,
        text_id=sample.text_id,
        position=sample.position,
        length=sample.length,
        template_id=template.template_id,
        raw_response=raw,
        normalized_answer=normalized,
        correct=normalized == sample.target,
        timestamp=_utc_now(),
        transport_status="sim",
    )


# ---------------------------------------------------------------------------
# The client
# ---------------------------------------------------------------------------

@dataclass
class ClientStats:
    cache_hits: int = 0
    simulate_calls: int = 0
    network_calls: int = 0
    failures: int = 0


class ModelClient:
    """Cache-first query dispatcher over live endpoints and simulators.

    Modes: `offline=True` forbids network (simulators and cache still work);
    `replay_only=True` additionally forbids simulators, so every key must
    already be cached.
    """

    def __init__(self, cache: QueryCache | None = None,
                 transport: HttpTransport | None = None,
                 offline: bool = False, replay_only: bool = False,
                 max_in_flight: int = 4):
        self.cache = cache
        self.transport = transport
        self.offline = offline or replay_only
        self.replay_only = replay_only
        self.stats = ClientStats()
        self._stats_lock = threading.Lock()
        self._in_flight: dict[str, threading.Semaphore] = {}
        self._in_flight_cap = max_in_flight
        self._semaphore_lock = threading.Lock()

    def _bump(self, field_name: str) -> None:
        with self._stats_lock:
            setattr(self.stats, field_name, getattr(self.stats, field_name) + 1)

    def _endpoint_slot(self, endpoint: str) -> threading.Semaphore:
        with self._semaphore_lock:
            if endpoint not in self._in_flight:
                self._in_flight[endpoint] = threading.Semaphore(self._in_flight_cap)
            return self._in_flight[endpoint]

    def query(self, spec: ModelSpec, sample: PrefixSample,
              template: PromptTemplate) -> QueryRecord:
        key: QueryKey = (spec.model_id, sample.text_id, sample.position,
                         sample.length, template.template_id)
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                self._bump("cache_hits")
                return hit
        if self.replay_only:
            raise ReplayMissError(key)
        if spec.is_simulated:
            record = simulate_query(spec, sample, template)
            self._bump("simulate_calls")
        else:
            record = self._live_query(spec, sample, template)
        if self.cache is not None:
            self.cache.put(record)
        return record

    def _live_query(self, spec: ModelSpec, sample: PrefixSample,
                    template: PromptTemplate) -> QueryRecord:
        if self.offline:
            raise ReplayMissError(
                (spec.model_id, sample.text_id, sample.position, sample.length,
                 template.template_id)
            )
        if not spec.reasoning_disabled:
            raise ConfigError(
                f"model {spec.model_id}: reasoning must be disabled for live queries"
            )
        if not spec.credential_ref:
            raise ConfigError(f"model {spec.model_id}: credential_ref is required for live queries")
        api_key = os.environ.get(spec.credential_ref)
        if not api_key:
            raise ConfigError(
                f"model {spec.model_id}: environment variable {spec.credential_ref} is not set"
            )
        if self.transport is None:
            self.transport = HttpTransport()
        system_text, user_text = render_prompt(template, sample.prefix)
        messages = []
        if system_text is not None:
            messages.append({"role": "system", "content": system_text})
        messages.append({"role": "user", "content": user_text})
        self._bump("network_calls")
        with self._endpoint_slot(spec.endpoint or ""):
            content, status = self.transport.chat_completion(
                spec.endpoint, api_key, spec.model_id, messages, spec.extra_body
            )
        if content is None:
            self._bump("failures")
            raw, normalized, correct = "", "", False
        else:
            raw = content
            normalized = normalize_answer(raw)
            correct = normalized == sample.target
        return QueryRecord(
            model_id=spec.model_id,
            text_id=sample.text_id,
            position=sample.position,
            length=sample.length,
            template_id=template.template_id,
            raw_response=raw,
            normalized_answer=normalized,
            correct=correct,
            timestamp=_utc_now(),
            transport_status=status,
        )
