"""Uniform access to text generation and token scoring.

``Gateway`` wraps a ``Backend`` with a content-addressed response cache,
retries with exponential backoff, and a bound on requests in flight. Two
backends ship: ``OpenAICompatibleBackend`` speaks the open chat-completions /
completions HTTP API, ``ScriptedBackend`` is deterministic and offline.
"""

import json
import logging
import os
import random
import threading
import time
from dataclasses import dataclass, field
from enum import Enum

import httpx

from mdiag.constants import (
    BACKOFF_BASE_SECONDS,
    BACKOFF_MAX_SECONDS,
    DEFAULT_BASE_URL,
    DEFAULT_MAX_IN_FLIGHT,
    DEFAULT_MAX_TOKENS,
    DEFAULT_RETRY_LIMIT,
    DEFAULT_TEMPERATURE,
    DEFAULT_TIMEOUT,
    RETRIABLE_STATUS_CODES,
)
from mdiag.errors import (
    BackendError,
    EndpointStatusError,
    PreconditionError,
    ScoringUnsupported,
    TransportError,
)
from mdiag.utils import digest_obj, sha256_text, write_text_atomic

logger = logging.getLogger(__name__)


class DecodeMode(str, Enum):
    SAMPLED = "sampled"
    GREEDY = "greedy"


@dataclass(frozen=True)
class GenerationRequest:
    model_id: str
    prompt: str
    temperature: float = DEFAULT_TEMPERATURE
    seed: int = 0
    max_tokens: int = DEFAULT_MAX_TOKENS
    decode_mode: DecodeMode = DecodeMode.SAMPLED

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")

    @property
    def effective_temperature(self):
        # Greedy decoding ignores the requested temperature
        return 0.0 if self.decode_mode == DecodeMode.GREEDY else float(self.temperature)

    @property
    def prompt_digest(self):
        return sha256_text(self.prompt)

    def cache_key(self):
        return digest_obj(
            {
                "kind": "generate",
                "model_id": self.model_id,
                "prompt": self.prompt,
                "temperature": self.effective_temperature,
                "seed": self.seed,
                "decode_mode": self.decode_mode.value,
                "max_tokens": self.max_tokens,
            }
        )


@dataclass(frozen=True)
class GenerationResult:
    text: str
    finish_reason: str = "stop"  # stop | length | error
    token_count: int = 0
    cached: bool = False

    def to_record(self):
        return {
            "text": self.text,
            "finish_reason": self.finish_reason,
            "token_count": self.token_count,
        }


@dataclass(frozen=True)
class TokenLogProbs:
    tokens: tuple
    # None where the endpoint returned no value (typically the first token)
    logprobs: tuple

    def __post_init__(self):
        if len(self.tokens) != len(self.logprobs):
            raise ValueError("tokens and logprobs differ in length")
        for value in self.logprobs:
            if value is not None and value > 0:
                raise ValueError(f"log-probability {value} is positive")

    @property
    def usable(self):
        return [value for value in self.logprobs if value is not None]

    @property
    def omitted(self):
        return sum(1 for value in self.logprobs if value is None)

    def to_record(self):
        return {"tokens": list(self.tokens), "logprobs": list(self.logprobs)}

    @classmethod
    def from_record(cls, record):
        return cls(tokens=tuple(record["tokens"]), logprobs=tuple(record["logprobs"]))


@dataclass
class BackendConfig:
    base_url: str = DEFAULT_BASE_URL
    api_key: str = field(default=None, repr=False)
    max_in_flight: int = DEFAULT_MAX_IN_FLIGHT
    retry_limit: int = DEFAULT_RETRY_LIMIT
    timeout: float = DEFAULT_TIMEOUT
    cache_dir: str = None

    def __post_init__(self):
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be at least 1")
        if self.retry_limit < 0:
            raise ValueError("retry_limit must be >= 0")

    def to_public_dict(self):
        return {
            "base_url": self.base_url,
            "max_in_flight": self.max_in_flight,
            "retry_limit": self.retry_limit,
            "timeout": self.timeout,
            "cache_dir": self.cache_dir,
        }


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


class Backend:
    name = "backend"

    def complete(self, request):
        raise NotImplementedError

    def score(self, model_id, text):
        raise ScoringUnsupported(f"{self.name} backend cannot score tokens")

    def close(self):
        pass


class OpenAICompatibleBackend(Backend):
    """Chat completions for generation, completions with echo+logprobs for scoring."""

    name = "openai"

    # Statuses meaning "this route or option does not exist here"
    SCORING_UNSUPPORTED_STATUS = {400, 404, 405, 422, 501}

    def __init__(self, config, transport=None):
        headers = {"Content-Type": "application/json"}
        if config.api_key:
            headers["Authorization"] = f"Bearer {config.api_key}"
        self._client = httpx.Client(
            base_url=config.base_url.rstrip("/") + "/",
            headers=headers,
            timeout=config.timeout,
            transport=transport,
        )

    def _post(self, path, payload):
        try:
            response = self._client.post(path, json=payload)
        except httpx.TransportError as e:
            raise TransportError(f"{type(e).__name__}: {e}") from e
        if response.status_code >= 400:
            retry_after = None
            try:
                retry_after = float(response.headers.get("Retry-After", ""))
            except ValueError:
                pass
            raise EndpointStatusError(response.status_code, response.text, retry_after)
        try:
            return response.json()
        except ValueError as e:
            raise BackendError(f"endpoint returned invalid JSON from {path}") from e

    def complete(self, request):
        payload = {
            "model": request.model_id,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.effective_temperature,
            "max_tokens": request.max_tokens,
            "seed": request.seed,
            "stream": False,
        }
        data = self._post("chat/completions", payload)
        try:
            choice = data["choices"][0]
            text = (choice.get("message") or {}).get("content") or ""
            finish = choice.get("finish_reason")
        except (KeyError, IndexError, TypeError) as e:
            raise BackendError(f"unexpected chat completion shape: {str(data)[:200]}") from e

        usage = data.get("usage") or {}
        token_count = usage.get("completion_tokens") or len(text.split())
        if finish == "length":
            return GenerationResult(text=text, finish_reason="length", token_count=request.max_tokens)
        return GenerationResult(text=text, finish_reason="stop", token_count=token_count)

    def score(self, model_id, text):
        payload = {
            "model": model_id,
            "prompt": text,
            "max_tokens": 1,
            "temperature": 0.0,
            "echo": True,
            "logprobs": 1,
        }
        try:
            data = self._post("completions", payload)
        except EndpointStatusError as e:
            if e.status in self.SCORING_UNSUPPORTED_STATUS:
                raise ScoringUnsupported(
                    f"completions route rejected echo+logprobs (HTTP {e.status})"
                ) from e
            raise

        try:
            logprobs = data["choices"][0].get("logprobs") or {}
        except (KeyError, IndexError, TypeError) as e:
            raise BackendError(f"unexpected completion shape: {str(data)[:200]}") from e
        tokens = logprobs.get("tokens")
        values = logprobs.get("token_logprobs")
        if not tokens or values is None:
            raise ScoringUnsupported("endpoint returned no prompt log-probabilities")

        # Drop the generated tail; only the echoed prompt is scored
        offsets = logprobs.get("text_offset")
        if offsets and len(offsets) == len(tokens):
            keep = sum(1 for offset in offsets if offset < len(text))
        else:
            keep, consumed = 0, 0
            while keep < len(tokens) and consumed < len(text):
                consumed += len(tokens[keep])
                keep += 1
        kept = [None if v is None else min(float(v), 0.0) for v in values[:keep]]
        return TokenLogProbs(tokens=tuple(tokens[:keep]), logprobs=tuple(kept))

    def close(self):
        self._client.close()


class ScriptedBackend(Backend):
    """
    Deterministic offline backend.

    Responses come from, in order: a table keyed by (prompt digest, seed), a
    responder callable, or a fixed default text. Scoring goes through an
    optional scorer callable. Peak concurrency is recorded so tests can check
    the gateway's in-flight bound.
    """

    name = "scripted"

    def __init__(self, responder=None, table=None, scorer=None, default_text=None, delay=0.0):
        self.responder = responder
        self.table = dict(table or {})
        self.scorer = scorer
        self.default_text = default_text
        self.delay = delay
        self.calls = 0
        self.in_flight = 0
        self.peak_in_flight = 0
        self._lock = threading.Lock()

    @classmethod
    def from_table_file(cls, path, **kwargs):
        table = {}
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    row = json.loads(line)
                    table[(row["prompt_digest"], int(row["seed"]))] = row["text"]
        return cls(table=table, **kwargs)

    @classmethod
    def with_constant_logprob(cls, value, omit_first=False, **kwargs):
        def scorer(model_id, text):
            tokens = tuple(text.split())
            logprobs = tuple(
                None if omit_first and i == 0 else value for i in range(len(tokens))
            )
            return TokenLogProbs(tokens=tokens, logprobs=logprobs)

        return cls(scorer=scorer, **kwargs)

    def _enter(self):
        with self._lock:
            self.calls += 1
            self.in_flight += 1
            self.peak_in_flight = max(self.peak_in_flight, self.in_flight)

    def _leave(self):
        with self._lock:
            self.in_flight -= 1

    def complete(self, request):
        self._enter()
        try:
            if self.delay:
                time.sleep(self.delay)
            key = (request.prompt_digest, request.seed)
            if key in self.table:
                text = self.table[key]
            elif self.responder is not None:
                text = self.responder(request)
            elif self.default_text is not None:
                text = self.default_text
            else:
                raise BackendError("scripted backend has no response for this prompt")
            return GenerationResult(text=text, finish_reason="stop", token_count=len(text.split()))
        finally:
            self._leave()

    def score(self, model_id, text):
        if self.scorer is None:
            raise ScoringUnsupported("scripted backend has no scorer configured")
        self._enter()
        try:
            return self.scorer(model_id, text)
        finally:
            self._leave()


# ---------------------------------------------------------------------------
# Cache
# ---------------------------------------------------------------------------


class ResponseCache:
    """One JSON file per request digest."""

    def __init__(self, directory):
        self.directory = directory
        os.makedirs(directory, exist_ok=True)

    def _path(self, key):
        return os.path.join(self.directory, key[:2], f"{key}.json")

    def get(self, key):
        try:
            with open(self._path(key), "r", encoding="utf-8") as f:
                return json.load(f)
        except FileNotFoundError:
            return None
        except ValueError:
            logger.warning(f"Ignoring unreadable cache entry {key}")
            return None

    def put(self, key, record):
        write_text_atomic(self._path(key), json.dumps(record, ensure_ascii=False, sort_keys=True))


# ---------------------------------------------------------------------------
# Gateway
# ---------------------------------------------------------------------------


class Gateway:
    def __init__(self, backend, config=None, sleep=time.sleep):
        self.backend = backend
        self.config = config or BackendConfig()
        self.cache = ResponseCache(self.config.cache_dir) if self.config.cache_dir else None
        self._slots = threading.BoundedSemaphore(self.config.max_in_flight)
        self._sleep = sleep
        self._lock = threading.Lock()
        self.calls = 0
        self.cache_hits = 0

    def generate(self, request):
        key = request.cache_key()
        if self.cache is not None:
            record = self.cache.get(key)
            if record is not None:
                with self._lock:
                    self.cache_hits += 1
                return GenerationResult(
                    text=record["text"],
                    finish_reason=record.get("finish_reason", "stop"),
                    token_count=record.get("token_count", 0),
                    cached=True,
                )

        result = self._call(lambda: self.backend.complete(request), request.model_id)
        if self.cache is not None and result.finish_reason != "error":
            self.cache.put(key, result.to_record())
        return result

    def score_tokens(self, model_id, text):
        if not text:
            raise PreconditionError("cannot score empty text")
        key = digest_obj({"kind": "score", "model_id": model_id, "text": text})
        if self.cache is not None:
            record = self.cache.get(key)
            if record is not None:
                with self._lock:
                    self.cache_hits += 1
                return TokenLogProbs.from_record(record)

        scored = self._call(lambda: self.backend.score(model_id, text), model_id)
        if self.cache is not None:
            self.cache.put(key, scored.to_record())
        return scored

    def _backoff(self, attempt, error):
        delay = min(BACKOFF_MAX_SECONDS, BACKOFF_BASE_SECONDS * (2**attempt))
        delay = delay / 2 + random.uniform(0, delay / 2)
        retry_after = getattr(error, "retry_after", None)
        if retry_after is not None:
            delay = max(delay, min(BACKOFF_MAX_SECONDS, retry_after))
        return delay

    def _call(self, fn, model_id):
        attempts = self.config.retry_limit + 1
        last_error = None
        for attempt in range(attempts):
            with self._lock:
                self.calls += 1
            try:
                with self._slots:
                    return fn()
            except TransportError as e:
                last_error = e
            except EndpointStatusError as e:
                if e.status not in RETRIABLE_STATUS_CODES:
                    raise
                last_error = e
            if attempt + 1 < attempts:
                delay = self._backoff(attempt, last_error)
                logger.warning(
                    f"Request to {model_id} failed ({last_error}); "
                    f"retry {attempt + 1}/{self.config.retry_limit} in {delay:.1f}s"
                )
                self._sleep(delay)
        raise last_error

    def close(self):
        logger.debug(f"Gateway made {self.calls} backend calls, {self.cache_hits} cache hits")
        self.backend.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
