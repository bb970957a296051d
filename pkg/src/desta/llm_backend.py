"""Generation backends: one contract, two implementations.

``MockBackend`` is a seeded bigram language model over a small fixed
vocabulary. Its conditional distribution is closed-form and exposed via
``conditional()``, so tests can compute exact expected perplexities.
``RemoteBackend`` speaks the common chat-completions wire shape against
an HTTP endpoint, with bounded concurrency and a retry policy that only
retries transport-level failures.
"""

from __future__ import annotations

import json
import math
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import requests

from .errors import DestaError
from .seeding import derive64, make_rng

__all__ = [
    "DecodingConfig",
    "GenerationResult",
    "TokenScore",
    "TokenScores",
    "GenerationBackend",
    "MockBackend",
    "RemoteBackend",
    "HttpTransport",
    "ReplayTransport",
    "RecordingTransport",
    "BackendError",
    "TransportError",
    "RemoteRefusal",
    "BudgetExceeded",
    "ScoringUnsupported",
]

API_TOKEN_ENV = "DESTA_API_TOKEN"


class BackendError(DestaError):
    """Base class for generation/scoring failures."""


class TransportError(BackendError):
    """Network-level failure (connection, timeout, 5xx). Retryable."""


class RemoteRefusal(BackendError):
    """Definitive rejection by the endpoint (4xx). Not retryable."""


class BudgetExceeded(BackendError):
    """Configured token quota exhausted."""


class ScoringUnsupported(BackendError):
    """The backend cannot produce token log-probabilities."""


@dataclass(frozen=True)
class DecodingConfig:
    temperature: float = 0.05
    top_p: float = 1.0
    max_new_tokens: int = 64

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if not (0 < self.top_p <= 1.0):
            raise ValueError("top_p must be in (0, 1]")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be positive")


@dataclass(frozen=True)
class GenerationResult:
    text: str
    token_count: int
    model_name: str
    finish_reason: str  # stop | length | error


@dataclass(frozen=True)
class TokenScore:
    token_text: str
    log_prob: float


@dataclass(frozen=True)
class TokenScores:
    tokens: tuple[TokenScore, ...]
    total_nll: float


class GenerationBackend:
    """Contract shared by the mock and the remote client."""

    model_name: str = "backend"

    def generate(self, request: str, cfg: DecodingConfig) -> GenerationResult:
        raise NotImplementedError

    def score_tokens(self, context: str, target: str) -> TokenScores:
        raise ScoringUnsupported(f"{self.model_name} cannot score tokens")


# ---------------------------------------------------------------------------
# Mock backend: seeded bigram LM with a closed-form conditional
# ---------------------------------------------------------------------------

_CONSONANTS = "b c d f g h j k l m n p r s t v".split()
_VOWELS = ["a", "e", "i", "o"]


def make_vocab(size: int) -> list[str]:
    """Deterministic syllable vocabulary (consonant x vowel, then numbered)."""
    base = [c + v for c in _CONSONANTS for v in _VOWELS]
    if size <= len(base):
        return base[:size]
    extra = [f"z{i}" for i in range(size - len(base))]
    return base + extra


class MockBackend(GenerationBackend):
    """Deterministic bigram LM for tests and oracles.

    The conditional P(next | prev) is a fixed row-stochastic matrix drawn
    once from the seed. Generation samples from the temperature/top-p
    adjusted conditional with an RNG derived from (seed, request), so the
    whole backend is a pure function of its inputs. Scoring uses the raw
    conditional, which is what the exact-oracle tests recompute.
    """

    def __init__(
        self,
        seed: int,
        vocab_size: int = 64,
        uniform: bool = False,
        fail_substring: str | None = None,
    ):
        self.seed = int(seed)
        self.vocab = make_vocab(vocab_size)
        self.vocab_index = {tok: i for i, tok in enumerate(self.vocab)}
        self.fail_substring = fail_substring
        kind = "uniform" if uniform else "bigram"
        self.model_name = f"mock-{kind}-v{vocab_size}-s{self.seed}"
        v = vocab_size
        if uniform:
            self.table = np.full((v, v), 1.0 / v)
        else:
            # Sparse-ish rows (gamma shape << 1) keep the greedy token's
            # probability far above a foreign model's view of it, so the
            # self-versus-cross perplexity gap is wide and stable. The
            # additive floor bounds every log-probability.
            rng = make_rng("mock-table", self.seed, v)
            rows = rng.gamma(0.15, 1.0, size=(v, v)) + 0.02
            self.table = rows / rows.sum(axis=1, keepdims=True)

    # -- closed-form surface used by oracle tests --------------------------

    def conditional(self, prev_index: int) -> np.ndarray:
        """P(next | prev) as a probability vector (copy)."""
        return self.table[prev_index].copy()

    def context_index(self, text: str) -> int:
        """Starting context symbol for a piece of conditioning text."""
        if text:
            last = text.split()[-1] if text.split() else ""
            if last in self.vocab_index:
                return self.vocab_index[last]
        return derive64("mock-ctx", text) % len(self.vocab)

    # -- GenerationBackend ---------------------------------------------------

    def generate(self, request: str, cfg: DecodingConfig) -> GenerationResult:
        if not request:
            raise ValueError("request must be non-empty")
        if self.fail_substring is not None and self.fail_substring in request:
            raise RemoteRefusal("injected mock failure")
        natural_len = 8 + derive64("mock-len", self.seed, request) % 17
        n = min(cfg.max_new_tokens, natural_len)
        finish = "length" if natural_len > cfg.max_new_tokens else "stop"
        rng = make_rng("mock-gen", self.seed, request)
        prev = self.context_index(request)
        out = []
        for _ in range(n):
            probs = self._decode_probs(self.table[prev], cfg)
            prev = int(rng.choice(len(self.vocab), p=probs))
            out.append(self.vocab[prev])
        return GenerationResult(" ".join(out), n, self.model_name, finish)

    def score_tokens(self, context: str, target: str) -> TokenScores:
        if not target:
            raise ValueError("target must be non-empty")
        words = target.split()
        prev = self.context_index(context)
        scores = []
        for i, word in enumerate(words):
            idx = self.vocab_index.get(word)
            if idx is None:
                raise BackendError(
                    f"token {word!r} not in mock vocabulary (size {len(self.vocab)})"
                )
            log_prob = math.log(self.table[prev][idx])
            scores.append(TokenScore(word if i == 0 else " " + word, log_prob))
            prev = idx
        total_nll = -math.fsum(s.log_prob for s in scores)
        return TokenScores(tuple(scores), total_nll)

    @staticmethod
    def _decode_probs(row: np.ndarray, cfg: DecodingConfig) -> np.ndarray:
        if cfg.temperature == 0.0:
            probs = np.zeros_like(row)
            probs[int(np.argmax(row))] = 1.0
            return probs
        # Temperature rescales in log space; top-p keeps the smallest
        # high-probability prefix whose mass reaches the threshold.
        logits = np.log(row) / cfg.temperature
        logits -= logits.max()
        probs = np.exp(logits)
        probs /= probs.sum()
        if cfg.top_p < 1.0:
            order = np.argsort(-probs, kind="stable")
            csum = np.cumsum(probs[order])
            keep = int(np.searchsorted(csum, cfg.top_p)) + 1
            mask = np.zeros_like(probs)
            mask[order[:keep]] = 1.0
            probs = probs * mask
            probs /= probs.sum()
        return probs


# ---------------------------------------------------------------------------
# Remote backend: chat-completions wire client
# ---------------------------------------------------------------------------


class HttpTransport:
    """POSTs JSON over HTTP. Returns (status_code, parsed body)."""

    def __init__(self, timeout: float = 60.0):
        self.timeout = timeout

    def __call__(self, url: str, payload: dict, headers: dict) -> tuple[int, dict]:
        try:
            resp = requests.post(url, json=payload, headers=headers, timeout=self.timeout)
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        try:
            body = resp.json()
        except ValueError:
            body = {"raw": resp.text}
        return resp.status_code, body


class ReplayTransport:
    """Replays recorded exchanges; requests must match the fixture exactly."""

    def __init__(self, fixture_path: str | Path):
        self.entries = []
        with open(fixture_path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    self.entries.append(json.loads(line))
        self._used = [False] * len(self.entries)

    def __call__(self, url: str, payload: dict, headers: dict) -> tuple[int, dict]:
        want = json.dumps(payload, sort_keys=True)
        for i, entry in enumerate(self.entries):
            if self._used[i]:
                continue
            if entry["url"] == url and json.dumps(entry["payload"], sort_keys=True) == want:
                self._used[i] = True
                return int(entry["status"]), entry["response"]
        raise TransportError(f"no recorded exchange for {url} with payload {want[:200]}")


class RecordingTransport:
    """Wraps a live transport and appends every exchange to a fixture file."""

    def __init__(self, inner, fixture_path: str | Path):
        self.inner = inner
        self.fixture_path = Path(fixture_path)

    def __call__(self, url: str, payload: dict, headers: dict) -> tuple[int, dict]:
        status, body = self.inner(url, payload, headers)
        with open(self.fixture_path, "a", encoding="utf-8") as fh:
            fh.write(
                json.dumps(
                    {"url": url, "payload": payload, "status": status, "response": body},
                    sort_keys=True,
                )
                + "\n"
            )
        return status, body


_RETRYABLE_STATUS = {408, 429, 500, 502, 503, 504}


class RemoteBackend(GenerationBackend):
    """Chat-completions client with bounded concurrency and retries.

    generate() posts to /chat/completions with a single user message;
    score_tokens() posts to /completions with echo + logprobs and keeps
    the tokens whose text offsets fall inside the target. Only Transport
    errors are retried (exponential backoff, max_attempts total tries).
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_token: str | None = None,
        transport=None,
        max_in_flight: int = 4,
        max_attempts: int = 5,
        backoff_base: float = 0.5,
        token_budget: int | None = None,
        system_prompt: str | None = None,
        sleep=time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.model_name = model
        self.api_token = api_token if api_token is not None else os.environ.get(API_TOKEN_ENV)
        self.transport = transport or HttpTransport()
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.token_budget = token_budget
        self.system_prompt = system_prompt
        self.sleep = sleep
        self._sem = threading.BoundedSemaphore(max_in_flight)
        self._lock = threading.Lock()
        self._tokens_used = 0

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_token:
            headers["Authorization"] = f"Bearer {self.api_token}"
        return headers

    def _post(self, path: str, payload: dict) -> dict:
        url = f"{self.base_url}{path}"
        last_error: TransportError | None = None
        for attempt in range(1, self.max_attempts + 1):
            if attempt > 1:
                self.sleep(self.backoff_base * 2 ** (attempt - 2))
            try:
                with self._sem:
                    status, body = self.transport(url, payload, self._headers())
            except TransportError as exc:
                last_error = exc
                continue
            if status in _RETRYABLE_STATUS:
                last_error = TransportError(f"HTTP {status} from {url}")
                continue
            if status >= 400:
                raise RemoteRefusal(f"HTTP {status} from {url}: {json.dumps(body)[:200]}")
            return body
        raise TransportError(
            f"giving up after {self.max_attempts} attempts: {last_error}"
        )

    def _charge_tokens(self, n: int):
        with self._lock:
            self._tokens_used += n
            if self.token_budget is not None and self._tokens_used > self.token_budget:
                raise BudgetExceeded(
                    f"token budget {self.token_budget} exceeded ({self._tokens_used} used)"
                )

    def generate(self, request: str, cfg: DecodingConfig) -> GenerationResult:
        if not request:
            raise ValueError("request must be non-empty")
        messages = []
        if self.system_prompt:
            messages.append({"role": "system", "content": self.system_prompt})
        messages.append({"role": "user", "content": request})
        payload = {
            "model": self.model_name,
            "messages": messages,
            "temperature": cfg.temperature,
            "top_p": cfg.top_p,
            "max_tokens": cfg.max_new_tokens,
        }
        body = self._post("/chat/completions", payload)
        try:
            choice = body["choices"][0]
            text = choice["message"]["content"]
            finish = choice.get("finish_reason") or "stop"
            usage = body.get("usage") or {}
            token_count = int(usage.get("completion_tokens", 0))
        except (KeyError, IndexError, TypeError) as exc:
            raise RemoteRefusal(f"malformed response body: {exc}") from None
        self._charge_tokens(int(usage.get("total_tokens", token_count)))
        return GenerationResult(text, token_count, self.model_name, finish)

    def score_tokens(self, context: str, target: str) -> TokenScores:
        if not target:
            raise ValueError("target must be non-empty")
        prompt = f"{context} {target}" if context else target
        cut = len(context) if context else 0
        payload = {
            "model": self.model_name,
            "prompt": prompt,
            "max_tokens": 0,
            "echo": True,
            "logprobs": 0,
        }
        body = self._post("/completions", payload)
        try:
            lp = body["choices"][0]["logprobs"]
            tokens = lp["tokens"]
            token_logprobs = lp["token_logprobs"]
            offsets = lp["text_offset"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ScoringUnsupported(f"no logprobs in response: {exc}") from None
        scores = []
        for tok, logprob, off in zip(tokens, token_logprobs, offsets):
            if off < cut:
                continue
            if logprob is None:
                raise ScoringUnsupported("missing log-probability for a target token")
            scores.append(TokenScore(tok, min(float(logprob), 0.0)))
        usage = body.get("usage") or {}
        self._charge_tokens(int(usage.get("total_tokens", len(tokens))))
        total_nll = -math.fsum(s.log_prob for s in scores)
        return TokenScores(tuple(scores), total_nll)
