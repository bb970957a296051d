import math
from pathlib import Path

import numpy as np
import pytest

from desta.llm_backend import (
    BackendError,
    BudgetExceeded,
    DecodingConfig,
    GenerationBackend,
    MockBackend,
    RemoteBackend,
    RemoteRefusal,
    ReplayTransport,
    ScoringUnsupported,
    TokenScores,
    TransportError,
)
from oracles import oracle_mock_nll

FIXTURE = Path(__file__).parent / "data" / "remote_fixture.jsonl"
CONTEXT = "[00:00-00:05] Hello world (Gender:Female) Describe the audio"


class TestDecodingConfig:
    def test_paper_defaults(self):
        cfg = DecodingConfig()
        assert cfg.temperature == 0.05 and cfg.top_p == 1.0

    def test_validation(self):
        with pytest.raises(ValueError):
            DecodingConfig(temperature=-1)
        with pytest.raises(ValueError):
            DecodingConfig(top_p=0.0)
        with pytest.raises(ValueError):
            DecodingConfig(max_new_tokens=0)


class TestMockBackend:
    def test_generate_deterministic(self):
        mock = MockBackend(seed=7)
        cfg = DecodingConfig()
        assert mock.generate("A B", cfg) == mock.generate("A B", cfg)

    def test_different_seeds_differ(self):
        cfg = DecodingConfig()
        assert MockBackend(1).generate("A B", cfg).text != MockBackend(2).generate("A B", cfg).text

    def test_max_new_tokens_truncates(self):
        result = MockBackend(0).generate("hello", DecodingConfig(max_new_tokens=1))
        assert result.token_count == 1
        assert result.finish_reason == "length"
        assert len(result.text.split()) == 1

    def test_natural_stop(self):
        result = MockBackend(0).generate("hello", DecodingConfig(max_new_tokens=64))
        assert result.finish_reason == "stop"
        assert 8 <= result.token_count <= 24

    def test_scorer_consistency_invariant(self):
        mock = MockBackend(3)
        out = mock.generate("some context", DecodingConfig())
        scores = mock.score_tokens("some context", out.text)
        assert abs(scores.total_nll + math.fsum(t.log_prob for t in scores.tokens)) < 1e-9
        assert all(t.log_prob <= 0 for t in scores.tokens)

    def test_tokens_cover_target_exactly(self):
        mock = MockBackend(3)
        out = mock.generate("ctx", DecodingConfig())
        scores = mock.score_tokens("ctx", out.text)
        assert "".join(t.token_text for t in scores.tokens) == out.text

    def test_self_scoring_matches_closed_form_oracle(self):
        mock = MockBackend(11)
        greedy = DecodingConfig(temperature=0.0)
        out = mock.generate("the context", greedy)
        scores = mock.score_tokens("the context", out.text)
        expected_nll, n = oracle_mock_nll(mock, "the context", out.text)
        assert n == len(scores.tokens)
        assert scores.total_nll == pytest.approx(expected_nll, abs=1e-9)
        # every step equals the model's own conditional
        prev = mock.context_index("the context")
        for token, word in zip(scores.tokens, out.text.split()):
            idx = mock.vocab_index[word]
            assert token.log_prob == pytest.approx(math.log(mock.table[prev][idx]), abs=0)
            prev = idx

    def test_uniform_mock_log_probs(self):
        uniform = MockBackend(0, vocab_size=16, uniform=True)
        scores = uniform.score_tokens("", "ba be bi")
        for token in scores.tokens:
            assert token.log_prob == -math.log(16)

    def test_empty_context_single_token(self):
        mock = MockBackend(5)
        scores = mock.score_tokens("", "ba")
        assert len(scores.tokens) == 1
        assert scores.total_nll == pytest.approx(-scores.tokens[0].log_prob, abs=0)

    def test_self_scoring_dominates_cross_seed(self):
        self_model = MockBackend(21)
        cross_model = MockBackend(22)
        greedy = DecodingConfig(temperature=0.0)
        for i in range(120):
            context = f"context number {i}"
            text = self_model.generate(context, greedy).text
            self_nll = self_model.score_tokens(context, text).total_nll
            cross_nll = cross_model.score_tokens(context, text).total_nll
            assert self_nll <= cross_nll

    def test_out_of_vocabulary_token_rejected(self):
        with pytest.raises(BackendError):
            MockBackend(0).score_tokens("ctx", "definitely_not_a_syllable")

    def test_injected_failure_hook(self):
        mock = MockBackend(0, fail_substring="<<BOOM>>")
        with pytest.raises(RemoteRefusal):
            mock.generate("please <<BOOM>> now", DecodingConfig())
        assert mock.generate("please do not", DecodingConfig()).text

    def test_base_contract_scoring_unsupported(self):
        class NoScores(GenerationBackend):
            pass

        with pytest.raises(ScoringUnsupported):
            NoScores().score_tokens("a", "b")


class TestRemoteBackend:
    def _backend(self, **kwargs):
        return RemoteBackend(
            "https://llm.test/v1",
            "test-model",
            api_token="secret",
            transport=ReplayTransport(FIXTURE),
            sleep=lambda s: None,
            **kwargs,
        )

    def test_generate_parses_fixture(self):
        result = self._backend().generate(CONTEXT, DecodingConfig())
        assert result.text == 'The clip features a female speaker cheerfully saying "Hello world".'
        assert result.token_count == 13
        assert result.finish_reason == "stop"
        assert result.model_name == "test-model"

    def test_score_tokens_parses_fixture(self):
        scores = self._backend().score_tokens(CONTEXT, "A cheerful greeting.")
        assert [t.token_text for t in scores.tokens] == [" A", " cheerful", " greeting."]
        assert scores.total_nll == pytest.approx(0.48, abs=1e-9)
        assert "".join(t.token_text for t in scores.tokens).strip() == "A cheerful greeting."

    def test_unknown_request_is_transport_error(self):
        with pytest.raises(TransportError):
            self._backend(max_attempts=1).generate("unrecorded request", DecodingConfig())


class _FlakyTransport:
    """Fails with the configured outcomes, then succeeds."""

    def __init__(self, outcomes, body=None):
        self.outcomes = list(outcomes)
        self.calls = 0
        self.body = body or {
            "choices": [{"message": {"content": "ok"}, "finish_reason": "stop"}],
            "usage": {"completion_tokens": 1, "total_tokens": 2},
        }

    def __call__(self, url, payload, headers):
        self.calls += 1
        if self.outcomes:
            outcome = self.outcomes.pop(0)
            if isinstance(outcome, Exception):
                raise outcome
            return outcome, {"error": "injected"}
        return 200, self.body


class TestRetryPolicy:
    def _backend(self, transport, **kwargs):
        kwargs.setdefault("max_attempts", 5)
        return RemoteBackend(
            "https://x.test/v1", "m", api_token="t",
            transport=transport, sleep=lambda s: None, **kwargs,
        )

    def test_retries_transport_exceptions_until_success(self):
        transport = _FlakyTransport([TransportError("boom"), TransportError("boom")])
        backend = self._backend(transport)
        assert backend.generate("hi", DecodingConfig()).text == "ok"
        assert transport.calls == 3

    def test_retries_5xx_and_429(self):
        transport = _FlakyTransport([503, 429, 500])
        backend = self._backend(transport)
        assert backend.generate("hi", DecodingConfig()).text == "ok"
        assert transport.calls == 4

    def test_gives_up_after_max_attempts(self):
        transport = _FlakyTransport([TransportError("boom")] * 10)
        backend = self._backend(transport)
        with pytest.raises(TransportError):
            backend.generate("hi", DecodingConfig())
        assert transport.calls == 5

    def test_refusal_is_never_retried(self):
        transport = _FlakyTransport([400])
        backend = self._backend(transport)
        with pytest.raises(RemoteRefusal):
            backend.generate("hi", DecodingConfig())
        assert transport.calls == 1

    def test_backoff_is_exponential(self):
        sleeps = []
        transport = _FlakyTransport([TransportError("x")] * 3)
        backend = RemoteBackend(
            "https://x.test/v1", "m", api_token="t", transport=transport,
            sleep=sleeps.append, backoff_base=0.5,
        )
        backend.generate("hi", DecodingConfig())
        assert sleeps == [0.5, 1.0, 2.0]

    def test_token_budget(self):
        transport = _FlakyTransport([])
        backend = self._backend(transport, token_budget=3)
        backend.generate("hi", DecodingConfig())
        with pytest.raises(BudgetExceeded):
            backend.generate("hi again", DecodingConfig())
