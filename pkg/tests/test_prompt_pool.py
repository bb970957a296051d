import json
from collections import Counter

import numpy as np
import pytest

from desta.prompt_pool import (
    DuplicatePromptId,
    EmptyDomain,
    EmptyPool,
    UnknownDomain,
    compose_request,
    exemplar_pool_path,
    load_pool,
    sample_prompt,
)
from desta.seeding import make_rng
from support import write_pool


@pytest.fixture
def pool_file(tmp_path):
    path = tmp_path / "pool.jsonl"
    write_pool(path)
    return path


class TestLoadPool:
    def test_loads_all_records(self, pool_file):
        pool = load_pool(pool_file)
        assert len(pool) == 12
        assert sorted(pool.by_domain) == ["music", "sound", "speech"]

    def test_duplicate_id(self, tmp_path):
        path = tmp_path / "pool.jsonl"
        rows = [
            {"prompt_id": "p1", "domain": "speech", "text": "a"},
            {"prompt_id": "p1", "domain": "speech", "text": "b"},
        ]
        path.write_text("".join(json.dumps(r) + "\n" for r in rows))
        with pytest.raises(DuplicatePromptId):
            load_pool(path)

    def test_unknown_domain(self, tmp_path):
        path = tmp_path / "pool.jsonl"
        path.write_text(json.dumps({"prompt_id": "p1", "domain": "video", "text": "a"}) + "\n")
        with pytest.raises(UnknownDomain):
            load_pool(path)

    def test_empty_pool(self, tmp_path):
        path = tmp_path / "pool.jsonl"
        path.write_text("\n")
        with pytest.raises(EmptyPool):
            load_pool(path)

    def test_exemplar_pool_ships_30_per_domain(self):
        pool = load_pool(exemplar_pool_path())
        for domain in ("speech", "sound", "music"):
            assert len(pool.by_domain[domain]) >= 30


class TestSamplePrompt:
    def test_single_prompt_domain(self, tmp_path):
        path = tmp_path / "pool.jsonl"
        path.write_text(json.dumps({"prompt_id": "only", "domain": "music", "text": "t"}) + "\n")
        pool = load_pool(path)
        for seed in (0, 1, 99):
            assert sample_prompt(pool, make_rng(seed), "music").prompt_id == "only"

    def test_deterministic_sequence(self, pool_file):
        pool = load_pool(pool_file)
        draws_a = [sample_prompt(pool, rng, "speech").prompt_id
                   for rng in [make_rng(42, i) for i in range(10)]]
        draws_b = [sample_prompt(pool, rng, "speech").prompt_id
                   for rng in [make_rng(42, i) for i in range(10)]]
        assert draws_a == draws_b

    def test_same_rng_stream_replays(self, pool_file):
        pool = load_pool(pool_file)
        rng1, rng2 = make_rng(42), make_rng(42)
        seq1 = [sample_prompt(pool, rng1, "speech").prompt_id for _ in range(10)]
        seq2 = [sample_prompt(pool, rng2, "speech").prompt_id for _ in range(10)]
        assert seq1 == seq2

    def test_uniformity_binomial_bound(self, pool_file):
        pool = load_pool(pool_file)
        rng = make_rng(7)
        counts = Counter(
            sample_prompt(pool, rng, "speech").prompt_id for _ in range(10_000)
        )
        assert len(counts) == 4
        for prompt_id, count in counts.items():
            assert 2300 <= count <= 2700, (prompt_id, count)

    def test_chi_square_uniform(self, pool_file):
        pool = load_pool(pool_file)
        rng = make_rng(123)
        n = 12_000
        counts = Counter(sample_prompt(pool, rng, "sound").prompt_id for _ in range(n))
        expected = n / 4
        chi2 = sum((c - expected) ** 2 / expected for c in counts.values())
        # 3 degrees of freedom; critical value at alpha=0.001 is 16.27
        assert chi2 < 16.27

    def test_empty_domain(self, tmp_path):
        path = tmp_path / "pool.jsonl"
        path.write_text(json.dumps({"prompt_id": "p", "domain": "music", "text": "t"}) + "\n")
        pool = load_pool(path)
        with pytest.raises(EmptyDomain):
            sample_prompt(pool, make_rng(0), "speech")


class TestComposeRequest:
    def test_paper_shaped_example(self):
        composed = compose_request("[00:00-00:05] Hi (Gender:Female)", "Describe the audio")
        assert composed == "[00:00-00:05] Hi (Gender:Female) Describe the audio"

    def test_minimal(self):
        assert compose_request("D", "P") == "D P"

    def test_length_law(self):
        for d, p in [("abc", "xy"), ("a b", "c"), ("[x]", "why not")]:
            assert len(compose_request(d, p)) == len(d) + 1 + len(p)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            compose_request("", "p")
        with pytest.raises(ValueError):
            compose_request("d", "")
