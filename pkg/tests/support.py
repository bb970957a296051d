"""Shared test helpers: corpus generators and tiny file writers."""

from __future__ import annotations

import json

import numpy as np

from desta.description_schema import (
    AudioDescription,
    Bare,
    KeyValue,
    Segment,
    Timestamp,
)

# Includes every reserved character plus a non-ascii letter.
TEXT_ALPHABET = "abcdefgh XYZ09():,\\.é-"


def random_text(rng: np.random.Generator, max_len: int, allow_empty: bool = True) -> str:
    while True:
        n = int(rng.integers(0 if allow_empty else 1, max_len + 1))
        text = "".join(TEXT_ALPHABET[int(i)] for i in rng.integers(0, len(TEXT_ALPHABET), n))
        text = text.strip()
        if text or allow_empty:
            return text


def random_description(rng: np.random.Generator) -> AudioDescription:
    segments = []
    start = int(rng.integers(0, 100))
    for _ in range(int(rng.integers(1, 5))):
        end = start + int(rng.integers(0, 4000))
        content = random_text(rng, 14)
        entries = []
        for _ in range(int(rng.integers(0, 4))):
            if rng.integers(0, 3) == 0:
                entries.append(Bare(random_text(rng, 12, allow_empty=False)))
            else:
                entries.append(
                    KeyValue(
                        random_text(rng, 8, allow_empty=False),
                        random_text(rng, 8),
                    )
                )
        bare_only = entries and all(isinstance(e, Bare) for e in entries)
        if bare_only and len(entries) > 1:
            entries = entries[:1]  # several comma-joined bare entries cannot round-trip
        segments.append(Segment(Timestamp(start), Timestamp(end), content, tuple(entries)))
        start = start + int(rng.integers(0, 50))
    return AudioDescription(tuple(segments))


def write_metadata(path, n_speech=3, n_sound=2, n_music=1):
    """Small interchange metadata file; returns the record list."""
    records = []
    counter = 0
    for domain, count in (("speech", n_speech), ("sound", n_sound), ("music", n_music)):
        for i in range(count):
            counter += 1
            record = {
                "id": f"{domain}-{i:03d}",
                "domain": domain,
                "audio_path": f"audio/{domain}/{i:03d}.wav",
                "segments": [
                    {
                        "start_s": 0,
                        "end_s": 5 + i,
                        **(
                            {"content": f"hello number {counter}",
                             "attributes": {"Gender": "Female", "Emotion": "Happy"}}
                            if domain == "speech"
                            else {"event": f"{domain} event {counter}"}
                        ),
                    }
                ],
            }
            if domain == "speech":
                record["transcript"] = f"hello number {counter}"
            records.append(record)
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")
    return records


def write_pool(path, per_domain=4):
    records = []
    for domain in ("speech", "sound", "music"):
        for i in range(per_domain):
            records.append(
                {"prompt_id": f"{domain}-p{i}", "domain": domain, "text": f"Prompt {i} for {domain}"}
            )
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")
    return records
