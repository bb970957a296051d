"""Synthetic training fixtures with a planted solution.

Encoder states stand in for real audio-encoder activations: a seeded
Gaussian process per tapped layer. Targets are greedy rollouts of a
planted adapter through the frozen decoder, so a trained adapter can in
principle drive the loss to the planted model's own (near-zero) nll.
The decoder head is sharpened so greedy tokens carry almost all mass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ..errors import DestaError
from ..seeding import derive64, make_rng
from .functional import FusionBatch, aggregate_layers, assemble_audio_repr, qformer_forward
from .params import AdapterDims, AdapterParams, ToyDecoder, init_adapter, make_decoder

__all__ = ["PlantedFixture", "make_planted_fixture", "save_fixture", "load_fixture"]

_DEFAULT_HEAD_GAIN = 8.0


@dataclass
class PlantedFixture:
    dims: AdapterDims
    batches: list[FusionBatch]
    decoder: ToyDecoder
    planted: AdapterParams


def _audio_repr(params: AdapterParams, decoder: ToyDecoder, batch: FusionBatch) -> np.ndarray:
    summaries = {
        layer: qformer_forward(params.qformer, params.query_banks[layer], states)
        for layer, states in batch.states.items()
    }
    fused = aggregate_layers(summaries, params.aggregation)
    emb = None
    if batch.transcript_tokens is not None and len(batch.transcript_tokens) > 0:
        emb = decoder.tok_emb[np.asarray(batch.transcript_tokens, dtype=np.int64)]
    return assemble_audio_repr(fused, emb)


def _greedy_rollout(
    decoder: ToyDecoder, prompt: np.ndarray, audio: np.ndarray, length: int
) -> np.ndarray:
    """Argmax continuation after [prompt; audio], one token at a time."""
    from .functional import _decoder_fwd  # reuse the exact forward path

    target = np.zeros(0, dtype=np.int64)
    for _ in range(length):
        probe = np.concatenate([target, np.zeros(1, dtype=np.int64)])
        _, cache = _decoder_fwd(decoder, prompt, audio, probe)
        # The position predicting the probe's last token is sup[-1].
        logits_pos = cache["sup"][-1]
        # Recompute the logits row from the cached final activations.
        row = cache["xf"][logits_pos] @ decoder.head_w + decoder.head_b
        target = np.concatenate([target, [int(np.argmax(row))]])
    return target


def make_planted_fixture(
    seed: int,
    n_samples: int = 32,
    dims: AdapterDims | None = None,
    t_steps: int = 6,
    prompt_len: int = 2,
    target_len: int = 4,
    transcript_len: int = 2,
    head_gain: float = _DEFAULT_HEAD_GAIN,
) -> PlantedFixture:
    if dims is None:
        dims = AdapterDims()
    decoder = make_decoder(dims, derive64("fixture-decoder", seed), head_gain=head_gain)
    planted = init_adapter(dims, derive64("fixture-planted", seed))
    rng = make_rng("fixture-data", seed)
    batches = []
    for i in range(n_samples):
        states = {
            layer: rng.normal(0.0, 1.0, (t_steps, dims.d)) for layer in dims.layers
        }
        prompt = rng.integers(0, dims.vocab, size=prompt_len)
        transcript = (
            rng.integers(0, dims.vocab, size=transcript_len) if i % 2 == 0 else None
        )
        batch = FusionBatch(states, prompt, np.zeros(1, dtype=np.int64), transcript)
        audio = _audio_repr(planted, decoder, batch)
        target = _greedy_rollout(decoder, prompt, audio, target_len)
        batches.append(FusionBatch(states, prompt, target, transcript))
    return PlantedFixture(dims, batches, decoder, planted)


def save_fixture(path: str, fixture: PlantedFixture):
    """npz container: decoder + planted tensors plus per-sample arrays."""
    arrays: dict[str, np.ndarray] = {}
    meta = {
        "dims": {
            "d": fixture.dims.d,
            "dp": fixture.dims.dp,
            "n_queries": fixture.dims.n_queries,
            "blocks": fixture.dims.blocks,
            "heads": fixture.dims.heads,
            "vocab": fixture.dims.vocab,
            "layers": list(fixture.dims.layers),
            "ffn_mult": fixture.dims.ffn_mult,
            "dec_heads": fixture.dims.dec_heads,
            "max_positions": fixture.dims.max_positions,
        },
        "n_samples": len(fixture.batches),
    }
    for name, tensor in fixture.decoder.named_tensors():
        arrays[f"decoder/{name}"] = tensor
    for name, tensor in fixture.planted.named_tensors():
        arrays[f"planted/{name}"] = tensor
    for i, batch in enumerate(fixture.batches):
        for layer, states in batch.states.items():
            arrays[f"sample{i}/states/{layer}"] = states
        arrays[f"sample{i}/prompt"] = np.asarray(batch.prompt_tokens, dtype=np.int64)
        arrays[f"sample{i}/target"] = np.asarray(batch.target_tokens, dtype=np.int64)
        if batch.transcript_tokens is not None:
            arrays[f"sample{i}/transcript"] = np.asarray(
                batch.transcript_tokens, dtype=np.int64
            )
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    np.savez(path, **arrays)


def load_fixture(path: str) -> PlantedFixture:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        dims_fields = dict(meta["dims"])
        dims_fields["layers"] = tuple(dims_fields["layers"])
        dims = AdapterDims(**dims_fields)

        decoder = make_decoder(dims, 0)
        for name, tensor in decoder.named_tensors():
            key = f"decoder/{name}"
            if key not in data:
                raise DestaError(f"fixture missing tensor {key}")
            tensor[...] = data[key]
        planted = init_adapter(dims, 0)
        for name, tensor in planted.named_tensors():
            tensor[...] = data[f"planted/{name}"]

        batches = []
        for i in range(meta["n_samples"]):
            states = {
                layer: data[f"sample{i}/states/{layer}"] for layer in dims.layers
            }
            transcript_key = f"sample{i}/transcript"
            batches.append(
                FusionBatch(
                    states,
                    data[f"sample{i}/prompt"],
                    data[f"sample{i}/target"],
                    data[transcript_key] if transcript_key in data else None,
                )
            )
    return PlantedFixture(dims, batches, decoder, planted)
