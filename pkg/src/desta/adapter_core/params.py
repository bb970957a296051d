"""Parameter containers for the toy modality adapter and frozen decoder.

Everything is float64 numpy. AdapterParams doubles as the gradient
container (same named-tensor structure), which keeps the optimizer and
the finite-difference checker generic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DestaError
from ..seeding import make_rng

__all__ = [
    "AdapterDims",
    "QFormerBlockParams",
    "QFormerParams",
    "AggregationParams",
    "AdapterParams",
    "ToyDecoder",
    "ShapeMismatch",
    "init_adapter",
    "make_decoder",
    "zeros_like_params",
]


class ShapeMismatch(DestaError):
    pass


@dataclass(frozen=True)
class AdapterDims:
    d: int = 16  # encoder/adapter width
    dp: int = 16  # decoder width
    n_queries: int = 4
    blocks: int = 2
    heads: int = 2
    vocab: int = 32
    layers: tuple[int, ...] = (1, 2, 3, 4)
    ffn_mult: int = 4
    dec_heads: int = 2
    max_positions: int = 64

    def __post_init__(self):
        if self.d % self.heads:
            raise ShapeMismatch(f"heads {self.heads} must divide width {self.d}")
        if self.dp % self.dec_heads:
            raise ShapeMismatch(f"dec_heads {self.dec_heads} must divide width {self.dp}")
        if not self.layers:
            raise ShapeMismatch("at least one tapped encoder layer required")
        if self.n_queries < 1:
            raise ShapeMismatch("need at least one query vector")


_BLOCK_TENSORS = (
    "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "ln2_g", "ln2_b", "w1", "b1", "w2", "b2",
)


@dataclass
class QFormerBlockParams:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class QFormerParams:
    blocks: list[QFormerBlockParams]
    heads: int


@dataclass
class AggregationParams:
    layer_logits: np.ndarray  # one logit per tapped layer
    proj_w: np.ndarray  # (d, dp)
    proj_b: np.ndarray  # (dp,)


@dataclass
class AdapterParams:
    """All trainable tensors: per-layer query banks, shared Q-Former
    blocks, and the aggregation (layer mix + projection)."""

    query_banks: dict[int, np.ndarray]
    qformer: QFormerParams
    aggregation: AggregationParams

    def named_tensors(self):
        """Deterministic (name, array) iteration for optimizers and IO."""
        for layer in sorted(self.query_banks):
            yield f"queries/{layer}", self.query_banks[layer]
        for b, block in enumerate(self.qformer.blocks):
            for name in _BLOCK_TENSORS:
                yield f"qformer/block{b}/{name}", getattr(block, name)
        yield "agg/layer_logits", self.aggregation.layer_logits
        yield "agg/proj_w", self.aggregation.proj_w
        yield "agg/proj_b", self.aggregation.proj_b

    def copy(self) -> "AdapterParams":
        return AdapterParams(
            {l: q.copy() for l, q in self.query_banks.items()},
            QFormerParams(
                [
                    QFormerBlockParams(**{n: getattr(b, n).copy() for n in _BLOCK_TENSORS})
                    for b in self.qformer.blocks
                ],
                self.qformer.heads,
            ),
            AggregationParams(
                self.aggregation.layer_logits.copy(),
                self.aggregation.proj_w.copy(),
                self.aggregation.proj_b.copy(),
            ),
        )


def _init_block(rng: np.random.Generator, d: int, ffn_mult: int) -> QFormerBlockParams:
    scale = 1.0 / np.sqrt(d)
    hidden = ffn_mult * d
    return QFormerBlockParams(
        ln1_g=np.ones(d),
        ln1_b=np.zeros(d),
        wq=rng.normal(0.0, scale, (d, d)),
        bq=np.zeros(d),
        wk=rng.normal(0.0, scale, (d, d)),
        bk=np.zeros(d),
        wv=rng.normal(0.0, scale, (d, d)),
        bv=np.zeros(d),
        wo=rng.normal(0.0, scale, (d, d)),
        bo=np.zeros(d),
        ln2_g=np.ones(d),
        ln2_b=np.zeros(d),
        w1=rng.normal(0.0, scale, (d, hidden)),
        b1=np.zeros(hidden),
        w2=rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, d)),
        b2=np.zeros(d),
    )


def init_adapter(dims: AdapterDims, seed: int) -> AdapterParams:
    rng = make_rng("adapter-init", seed)
    query_banks = {
        layer: rng.normal(0.0, 1.0, (dims.n_queries, dims.d)) for layer in dims.layers
    }
    blocks = [_init_block(rng, dims.d, dims.ffn_mult) for _ in range(dims.blocks)]
    aggregation = AggregationParams(
        layer_logits=np.zeros(len(dims.layers)),
        proj_w=rng.normal(0.0, 1.0 / np.sqrt(dims.d), (dims.d, dims.dp)),
        proj_b=np.zeros(dims.dp),
    )
    return AdapterParams(query_banks, QFormerParams(blocks, dims.heads), aggregation)


def zeros_like_params(params: AdapterParams) -> AdapterParams:
    out = params.copy()
    for _, tensor in out.named_tensors():
        tensor[...] = 0.0
    return out


_DECODER_TENSORS = (
    "tok_emb", "pos_emb", "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv",
    "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2", "lnf_g", "lnf_b",
    "head_w", "head_b",
)


@dataclass
class ToyDecoder:
    """Frozen one-block causal decoder. Never updated during training."""

    vocab: int
    width: int
    n_heads: int
    tok_emb: np.ndarray
    pos_emb: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    lnf_g: np.ndarray
    lnf_b: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray

    def named_tensors(self):
        for name in _DECODER_TENSORS:
            yield name, getattr(self, name)

    def state_bytes(self) -> bytes:
        """Concatenated raw tensor bytes; used to assert frozenness."""
        return b"".join(np.ascontiguousarray(t).tobytes() for _, t in self.named_tensors())


def make_decoder(dims: AdapterDims, seed: int, head_gain: float = 1.0) -> ToyDecoder:
    """Random frozen decoder. head_gain sharpens the output distribution,
    which planted fixtures use so greedy targets are high-probability."""
    rng = make_rng("decoder-init", seed)
    dp = dims.dp
    scale = 1.0 / np.sqrt(dp)
    hidden = dims.ffn_mult * dp
    return ToyDecoder(
        vocab=dims.vocab,
        width=dp,
        n_heads=dims.dec_heads,
        tok_emb=rng.normal(0.0, 1.0, (dims.vocab, dp)),
        pos_emb=rng.normal(0.0, 0.5, (dims.max_positions, dp)),
        ln1_g=np.ones(dp),
        ln1_b=np.zeros(dp),
        wq=rng.normal(0.0, scale, (dp, dp)),
        bq=np.zeros(dp),
        wk=rng.normal(0.0, scale, (dp, dp)),
        bk=np.zeros(dp),
        wv=rng.normal(0.0, scale, (dp, dp)),
        bv=np.zeros(dp),
        wo=rng.normal(0.0, scale, (dp, dp)),
        bo=np.zeros(dp),
        ln2_g=np.ones(dp),
        ln2_b=np.zeros(dp),
        w1=rng.normal(0.0, scale, (dp, hidden)),
        b1=np.zeros(hidden),
        w2=rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, dp)),
        b2=np.zeros(dp),
        lnf_g=np.ones(dp),
        lnf_b=np.zeros(dp),
        head_w=rng.normal(0.0, head_gain * scale, (dp, dims.vocab)),
        head_b=np.zeros(dims.vocab),
    )
