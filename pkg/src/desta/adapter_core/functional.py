"""Forward and backward math for the modality adapter.

The adapter maps multi-layer encoder states to decoder-width features:
per tapped layer, a shared stack of cross-attention blocks lets that
layer's query bank summarize the states; the per-layer summaries are
mixed with softmax weights and projected. The result, optionally
concatenated with transcript token embeddings, is spliced between the
prompt and the target inside a frozen causal decoder, and the loss is
mean next-token nll over the target positions only.

All gradients are exact analytic derivatives of this code, validated by
central finite differences in the test suite. The adapter adds no
positional terms, so permuting encoder time steps cannot change the
loss. The attention mask uses -1e30 rather than -inf so fully masked
rows stay finite; masked weights still underflow to exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DestaError
from .params import (
    AdapterParams,
    AggregationParams,
    QFormerBlockParams,
    QFormerParams,
    ShapeMismatch,
    ToyDecoder,
    zeros_like_params,
)

__all__ = [
    "FusionBatch",
    "qformer_forward",
    "aggregate_layers",
    "assemble_audio_repr",
    "decoder_loss",
    "adapter_gradients",
    "forward_loss",
    "VocabOverflow",
    "NonFinite",
    "WidthMismatch",
]

_LN_EPS = 1e-5
_MASK_VALUE = -1e30
_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


class VocabOverflow(DestaError):
    pass


class NonFinite(DestaError):
    def __init__(self, where: str, step: int | None = None):
        at = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite values in {where}{at}")
        self.step = step


class WidthMismatch(ShapeMismatch):
    pass


@dataclass
class FusionBatch:
    """One training example for the adapter."""

    states: dict[int, np.ndarray]  # layer -> (T, d)
    prompt_tokens: np.ndarray  # (p,) int
    target_tokens: np.ndarray  # (ny,) int, ny >= 1
    transcript_tokens: np.ndarray | None = None  # (L,) int, speech only
    prompt_mask: np.ndarray | None = None  # (p,) bool, False = pad


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def _layernorm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv, g)


def _layernorm_bwd(dy, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _gelu_fwd(x):
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def _gelu_bwd(dy, cache):
    x, t = cache
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _split_heads(x, heads):
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(x):
    h, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dh)


def _softmax_last(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _attention_fwd(q, k, v, heads, mask=None):
    """q: (Nq, d); k, v: (Nk, d). Returns (Nq, d) context and cache."""
    qh = _split_heads(q, heads)
    kh = _split_heads(k, heads)
    vh = _split_heads(v, heads)
    scale = 1.0 / np.sqrt(qh.shape[-1])
    logits = qh @ kh.transpose(0, 2, 1) * scale
    if mask is not None:
        logits = logits + mask
    probs = _softmax_last(logits)
    ctx = probs @ vh
    return _merge_heads(ctx), (qh, kh, vh, probs, scale, heads)


def _attention_bwd(dctx, cache):
    qh, kh, vh, probs, scale, heads = cache
    dctx_h = _split_heads(dctx, heads)
    dprobs = dctx_h @ vh.transpose(0, 2, 1)
    dvh = probs.transpose(0, 2, 1) @ dctx_h
    dlogits = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
    dqh = dlogits @ kh * scale
    dkh = dlogits.transpose(0, 2, 1) @ qh * scale
    return _merge_heads(dqh), _merge_heads(dkh), _merge_heads(dvh)


# ---------------------------------------------------------------------------
# Q-Former blocks (cross-attention from queries to encoder states)
# ---------------------------------------------------------------------------


def _qformer_block_fwd(blk: QFormerBlockParams, x, states, heads):
    u, ln1_cache = _layernorm_fwd(x, blk.ln1_g, blk.ln1_b)
    q = u @ blk.wq + blk.bq
    k = states @ blk.wk + blk.bk
    v = states @ blk.wv + blk.bv
    ctx, attn_cache = _attention_fwd(q, k, v, heads)
    attn_out = ctx @ blk.wo + blk.bo
    x1 = x + attn_out
    u2, ln2_cache = _layernorm_fwd(x1, blk.ln2_g, blk.ln2_b)
    h1 = u2 @ blk.w1 + blk.b1
    hg, gelu_cache = _gelu_fwd(h1)
    x2 = x1 + hg @ blk.w2 + blk.b2
    cache = (x, u, states, ctx, x1, u2, hg, ln1_cache, attn_cache, ln2_cache, gelu_cache, blk)
    return x2, cache


def _qformer_block_bwd(dx2, cache, grads: QFormerBlockParams):
    """Returns dx (gradient into the block input). Encoder states are
    inputs, not parameters, so their gradient is not produced."""
    x, u, states, ctx, x1, u2, hg, ln1_cache, attn_cache, ln2_cache, gelu_cache, blk = cache
    # FFN path
    dhg = dx2 @ blk.w2.T
    grads.w2 += hg.T @ dx2
    grads.b2 += dx2.sum(axis=0)
    dh1 = _gelu_bwd(dhg, gelu_cache)
    grads.w1 += u2.T @ dh1
    grads.b1 += dh1.sum(axis=0)
    du2 = dh1 @ blk.w1.T
    dx1_ln, dg2, db2 = _layernorm_bwd(du2, ln2_cache)
    grads.ln2_g += dg2
    grads.ln2_b += db2
    dx1 = dx2 + dx1_ln
    # Attention path
    dattn_out = dx1
    grads.wo += ctx.T @ dattn_out
    grads.bo += dattn_out.sum(axis=0)
    dctx = dattn_out @ blk.wo.T
    dq, dk, dv = _attention_bwd(dctx, attn_cache)
    grads.wq += u.T @ dq
    grads.bq += dq.sum(axis=0)
    grads.wk += states.T @ dk
    grads.bk += dk.sum(axis=0)
    grads.wv += states.T @ dv
    grads.bv += dv.sum(axis=0)
    du = dq @ blk.wq.T
    dx_ln, dg1, db1 = _layernorm_bwd(du, ln1_cache)
    grads.ln1_g += dg1
    grads.ln1_b += db1
    return dx1 + dx_ln


def _qformer_fwd(params: QFormerParams, queries, states):
    if queries.ndim != 2 or states.ndim != 2:
        raise ShapeMismatch("queries and states must be rank-2")
    if queries.shape[1] != states.shape[1]:
        raise ShapeMismatch(
            f"width mismatch: queries {queries.shape} vs states {states.shape}"
        )
    x = queries
    caches = []
    for blk in params.blocks:
        x, cache = _qformer_block_fwd(blk, x, states, params.heads)
        caches.append(cache)
    return x, caches


def _qformer_bwd(dout, caches, block_grads: list[QFormerBlockParams]):
    dx = dout
    for cache, grads in zip(reversed(caches), reversed(block_grads)):
        dx = _qformer_block_bwd(dx, cache, grads)
    return dx  # gradient for the query bank


def qformer_forward(params: QFormerParams, queries: np.ndarray, states: np.ndarray) -> np.ndarray:
    """Summary of the states as seen by the query bank, shape (N, d)."""
    out, _ = _qformer_fwd(params, queries, states)
    return out


# ---------------------------------------------------------------------------
# Aggregation across tapped layers
# ---------------------------------------------------------------------------


def layer_weights(agg: AggregationParams) -> np.ndarray:
    """Softmax of the mixing logits; sums to one by construction."""
    z = agg.layer_logits - agg.layer_logits.max()
    e = np.exp(z)
    return e / e.sum()


def _aggregate_fwd(summaries: list[np.ndarray], agg: AggregationParams):
    shapes = {s.shape for s in summaries}
    if len(shapes) != 1:
        raise ShapeMismatch(f"per-layer summaries disagree in shape: {shapes}")
    if len(summaries) != agg.layer_logits.shape[0]:
        raise ShapeMismatch(
            f"{len(summaries)} summaries vs {agg.layer_logits.shape[0]} mixing logits"
        )
    w = layer_weights(agg)
    mixed = sum(w[i] * summaries[i] for i in range(len(summaries)))
    fused = mixed @ agg.proj_w + agg.proj_b
    return fused, (summaries, w, mixed)


def _aggregate_bwd(dfused, cache, agg: AggregationParams, grads: AggregationParams):
    summaries, w, mixed = cache
    grads.proj_w += mixed.T @ dfused
    grads.proj_b += dfused.sum(axis=0)
    dmixed = dfused @ agg.proj_w.T
    dsummaries = [w[i] * dmixed for i in range(len(summaries))]
    dw = np.array([(dmixed * summaries[i]).sum() for i in range(len(summaries))])
    grads.layer_logits += w * (dw - (dw * w).sum())
    return dsummaries


def aggregate_layers(
    summaries_by_layer: dict[int, np.ndarray], agg: AggregationParams
) -> np.ndarray:
    """Weighted mix of per-layer summaries, projected to decoder width."""
    ordered = [summaries_by_layer[l] for l in sorted(summaries_by_layer)]
    fused, _ = _aggregate_fwd(ordered, agg)
    return fused


def assemble_audio_repr(fused: np.ndarray, transcript_emb: np.ndarray | None = None) -> np.ndarray:
    """Stack continuous features above transcript embeddings (if any)."""
    if transcript_emb is None:
        return fused
    if transcript_emb.shape[1] != fused.shape[1]:
        raise WidthMismatch(
            f"fused width {fused.shape[1]} vs transcript width {transcript_emb.shape[1]}"
        )
    return np.vstack([fused, transcript_emb])


# ---------------------------------------------------------------------------
# Frozen decoder loss
# ---------------------------------------------------------------------------


def _check_tokens(tokens: np.ndarray, vocab: int, what: str):
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        raise VocabOverflow(f"{what} token id outside [0, {vocab})")


def _decoder_fwd(dec: ToyDecoder, prompt_tokens, audio, target_tokens, prompt_mask=None):
    prompt_tokens = np.asarray(prompt_tokens, dtype=np.int64)
    target_tokens = np.asarray(target_tokens, dtype=np.int64)
    if target_tokens.size < 1:
        raise DestaError("target must contain at least one token")
    _check_tokens(prompt_tokens, dec.vocab, "prompt")
    _check_tokens(target_tokens, dec.vocab, "target")
    if audio.ndim != 2 or audio.shape[1] != dec.width:
        raise WidthMismatch(f"audio repr {audio.shape} vs decoder width {dec.width}")

    p_len, m_len, y_len = len(prompt_tokens), audio.shape[0], len(target_tokens)
    seq_len = p_len + m_len + y_len
    if seq_len > dec.pos_emb.shape[0]:
        raise ShapeMismatch(f"sequence length {seq_len} exceeds positional table")

    valid = np.ones(seq_len, dtype=bool)
    if prompt_mask is not None:
        valid[:p_len] = np.asarray(prompt_mask, dtype=bool)
    # Pads get position 0 but are masked out of attention entirely, so
    # appending pads shifts nothing for the real tokens.
    positions = np.where(valid, np.cumsum(valid) - 1, 0)

    emb = np.vstack(
        [dec.tok_emb[prompt_tokens], audio, dec.tok_emb[target_tokens]]
    )
    x0 = emb + dec.pos_emb[positions]

    causal = np.tril(np.ones((seq_len, seq_len), dtype=bool))
    allowed = causal & valid[None, :]
    mask = np.where(allowed, 0.0, _MASK_VALUE)

    u, ln1_cache = _layernorm_fwd(x0, dec.ln1_g, dec.ln1_b)
    q = u @ dec.wq + dec.bq
    k = u @ dec.wk + dec.bk
    v = u @ dec.wv + dec.bv
    ctx, attn_cache = _attention_fwd(q, k, v, dec.n_heads, mask=mask[None, :, :])
    x1 = x0 + ctx @ dec.wo + dec.bo
    u2, ln2_cache = _layernorm_fwd(x1, dec.ln2_g, dec.ln2_b)
    h1 = u2 @ dec.w1 + dec.b1
    hg, gelu_cache = _gelu_fwd(h1)
    x2 = x1 + hg @ dec.w2 + dec.b2
    xf, lnf_cache = _layernorm_fwd(x2, dec.lnf_g, dec.lnf_b)
    logits = xf @ dec.head_w + dec.head_b

    sup = p_len + m_len + np.arange(y_len) - 1  # positions predicting each target token
    sup_logits = logits[sup]
    zmax = sup_logits.max(axis=-1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(sup_logits - zmax).sum(axis=-1))
    nll = lse - sup_logits[np.arange(y_len), target_tokens]
    loss = float(nll.mean())

    cache = {
        "p_len": p_len,
        "m_len": m_len,
        "y_len": y_len,
        "target_tokens": target_tokens,
        "sup": sup,
        "sup_probs": _softmax_last(sup_logits),
        "xf": xf,
        "u": u,
        "u2": u2,
        "hg": hg,
        "ctx": ctx,
        "ln1": ln1_cache,
        "ln2": ln2_cache,
        "lnf": lnf_cache,
        "attn": attn_cache,
        "gelu": gelu_cache,
        "seq_len": seq_len,
    }
    return loss, cache


def _decoder_bwd_to_audio(dec: ToyDecoder, cache) -> np.ndarray:
    """Gradient of the loss with respect to the audio rows only. Decoder
    parameters are frozen by contract, so no parameter gradients exist."""
    y_len = cache["y_len"]
    seq_len = cache["seq_len"]
    dlogits = np.zeros((seq_len, dec.vocab))
    dsup = cache["sup_probs"].copy()
    dsup[np.arange(y_len), cache["target_tokens"]] -= 1.0
    dlogits[cache["sup"]] = dsup / y_len

    dxf = dlogits @ dec.head_w.T
    dx2, _, _ = _layernorm_bwd(dxf, cache["lnf"])
    dhg = dx2 @ dec.w2.T
    dh1 = _gelu_bwd(dhg, cache["gelu"])
    du2 = dh1 @ dec.w1.T
    dx1_ln, _, _ = _layernorm_bwd(du2, cache["ln2"])
    dx1 = dx2 + dx1_ln
    dctx = dx1 @ dec.wo.T
    dq, dk, dv = _attention_bwd(dctx, cache["attn"])
    du = dq @ dec.wq.T + dk @ dec.wk.T + dv @ dec.wv.T
    dx0_ln, _, _ = _layernorm_bwd(du, cache["ln1"])
    dx0 = dx1 + dx0_ln
    p_len, m_len = cache["p_len"], cache["m_len"]
    return dx0[p_len : p_len + m_len]


def decoder_loss(
    dec: ToyDecoder,
    prompt_tokens,
    audio_repr: np.ndarray,
    target_tokens,
    prompt_mask=None,
) -> float:
    """Mean next-token nll over the target positions only."""
    loss, _ = _decoder_fwd(dec, prompt_tokens, audio_repr, target_tokens, prompt_mask)
    return loss


# ---------------------------------------------------------------------------
# Full fusion path
# ---------------------------------------------------------------------------


def forward_loss(
    params: AdapterParams, dec: ToyDecoder, batch: FusionBatch
) -> tuple[float, dict]:
    """Loss plus everything backward needs. The audio representation has
    exactly n_queries + transcript-length rows at decoder width."""
    layers = sorted(batch.states)
    if sorted(params.query_banks) != layers:
        raise ShapeMismatch(
            f"batch taps layers {layers} but adapter has banks for "
            f"{sorted(params.query_banks)}"
        )
    summaries = []
    qf_caches = []
    for layer in layers:
        out, caches = _qformer_fwd(params.qformer, params.query_banks[layer], batch.states[layer])
        summaries.append(out)
        qf_caches.append(caches)
    fused, agg_cache = _aggregate_fwd(summaries, params.aggregation)

    transcript_emb = None
    if batch.transcript_tokens is not None and len(batch.transcript_tokens) > 0:
        tt = np.asarray(batch.transcript_tokens, dtype=np.int64)
        _check_tokens(tt, dec.vocab, "transcript")
        transcript_emb = dec.tok_emb[tt]
    audio = assemble_audio_repr(fused, transcript_emb)

    loss, dec_cache = _decoder_fwd(
        dec, batch.prompt_tokens, audio, batch.target_tokens, batch.prompt_mask
    )
    cache = {
        "layers": layers,
        "qf_caches": qf_caches,
        "agg_cache": agg_cache,
        "dec_cache": dec_cache,
        "n_fused_rows": fused.shape[0],
    }
    return loss, cache


def adapter_gradients(
    batch: FusionBatch, params: AdapterParams, dec: ToyDecoder
) -> tuple[float, AdapterParams]:
    """Exact gradients for the trainable tensors only.

    Raises NonFinite if the forward or backward pass overflows; nothing
    is clipped silently.
    """
    loss, cache = forward_loss(params, dec, batch)
    if not np.isfinite(loss):
        raise NonFinite("loss")
    grads = zeros_like_params(params)
    daudio = _decoder_bwd_to_audio(dec, cache["dec_cache"])
    dfused = daudio[: cache["n_fused_rows"]]  # transcript embeddings are frozen
    dsummaries = _aggregate_bwd(dfused, cache["agg_cache"], params.aggregation, grads.aggregation)
    for layer, dsummary, qf_cache in zip(cache["layers"], dsummaries, cache["qf_caches"]):
        dqueries = _qformer_bwd(dsummary, qf_cache, grads.qformer.blocks)
        grads.query_banks[layer] += dqueries
    for name, tensor in grads.named_tensors():
        if not np.isfinite(tensor).all():
            raise NonFinite(f"gradient {name}")
    return loss, grads
