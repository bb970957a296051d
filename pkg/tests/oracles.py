"""Straight-line scalar re-implementations used as independent oracles.

Everything here is plain Python loops over floats: no numpy broadcasting,
no shared code with the library's vectorized math. These functions define
the same computation (pre-norm cross-attention blocks, mixed projection,
causal decoder with masked pads) and are only trusted at toy sizes.
"""

from __future__ import annotations

import math


def _ln(row, g, b, eps=1e-5):
    n = len(row)
    mu = sum(row) / n
    var = sum((x - mu) ** 2 for x in row) / n
    inv = 1.0 / math.sqrt(var + eps)
    return [g[j] * (row[j] - mu) * inv + b[j] for j in range(n)]


def _matvec_rows(mat, w, bias):
    # mat: list of rows (n x d); w: d x k; bias: k
    out = []
    for row in mat:
        out_row = []
        for j in range(len(bias)):
            acc = bias[j]
            for i in range(len(row)):
                acc += row[i] * w[i][j]
            out_row.append(acc)
        out.append(out_row)
    return out


def _softmax(xs):
    m = max(xs)
    es = [math.exp(x - m) for x in xs]
    s = sum(es)
    return [e / s for e in es]


def _gelu(x):
    c = math.sqrt(2.0 / math.pi)
    u = c * (x + 0.044715 * x**3)
    t = math.tanh(u)
    return 0.5 * x * (1.0 + t)


def _attention(q_rows, k_rows, v_rows, heads, allowed=None):
    """allowed[i][j] boolean or None for dense; -1e30 masking like the library."""
    n, d = len(q_rows), len(q_rows[0])
    t = len(k_rows)
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)
    out = [[0.0] * d for _ in range(n)]
    for h in range(heads):
        lo = h * dh
        for i in range(n):
            logits = []
            for j in range(t):
                acc = 0.0
                for x in range(dh):
                    acc += q_rows[i][lo + x] * k_rows[j][lo + x]
                logit = acc * scale
                if allowed is not None and not allowed[i][j]:
                    logit += -1e30
                logits.append(logit)
            probs = _softmax(logits)
            for x in range(dh):
                acc = 0.0
                for j in range(t):
                    acc += probs[j] * v_rows[j][lo + x]
                out[i][lo + x] = acc
    return out


def _add(a, b):
    return [[a[i][j] + b[i][j] for j in range(len(a[0]))] for i in range(len(a))]


def _block(x, states, blk, heads):
    """One cross-attention block; blk is a dict of plain nested lists."""
    u = [_ln(row, blk["ln1_g"], blk["ln1_b"]) for row in x]
    q = _matvec_rows(u, blk["wq"], blk["bq"])
    k = _matvec_rows(states, blk["wk"], blk["bk"])
    v = _matvec_rows(states, blk["wv"], blk["bv"])
    ctx = _attention(q, k, v, heads)
    attn_out = _matvec_rows(ctx, blk["wo"], blk["bo"])
    x1 = _add(x, attn_out)
    u2 = [_ln(row, blk["ln2_g"], blk["ln2_b"]) for row in x1]
    h1 = _matvec_rows(u2, blk["w1"], blk["b1"])
    hg = [[_gelu(v_) for v_ in row] for row in h1]
    ffn = _matvec_rows(hg, blk["w2"], blk["b2"])
    return _add(x1, ffn)


def _block_to_lists(blk):
    return {name: getattr(blk, name).tolist() for name in (
        "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
        "ln2_g", "ln2_b", "w1", "b1", "w2", "b2",
    )}


def oracle_qformer(params, queries, states):
    """Scalar mirror of qformer_forward. params is the library object."""
    x = [list(map(float, row)) for row in queries]
    s = [list(map(float, row)) for row in states]
    for blk in params.blocks:
        x = _block(x, s, _block_to_lists(blk), params.heads)
    return x


def oracle_decoder_loss(dec, prompt_tokens, audio, target_tokens, prompt_mask=None):
    """Scalar mirror of decoder_loss."""
    tok_emb = dec.tok_emb.tolist()
    pos_emb = dec.pos_emb.tolist()
    p_rows = [list(tok_emb[t]) for t in prompt_tokens]
    a_rows = [list(map(float, row)) for row in audio]
    y_rows = [list(tok_emb[t]) for t in target_tokens]
    seq = p_rows + a_rows + y_rows
    s_len = len(seq)
    p_len, m_len, y_len = len(p_rows), len(a_rows), len(y_rows)

    valid = [True] * s_len
    if prompt_mask is not None:
        for i, ok in enumerate(prompt_mask):
            valid[i] = bool(ok)
    positions = []
    count = 0
    for i in range(s_len):
        if valid[i]:
            positions.append(count)
            count += 1
        else:
            positions.append(0)

    x0 = [[seq[i][j] + pos_emb[positions[i]][j] for j in range(dec.width)] for i in range(s_len)]
    allowed = [[(j <= i) and valid[j] for j in range(s_len)] for i in range(s_len)]

    blk = {
        "ln1_g": dec.ln1_g.tolist(), "ln1_b": dec.ln1_b.tolist(),
        "wq": dec.wq.tolist(), "bq": dec.bq.tolist(),
        "wk": dec.wk.tolist(), "bk": dec.bk.tolist(),
        "wv": dec.wv.tolist(), "bv": dec.bv.tolist(),
        "wo": dec.wo.tolist(), "bo": dec.bo.tolist(),
        "ln2_g": dec.ln2_g.tolist(), "ln2_b": dec.ln2_b.tolist(),
        "w1": dec.w1.tolist(), "b1": dec.b1.tolist(),
        "w2": dec.w2.tolist(), "b2": dec.b2.tolist(),
    }
    u = [_ln(row, blk["ln1_g"], blk["ln1_b"]) for row in x0]
    q = _matvec_rows(u, blk["wq"], blk["bq"])
    k = _matvec_rows(u, blk["wk"], blk["bk"])
    v = _matvec_rows(u, blk["wv"], blk["bv"])
    ctx = _attention(q, k, v, dec.n_heads, allowed=allowed)
    x1 = _add(x0, _matvec_rows(ctx, blk["wo"], blk["bo"]))
    u2 = [_ln(row, blk["ln2_g"], blk["ln2_b"]) for row in x1]
    h1 = _matvec_rows(u2, blk["w1"], blk["b1"])
    hg = [[_gelu(v_) for v_ in row] for row in h1]
    x2 = _add(x1, _matvec_rows(hg, blk["w2"], blk["b2"]))
    xf = [_ln(row, dec.lnf_g.tolist(), dec.lnf_b.tolist()) for row in x2]
    logits = _matvec_rows(xf, dec.head_w.tolist(), dec.head_b.tolist())

    total = 0.0
    for i, target in enumerate(target_tokens):
        row = logits[p_len + m_len + i - 1]
        m = max(row)
        lse = m + math.log(sum(math.exp(x - m) for x in row))
        total += lse - row[int(target)]
    return total / y_len


def oracle_mock_nll(backend, context: str, target: str) -> tuple[float, int]:
    """Exact nll of a target under the mock's closed-form conditionals."""
    prev = backend.context_index(context)
    total = 0.0
    words = target.split()
    for word in words:
        idx = backend.vocab_index[word]
        total += -math.log(float(backend.table[prev, idx]))
        prev = idx
    return total, len(words)
