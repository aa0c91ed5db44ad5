"""Independent numpy trace of the backbone forward pass (no autodiff.)"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from attention_oracle import naive_attention


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def trace_forward(model, x, mask):
    """Layer-by-layer reference forward for one batch; returns logits."""
    cfg = model.cfg
    p = {k: t.values for k, t in model.params.items()}
    s = model.structure
    batch = x.shape[0]
    streams = []
    for j in range(cfg.n_modalities):
        if not mask[j]:
            streams.append(np.tile(p[f"missing.{j}"], (batch, cfg.seq_len, 1)))
            continue
        h = x[:, j] @ p[f"mod{j}.embed.w"] + p[f"mod{j}.embed.b"]
        for i in range(cfg.enc_depth):
            key = f"mod{j}.enc{i}"
            a = s.attn[key]
            ln1 = _ln(h, p[f"{key}.ln1.g"], p[f"{key}.ln1.b"])
            att = np.stack([
                naive_attention(ln1[b], p[f"{key}.attn.wq"], p[f"{key}.attn.wk"],
                                p[f"{key}.attn.wv"], p[f"{key}.attn.wo"],
                                a.head_group, sparse=cfg.sparse_attention,
                                sparsity_const=cfg.sparsity_const)
                for b in range(batch)
            ])
            h = h + att
            ln2 = _ln(h, p[f"{key}.ln2.g"], p[f"{key}.ln2.b"])
            hid = _gelu(ln2 @ p[f"{key}.ffn.w1"] + p[f"{key}.ffn.b1"])
            h = h + hid @ p[f"{key}.ffn.w2"] + p[f"{key}.ffn.b2"]
        streams.append(h)
    h = np.concatenate(streams, axis=1)
    n_tok = h.shape[1]
    for i in range(cfg.fusion_depth):
        key = f"fusion{i}"
        a = s.attn[key]
        ln1 = _ln(h, p[f"{key}.ln1.g"], p[f"{key}.ln1.b"])
        att = np.stack([
            naive_attention(ln1[b], p[f"{key}.attn.wq"], p[f"{key}.attn.wk"],
                            p[f"{key}.attn.wv"], p[f"{key}.attn.wo"],
                            a.head_group, sparse=cfg.sparse_attention,
                            sparsity_const=cfg.sparsity_const)
            for b in range(batch)
        ])
        h = h + att
        ln2 = _ln(h, p[f"{key}.ln2.g"], p[f"{key}.ln2.b"])
        tokens = ln2.reshape(batch * n_tok, cfg.model_dim)
        h = h + moe_oracle(tokens, p, key, len(s.experts[key]),
                           cfg.top_k).reshape(batch, n_tok, cfg.model_dim)
    h = _ln(h, p["final_ln.g"], p["final_ln.b"])
    pooled = h.mean(axis=1)
    return pooled @ p["head.w"] + p["head.b"]


def moe_oracle(tokens, p, key, n_experts, top_k):
    """Brute-force per-token mixture: enumerate experts, pick the top-k by
    router logit (stable ties), renormalize with a softmax over the selected
    logits, and sum the weighted expert outputs."""
    logits = tokens @ p[f"{key}.moe.router.w"]
    out = np.zeros_like(tokens)
    k = min(top_k, n_experts)
    for t in range(tokens.shape[0]):
        order = np.argsort(-logits[t], kind="stable")[:k]
        w = _softmax(logits[t][order][None, :])[0]
        acc = np.zeros(tokens.shape[1])
        for wi, e in zip(w, order):
            hid = _gelu(tokens[t] @ p[f"{key}.moe.e{e}.w1"] + p[f"{key}.moe.e{e}.b1"])
            acc += wi * (hid @ p[f"{key}.moe.e{e}.w2"] + p[f"{key}.moe.e{e}.b2"])
        out[t] = acc
    return out
