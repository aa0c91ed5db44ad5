"""Dense multi-head attention and its sparse grouped-query replacement.

Query heads are partitioned into groups that share one key/value projection
pair.  The sparse variant measures, for every query, how spiky its score row
is (max minus mean of the scaled dot products), attends only the top-U
spikiest queries where ``U = min(T, max(1, c * ceil(ln T)))``, and fills the
remaining rows with the time-mean of the group's values.  With ``U == T``
and one group per head this reproduces dense attention bit for bit.

FLOP counts are exact multiply-add tallies (1 MAC = 2 FLOPs) over the linear
maps: projections, score dot products, value mixing, and the output
projection.  Softmax, means, and the scoring sweep are excluded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .tensor import Tensor


@dataclass
class AttentionConfig:
    """Shape and sparsity parameters for one attention layer."""

    n_heads: int
    n_kv_groups: int
    model_dim: int
    seq_len: int
    sparsity_const: int = 5
    sparse_enabled: bool = False

    def __post_init__(self):
        if self.n_heads <= 0 or self.n_kv_groups <= 0:
            raise ValueError("head and group counts must be positive")
        if self.n_heads % self.n_kv_groups != 0:
            raise ValueError(
                f"n_heads={self.n_heads} not divisible by n_kv_groups={self.n_kv_groups}"
            )
        if self.model_dim % self.n_heads != 0:
            raise ValueError(
                f"model_dim={self.model_dim} not divisible by n_heads={self.n_heads}"
            )
        if self.seq_len <= 0 or self.sparsity_const <= 0:
            raise ValueError("seq_len and sparsity_const must be positive")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads

    @property
    def heads_per_group(self) -> int:
        return self.n_heads // self.n_kv_groups

    @property
    def top_u(self) -> int:
        return top_u_count(self.seq_len, self.sparsity_const)


def top_u_count(seq_len: int, sparsity_const: int) -> int:
    """U = min(T, max(1, c * ceil(ln T))); natural log."""
    u = sparsity_const * math.ceil(math.log(seq_len))
    return min(seq_len, max(1, u))


@dataclass
class AttentionWeights:
    """Projection matrices plus the head-to-group assignment.

    ``wq`` holds per-head column blocks of width ``head_dim``; ``wk``/``wv``
    hold per-group blocks; ``wo`` consumes the concatenated head outputs.
    ``head_group[h]`` is the K/V group serving query head ``h`` (after
    pruning the assignment may be ragged, so it is stored explicitly).
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    head_group: tuple[int, ...]

    @property
    def n_heads(self) -> int:
        return len(self.head_group)

    @property
    def n_groups(self) -> int:
        return self.wk.shape[-1] // self.head_dim

    @property
    def head_dim(self) -> int:
        return self.wq.shape[-1] // len(self.head_group)

    @classmethod
    def create(cls, cfg: AttentionConfig, rng: np.random.Generator) -> "AttentionWeights":
        d, dk = cfg.model_dim, cfg.head_dim
        return cls(
            wq=tz.param((d, cfg.n_heads * dk), rng),
            wk=tz.param((d, cfg.n_kv_groups * dk), rng),
            wv=tz.param((d, cfg.n_kv_groups * dk), rng),
            wo=tz.param((cfg.n_heads * dk, d), rng),
            head_group=tuple(h // cfg.heads_per_group for h in range(cfg.n_heads)),
        )

    def kv_param_count(self) -> int:
        return self.wk.size + self.wv.size


def sparsity_score(q, k) -> np.ndarray:
    """Per-query spikiness: max_j(q.k_j/sqrt(dk)) - mean_j(q.k_j/sqrt(dk)).

    Accepts ``(T, dk)`` or batched ``(B, T, dk)`` arrays/Tensors; returns a
    matching ``(T,)`` or ``(B, T)`` float array.  Always >= 0.
    """
    qv = q.values if isinstance(q, Tensor) else np.asarray(q, dtype=np.float64)
    kv = k.values if isinstance(k, Tensor) else np.asarray(k, dtype=np.float64)
    if qv.shape[-1] != kv.shape[-1]:
        raise tz.ShapeError(f"sparsity_score: head dims differ {qv.shape} vs {kv.shape}")
    s = np.matmul(qv, kv.swapaxes(-1, -2)) / np.sqrt(qv.shape[-1])
    return s.max(axis=-1) - s.mean(axis=-1)


def top_u_select(scores: np.ndarray, cfg: AttentionConfig) -> np.ndarray:
    """Indices of the U largest scores, ties to the lower index, ascending."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise tz.DomainError("top_u_select: scores must be finite")
    u = top_u_count(scores.shape[-1], cfg.sparsity_const)
    order = np.argsort(-scores, axis=-1, kind="stable")
    sel = order[..., :u]
    return np.sort(sel, axis=-1)


def dense_mha(x: Tensor, w: AttentionWeights, cfg: AttentionConfig,
              attn_sink=None, layer_key: str = "") -> Tensor:
    """Standard softmax(QK^T/sqrt(dk))V attention; every head owns its K/V."""
    if cfg.sparse_enabled:
        raise ValueError("dense_mha requires sparse_enabled=False")
    if w.n_heads != w.n_groups:
        raise ValueError("dense_mha requires one K/V group per head")
    return _grouped_attention(x, w, sparse=False, sparsity_const=cfg.sparsity_const,
                              attn_sink=attn_sink, layer_key=layer_key)


def sentry_attend(x: Tensor, w: AttentionWeights, cfg: AttentionConfig,
                  attn_sink=None, layer_key: str = "") -> Tensor:
    """Sparse grouped-query attention: top-U queries attend, the rest receive
    the time-mean of the group's values."""
    if not cfg.sparse_enabled:
        raise ValueError("sentry_attend requires sparse_enabled=True")
    return _grouped_attention(x, w, sparse=True, sparsity_const=cfg.sparsity_const,
                              attn_sink=attn_sink, layer_key=layer_key)


def grouped_attention(x: Tensor, w: AttentionWeights, sparse: bool,
                      sparsity_const: int = 5, attn_sink=None,
                      layer_key: str = "", tap_set=None,
                      tap_key: str | None = None) -> Tensor:
    """Backbone entry point: works on pruned (ragged) head sets."""
    return _grouped_attention(x, w, sparse, sparsity_const, attn_sink, layer_key,
                              tap_set, tap_key)


def _grouped_attention(x: Tensor, w: AttentionWeights, sparse: bool,
                       sparsity_const: int, attn_sink, layer_key: str,
                       tap_set=None, tap_key: str | None = None) -> Tensor:
    if x.ndim not in (2, 3):
        raise tz.ShapeError(f"attention input must be (T, D) or (B, T, D), got {x.shape}")
    if x.shape[-1] != w.wq.shape[0]:
        raise tz.ShapeError(
            f"attention input dim {x.shape[-1]} does not match wq rows {w.wq.shape[0]}"
        )
    t = x.shape[-2]
    dk = w.head_dim
    u = top_u_count(t, sparsity_const) if sparse else t
    q_all = tz.matmul(x, w.wq)
    kt_by_group: dict[int, Tensor] = {}
    v_by_group: dict[int, Tensor] = {}
    for g in sorted(set(w.head_group)):
        kt_by_group[g] = tz.transpose(
            tz.matmul(x, tz.slice_axis(w.wk, g * dk, (g + 1) * dk, axis=-1))
        )
        v_by_group[g] = tz.matmul(x, tz.slice_axis(w.wv, g * dk, (g + 1) * dk, axis=-1))
    head_outs = []
    for h in range(w.n_heads):
        g = w.head_group[h]
        q = tz.slice_axis(q_all, h * dk, (h + 1) * dk, axis=-1)
        v = v_by_group[g]
        scores = tz.scale(tz.matmul(q, kt_by_group[g]), 1.0 / math.sqrt(dk))
        if sparse and u < t:
            spike = scores.values.max(axis=-1) - scores.values.mean(axis=-1)
            order = np.argsort(-spike, axis=-1, kind="stable")[..., :u]
            idx = np.sort(order, axis=-1)
            attn = tz.softmax(tz.gather_rows(scores, idx), axis=-1)
            attended = tz.matmul(attn, v)
            context = tz.mean(v, axis=-2)
            out_h = tz.scatter_rows_fill(attended, context, idx, t)
        else:
            idx = None
            attn = tz.softmax(scores, axis=-1)
            out_h = tz.matmul(attn, v)
        if attn_sink is not None:
            attn_sink(layer_key, h, attn.values, idx, t)
        head_outs.append(out_h)
    stacked = head_outs[0] if len(head_outs) == 1 else tz.concat(head_outs, axis=-1)
    if tap_set is not None and tap_key is not None:
        tap_set.register_tap(stacked, tap_key)
    return tz.matmul(stacked, w.wo)


# ---------------------------------------------------------------------------
# operation counting


def attention_flops_parts(seq_len: int, model_dim: int, head_dim: int,
                          n_heads: int, n_groups: int, u_eff: int) -> dict[str, float]:
    """Exact per-term FLOP counts (2 FLOPs per multiply-add)."""
    t, d, dk = seq_len, model_dim, head_dim
    return {
        "q_proj": 2.0 * t * d * (n_heads * dk),
        "kv_proj": 2.0 * 2.0 * t * d * (n_groups * dk),
        "scores": 2.0 * n_heads * u_eff * t * dk,
        "value_mix": 2.0 * n_heads * u_eff * t * dk,
        "out_proj": 2.0 * t * (n_heads * dk) * d,
    }


def attention_flops(cfg: AttentionConfig) -> float:
    """Total forward FLOPs of one attention layer under ``cfg``."""
    u_eff = cfg.top_u if cfg.sparse_enabled else cfg.seq_len
    parts = attention_flops_parts(cfg.seq_len, cfg.model_dim, cfg.head_dim,
                                  cfg.n_heads, cfg.n_kv_groups, u_eff)
    return float(sum(parts.values()))
