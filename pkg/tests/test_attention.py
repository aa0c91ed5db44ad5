"""Attention tests: dense oracle equivalence, top-U arithmetic, sparsity
scores, degenerate-sparsity bit equality, and exact FLOP accounting."""

from __future__ import annotations

import math

import numpy as np
import pytest

from modgate import tensor as tz
from modgate.attention import (
    AttentionConfig,
    AttentionWeights,
    attention_flops,
    attention_flops_parts,
    dense_mha,
    sentry_attend,
    sparsity_score,
    top_u_count,
    top_u_select,
)
from attention_oracle import MacCounter, naive_attention

RNG = np.random.default_rng


def make_weights(cfg: AttentionConfig, seed: int = 0) -> AttentionWeights:
    return AttentionWeights.create(cfg, RNG(seed))


# ---------------------------------------------------------------------------
# config invariants


def test_config_validation():
    with pytest.raises(ValueError):
        AttentionConfig(n_heads=6, n_kv_groups=4, model_dim=24, seq_len=8)
    with pytest.raises(ValueError):
        AttentionConfig(n_heads=5, n_kv_groups=1, model_dim=24, seq_len=8)
    cfg = AttentionConfig(n_heads=4, n_kv_groups=2, model_dim=32, seq_len=16)
    assert cfg.head_dim == 8
    assert 1 <= cfg.top_u <= cfg.seq_len


def test_kv_parameter_reduction():
    # 8 heads in 2 groups keeps 2 of 8 K/V blocks: params drop 4x
    cfg_full = AttentionConfig(n_heads=8, n_kv_groups=8, model_dim=64, seq_len=16)
    cfg_gqa = AttentionConfig(n_heads=8, n_kv_groups=2, model_dim=64, seq_len=16)
    w_full = make_weights(cfg_full)
    w_gqa = make_weights(cfg_gqa)
    assert w_full.kv_param_count() == 2 * 8 * 64 * 8
    assert w_gqa.kv_param_count() == 2 * 2 * 64 * 8
    assert w_full.kv_param_count() == 4 * w_gqa.kv_param_count()


# ---------------------------------------------------------------------------
# top-U arithmetic


def test_top_u_paper_values():
    # T=128, c=5 -> ceil(ln 128) = 5 -> U = 25 (fixes log as natural log)
    assert top_u_count(128, 5) == 25


def test_top_u_clamps_and_examples():
    assert top_u_count(1, 7) == 1
    assert top_u_count(20, 3) == 9  # ceil(ln 20) = 3
    assert top_u_count(4, 100) == 4  # clamped to T


def test_top_u_select_ties_lower_index():
    cfg = AttentionConfig(n_heads=1, n_kv_groups=1, model_dim=4, seq_len=6,
                          sparsity_const=1)
    scores = np.array([1.0, 2.0, 2.0, 0.5, 2.0, 1.0])
    idx = top_u_select(scores, cfg)  # U = min(6, ceil(ln 6)) = 2
    np.testing.assert_array_equal(idx, [1, 2])


# ---------------------------------------------------------------------------
# sparsity scores


def test_sparsity_score_identical_keys_zero():
    rng = RNG(1)
    q = rng.normal(size=(5, 4))
    k = np.tile(rng.normal(size=(1, 4)), (5, 1))
    np.testing.assert_allclose(sparsity_score(q, k), np.zeros(5), atol=1e-12)


def test_sparsity_score_single_aligned_key():
    # q matches one key, orthogonal to the rest: score = (1 - 1/T) * q.k/sqrt(dk)
    dk, t = 4, 4
    k = np.eye(t, dk) * 2.0
    q = np.zeros((1, dk))
    q[0, 0] = 3.0
    expected = (1.0 - 1.0 / t) * (q[0] @ k[0]) / math.sqrt(dk)
    np.testing.assert_allclose(sparsity_score(q, k), [expected], rtol=1e-12)


def test_sparsity_score_nonnegative():
    rng = RNG(2)
    for _ in range(20):
        s = sparsity_score(rng.normal(size=(9, 6)), rng.normal(size=(9, 6)))
        assert (s >= -1e-15).all()


# ---------------------------------------------------------------------------
# dense attention vs naive loop oracle


def test_dense_single_key_is_projected_values():
    cfg = AttentionConfig(n_heads=2, n_kv_groups=2, model_dim=8, seq_len=1)
    w = make_weights(cfg, seed=3)
    x = tz.Tensor(RNG(4).normal(size=(1, 8)))
    out = dense_mha(x, w, cfg)
    v = np.concatenate(
        [x.values @ w.wv.values[:, g * 4:(g + 1) * 4] for g in (0, 1)], axis=-1
    )
    np.testing.assert_allclose(out.values, v @ w.wo.values, rtol=1e-12)


def test_dense_zero_input_zero_output():
    cfg = AttentionConfig(n_heads=2, n_kv_groups=2, model_dim=8, seq_len=5)
    w = make_weights(cfg, seed=5)
    out = dense_mha(tz.Tensor(np.zeros((5, 8))), w, cfg)
    np.testing.assert_array_equal(out.values, np.zeros((5, 8)))


def test_dense_matches_naive_oracle():
    cfg = AttentionConfig(n_heads=2, n_kv_groups=2, model_dim=16, seq_len=8)
    w = make_weights(cfg, seed=6)
    x = RNG(7).normal(size=(8, 16))
    got = dense_mha(tz.Tensor(x), w, cfg).values
    want = naive_attention(x, w.wq.values, w.wk.values, w.wv.values, w.wo.values,
                           w.head_group, sparse=False)
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_sparse_matches_naive_oracle_u_lt_t():
    cfg = AttentionConfig(n_heads=4, n_kv_groups=2, model_dim=16, seq_len=24,
                          sparsity_const=1, sparse_enabled=True)
    w = make_weights(cfg, seed=8)
    x = RNG(9).normal(size=(24, 16))
    assert cfg.top_u < cfg.seq_len
    got = sentry_attend(tz.Tensor(x), w, cfg).values
    want = naive_attention(x, w.wq.values, w.wk.values, w.wv.values, w.wo.values,
                           w.head_group, sparse=True, sparsity_const=1)
    np.testing.assert_allclose(got, want, atol=1e-10)


# ---------------------------------------------------------------------------
# degenerate sparsity: U == T


def test_sparse_u_equals_t_bitwise_dense():
    # small T forces the clamp; grouped sparse == grouped dense bit for bit
    cfg_s = AttentionConfig(n_heads=4, n_kv_groups=2, model_dim=16, seq_len=6,
                            sparsity_const=5, sparse_enabled=True)
    cfg_d = AttentionConfig(n_heads=4, n_kv_groups=2, model_dim=16, seq_len=6,
                            sparsity_const=5, sparse_enabled=False)
    assert cfg_s.top_u == cfg_s.seq_len
    w = make_weights(cfg_s, seed=10)
    x = tz.Tensor(RNG(11).normal(size=(6, 16)))
    from modgate.attention import grouped_attention

    sparse_out = sentry_attend(x, w, cfg_s)
    dense_out = grouped_attention(x, w, sparse=False)
    assert sparse_out.values.tobytes() == dense_out.values.tobytes()
    del cfg_d


def test_sparse_equals_dense_mha_100_instances():
    rng = RNG(12)
    for i in range(100):
        t = int(rng.integers(2, 17))
        h = int(rng.choice([1, 2, 4]))
        dk = int(rng.choice([2, 4]))
        d = h * dk
        c = max(1, math.ceil(t / max(1, math.ceil(math.log(t)))))  # force U >= T
        cfg_s = AttentionConfig(n_heads=h, n_kv_groups=h, model_dim=d, seq_len=t,
                                sparsity_const=c, sparse_enabled=True)
        cfg_d = AttentionConfig(n_heads=h, n_kv_groups=h, model_dim=d, seq_len=t,
                                sparsity_const=c, sparse_enabled=False)
        assert cfg_s.top_u == t
        w = make_weights(cfg_s, seed=100 + i)
        x = tz.Tensor(rng.normal(size=(t, d)))
        diff = np.abs(sentry_attend(x, w, cfg_s).values - dense_mha(x, w, cfg_d).values)
        assert diff.max() < 1e-10


def test_sparse_zero_input_rows_all_equal():
    cfg = AttentionConfig(n_heads=2, n_kv_groups=1, model_dim=8, seq_len=32,
                          sparsity_const=1, sparse_enabled=True)
    w = make_weights(cfg, seed=13)
    out = sentry_attend(tz.Tensor(np.zeros((32, 8))), w, cfg).values
    np.testing.assert_array_equal(out, np.zeros((32, 8)))


def test_attended_rows_stochastic():
    cfg = AttentionConfig(n_heads=2, n_kv_groups=1, model_dim=8, seq_len=40,
                          sparsity_const=2, sparse_enabled=True)
    w = make_weights(cfg, seed=14)
    x = tz.Tensor(RNG(15).normal(size=(40, 8)))
    rows = []
    sentry_attend(x, w, cfg, attn_sink=lambda lk, h, a, idx, t: rows.append(a))
    for a in rows:
        np.testing.assert_allclose(a.sum(axis=-1), np.ones(a.shape[0]), atol=1e-10)


def test_batched_matches_per_sample():
    cfg = AttentionConfig(n_heads=2, n_kv_groups=1, model_dim=8, seq_len=20,
                          sparsity_const=1, sparse_enabled=True)
    w = make_weights(cfg, seed=16)
    xs = RNG(17).normal(size=(3, 20, 8))
    batched = sentry_attend(tz.Tensor(xs), w, cfg).values
    for b in range(3):
        single = sentry_attend(tz.Tensor(xs[b]), w, cfg).values
        np.testing.assert_allclose(batched[b], single, atol=1e-12)


# ---------------------------------------------------------------------------
# FLOP accounting


def test_flops_score_term_ratio_is_u_over_t():
    base = dict(n_heads=8, n_kv_groups=2, model_dim=64, seq_len=128, sparsity_const=5)
    dense = attention_flops_parts(128, 64, 8, 8, 2, 128)
    sparse = attention_flops_parts(128, 64, 8, 8, 2, top_u_count(128, 5))
    ratio = (sparse["scores"] + sparse["value_mix"]) / (dense["scores"] + dense["value_mix"])
    assert ratio == pytest.approx(25.0 / 128.0)
    del base


def test_flops_match_instrumented_oracle():
    rng = RNG(18)
    for trial in range(20):
        h = int(rng.choice([1, 2, 4]))
        g = int(rng.choice([d for d in (1, 2, 4) if h % d == 0]))
        dk = int(rng.choice([2, 4]))
        t = int(rng.integers(3, 12))
        c = int(rng.integers(1, 4))
        sparse = bool(rng.integers(0, 2))
        cfg = AttentionConfig(n_heads=h, n_kv_groups=g, model_dim=h * dk, seq_len=t,
                              sparsity_const=c, sparse_enabled=sparse)
        w = make_weights(cfg, seed=200 + trial)
        x = rng.normal(size=(t, h * dk))
        counter = MacCounter()
        naive_attention(x, w.wq.values, w.wk.values, w.wv.values, w.wo.values,
                        w.head_group, sparse=sparse, sparsity_const=c, counter=counter)
        assert attention_flops(cfg) == counter.flops


def test_flops_instrumented_default_config():
    cfg = AttentionConfig(n_heads=8, n_kv_groups=2, model_dim=64, seq_len=128,
                          sparsity_const=5, sparse_enabled=True)
    w = make_weights(cfg, seed=19)
    x = RNG(20).normal(size=(128, 64))
    counter = MacCounter()
    naive_attention(x, w.wq.values, w.wk.values, w.wv.values, w.wo.values,
                    w.head_group, sparse=True, sparsity_const=5, counter=counter)
    assert attention_flops(cfg) == counter.flops


def test_flops_monotone_in_groups_and_u():
    def flops(groups, c, sparse=True):
        return attention_flops(AttentionConfig(
            n_heads=8, n_kv_groups=groups, model_dim=64, seq_len=128,
            sparsity_const=c, sparse_enabled=sparse))

    assert flops(8, 5) > flops(4, 5) > flops(2, 5) > flops(1, 5)
    assert flops(2, 5, sparse=False) > flops(2, 5) > flops(2, 3) > flops(2, 1)


# ---------------------------------------------------------------------------
# gradients flow through both attention paths


def test_attention_gradcheck():
    from gradcheck import check_gradients

    cfg = AttentionConfig(n_heads=2, n_kv_groups=1, model_dim=4, seq_len=9,
                          sparsity_const=1, sparse_enabled=True)
    w = make_weights(cfg, seed=21)

    def build(x):
        return tz.mean(sentry_attend(x, w, cfg))

    check_gradients(build, [(9, 4)], RNG(22), rel_tol=1e-4)
