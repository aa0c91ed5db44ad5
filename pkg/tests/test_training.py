"""Trainer tests: curriculum schedule, warmup freezing, gradient isolation,
observer mode, determinism, divergence handling."""

from __future__ import annotations

import numpy as np
import pytest

from modgate import tensor as tz
from modgate.backbone import Backbone, BackboneConfig
from modgate.checkpoint import model_blob
from modgate.data import SyntheticSpec, generate
from modgate.training import (
    SGD,
    TrainConfig,
    TrainingDiverged,
    curriculum_mask,
    curriculum_p,
    train,
)

RNG = np.random.default_rng


def tiny_spec(**kw) -> SyntheticSpec:
    base = dict(n_modalities=2, seq_len=8, input_dim=4, n_classes=2,
                signatures={0: (0,), 1: (1,)}, noise=0.1, samples_per_class=16,
                seed=0)
    base.update(kw)
    return SyntheticSpec(**base)


def tiny_bcfg(**kw) -> BackboneConfig:
    base = dict(n_modalities=2, seq_len=8, input_dim=4, model_dim=16, n_classes=2,
                enc_depth=1, fusion_depth=1, ffn_dim=8, n_experts=2, top_k=1,
                n_heads=2, n_kv_groups=1, sparsity_const=1, sparse_attention=True)
    base.update(kw)
    return BackboneConfig(**base)


def tiny_tcfg(**kw) -> TrainConfig:
    base = dict(epochs=4, warmup_epochs=1, p_max=0.3, batch_size=16,
                lr_backbone=0.05, lr_gates=0.2, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# curriculum


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(p_max=1.0)
    with pytest.raises(ValueError):
        TrainConfig(p_max=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(epochs=5, warmup_epochs=5)


def test_curriculum_zero_through_warmup():
    cfg = TrainConfig(epochs=20, warmup_epochs=5, p_max=0.4)
    for t in range(5):
        assert curriculum_p(t, cfg) == 0.0


def test_curriculum_linear_ramp_and_endpoint():
    cfg = TrainConfig(epochs=20, warmup_epochs=5, p_max=0.4)
    ps = [curriculum_p(t, cfg) for t in range(20)]
    assert ps[19] == pytest.approx(0.4)
    assert ps[5] == 0.0
    # linear: equal increments after warmup
    deltas = np.diff(ps[5:])
    np.testing.assert_allclose(deltas, deltas[0], atol=1e-12)
    # nondecreasing, clamped
    assert all(b >= a for a, b in zip(ps, ps[1:]))
    assert all(0.0 <= p <= 0.4 for p in ps)


def test_curriculum_mask_always_ones_during_warmup():
    cfg = TrainConfig(epochs=10, warmup_epochs=4, p_max=0.5)
    rng = RNG(0)
    for t in range(4):
        for _ in range(20):
            assert curriculum_mask(t, cfg, rng, 5).sum() == 5


def test_curriculum_mask_never_all_zero():
    cfg = TrainConfig(epochs=2, warmup_epochs=1, p_max=0.9)
    rng = RNG(1)
    for _ in range(500):
        assert curriculum_mask(1, cfg, rng, 3).any()


def test_curriculum_monte_carlo_drop_frequency():
    # p_t = 0.3 at the final epoch of this schedule
    cfg = TrainConfig(epochs=2, warmup_epochs=1, p_max=0.3)
    assert curriculum_p(1, cfg) == pytest.approx(0.3)
    rng = RNG(2)
    m = 6
    draws = 100_000
    dropped = 0
    for _ in range(draws):
        dropped += m - curriculum_mask(1, cfg, rng, m).sum()
    freq = dropped / (draws * m)
    assert abs(freq - 0.3) < 0.01


# ---------------------------------------------------------------------------
# training runs


def test_zero_epochs_returns_initialized_model():
    ds = generate(tiny_spec())
    model, gates, report = train(ds.x, ds.y, tiny_bcfg(), tiny_tcfg(epochs=0))
    fresh = Backbone.create(tiny_bcfg(), seed=0)
    assert model_blob(model) == model_blob(fresh)
    assert report.epochs == []


def test_separable_task_reaches_95_percent():
    ds = generate(tiny_spec(samples_per_class=24))
    tcfg = tiny_tcfg(epochs=25, warmup_epochs=2, p_max=0.0, seed=0)
    model, gates, report = train(ds.x, ds.y, tiny_bcfg(), tcfg)
    assert report.final_train_accuracy >= 0.95
    assert len(report.epochs) == 25


def test_same_seed_bit_identical_checkpoints():
    ds = generate(tiny_spec())
    out = []
    for _ in range(2):
        model, gates, _ = train(ds.x, ds.y, tiny_bcfg(), tiny_tcfg(epochs=3))
        out.append(model_blob(model, gates))
    assert out[0] == out[1]


def test_different_seed_changes_checkpoint():
    ds = generate(tiny_spec())
    m0, g0, _ = train(ds.x, ds.y, tiny_bcfg(), tiny_tcfg(epochs=2, seed=0))
    m1, g1, _ = train(ds.x, ds.y, tiny_bcfg(), tiny_tcfg(epochs=2, seed=1))
    assert model_blob(m0, g0) != model_blob(m1, g1)


def test_gates_frozen_through_warmup_and_move_after():
    ds = generate(tiny_spec())
    seen: list[tuple[int, bytes]] = []

    def probe(ctx):
        blob = b"".join(t.values.tobytes()
                        for t in ctx["gates"].parameters().values())
        seen.append((ctx["epoch"], blob))

    model, gates, _ = train(ds.x, ds.y, tiny_bcfg(),
                            tiny_tcfg(epochs=3, warmup_epochs=2), probe=probe)
    init_blob = seen[0][1]
    for epoch, blob in seen:
        if epoch < 2:
            assert blob == init_blob  # frozen through warmup
    final_blob = b"".join(t.values.tobytes() for t in gates.parameters().values())
    assert final_blob != init_blob


def test_alpha_zero_is_backbone_only_training():
    ds = generate(tiny_spec())
    model, gates, report = train(ds.x, ds.y, tiny_bcfg(),
                                 tiny_tcfg(epochs=3, alpha=0.0))
    from modgate.gating import GateTable

    fresh = GateTable.create(model.structure.gate_group_specs(), 2, seed=0)
    for key, t in gates.parameters().items():
        assert t.values.tobytes() == fresh.parameters()[key].values.tobytes()
    assert all(e["loss_align"] == 0.0 for e in report.epochs)


def test_observer_mode_and_gradient_isolation():
    ds = generate(tiny_spec())
    checked = {"steps": 0, "gate_steps": 0}

    def probe(ctx):
        model = ctx["model"]
        # observer mode: a tap-free, gate-free forward is bit-identical
        bare = model.forward(ctx["xb"], ctx["mask"]).values
        assert bare.tobytes() == ctx["logits"].tobytes()
        # gate losses add exactly nothing to backbone gradients
        for key, before in ctx["grads_after_cls"].items():
            after = ctx["grads_after_gate"][key]
            if before is None:
                assert after is None
            else:
                assert after.tobytes() == before.tobytes()
        checked["steps"] += 1
        checked["gate_steps"] += int(ctx["gate_stepped"])

    train(ds.x, ds.y, tiny_bcfg(), tiny_tcfg(epochs=3, warmup_epochs=1),
          probe=probe)
    assert checked["steps"] > 0 and checked["gate_steps"] > 0


def test_task_loss_never_reaches_gate_params():
    ds = generate(tiny_spec())

    def probe(ctx):
        if not ctx["gate_stepped"]:  # warmup steps: no gate backward ran
            for t in ctx["gates"].parameters().values():
                assert t.grad is None

    train(ds.x, ds.y, tiny_bcfg(), tiny_tcfg(epochs=2, warmup_epochs=1),
          probe=probe)


def test_divergence_aborts():
    ds = generate(tiny_spec())
    with pytest.raises(TrainingDiverged):
        train(ds.x, ds.y, tiny_bcfg(), tiny_tcfg(epochs=4, lr_backbone=1e4))


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train(np.zeros((0, 2, 8, 4)), np.zeros(0, dtype=int), tiny_bcfg(), tiny_tcfg())


def test_report_serializes():
    ds = generate(tiny_spec())
    _, _, report = train(ds.x, ds.y, tiny_bcfg(), tiny_tcfg(epochs=2))
    text = report.to_json()
    assert '"gate_overhead_ratio"' in text
    assert '"accuracy_by_missing"' in text


def test_golden_step_regression():
    # frozen loss breakdown of one recorded step (seeded init, fixed batch)
    from modgate.gating import GateTable, SaliencyEma
    from modgate.training import train_step

    ds = generate(tiny_spec())
    bcfg = tiny_bcfg()
    tcfg = tiny_tcfg(epochs=2, warmup_epochs=0, p_max=0.0)
    model = Backbone.create(bcfg, seed=0)
    gates = GateTable.create(model.structure.gate_group_specs(), 2, seed=0)
    unit_counts = {f"{s}:{k}": n for s, k, n in model.structure.gate_group_specs()}
    stats = train_step(model, gates, ds.x[:16], ds.y[:16], np.ones(2, dtype=int),
                       0, tcfg, SGD(model.params, tcfg.lr_backbone, tcfg.momentum),
                       SGD(gates.parameters(), tcfg.lr_gates, tcfg.momentum),
                       SaliencyEma(), unit_counts, None)
    assert stats.loss_cls == pytest.approx(0.7050671932950208, abs=1e-12)
    assert stats.loss_align == pytest.approx(0.17645839612791317, abs=1e-12)
    assert stats.loss_bin == pytest.approx(0.24999057744698644, abs=1e-12)
    assert stats.loss_total == pytest.approx(0.9065246471676326, abs=1e-12)
    assert stats.n_correct == 8


def test_sgd_momentum_arithmetic():
    p = tz.param(np.array([1.0]))
    opt = SGD({"p": p}, lr=0.1, momentum=0.5)
    p.grad = np.array([1.0])
    opt.step()  # v = 1.0, p = 1 - 0.1
    np.testing.assert_allclose(p.values, [0.9])
    p.grad = np.array([1.0])
    opt.step()  # v = 1.5, p = 0.9 - 0.15
    np.testing.assert_allclose(p.values, [0.75])
