"""Joint optimization of the backbone and its observer gates.

Every step runs two decoupled passes over one mini-batch under a sampled
modality mask: (1) the task forward with ``gates_apply`` permanently off,
backpropagating only the classification loss into backbone parameters while
harvesting activation taps; (2) after the warmup epochs, gate networks are
regressed onto the detached, EMA-smoothed saliency targets with the
alignment + binarization objective.  Backbone gradients never contain a
contribution from the gate losses and gate parameters never see the task
loss; both facts are assertable through the ``probe`` hook.

The per-modality drop probability ramps linearly from 0 to ``p_max``
between the end of warmup and the final epoch.  All randomness derives from
the run seed, so identical configs produce bit-identical checkpoints.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tz
from .backbone import Backbone, BackboneConfig
from .gating import GateTable, SaliencyEma, alignment_loss, binarization_loss, saliency_from_taps
from .tensor import TapSet, Tensor


class TrainingDiverged(RuntimeError):
    """Loss became non-finite or grew past the divergence threshold."""


@dataclass
class TrainConfig:
    epochs: int = 30
    warmup_epochs: int = 6
    p_max: float = 0.4
    alpha: float = 1.0
    lambda_bin: float = 0.1
    lr_backbone: float = 0.05
    lr_gates: float = 0.2
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.p_max < 1.0):
            raise ValueError(f"p_max must be in [0, 1), got {self.p_max}")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("epoch counts must be nonnegative")
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")

    def to_dict(self) -> dict:
        return asdict(self)


def curriculum_p(t: int, cfg: TrainConfig) -> float:
    """Per-modality drop probability at epoch ``t``: zero through warmup,
    then a linear ramp hitting ``p_max`` at the final epoch."""
    if t < cfg.warmup_epochs:
        return 0.0
    span = cfg.epochs - 1 - cfg.warmup_epochs
    if span <= 0:
        return cfg.p_max
    return cfg.p_max * min(1.0, (t - cfg.warmup_epochs) / span)


def curriculum_mask(t: int, cfg: TrainConfig, rng: np.random.Generator,
                    n_modalities: int) -> np.ndarray:
    """Sample each modality present with probability 1 - p_t; the all-zero
    mask is resampled (a window with no sensors has no defined label)."""
    p = curriculum_p(t, cfg)
    while True:
        mask = (rng.random(n_modalities) >= p).astype(np.int64)
        if mask.any():
            return mask


class SGD:
    """Momentum SGD over an ordered parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(p.values) for k, p in params.items()}

    def step(self) -> None:
        for key, p in self.params.items():
            if p.grad is None:
                continue
            v = self.velocity[key]
            v *= self.momentum
            v += p.grad
            p.values = p.values - self.lr * v

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass
class StepStats:
    loss_cls: float
    loss_align: float
    loss_bin: float
    loss_total: float
    n_correct: int
    batch_size: int
    missing_count: int
    gate_stepped: bool


@dataclass
class RunReport:
    """Structured record of one training run, serializable for the CLI."""

    backbone_config: dict
    train_config: dict
    seed: int
    gate_overhead_ratio: float
    epochs: list[dict] = field(default_factory=list)
    final_train_accuracy: float | None = None
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls(**json.loads(text))


def train_step(model: Backbone, gates: GateTable, xb: np.ndarray, yb: np.ndarray,
               mask: np.ndarray, epoch: int, cfg: TrainConfig,
               opt_backbone: SGD, opt_gates: SGD, ema: SaliencyEma,
               unit_counts: dict[str, int], initial_loss: float | None,
               probe=None) -> StepStats:
    """One optimization step; see the module docstring for the protocol."""
    taps = TapSet()
    opt_backbone.zero_grad()
    logits = model.forward(xb, mask, taps=taps)
    if not np.isfinite(logits.values).all():
        raise TrainingDiverged(f"non-finite logits at epoch {epoch}")
    loss_cls = tz.cross_entropy(logits, yb)
    loss_cls_val = float(loss_cls.values)
    if not np.isfinite(loss_cls_val):
        raise TrainingDiverged(
            f"non-finite classification loss at epoch {epoch} (mask={mask.tolist()})"
        )
    if initial_loss is not None and loss_cls_val > 1e3 * max(initial_loss, 1e-12):
        raise TrainingDiverged(
            f"loss {loss_cls_val:.3e} exceeded 1e3 x initial {initial_loss:.3e}"
        )
    tz.backward(loss_cls)

    missing = int(mask.size - mask.sum())
    after_warmup = epoch >= cfg.warmup_epochs and cfg.alpha > 0.0
    loss_align_val = 0.0
    loss_bin_val = 0.0
    grads_after_cls = None
    if probe is not None:
        grads_after_cls = {k: (None if p.grad is None else p.grad.copy())
                           for k, p in model.params.items()}

    gate_stepped = False
    if after_warmup:
        targets = saliency_from_taps(taps.collect_taps(), unit_counts)
        ema.update(targets, missing)
        opt_gates.zero_grad()
        aligns, bins = [], []
        for key, grp in gates.groups.items():
            target = ema.get(key, missing)
            if target is None:
                continue
            g = grp.forward(mask)
            aligns.append(alignment_loss(g, target))
            bins.append(binarization_loss(g))
        if aligns:
            n = float(len(aligns))
            la = tz.scale(_add_chain(aligns), 1.0 / n)
            lb = tz.scale(_add_chain(bins), 1.0 / n)
            loss_align_val = float(la.values)
            loss_bin_val = float(lb.values)
            gate_loss = tz.scale(tz.add(la, tz.scale(lb, cfg.lambda_bin)), cfg.alpha)
            tz.backward(gate_loss)
            gate_stepped = True

    if probe is not None:
        probe({
            "epoch": epoch,
            "mask": mask.copy(),
            "xb": xb,
            "logits": logits.values.copy(),
            "model": model,
            "gates": gates,
            "grads_after_cls": grads_after_cls,
            "grads_after_gate": {k: (None if p.grad is None else p.grad.copy())
                                 for k, p in model.params.items()},
            "gate_stepped": gate_stepped,
        })

    opt_backbone.step()
    if gate_stepped:
        opt_gates.step()

    total = loss_cls_val + cfg.alpha * (loss_align_val + cfg.lambda_bin * loss_bin_val)
    n_correct = int((np.argmax(logits.values, axis=-1) == yb).sum())
    return StepStats(loss_cls_val, loss_align_val, loss_bin_val, total,
                     n_correct, len(yb), missing, gate_stepped)


def _add_chain(parts: list[Tensor]) -> Tensor:
    out = parts[0]
    for p in parts[1:]:
        out = tz.add(out, p)
    return out


def train(x: np.ndarray, y: np.ndarray, bcfg: BackboneConfig, tcfg: TrainConfig,
          probe=None) -> tuple[Backbone, GateTable, RunReport]:
    """Full training run; deterministic in (data, configs, seed)."""
    if len(x) == 0:
        raise ValueError("empty dataset")
    model = Backbone.create(bcfg, seed=tcfg.seed)
    gates = GateTable.create(model.structure.gate_group_specs(),
                             bcfg.n_modalities, seed=tcfg.seed)
    unit_counts = {f"{site}:{key}": n
                   for site, key, n in model.structure.gate_group_specs()}
    report = RunReport(
        backbone_config=bcfg.to_dict(),
        train_config=tcfg.to_dict(),
        seed=tcfg.seed,
        gate_overhead_ratio=gates.parameter_count() / model.parameter_count(),
        notes=["saliency targets: per-missing-count EMA (decay 0.9), reset each epoch"],
    )
    if tcfg.epochs == 0:
        return model, gates, report

    opt_backbone = SGD(model.params, tcfg.lr_backbone, tcfg.momentum)
    opt_gates = SGD(gates.parameters(), tcfg.lr_gates, tcfg.momentum)
    ema = SaliencyEma()
    rng_batch = np.random.default_rng([tcfg.seed, 0xBA7C])
    rng_mask = np.random.default_rng([tcfg.seed, 0x3A5C])
    n = len(x)
    initial_loss = None

    for epoch in range(tcfg.epochs):
        ema.reset()
        order = rng_batch.permutation(n)
        sums = {"loss_cls": 0.0, "loss_align": 0.0, "loss_bin": 0.0, "loss_total": 0.0}
        correct = 0
        regime: dict[int, list[int]] = {}
        n_steps = 0
        for lo in range(0, n, tcfg.batch_size):
            sel = order[lo:lo + tcfg.batch_size]
            mask = curriculum_mask(epoch, tcfg, rng_mask, bcfg.n_modalities)
            stats = train_step(model, gates, x[sel], y[sel], mask, epoch, tcfg,
                               opt_backbone, opt_gates, ema, unit_counts,
                               initial_loss, probe)
            if initial_loss is None:
                initial_loss = stats.loss_cls
            for key in sums:
                sums[key] += getattr(stats, key)
            correct += stats.n_correct
            hit = regime.setdefault(stats.missing_count, [0, 0])
            hit[0] += stats.n_correct
            hit[1] += stats.batch_size
            n_steps += 1
        report.epochs.append({
            "epoch": epoch,
            "p_t": curriculum_p(epoch, tcfg),
            "loss_cls": sums["loss_cls"] / n_steps,
            "loss_align": sums["loss_align"] / n_steps,
            "loss_bin": sums["loss_bin"] / n_steps,
            "loss_total": sums["loss_total"] / n_steps,
            "train_accuracy": correct / n,
            "accuracy_by_missing": {str(k): v[0] / v[1] for k, v in sorted(regime.items())},
        })
    report.final_train_accuracy = report.epochs[-1]["train_accuracy"]
    return model, gates, report
