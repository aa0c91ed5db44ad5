"""Modality-conditioned importance gates and their saliency supervision.

Every prunable unit (attention head, FFN channel, expert-internal channel)
owns a tiny predictor: a scalar base importance plus a two-layer MLP over
the modality-availability mask, squashed through a sigmoid:

    g = sigmoid(zeta + gamma * mlp(mask))

``gamma`` is one learnable scalar per gate group (the units of one site in
one transformer layer).  Per-unit MLPs are stored stacked so a whole group
evaluates in three batched matmuls; no parameters are shared across units.

Gates run strictly as observers: they read the modality mask, never the
backbone activations, so attaching them cannot change the task forward
pass.  Their training signal is the first-order saliency |x * dL/dx| of the
tapped activations, aggregated over batch and time, min-max normalized
within each group, and smoothed with a per-missing-count EMA.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .tensor import TapRecord, Tensor
from .validation import check_mask

SITE_HEAD = "head"
SITE_FFN = "ffn"
SITE_EXPERT = "expert"

_EMA_DECAY = 0.9


@dataclass
class GateGroup:
    """Stacked per-unit gate networks for one (site, layer) group."""

    site: str
    layer_key: str
    n_units: int
    n_modalities: int
    phi_w1: Tensor  # (n_units, M, hidden)
    phi_b1: Tensor  # (n_units, 1, hidden)
    phi_w2: Tensor  # (n_units, hidden, 1)
    phi_b2: Tensor  # (n_units, 1, 1)
    zeta: Tensor    # (n_units,)
    gamma: Tensor   # scalar, shared across the group's units

    @classmethod
    def create(cls, site: str, layer_key: str, n_units: int, n_modalities: int,
               rng: np.random.Generator) -> "GateGroup":
        hidden = 2 * n_modalities
        s = 0.1 / np.sqrt(n_modalities)
        return cls(
            site=site,
            layer_key=layer_key,
            n_units=n_units,
            n_modalities=n_modalities,
            phi_w1=tz.param(rng.normal(0.0, s, size=(n_units, n_modalities, hidden))),
            phi_b1=tz.param(np.zeros((n_units, 1, hidden))),
            phi_w2=tz.param(rng.normal(0.0, s, size=(n_units, hidden, 1))),
            phi_b2=tz.param(np.zeros((n_units, 1, 1))),
            zeta=tz.param(np.zeros(n_units)),
            gamma=tz.param(np.asarray(1.0)),
        )

    def parameters(self) -> dict[str, Tensor]:
        return {
            "phi_w1": self.phi_w1,
            "phi_b1": self.phi_b1,
            "phi_w2": self.phi_w2,
            "phi_b2": self.phi_b2,
            "zeta": self.zeta,
            "gamma": self.gamma,
        }

    def forward(self, mask: np.ndarray) -> Tensor:
        """Per-unit importance scores g(mask) in (0, 1); length n_units."""
        mask = check_mask(mask, self.n_modalities)
        m = tz.Tensor(np.tile(mask.astype(np.float64)[None, None, :], (self.n_units, 1, 1)))
        h = tz.tanh(tz.add(tz.matmul(m, self.phi_w1), self.phi_b1))
        f = tz.reshape(tz.add(tz.matmul(h, self.phi_w2), self.phi_b2), (self.n_units,))
        return tz.sigmoid(tz.add(self.zeta, tz.mul(self.gamma, f)))


@dataclass
class SaliencyTarget:
    """Per-unit normalized saliency for one gate group."""

    layer_key: str
    values: np.ndarray  # in [0, 1]


class GateTable:
    """All gate groups of a model, keyed "site:layer_key", in model order."""

    def __init__(self, groups: dict[str, GateGroup]):
        self.groups = groups
        self.score_cache: dict[tuple[int, ...], dict[str, np.ndarray]] = {}

    @classmethod
    def create(cls, group_specs: list[tuple[str, str, int]], n_modalities: int,
               seed: int) -> "GateTable":
        rng = np.random.default_rng([seed, 0x6A7E])
        groups = {}
        for site, layer_key, n_units in group_specs:
            key = f"{site}:{layer_key}"
            groups[key] = GateGroup.create(site, layer_key, n_units, n_modalities, rng)
        return cls(groups)

    @property
    def n_modalities(self) -> int:
        return next(iter(self.groups.values())).n_modalities

    def forward(self, mask: np.ndarray) -> dict[str, Tensor]:
        return {key: grp.forward(mask) for key, grp in self.groups.items()}

    def scores(self, mask: np.ndarray) -> dict[str, np.ndarray]:
        """Pure-forward gate outputs for a deployment mask; cached."""
        key = tuple(int(v) for v in check_mask(mask, self.n_modalities))
        if key not in self.score_cache:
            self.score_cache[key] = {
                k: grp.forward(np.array(key)).values.copy()
                for k, grp in self.groups.items()
            }
        return self.score_cache[key]

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for key, grp in self.groups.items():
            for name, p in grp.parameters().items():
                out[f"gates.{key}.{name}"] = p
        return out

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters().values())


# ---------------------------------------------------------------------------
# saliency targets


def normalize_saliency(raw: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; an all-equal group maps to uniform 0.5."""
    lo, hi = float(raw.min()), float(raw.max())
    if hi - lo == 0.0:
        return np.full_like(raw, 0.5)
    return (raw - lo) / (hi - lo)


def saliency_from_taps(taps: list[TapRecord], unit_counts: dict[str, int]) -> list[SaliencyTarget]:
    """Taylor saliency per unit from tapped activations.

    ``unit_counts`` maps gate-group key to its unit count; head taps carry
    the concatenated per-head blocks along the last axis, channel taps carry
    one column per unit.  Raw saliency is mean |x * dL/dx| over batch, time,
    and intra-unit dims, then min-max normalized within the group.
    """
    targets = []
    for rec in taps:
        if rec.tap_id not in unit_counts:
            continue
        n_units = unit_counts[rec.tap_id]
        prod = np.abs(rec.activation * rec.activation_grad)
        if rec.tap_id.startswith(SITE_HEAD):
            width = prod.shape[-1] // n_units
            raw = np.array([
                prod[..., u * width:(u + 1) * width].mean() for u in range(n_units)
            ])
        else:
            if prod.shape[-1] != n_units:
                raise tz.ShapeError(
                    f"tap {rec.tap_id}: {prod.shape[-1]} channels vs {n_units} units"
                )
            raw = prod.reshape(-1, n_units).mean(axis=0)
        targets.append(SaliencyTarget(rec.tap_id, normalize_saliency(raw)))
    return targets


class SaliencyEma:
    """Per-(group, missing-count) running targets, reset each epoch."""

    def __init__(self, decay: float = _EMA_DECAY):
        self.decay = decay
        self._store: dict[tuple[str, int], np.ndarray] = {}

    def reset(self) -> None:
        self._store.clear()

    def update(self, targets: list[SaliencyTarget], missing_count: int) -> None:
        for t in targets:
            key = (t.layer_key, missing_count)
            prev = self._store.get(key)
            if prev is None:
                self._store[key] = t.values.copy()
            else:
                self._store[key] = self.decay * prev + (1.0 - self.decay) * t.values

    def get(self, group_key: str, missing_count: int) -> np.ndarray | None:
        return self._store.get((group_key, missing_count))


# ---------------------------------------------------------------------------
# gate losses


def alignment_loss(g: Tensor, target) -> Tensor:
    """Mean squared gap between gate outputs and (detached) saliency targets."""
    t = target if isinstance(target, Tensor) else tz.Tensor(np.asarray(target, dtype=np.float64))
    if t.requires_grad:
        t = t.detach()
    return tz.mse(g, t)


def binarization_loss(g: Tensor) -> Tensor:
    """mean(g * (1 - g)): zero exactly when every gate is binary."""
    one = tz.Tensor(np.ones_like(g.values))
    return tz.mean(tz.mul(g, tz.sub(one, g)))
