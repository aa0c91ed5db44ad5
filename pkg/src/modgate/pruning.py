"""Zero-shot structural surgery on trained backbones.

Scoring produces one number per prunable unit (query head, FFN channel,
expert-internal channel) in the model's canonical unit order.  A global
threshold at the requested pruning ratio drops the strictly-lower-scoring
units, subject to two repairs applied afterwards: every attention layer and
every (expert) FFN keeps at least its single best unit, and key/value
groups survive exactly when some retained head references them (heads map
to groups through the recorded assignment, so orphan groups are deleted and
a floor-restored head brings its group back).

``materialize`` slices the retained blocks out of the trained weights:
query projection columns and the matching output-projection rows per kept
head, K/V blocks per kept group, and symmetric (W1 column / W2 row) slices
for FFN and expert channels.  Retained values are copied bit-for-bit and no
gradient step runs anywhere, so the result is a strictly smaller model with
identical surviving parameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .attention import attention_flops_parts, top_u_count
from .backbone import AttnStructure, Backbone, ModelStructure
from .checkpoint import model_blob
from .gating import GateTable, normalize_saliency, saliency_from_taps
from .tensor import TapSet, Tensor
from .validation import check_mask

SCORERS = ("sentrygate", "random", "magnitude", "synflow")


class PlanError(ValueError):
    """A prune plan is inconsistent with the model it targets."""


@dataclass
class UnitScores:
    """Per-unit scores aligned with ``ModelStructure.unit_index()``."""

    scorer: str
    units: list[tuple[str, str, int]]
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(self.units) != self.scores.size:
            raise ValueError("one score per unit required")
        if not np.isfinite(self.scores).all():
            raise ValueError("unit scores must be finite")


@dataclass
class PrunePlan:
    """Retained index sets per layer; always satisfies the GQA invariants.

    ``floors_applied`` records the groups where the keep-at-least-one rule
    overrode the global threshold (a documented deviation: the threshold
    alone could empty a layer).
    """

    heads: dict[str, tuple[int, ...]]
    groups: dict[str, tuple[int, ...]]
    ffn: dict[str, tuple[int, ...]]
    experts: dict[str, tuple[tuple[int, ...], ...]]
    floors_applied: tuple[str, ...] = ()

    def validate(self, structure: ModelStructure) -> None:
        for key, a in structure.attn.items():
            kept_h = self.heads.get(key)
            kept_g = self.groups.get(key)
            if not kept_h or not kept_g:
                raise PlanError(f"layer {key}: empty head or group set")
            if any(h < 0 or h >= len(a.head_group) for h in kept_h):
                raise PlanError(f"layer {key}: head index out of range")
            referenced = {a.head_group[h] for h in kept_h}
            if referenced != set(kept_g):
                raise PlanError(f"layer {key}: retained groups must be exactly the "
                                f"referenced ones ({sorted(referenced)} vs {kept_g})")
        for key, width in structure.ffn.items():
            kept = self.ffn.get(key)
            if not kept or any(c < 0 or c >= width for c in kept):
                raise PlanError(f"ffn {key}: bad retained channel set")
        for key, widths in structure.experts.items():
            kept_per = self.experts.get(key)
            if kept_per is None or len(kept_per) != len(widths):
                raise PlanError(f"moe {key}: plan must cover every expert")
            for e, (kept, width) in enumerate(zip(kept_per, widths)):
                if not kept or any(c < 0 or c >= width for c in kept):
                    raise PlanError(f"moe {key} expert {e}: bad retained channels")

    def is_identity(self, structure: ModelStructure) -> bool:
        for key, a in structure.attn.items():
            if len(self.heads[key]) != len(a.head_group):
                return False
        return (all(len(self.ffn[k]) == w for k, w in structure.ffn.items())
                and all(len(kept) == w
                        for k, ws in structure.experts.items()
                        for kept, w in zip(self.experts[k], ws)))

    def to_json(self) -> str:
        return json.dumps({
            "heads": {k: list(v) for k, v in self.heads.items()},
            "groups": {k: list(v) for k, v in self.groups.items()},
            "ffn": {k: list(v) for k, v in self.ffn.items()},
            "experts": {k: [list(e) for e in v] for k, v in self.experts.items()},
            "floors_applied": list(self.floors_applied),
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PrunePlan":
        d = json.loads(text)
        return cls(
            heads={k: tuple(v) for k, v in d["heads"].items()},
            groups={k: tuple(v) for k, v in d["groups"].items()},
            ffn={k: tuple(v) for k, v in d["ffn"].items()},
            experts={k: tuple(tuple(e) for e in v) for k, v in d["experts"].items()},
            floors_applied=tuple(d.get("floors_applied", ())),
        )


# ---------------------------------------------------------------------------
# unit parameter slices (shared by magnitude / synflow scoring)


def _expert_paths(layer_key: str) -> tuple[str, int]:
    base, e = layer_key.rsplit(".e", 1)
    return base, int(e)


def unit_slice_arrays(arrays: dict[str, np.ndarray], structure: ModelStructure,
                      site: str, layer_key: str, unit: int) -> list[np.ndarray]:
    """The parameter slices owned by one unit (K/V blocks are group property
    and excluded; W_O rows accompany their head)."""
    if site == "head":
        dk = structure.attn[layer_key].head_dim
        wq = arrays[f"{layer_key}.attn.wq"]
        wo = arrays[f"{layer_key}.attn.wo"]
        return [wq[:, unit * dk:(unit + 1) * dk], wo[unit * dk:(unit + 1) * dk, :]]
    if site == "ffn":
        return [arrays[f"{layer_key}.ffn.w1"][:, unit],
                arrays[f"{layer_key}.ffn.b1"][unit:unit + 1],
                arrays[f"{layer_key}.ffn.w2"][unit, :]]
    if site == "expert":
        base, e = _expert_paths(layer_key)
        return [arrays[f"{base}.moe.e{e}.w1"][:, unit],
                arrays[f"{base}.moe.e{e}.b1"][unit:unit + 1],
                arrays[f"{base}.moe.e{e}.w2"][unit, :]]
    raise ValueError(f"unknown site {site!r}")


def _minmax_unit_scores(raw: np.ndarray) -> np.ndarray:
    lo, hi = float(raw.min()), float(raw.max())
    if hi - lo == 0.0:
        return np.full_like(raw, 0.5)
    return (raw - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# scorers


def score_sentrygate(gates: GateTable, platform_mask, structure: ModelStructure) -> UnitScores:
    """Gate outputs evaluated once on the platform mask; pure forward."""
    mask = check_mask(platform_mask, gates.n_modalities)
    table = gates.scores(mask)
    units = structure.unit_index()
    scores = np.array([table[f"{site}:{key}"][unit] for site, key, unit in units])
    return UnitScores("sentrygate", units, scores)


def _unit_modality(layer_key: str) -> int | None:
    """Modality owning a layer, or None for fusion layers."""
    if layer_key.startswith("mod"):
        return int(layer_key.split(".", 1)[0][3:])
    return None


def score_sentrygate_average(gates: GateTable, masks, structure: ModelStructure) -> UnitScores:
    """Mean gate score over a family of deployment masks (e.g. every mask
    with k modalities missing, when the platform only knows how many sensors
    are down).  A unit inside a modality encoder is averaged only over the
    masks in which that encoder executes: under uniform drops the execution
    probability is a shared constant, so the conditional mean preserves the
    global ranking while skipping gate queries for units that are bypassed
    (and carry no saliency evidence) under a mask."""
    units = structure.unit_index()
    acc = np.zeros(len(units))
    hits = np.zeros(len(units))
    executed_mod = np.array([-1 if _unit_modality(key) is None else _unit_modality(key)
                             for _, key, _ in units])
    for mask in masks:
        s = score_sentrygate(gates, mask, structure)
        mask = np.asarray(mask)
        w = np.where(executed_mod < 0, 1.0, mask[np.clip(executed_mod, 0, None)])
        acc += s.scores * w
        hits += w
    if (hits == 0).any():
        raise ValueError("every unit must execute under at least one mask")
    return UnitScores("sentrygate", units, acc / hits)


def score_random(structure: ModelStructure, seed: int) -> UnitScores:
    units = structure.unit_index()
    rng = np.random.default_rng([seed, 0x5C02E])
    return UnitScores("random", units, rng.uniform(0.0, 1.0, size=len(units)))


def score_magnitude(model: Backbone) -> UnitScores:
    """Mean absolute weight over each unit's parameter slice, min-max
    normalized globally so one threshold serves every scorer."""
    arrays = {k: t.values for k, t in model.params.items()}
    units = model.structure.unit_index()
    raw = np.empty(len(units))
    for i, (site, key, unit) in enumerate(units):
        slices = unit_slice_arrays(arrays, model.structure, site, key, unit)
        total = sum(np.abs(s).sum() for s in slices)
        count = sum(s.size for s in slices)
        raw[i] = total / count
    return UnitScores("magnitude", units, _minmax_unit_scores(raw))


def score_synflow(model: Backbone) -> UnitScores:
    """Data-free synaptic saliency: one forward/backward of an all-ones
    input through the absolute-valued model; unit score is the summed
    |theta * dR/dtheta| over the unit's slice, R = sum of logits."""
    cfg = model.cfg
    abs_params = {k: Tensor(np.abs(t.values), requires_grad=True)
                  for k, t in model.params.items()}
    abs_model = Backbone(cfg, model.structure, abs_params)
    ones = np.ones((1, cfg.n_modalities, cfg.seq_len, cfg.input_dim))
    logits = abs_model.forward(ones, np.ones(cfg.n_modalities, dtype=int))
    tz.backward(tz.tsum(logits))
    values = {k: t.values for k, t in abs_params.items()}
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.values))
             for k, t in abs_params.items()}
    units = model.structure.unit_index()
    raw = np.empty(len(units))
    for i, (site, key, unit) in enumerate(units):
        v_slices = unit_slice_arrays(values, model.structure, site, key, unit)
        g_slices = unit_slice_arrays(grads, model.structure, site, key, unit)
        raw[i] = sum(np.abs(v * g).sum() for v, g in zip(v_slices, g_slices))
    return UnitScores("synflow", units, _minmax_unit_scores(raw))


def score_taylor(model: Backbone, x: np.ndarray, y: np.ndarray, masks) -> UnitScores:
    """Gradient-based teacher: fresh first-order saliency |x * dL/dx|
    aggregated over the given data under each mask, normalized per group,
    averaged over the masks in which the unit's group executed."""
    structure = model.structure
    unit_counts = {f"{site}:{key}": n for site, key, n in structure.gate_group_specs()}
    units = structure.unit_index()
    sums = np.zeros(len(units))
    hits = np.zeros(len(units))
    group_offsets: dict[str, int] = {}
    off = 0
    for site, key, n in structure.gate_group_specs():
        group_offsets[f"{site}:{key}"] = off
        off += n
    for mask in masks:
        taps = TapSet()
        model.zero_grads()
        logits = model.forward(x, mask, taps=taps)
        tz.backward(tz.cross_entropy(logits, y))
        for target in saliency_from_taps(taps.collect_taps(), unit_counts):
            lo = group_offsets[target.layer_key]
            sums[lo:lo + target.values.size] += target.values
            hits[lo:lo + target.values.size] += 1.0
    model.zero_grads()
    raw = np.where(hits > 0, sums / np.maximum(hits, 1.0), 0.5)
    return UnitScores("taylor", units, raw)


# ---------------------------------------------------------------------------
# selection


def select_by_budget(scores: UnitScores, ratio: float,
                     structure: ModelStructure) -> PrunePlan:
    """Global-threshold selection at pruning ratio ``ratio``.

    The threshold is the (floor(ratio * n) + 1)-th smallest score; units
    strictly below it are dropped and ties at the threshold are retained,
    so with distinct scores the realized fraction is within one unit of the
    request.  Per-layer floors and the head-to-group consistency repair run
    afterwards.
    """
    if not (0.0 <= ratio < 1.0):
        raise ValueError(f"pruning ratio must be in [0, 1), got {ratio}")
    values = scores.scores
    n = values.size
    k = int(np.floor(ratio * n))
    threshold = np.sort(values, kind="stable")[k]
    keep_flags = values >= threshold

    by_group: dict[tuple[str, str], list[tuple[int, float, bool]]] = {}
    for flag, score, (site, key, unit) in zip(keep_flags, values, scores.units):
        by_group.setdefault((site, key), []).append((unit, float(score), bool(flag)))

    floored: list[str] = []

    def kept_with_floor(site: str, key: str, entries) -> tuple[int, ...]:
        kept = tuple(u for u, _, keep in entries if keep)
        if kept:
            return kept
        floored.append(f"{site}:{key}")
        best = max(entries, key=lambda e: (e[1], -e[0]))  # ties: lower index
        return (best[0],)

    heads, groups, ffn = {}, {}, {}
    experts: dict[str, dict[int, tuple[int, ...]]] = {}
    for (site, key), entries in by_group.items():
        kept = kept_with_floor(site, key, entries)
        if site == "head":
            heads[key] = kept
        elif site == "ffn":
            ffn[key] = kept
        else:
            base, e = _expert_paths(key)
            experts.setdefault(base, {})[e] = kept
    for key, a in structure.attn.items():
        groups[key] = tuple(sorted({a.head_group[h] for h in heads[key]}))
    plan = PrunePlan(
        heads=heads,
        groups=groups,
        ffn=ffn,
        experts={k: tuple(v[e] for e in sorted(v)) for k, v in experts.items()},
        floors_applied=tuple(sorted(floored)),
    )
    plan.validate(structure)
    return plan


def identity_plan(structure: ModelStructure) -> PrunePlan:
    return PrunePlan(
        heads={k: tuple(range(len(a.head_group))) for k, a in structure.attn.items()},
        groups={k: tuple(range(a.n_groups)) for k, a in structure.attn.items()},
        ffn={k: tuple(range(w)) for k, w in structure.ffn.items()},
        experts={k: tuple(tuple(range(w)) for w in ws)
                 for k, ws in structure.experts.items()},
    )


# ---------------------------------------------------------------------------
# surgery


def materialize(model: Backbone, plan: PrunePlan) -> Backbone:
    """Slice the retained blocks into a new compact model.  Surviving values
    are bitwise copies; routing topology and top-k stay untouched."""
    plan.validate(model.structure)
    src = model.structure
    new_attn: dict[str, AttnStructure] = {}
    params: dict[str, Tensor] = {}

    def keep(name: str, arr: np.ndarray) -> None:
        params[name] = Tensor(np.ascontiguousarray(arr), requires_grad=True)

    handled: set[str] = set()
    for key, a in src.attn.items():
        dk = a.head_dim
        kept_h = plan.heads[key]
        kept_g = plan.groups[key]
        remap = {g: i for i, g in enumerate(kept_g)}
        new_attn[key] = AttnStructure(
            head_group=tuple(remap[a.head_group[h]] for h in kept_h),
            n_groups=len(kept_g),
            head_dim=dk,
        )
        wq = model.params[f"{key}.attn.wq"].values
        wo = model.params[f"{key}.attn.wo"].values
        wk = model.params[f"{key}.attn.wk"].values
        wv = model.params[f"{key}.attn.wv"].values
        keep(f"{key}.attn.wq", np.concatenate(
            [wq[:, h * dk:(h + 1) * dk] for h in kept_h], axis=1))
        keep(f"{key}.attn.wo", np.concatenate(
            [wo[h * dk:(h + 1) * dk, :] for h in kept_h], axis=0))
        keep(f"{key}.attn.wk", np.concatenate(
            [wk[:, g * dk:(g + 1) * dk] for g in kept_g], axis=1))
        keep(f"{key}.attn.wv", np.concatenate(
            [wv[:, g * dk:(g + 1) * dk] for g in kept_g], axis=1))
        handled.update(f"{key}.attn.{nm}" for nm in ("wq", "wk", "wv", "wo"))
    new_ffn: dict[str, int] = {}
    for key in src.ffn:
        kept = np.asarray(plan.ffn[key], dtype=np.intp)
        new_ffn[key] = len(kept)
        keep(f"{key}.ffn.w1", model.params[f"{key}.ffn.w1"].values[:, kept])
        keep(f"{key}.ffn.b1", model.params[f"{key}.ffn.b1"].values[kept])
        keep(f"{key}.ffn.w2", model.params[f"{key}.ffn.w2"].values[kept, :])
        handled.update(f"{key}.ffn.{nm}" for nm in ("w1", "b1", "w2"))
    new_experts: dict[str, tuple[int, ...]] = {}
    for key, widths in src.experts.items():
        kept_widths = []
        for e in range(len(widths)):
            kept = np.asarray(plan.experts[key][e], dtype=np.intp)
            kept_widths.append(len(kept))
            keep(f"{key}.moe.e{e}.w1", model.params[f"{key}.moe.e{e}.w1"].values[:, kept])
            keep(f"{key}.moe.e{e}.b1", model.params[f"{key}.moe.e{e}.b1"].values[kept])
            keep(f"{key}.moe.e{e}.w2", model.params[f"{key}.moe.e{e}.w2"].values[kept, :])
            handled.update(f"{key}.moe.e{e}.{nm}" for nm in ("w1", "b1", "w2"))
        new_experts[key] = tuple(kept_widths)
    for name, t in model.params.items():
        if name not in handled:
            keep(name, t.values.copy())

    structure = ModelStructure(attn=new_attn, ffn=new_ffn, experts=new_experts)
    return Backbone(model.cfg, structure, params)


# ---------------------------------------------------------------------------
# accounting


def model_flops(model: Backbone, mask=None) -> float:
    """Forward multiply-add FLOPs (2 per MAC) of the linear maps: modality
    embeddings, attention (per the attention module's closed form), FFN and
    expert matrices (mean retained expert width x top-k per token), the MoE
    router, and the classifier head.  Normalizations, softmaxes, and GELUs
    are not multiply-adds and are excluded."""
    cfg = model.cfg
    s = model.structure
    mask = np.ones(cfg.n_modalities, dtype=int) if mask is None else check_mask(
        mask, cfg.n_modalities)
    d = cfg.model_dim
    total = 0.0

    def attn_cost(key: str, t: int) -> float:
        a = s.attn[key]
        u_eff = top_u_count(t, cfg.sparsity_const) if cfg.sparse_attention else t
        parts = attention_flops_parts(t, d, a.head_dim, len(a.head_group),
                                      a.n_groups, u_eff)
        return sum(parts.values())

    for j in range(cfg.n_modalities):
        if not mask[j]:
            continue
        total += 2.0 * cfg.seq_len * cfg.input_dim * d
        for i in range(cfg.enc_depth):
            key = f"mod{j}.enc{i}"
            total += attn_cost(key, cfg.seq_len)
            total += 2.0 * 2.0 * cfg.seq_len * d * s.ffn[key]
    tokens = cfg.n_modalities * cfg.seq_len
    for i in range(cfg.fusion_depth):
        key = f"fusion{i}"
        total += attn_cost(key, tokens)
        widths = s.experts[key]
        total += 2.0 * tokens * d * len(widths)  # router
        mean_width = sum(widths) / len(widths)
        total += 2.0 * 2.0 * tokens * min(cfg.top_k, len(widths)) * d * mean_width
    total += 2.0 * d * cfg.n_classes
    return total


def model_memory(model: Backbone) -> int:
    """Serialized checkpoint size in bytes (model only, no gates)."""
    return len(model_blob(model))


def prune(model: Backbone, scores: UnitScores, ratio: float) -> tuple[Backbone, PrunePlan]:
    plan = select_by_budget(scores, ratio, model.structure)
    return materialize(model, plan), plan
