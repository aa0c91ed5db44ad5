"""Evaluation under modality dropout, sweep experiments, attention export.

Every cell of a sweep derives its RNG stream from the base seed and the
cell coordinates (CRC of the canonical coordinate string), so cells are
independent and any one of them can be recomputed in isolation.  Reports
are written with fixed float formatting to keep bytes reproducible.
"""

from __future__ import annotations

import itertools
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import Backbone, BackboneConfig
from .checkpoint import model_blob
from .data import Dataset
from .gating import GateTable
from .pruning import (
    PrunePlan,
    UnitScores,
    identity_plan,
    materialize,
    model_flops,
    model_memory,
    score_magnitude,
    score_random,
    score_sentrygate,
    score_sentrygate_average,
    score_synflow,
    select_by_budget,
)

ATTN_MAGIC = b"MGAT"
_EVAL_TAG = 0xE7A1


def derive_seed(base_seed: int, *coords) -> int:
    """Deterministic per-cell seed: CRC32 of the coordinate string."""
    text = ":".join([str(base_seed)] + [str(c) for c in coords])
    return zlib.crc32(text.encode("utf-8"))


def missing_masks(n_modalities: int, missing_count: int) -> list[np.ndarray]:
    """Every availability mask with exactly ``missing_count`` zeros."""
    masks = []
    for combo in itertools.combinations(range(n_modalities), missing_count):
        mask = np.ones(n_modalities, dtype=np.int64)
        mask[list(combo)] = 0
        masks.append(mask)
    return masks


@dataclass
class EvalResult:
    mean: float
    std: float
    per_seed: list[float]


def evaluate(model: Backbone, dataset: Dataset, missing_count: int,
             seeds=(0,)) -> EvalResult:
    """Accuracy under k randomly dropped modalities per sample (resampled
    per sample, seeded); mean and std across the given seeds."""
    m = model.cfg.n_modalities
    if not (0 <= missing_count < m):
        raise ValueError(f"missing_count must be in [0, {m}), got {missing_count}")
    x, y = dataset.x, dataset.y
    accs = []
    for seed in seeds:
        if missing_count == 0:
            pred = model.predict(x, np.ones(m, dtype=np.int64))
            accs.append(float((pred == y).mean()))
            continue
        rng = np.random.default_rng([_EVAL_TAG, seed])
        by_mask: dict[tuple[int, ...], list[int]] = {}
        for i in range(len(x)):
            drop = rng.choice(m, size=missing_count, replace=False)
            mask = np.ones(m, dtype=np.int64)
            mask[drop] = 0
            by_mask.setdefault(tuple(mask), []).append(i)
        correct = 0
        for mask_key, idx in sorted(by_mask.items()):
            pred = model.predict(x[idx], np.array(mask_key))
            correct += int((pred == y[idx]).sum())
        accs.append(correct / len(x))
    arr = np.asarray(accs)
    return EvalResult(float(arr.mean()), float(arr.std()), accs)


# ---------------------------------------------------------------------------
# sweep


@dataclass
class SweepGrid:
    """Comparison grid mirroring the reported pruning/missingness tables."""

    ratios: tuple[float, ...] = (0.06, 0.12, 0.17, 0.23)
    missing: tuple[int, ...] = (0, 1, 2, 4)
    scorers: tuple[str, ...] = ("sentrygate", "random", "magnitude", "synflow")
    seeds: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        if not (self.ratios and self.missing and self.scorers and self.seeds):
            raise ValueError("every sweep axis must be nonempty")

    def to_dict(self) -> dict:
        return {"ratios": list(self.ratios), "missing": list(self.missing),
                "scorers": list(self.scorers), "seeds": list(self.seeds)}

    @classmethod
    def from_dict(cls, d: dict) -> "SweepGrid":
        return cls(ratios=tuple(d["ratios"]), missing=tuple(d["missing"]),
                   scorers=tuple(d["scorers"]), seeds=tuple(d["seeds"]))


CSV_HEADER = "scorer,ratio,missing,seed,accuracy,flops,memory_bytes"


def cell_scores(model: Backbone, gates: GateTable | None, scorer: str,
                missing_count: int, base_seed: int) -> UnitScores:
    """Unit scores for one sweep cell.  Gate scores are averaged over every
    mask with the cell's missing count (the platform knows how many sensors
    are down, not which); the static baselines ignore the mask."""
    if scorer == "sentrygate":
        if gates is None:
            raise ValueError("sentrygate scoring requires a trained gate table")
        masks = missing_masks(model.cfg.n_modalities, missing_count)
        if len(masks) == 1:
            return score_sentrygate(gates, masks[0], model.structure)
        return score_sentrygate_average(gates, masks, model.structure)
    if scorer == "random":
        return score_random(model.structure, derive_seed(base_seed, "score", "random",
                                                         missing_count))
    if scorer == "magnitude":
        return score_magnitude(model)
    if scorer == "synflow":
        return score_synflow(model)
    raise ValueError(f"unknown scorer {scorer!r}")


def run_cell(model: Backbone, gates: GateTable | None, dataset: Dataset,
             scorer: str, ratio: float, missing_count: int, seed: int,
             base_seed: int) -> dict:
    """One (scorer, ratio, missing, seed) cell: prune, account, evaluate."""
    scores = cell_scores(model, gates, scorer, missing_count, base_seed)
    if ratio == 0.0:
        plan = identity_plan(model.structure)
    else:
        plan = select_by_budget(scores, ratio, model.structure)
    pruned = materialize(model, plan)
    result = evaluate(pruned, dataset, missing_count,
                      seeds=[derive_seed(base_seed, "eval", scorer, ratio,
                                         missing_count, seed)])
    return {
        "scorer": scorer,
        "ratio": ratio,
        "missing": missing_count,
        "seed": seed,
        "accuracy": result.mean,
        "flops": model_flops(pruned),
        "memory_bytes": model_memory(pruned),
    }


def format_row(row: dict) -> str:
    return (f"{row['scorer']},{row['ratio']:.4f},{row['missing']},{row['seed']},"
            f"{row['accuracy']:.6f},{row['flops']:.0f},{row['memory_bytes']}")


def sweep(model: Backbone, gates: GateTable | None, dataset: Dataset,
          grid: SweepGrid, base_seed: int = 0) -> tuple[list[dict], str]:
    """Full grid; returns rows plus the deterministic CSV text."""
    rows = []
    for scorer in grid.scorers:
        for ratio in grid.ratios:
            for missing_count in grid.missing:
                for seed in grid.seeds:
                    rows.append(run_cell(model, gates, dataset, scorer, ratio,
                                         missing_count, seed, base_seed))
    csv_text = "\n".join([CSV_HEADER] + [format_row(r) for r in rows]) + "\n"
    return rows, csv_text


def sweep_summary(rows: list[dict]) -> dict:
    """Mean accuracy per (scorer, ratio, missing) cell plus the per-cell
    best scorer, mirroring the local-best markings of the paper tables."""
    cells: dict[tuple[float, int], dict[str, list[float]]] = {}
    for r in rows:
        cells.setdefault((r["ratio"], r["missing"]), {}).setdefault(
            r["scorer"], []).append(r["accuracy"])
    summary = {"cells": [], "scorer_means": {}}
    totals: dict[str, list[float]] = {}
    for (ratio, missing_count), per_scorer in sorted(cells.items()):
        means = {s: float(np.mean(a)) for s, a in per_scorer.items()}
        best = max(means, key=lambda s: (means[s], s))
        summary["cells"].append({
            "ratio": ratio,
            "missing": missing_count,
            "mean_accuracy": means,
            "best_scorer": best,
        })
        for s, m in means.items():
            totals.setdefault(s, []).append(m)
    summary["scorer_means"] = {s: float(np.mean(v)) for s, v in sorted(totals.items())}
    return summary


# ---------------------------------------------------------------------------
# attention export


class AttentionExporter:
    """Collects effective row-stochastic attention matrices during a forward
    pass.  Rows not selected by the sparse path receive the uniform 1/T row
    (the mean-of-values context fill is exactly uniform attention)."""

    def __init__(self, sample_index: int = 0):
        self.sample_index = sample_index
        self.records: list[tuple[str, int, np.ndarray]] = []

    def __call__(self, layer_key: str, head: int, attn: np.ndarray,
                 idx: np.ndarray | None, t: int) -> None:
        a = attn[self.sample_index] if attn.ndim == 3 else attn
        if idx is None:
            full = a
        else:
            rows = idx[self.sample_index] if idx.ndim == 2 else idx
            full = np.full((t, t), 1.0 / t)
            full[rows] = a
        self.records.append((layer_key, head, full.astype(np.float64)))

    def write(self, path) -> None:
        layers = sorted({lk for lk, _, _ in self.records})
        layer_ids = {lk: i for i, lk in enumerate(layers)}
        with open(path, "wb") as fh:
            fh.write(ATTN_MAGIC)
            fh.write(struct.pack("<I", 1))
            fh.write(struct.pack("<I", len(self.records)))
            for layer_key, head, full in self.records:
                t = full.shape[0]
                fh.write(struct.pack("<III", layer_ids[layer_key], head, t))
                fh.write(full.astype("<f8").tobytes())
        Path(str(path) + ".layers.json").write_text(
            json.dumps({str(i): lk for lk, i in layer_ids.items()}, indent=2,
                       sort_keys=True))


def read_attention_export(path) -> list[tuple[int, int, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(4) != ATTN_MAGIC:
            raise ValueError("not an attention export file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != 1:
            raise ValueError(f"unsupported attention export version {version}")
        (count,) = struct.unpack("<I", fh.read(4))
        records = []
        for _ in range(count):
            layer_id, head, t = struct.unpack("<III", fh.read(12))
            mat = np.frombuffer(fh.read(8 * t * t), dtype="<f8").reshape(t, t).copy()
            records.append((layer_id, head, mat))
    return records


def export_attention(model: Backbone, x: np.ndarray, mask, path,
                     sample_index: int = 0) -> int:
    """Run one forward pass and dump every (layer, head) T x T matrix."""
    exporter = AttentionExporter(sample_index)
    model.forward(x, mask, attn_sink=exporter)
    exporter.write(path)
    return len(exporter.records)


# ---------------------------------------------------------------------------
# experiment presets


def desk_backbone_config(spec_dict: dict | None = None) -> BackboneConfig:
    """Laptop-scale defaults used by the CLI config template and the
    directional experiments."""
    d = dict(n_modalities=6, seq_len=16, input_dim=8, model_dim=64, n_classes=4,
             enc_depth=1, fusion_depth=1, ffn_dim=16, n_experts=2, top_k=1,
             n_heads=4, n_kv_groups=2, sparsity_const=5, sparse_attention=True)
    if spec_dict:
        d.update(spec_dict)
    return BackboneConfig(**d)
