"""Command-line interface.

Subcommands: ``gen``, ``train``, ``prune``, ``eval``, ``sweep``, ``flops``,
``export-attn``.  A single JSON config file (sections ``data``, ``model``,
``train``, ``sweep``) drives every run; individual flags override it.  Each
command writes its outputs plus a config echo under ``--out`` so any run is
reproducible from the directory contents alone.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig
from .checkpoint import digest, load_model, model_blob, save_model
from .data import Dataset, SyntheticSpec, generate
from .harness import (
    SweepGrid,
    desk_backbone_config,
    evaluate,
    export_attention,
    run_cell,
    sweep,
    sweep_summary,
)
from .pruning import model_flops, model_memory, materialize, select_by_budget
from .training import TrainConfig, train
from .validation import check_mask


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def build_spec(cfg: dict, seed: int | None) -> SyntheticSpec:
    spec = SyntheticSpec(**cfg.get("data", {}))
    if seed is not None:
        spec = replace(spec, seed=seed)
    return spec


def build_backbone_config(cfg: dict, spec: SyntheticSpec | None = None) -> BackboneConfig:
    model_cfg = dict(cfg.get("model", {}))
    if spec is not None:
        model_cfg.setdefault("n_modalities", spec.n_modalities)
        model_cfg.setdefault("seq_len", spec.seq_len)
        model_cfg.setdefault("input_dim", spec.input_dim)
        model_cfg.setdefault("n_classes", spec.n_classes)
    return desk_backbone_config(model_cfg)


def build_train_config(cfg: dict, seed: int | None) -> TrainConfig:
    tcfg = TrainConfig(**cfg.get("train", {}))
    if seed is not None:
        tcfg = replace(tcfg, seed=seed)
    return tcfg


def parse_mask(text: str) -> np.ndarray:
    bits = text.split(",") if "," in text else list(text)
    return np.array([int(b) for b in bits], dtype=np.int64)


def _echo_config(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def cmd_gen(args) -> int:
    cfg = load_config(args.config)
    spec = build_spec(cfg, args.seed)
    dataset = generate(spec)
    out = Path(args.out)
    dataset.save(out)
    _echo_config(out, {"command": "gen", "data": spec.to_dict(), "seed": spec.seed})
    print(f"wrote {len(dataset)} samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    dataset = Dataset.load(args.data)
    bcfg = build_backbone_config(cfg, dataset.spec)
    tcfg = build_train_config(cfg, args.seed)
    model, gates, report = train(dataset.x, dataset.y, bcfg, tcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "checkpoint.ckpt", model, gates)
    (out / "report.json").write_text(report.to_json())
    _echo_config(out, {"command": "train", "model": bcfg.to_dict(),
                       "train": tcfg.to_dict(), "data_dir": str(args.data),
                       "seed": tcfg.seed})
    print(f"trained {tcfg.epochs} epochs; final train accuracy "
          f"{report.final_train_accuracy}")
    print(f"checkpoint: {out / 'checkpoint.ckpt'}")
    return 0


def cmd_prune(args) -> int:
    model, gates, meta = load_model(args.checkpoint)
    source_digest = digest(Path(args.checkpoint).read_bytes())
    from .harness import cell_scores

    if args.mask is not None:
        platform_mask = check_mask(parse_mask(args.mask), model.cfg.n_modalities)
        if args.scorer == "sentrygate":
            from .pruning import score_sentrygate

            scores = score_sentrygate(gates, platform_mask, model.structure)
        else:
            scores = cell_scores(model, gates, args.scorer, 0, args.seed)
        mask_echo = platform_mask.tolist()
    else:
        scores = cell_scores(model, gates, args.scorer, args.missing, args.seed)
        mask_echo = f"missing={args.missing}"
    plan = select_by_budget(scores, args.ratio, model.structure)
    pruned = materialize(model, plan)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    provenance = {
        "provenance": {
            "source_sha256": source_digest,
            "scorer": args.scorer,
            "ratio": args.ratio,
            "platform_mask": mask_echo,
            "floors_applied": list(plan.floors_applied),
        }
    }
    if gates is not None and gates.score_cache:
        # every gate query made for this deployment, frozen with the artifact
        provenance["provenance"]["gate_score_table"] = {
            "".join(str(b) for b in mask): {k: v.tolist() for k, v in scores.items()}
            for mask, scores in gates.score_cache.items()
        }
    save_model(out / "pruned.ckpt", pruned, extra_meta=provenance)
    (out / "plan.json").write_text(plan.to_json())
    _echo_config(out, {"command": "prune", "ratio": args.ratio,
                       "scorer": args.scorer, "mask": mask_echo,
                       "seed": args.seed, "source": str(args.checkpoint)})
    print(f"flops {model_flops(pruned):.0f} (was {model_flops(model):.0f}); "
          f"memory {model_memory(pruned)} bytes (was {model_memory(model)})")
    return 0


def cmd_eval(args) -> int:
    model, _, _ = load_model(args.checkpoint)
    dataset = Dataset.load(args.data)
    seeds = [int(s) for s in args.seeds.split(",")]
    result = evaluate(model, dataset, args.missing, seeds=seeds)
    print(f"accuracy {result.mean:.6f} +/- {result.std:.6f} "
          f"(missing={args.missing}, seeds={seeds})")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(json.dumps({
            "accuracy_mean": result.mean, "accuracy_std": result.std,
            "per_seed": result.per_seed, "missing": args.missing,
            "seeds": seeds}, indent=2, sort_keys=True))
        _echo_config(out, {"command": "eval", "missing": args.missing,
                           "seeds": seeds, "checkpoint": str(args.checkpoint)})
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    model, gates, _ = load_model(args.checkpoint)
    dataset = Dataset.load(args.data)
    grid = SweepGrid.from_dict(cfg["sweep"]) if "sweep" in cfg else SweepGrid()
    rows, csv_text = sweep(model, gates, dataset, grid, base_seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(csv_text)
    (out / "summary.json").write_text(json.dumps(sweep_summary(rows), indent=2,
                                                 sort_keys=True))
    _echo_config(out, {"command": "sweep", "grid": grid.to_dict(),
                       "seed": args.seed, "checkpoint": str(args.checkpoint)})
    print(f"wrote {len(rows)} rows to {out / 'report.csv'}")
    return 0


def cmd_flops(args) -> int:
    cfg = load_config(args.config)
    spec = SyntheticSpec(**cfg["data"]) if "data" in cfg else None
    bcfg = build_backbone_config(cfg, spec)
    from .backbone import Backbone

    dense = Backbone.create(replace(bcfg, sparse_attention=False), seed=0)
    sparse = Backbone.create(replace(bcfg, sparse_attention=True), seed=0)
    f_dense, f_sparse = model_flops(dense), model_flops(sparse)
    print(f"dense attention:  {f_dense:.0f} FLOPs")
    print(f"sparse attention: {f_sparse:.0f} FLOPs")
    print(f"sparse/dense ratio: {f_sparse / f_dense:.4f}")
    return 0


def cmd_export_attn(args) -> int:
    model, _, _ = load_model(args.checkpoint)
    dataset = Dataset.load(args.data)
    mask = (parse_mask(args.mask) if args.mask
            else np.ones(model.cfg.n_modalities, dtype=np.int64))
    x = dataset.x[args.sample:args.sample + 1]
    n = export_attention(model, x, mask, args.out, sample_index=0)
    print(f"wrote {n} attention matrices to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modgate",
        description="Modality-aware zero-shot pruning and sparse grouped-query "
                    "attention for multimodal time-series transformers.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train backbone and gates")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("prune", help="zero-shot structural pruning")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--scorer", default="sentrygate",
                   choices=["sentrygate", "random", "magnitude", "synflow"])
    p.add_argument("--mask", default=None,
                   help="platform mask, e.g. 110111 or 1,1,0,1,1,1")
    p.add_argument("--missing", type=int, default=0,
                   help="platform missing count when --mask is not given")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_prune)

    p = sub.add_parser("eval", help="evaluate under modality dropout")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--missing", type=int, default=0)
    p.add_argument("--seeds", default="0")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="scorer x ratio x missingness grid")
    p.add_argument("--config", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("flops", help="dense vs sparse attention FLOP counts")
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("export-attn", help="dump raw attention matrices")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--mask", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export_attn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
