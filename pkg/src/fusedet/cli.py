"""Command-line surface: data generation, staged training, ablations,
attention profiling, cost accounting, the substitution control, gradient
verification, and evaluation.

Every subcommand takes ``--config FILE`` (flat ``key = value`` text over the
``ExperimentConfig`` fields), ``--seed N``, and ``--out DIR``.  Checkpoints
are directories in the parameter-file format; reports are JSON with the
resolved config embedded, plus JSON-lines for per-step / per-scene records
and CSV for tables.

Checkpoint layout under ``--out`` (the default is ``./runs``):

    detector/       grounding detector after synthetic-task pretraining
    mllm-stage1/    LM + projector after captioning pretraining
    mllm-stage2/    projector re-alignment (the fusion baseline)
    adapter/        stage-3 fusion adapter
    substitution/   linear substitution control
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, training as tr
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_file, save_file
from .scenes import SPLITS
from .tensor import NumericsError, UsageError
from .verify import GRADCHECK_TOL, max_error, run_gradcheck


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _save_stage_report(out: Path, name: str, report: dict) -> None:
    tr.save_report(report, out / f"report-{name}.json")
    _write_jsonl(out / f"losses-{name}.jsonl",
                 ({"step": i + 1, "loss": loss}
                  for i, loss in enumerate(report["losses"])))


def _metrics_records(metrics: dict):
    for split, m in metrics.items():
        rec = {k: v for k, v in m.items() if k != "per_scene"}
        rec["split"] = split
        yield rec


def _load_into(module, out: Path, name: str) -> None:
    path = out / name
    if not (path / "manifest.txt").exists():
        raise UsageError(
            f"missing prerequisite checkpoint {path} -- run the earlier "
            f"stage first")
    tr.restore(module, load_checkpoint(path))


def _backbones(cfg: ExperimentConfig, out: Path):
    """Frozen models as left by `train --stage 2` (+ detector pretraining)."""
    mllm, det = tr.build_models(cfg)
    _load_into(det, out, "detector")
    _load_into(mllm, out, "mllm-stage2")
    return mllm, det


def _val_splits(cfg: ExperimentConfig) -> dict:
    return {"val-category": tr.load_split(cfg, "val-category"),
            "val-spatial": tr.load_split(cfg, "val-spatial")}


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: ExperimentConfig, out: Path, args) -> int:
    records = []
    for split in SPLITS:
        for i, s in enumerate(tr.load_split(cfg, split)):
            records.append({
                "split": split, "index": i,
                "objects": [{"shape": o.shape, "color": o.color,
                             "box": [round(float(v), 6) for v in o.box]}
                            for o in s.objects],
                "caption": s.caption.tolist(),
                "query": {"ids": s.query.ids.tolist(),
                          "target_box": s.query.target_box.tolist(),
                          "kind": s.query.kind},
                "n_candidates": len(s.candidates),
            })
    _write_jsonl(out / "scenes.jsonl", records)
    print(f"wrote {len(records)} scenes to {out / 'scenes.jsonl'}")
    return 0


def cmd_train(cfg: ExperimentConfig, out: Path, args) -> int:
    if args.stage == 1:
        mllm, det = tr.build_models(cfg)
        pretrain = tr.load_split(cfg, "pretrain")
        rep = tr.pretrain_detector(cfg, mllm, det, pretrain)
        save_checkpoint(out / "detector", tr.snapshot(det))
        _save_stage_report(out, "pretrain-detector", rep)
        rep = tr.train_stage1(cfg, mllm, pretrain)
        save_checkpoint(out / "mllm-stage1", tr.snapshot(mllm))
        _save_stage_report(out, "stage1", rep)
        print(f"stage 1 done: final captioning loss {rep['final_loss']:.4f}")
        return 0

    if args.stage == 2:
        mllm, _ = tr.build_models(cfg)
        _load_into(mllm, out, "mllm-stage1")
        rep = tr.train_stage2(cfg, mllm, tr.load_split(cfg, "pretrain"))
        save_checkpoint(out / "mllm-stage2", tr.snapshot(mllm))
        _save_stage_report(out, "stage2", rep)
        print(f"stage 2 done: final captioning loss {rep['final_loss']:.4f}")
        return 0

    mllm, det = _backbones(cfg, out)
    state, rep = tr.run_stage3_experiment(
        cfg, mllm, det, tr.snapshot(mllm.projector),
        tr.load_split(cfg, "train"), _val_splits(cfg))
    save_checkpoint(out / "adapter", tr.snapshot(state))
    _save_stage_report(out, "stage3", rep)
    _write_jsonl(out / "metrics-stage3.jsonl", _metrics_records(rep["metrics"]))
    for rec in _metrics_records(rep["metrics"]):
        print(f"stage 3 {rec['split']}: acc {rec['acc']:.3f} "
              f"mean_iou {rec['mean_iou']:.3f}")
    return 0


def cmd_ablate_layers(cfg: ExperimentConfig, out: Path, args) -> int:
    mllm, det = _backbones(cfg, out)
    layers = [int(v) for v in args.layers.split(",") if v != ""]
    seeds = [int(v) for v in args.seeds.split(",") if v != ""]
    results = analysis.layer_sweep(
        cfg, mllm, det, tr.snapshot(mllm.projector),
        tr.load_split(cfg, "train"), _val_splits(cfg), layers, seeds,
        progress=lambda msg: print(msg, flush=True))
    analysis.write_ablation_csv(results, out / "ablation.csv")
    for l_lm, mean in analysis.rank_layers(results):
        print(f"l_lm={l_lm}: mean val-spatial acc {mean:.3f}")
    print(f"wrote {out / 'ablation.csv'}")
    return 0


def cmd_analyze_attention(cfg: ExperimentConfig, out: Path, args) -> int:
    mllm, _ = tr.build_models(cfg)
    _load_into(mllm, out, "mllm-stage2")
    scenes = tr.load_split(cfg, "val-category")[:args.batch]
    from .scenes import pad_token_rows
    ids, valid = pad_token_rows([s.caption for s in scenes])
    images = np.stack([s.image for s in scenes])
    profile = analysis.attention_medians(mllm, images, ids, valid)
    analysis.write_attention_csv(profile, out / "attention_profile.csv")
    for layer, name, median in profile.layer_rows():
        print(f"layer {layer} {name}: median {median:+.4f}")
    print(f"wrote {out / 'attention_profile.csv'}")
    return 0


def cmd_flops_report(cfg: ExperimentConfig, out: Path, args) -> int:
    rows = analysis.compute_report(
        cfg.detector_config(), cfg.mllm_config(), cfg.adapter_config(),
        measure_latency=args.latency)
    analysis.write_compute_csv(rows, out / "compute_report.csv")
    for row in rows:
        lat = (f"  {row['latency_ms']:.3f} ms" if row["latency_ms"] is not None
               else "")
        print(f"{row['framework']:12s} params {row['params']:>8d}  "
              f"GFLOPs {row['flops_metered'] / 1e9:.6f}{lat}")
    print(f"wrote {out / 'compute_report.csv'}")
    return 0


def cmd_substitute_baseline(cfg: ExperimentConfig, out: Path, args) -> int:
    mllm, det = _backbones(cfg, out)
    sub, rep = tr.run_substitution_experiment(
        cfg, mllm, det, tr.snapshot(mllm.projector),
        tr.load_split(cfg, "train"), _val_splits(cfg))
    save_checkpoint(out / "substitution", tr.snapshot(sub))
    _save_stage_report(out, "substitution", rep)
    _write_jsonl(out / "metrics-substitution.jsonl",
                 _metrics_records(rep["metrics"]))
    for rec in _metrics_records(rep["metrics"]):
        print(f"substitution {rec['split']}: acc {rec['acc']:.3f} "
              f"mean_iou {rec['mean_iou']:.3f}")
    return 0


def cmd_gradcheck(cfg: ExperimentConfig, out: Path, args) -> int:
    results = run_gradcheck(cfg.seed)
    for name, err in results:
        print(f"{name:35s} {err:.3e}")
    worst = max_error(results)
    ok = worst < GRADCHECK_TOL
    print(f"max relative error {worst:.3e} "
          f"({'<' if ok else '>='} {GRADCHECK_TOL:g}) -> "
          f"{'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_eval(cfg: ExperimentConfig, out: Path, args) -> int:
    mllm, det = _backbones(cfg, out)
    state = None
    if args.fused:
        state = tr.build_adapter(cfg)
        _load_into(state, out, "adapter")
    summary = {}
    for split, scenes in _val_splits(cfg).items():
        m = tr.evaluate(cfg, mllm, det, scenes, state=state)
        per_scene = m.pop("per_scene", None)
        summary[split] = m
        if per_scene is not None:
            _write_jsonl(out / f"per-scene-{split}.jsonl",
                         (dict(rec, scene=i)
                          for i, rec in enumerate(per_scene)))
        print(f"{split}: acc {m['acc']:.3f} mean_iou {m['mean_iou']:.3f}")
    payload = {"config": cfg.to_dict(), "fused": bool(args.fused),
               "metrics": summary}
    (out / "eval.json").write_text(json.dumps(payload, indent=2,
                                              sort_keys=True) + "\n")
    print(f"wrote {out / 'eval.json'}")
    return 0


# ---------------------------------------------------------------------------
# argument surface
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusedet",
        description="LM-to-detector fusion experiments on synthetic scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int,
                       help="override the config seed (backbone stages use "
                            "it as the model/data seed, adapter-level "
                            "commands as the run seed)")
        p.add_argument("--out", default="runs",
                       help="checkpoint/report directory (default: runs)")

    common(sub.add_parser("gen-data", help="write every split as JSON-lines"))

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", type=int, required=True, choices=(1, 2, 3))
    common(p)

    p = sub.add_parser("ablate-layers",
                       help="sweep the LM tap depth against seeds")
    p.add_argument("--layers", default="0,1,2,4",
                   help="comma-separated LM layer taps (default 0,1,2,4)")
    p.add_argument("--seeds", default="0,1,2",
                   help="comma-separated run seeds (default 0,1,2)")
    common(p)

    p = sub.add_parser("analyze-attention",
                       help="per-layer median attention by modality")
    p.add_argument("--batch", type=int, default=32,
                   help="scenes in the probe batch (default 32)")
    common(p)

    p = sub.add_parser("flops-report",
                       help="params / FLOPs / latency accounting table")
    p.add_argument("--latency", action="store_true",
                   help="also measure median wall-clock latency")
    common(p)

    common(sub.add_parser("substitute-baseline",
                          help="train the linear substitution control"))
    common(sub.add_parser("gradcheck",
                          help="finite-difference gradient verification"))

    p = sub.add_parser("eval", help="evaluate checkpoints on the val splits")
    p.add_argument("--fused", action="store_true",
                   help="evaluate with the stage-3 adapter applied")
    common(p)
    return parser


_BACKBONE_COMMANDS = {"gen-data", "analyze-attention"}


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_file(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        if (args.command in _BACKBONE_COMMANDS
                or (args.command == "train" and args.stage in (1, 2))):
            cfg = replace(cfg, seed=args.seed, data_seed=args.seed)
        else:
            cfg = replace(cfg, run_seed=args.seed)
    return cfg


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "ablate-layers": cmd_ablate_layers,
    "analyze-attention": cmd_analyze_attention,
    "flops-report": cmd_flops_report,
    "substitute-baseline": cmd_substitute_baseline,
    "gradcheck": cmd_gradcheck,
    "eval": cmd_eval,
}


def cli(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = _resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        save_file(cfg, out / "resolved-config.txt")
        return COMMANDS[args.command](cfg, out, args)
    except (UsageError, NumericsError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    raise SystemExit(cli())


if __name__ == "__main__":
    main()
