"""Command line: gen / train / predict / eval / ablate / gradcheck.

Every command is deterministic given its resolved configuration, writes
its outputs atomically, and echoes the resolved configuration into its
output directory. Report-producing commands render PNG figures next to
the delimited files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import OUT_ROOT_ENV, RunConfig, load_run_config
from .errors import (
    CheckpointVersionError,
    ConfigError,
    DataError,
    NumericError,
    StateError,
    TrainingDiverged,
)
from .fsio import atomic_write_text, dump_json
from .gradcheck import run_gradcheck_suite
from .interchange import (
    GROUND_TRUTH,
    InterchangeFile,
    InterchangeHeader,
    IntervalRecord,
    PREDICTIONS,
    read_interchange,
    write_interchange,
)
from .metrics import evaluate, render_metrics_tsv, render_report_text
from .synthgen import Dataset, generate_dataset, load_dataset
from .trainer import (
    ABLATIONS,
    ModelConfig,
    ModelState,
    TrainConfig,
    build_dictionary,
    build_model,
    clone_model,
    load_checkpoint,
    predict_triples,
    save_checkpoint,
    stage1_scene_tuning,
    stage2_omni_tuning,
)


def _model_config(cfg: RunConfig, dataset: Dataset) -> ModelConfig:
    m = cfg.model
    return ModelConfig(
        class_names=tuple(dataset.class_names),
        channel_widths=tuple(dataset.channel_widths),
        internal_widths=tuple(m.internal_widths),
        layers=m.layers,
        heads=m.heads,
        d_model=m.d_model,
        dict_size=m.dict_size,
        scaled_attention=m.scaled_attention,
        positional_encoding=m.positional_encoding,
        iec_activation=m.iec_activation,
        affine_combine=m.affine_combine,
    )


def _echo_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out_dir / "resolved_config.json", dump_json(cfg.to_jsonable()))


def _resolve(args: argparse.Namespace) -> RunConfig:
    out = getattr(args, "out", None)
    overrides = {
        "seed": getattr(args, "seed", None),
        "mode": getattr(args, "mode", None),
        "ablation": getattr(args, "ablation", None),
        "out_root": str(out) if out is not None else None,
        "literal_paper": getattr(args, "literal_paper", False),
    }
    config_path = getattr(args, "config", None)
    return load_run_config(config_path, os.environ, overrides)


def cmd_gen(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    out_dir = Path(args.out) if args.out else Path(cfg.out_root) / "dataset"
    generate_dataset(cfg.generator, out_dir)
    _echo_config(cfg, out_dir)
    print(f"dataset written to {out_dir}")
    return 0


def _predictions_file(model: ModelState, dataset: Dataset, ablation: str) -> InterchangeFile:
    header = InterchangeHeader(
        kind=PREDICTIONS,
        segment_seconds=dataset.segment_seconds,
        background_class=dataset.background_class,
        class_names=list(dataset.class_names),
        videos={v.video_id: len(v.segments) for v in dataset.samples},
    )
    records = []
    for video in dataset.samples:
        for t in predict_triples(model, video, dataset.segment_seconds, ablation):
            records.append(
                IntervalRecord(
                    video_id=video.video_id,
                    start_s=t.start_s,
                    end_s=t.end_s,
                    class_name=t.class_name,
                    cause_text=t.cause_text,
                    class_claim=t.class_claim,
                    confidence=t.confidence,
                )
            )
    return InterchangeFile(header=header, records=records)


def _run_training(
    cfg: RunConfig, dataset: Dataset, run_dir: Path, train_cfg: TrainConfig
) -> tuple[ModelState, list[dict]]:
    run_dir.mkdir(parents=True, exist_ok=True)
    records: list[dict] = []
    from .trainer import parse_ablation

    model = build_model(_model_config(cfg, dataset), train_cfg.seed)
    records.extend(stage1_scene_tuning(model, dataset, train_cfg))
    save_checkpoint(model, run_dir / "checkpoint_stage1.bin")
    if "no_iec" not in parse_ablation(train_cfg.ablation):
        build_dictionary(model, dataset, train_cfg.seed)
        atomic_write_text(run_dir / "dictionary.json", dump_json(model.dictionary.to_dict()))
    records.extend(stage2_omni_tuning(model, dataset, train_cfg))
    save_checkpoint(model, run_dir / "checkpoint.bin")
    atomic_write_text(
        run_dir / "train_log.jsonl",
        "".join(json.dumps(r, sort_keys=True) + "\n" for r in records),
    )
    return model, records


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    dataset = load_dataset(Path(args.data), "train")
    run_dir = Path(args.out) if args.out else Path(cfg.out_root) / "train"
    model, records = _run_training(cfg, dataset, run_dir, cfg.train)
    from .figures import save_training_curves

    save_training_curves(records, run_dir / "training_curves.png")
    _echo_config(cfg, run_dir)
    if cfg.train.ablation == "no_scene_tuning":
        print("stage-1 scene tuning skipped (ablation)")
    summaries = [r for r in records if "epoch_summary" in r]
    if summaries:
        last = summaries[-1]
        print(
            f"trained ({cfg.train.ablation}): final epoch task loss {last['l_task']:.4f}, "
            f"train acc {last['train_acc']:.3f}"
        )
    print(f"run directory: {run_dir}")
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    model = load_checkpoint(Path(args.checkpoint))
    dataset = load_dataset(Path(args.data), args.split)
    if tuple(dataset.class_names) != tuple(model.config.class_names):
        raise ConfigError("checkpoint and dataset disagree on the class set")
    ablation = args.ablation or model.flags.get("ablation", "full")
    doc = _predictions_file(model, dataset, ablation)
    out_path = Path(args.out) if args.out else Path(cfg.out_root) / "predictions.jsonl"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_interchange(out_path, doc)
    print(f"{len(doc.records)} predicted intervals -> {out_path}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    preds = read_interchange(Path(args.predictions))
    gt = read_interchange(Path(args.ground_truth))
    report = evaluate(preds, gt)
    out_dir = Path(args.out) if args.out else Path(cfg.out_root) / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    text = render_report_text(report)
    atomic_write_text(out_dir / "report.txt", text)
    atomic_write_text(out_dir / "metrics.tsv", render_metrics_tsv(report))
    from .figures import save_metrics_figure

    save_metrics_figure(report, out_dir / "metrics.png")
    _echo_config(cfg, out_dir)
    sys.stdout.write(text)
    return 0


_CELL_METRICS = ("acc", "f2", "fnr", "map_avg", "sem_r", "sem_c", "sen_a")


def _metrics_row(ablation: str, seed: int, report, dataset_hash: str) -> dict:
    row = {"ablation": ablation, "seed": seed, "dataset_hash": dataset_hash}
    row["acc"] = report.acc
    row["f2"] = report.f2
    row["fnr"] = report.fnr
    for thr, v in sorted(report.map_by_threshold.items()):
        row[f"map@{thr:.1f}"] = v
    row["map_avg"] = report.map_avg
    row["sem_r"] = report.sem_r
    row["sem_c"] = report.sem_c
    row["sen_a"] = report.sen_a
    return row


def _tsv(rows: list[dict]) -> str:
    if not rows:
        return "\n"
    cols = list(rows[0])
    lines = ["\t".join(cols)]
    for row in rows:
        lines.append(
            "\t".join("na" if row[c] is None else (f"{row[c]:.6f}" if isinstance(row[c], float) else str(row[c])) for c in cols)
        )
    return "\n".join(lines) + "\n"


def run_ablation_matrix(cfg: RunConfig, data_dir: Path, seeds: int) -> list[dict]:
    """The 4-way ablation matrix over `seeds` paired seeds, shared dataset.

    Scene-tuned cells reuse one stage-1 model (and its dictionary) per
    seed, so arms differ only in the ablated component.
    """
    train = load_dataset(data_dir, "train")
    test = load_dataset(data_dir, "test")
    gt = read_interchange(data_dir / "test_gt.jsonl")
    rows = []
    for k in range(seeds):
        seed_k = cfg.train.seed + k
        base_cfg = TrainConfig(
            lr=cfg.train.lr,
            warmup_ratio=cfg.train.warmup_ratio,
            epochs=cfg.train.epochs,
            batch_size=cfg.train.batch_size,
            alpha=cfg.train.alpha,
            beta=cfg.train.beta,
            weight_decay=cfg.train.weight_decay,
            seed=seed_k,
            stage1_epochs=cfg.train.stage1_epochs,
        )
        tuned = build_model(_model_config(cfg, train), seed_k)
        stage1_scene_tuning(tuned, train, base_cfg)
        tuned_dict = None
        for ablation in ABLATIONS:
            cell_cfg = TrainConfig(**{**base_cfg.__dict__, "ablation": ablation})
            if ablation == "no_scene_tuning":
                model = build_model(_model_config(cfg, train), seed_k)
                model.flags["scene_tuning_skipped"] = True
                build_dictionary(model, train, seed_k)
            else:
                model = clone_model(tuned)
                if ablation != "no_iec":
                    if tuned_dict is None:
                        tuned_dict = build_dictionary(clone_model(tuned), train, seed_k)
                    model.dictionary = tuned_dict
            stage2_omni_tuning(model, train, cell_cfg)
            preds = _predictions_file(model, test, ablation)
            report = evaluate(preds, gt)
            rows.append(_metrics_row(ablation, seed_k, report, test.content_hash))
    return rows


def summarize_ablation(rows: list[dict]) -> list[dict]:
    out = []
    for ablation in ABLATIONS:
        cells = [r for r in rows if r["ablation"] == ablation]
        if not cells:
            continue
        summary = {"ablation": ablation, "seeds": len(cells)}
        for key in cells[0]:
            if key in ("ablation", "seed", "dataset_hash"):
                continue
            values = [c[key] for c in cells if c[key] is not None]
            summary[key] = float(np.mean(values)) if values else None
        out.append(summary)
    return out


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    seeds = args.seeds if args.seeds else cfg.ablate_seeds
    out_dir = Path(args.out) if args.out else Path(cfg.out_root) / "ablate"
    rows = run_ablation_matrix(cfg, Path(args.data), seeds)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = summarize_ablation(rows)
    atomic_write_text(out_dir / "cells.tsv", _tsv(rows))
    atomic_write_text(out_dir / "summary.tsv", _tsv(summary))
    from .figures import save_ablation_figure

    save_ablation_figure(rows, out_dir / "ablation_accuracy.png")
    _echo_config(cfg, out_dir)
    lines = ["ablation sweep (means over seeds)", ""]
    for s in summary:
        lines.append(
            f"{s['ablation']:<18} acc {s['acc']:.4f}  f2 {s['f2']:.4f}  map_avg {s['map_avg']:.4f}"
        )
    full_acc = next(s["acc"] for s in summary if s["ablation"] == "full")
    for s in summary:
        if s["ablation"] != "full":
            lines.append(f"full - {s['ablation']:<16} acc gap {full_acc - s['acc']:+.4f}")
    text = "\n".join(lines)
    print(text)
    atomic_write_text(out_dir / "report.txt", text + "\n")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    report = run_gradcheck_suite(n_configs=args.configs, tolerance=args.tolerance, seed=args.seed or 0)
    worst: dict[str, float] = {}
    for _, group, err in report.entries:
        worst[group] = max(worst.get(group, 0.0), err)
    print(f"parameter groups covered: {len(worst)}")
    for group in sorted(worst):
        status = "ok" if worst[group] < report.tolerance else "FAIL"
        print(f"  {group:<45} {worst[group]:.3e} {status}")
    print(
        f"configurations: {args.configs}; checks: {len(report.entries)}; "
        f"max relative error: {report.max_rel_err:.3e}; tolerance: {report.tolerance:.1e}; "
        f"elapsed: {report.elapsed_s:.1f}s"
    )
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        atomic_write_text(out_dir / "gradcheck.txt", "\n".join(report.lines()) + "\n")
    if not report.passed:
        print("GRADIENT CHECK FAILED", file=sys.stderr)
        for config, group, err in report.failing():
            print(f"  {config} {group} {err:.3e}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scenemoe",
        description="scene-expert mixture with causal attention: data, training, evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", type=Path, default=None, help="JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override every seed")
        p.add_argument("--out", type=Path, default=None, help=out_help)
        p.add_argument("--literal-paper", dest="literal_paper", action="store_true",
                       help="disable desk-scale deviations (attention scaling off, lr 2e-5)")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    common(p, "dataset directory")
    p.add_argument("--mode", choices=("explicit", "implicit"), default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="two-stage training on a generated dataset")
    common(p, "run directory")
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--ablation", choices=ABLATIONS, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="decode prediction intervals from a checkpoint")
    common(p, "predictions file path")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--ablation", choices=ABLATIONS, default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score a predictions file against ground truth")
    common(p, "report directory")
    p.add_argument("--predictions", type=Path, required=True)
    p.add_argument("--ground-truth", dest="ground_truth", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="4-way ablation matrix over paired seeds")
    common(p, "ablation report directory")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--seeds", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference sweep over random configurations")
    p.add_argument("--configs", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (
        ConfigError,
        DataError,
        StateError,
        CheckpointVersionError,
        NumericError,
        TrainingDiverged,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
