"""Command-line entry point.

Subcommands cover the full workflow: prepare the dataset, run the three
training stages separately or together, classify, evaluate, run ablation
sweeps, and summarize a run directory. Exit code 0 on success, 1 on
validation or input errors, 2 when training diverges.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import evaluation, pipeline
from .errors import CheckpointError, ConfigurationError, TrainingDiverged, TsParseError
from .prompting import register_label_texts

ABLATION_MODES = (
    "encoder-variant",
    "alignment-variant",
    "prompt-on-off",
    "paradigm",
    "few-shot",
    "prompt-position",
)

_VARIANT_FIELDS = ["variant", "accuracy", "macro_f1", "unparsed_rate"]
_ABLATION_TABLE = {
    "encoder-variant": (evaluation.ablate_encoder_variant, _VARIANT_FIELDS),
    "alignment-variant": (evaluation.ablate_alignment_variant, _VARIANT_FIELDS),
    "prompt-on-off": (evaluation.ablate_prompt_on_off, _VARIANT_FIELDS),
    "paradigm": (evaluation.ablate_paradigm, _VARIANT_FIELDS),
    "few-shot": (
        evaluation.few_shot_sweep,
        ["fraction", "train_size", "accuracy", "macro_f1", "unparsed_rate", "status"],
    ),
    "prompt-position": (
        evaluation.ablate_prompt_position,
        _VARIANT_FIELDS + ["mean_aligned_mass", "mean_prompt_mass"],
    ),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS defaults let the flags sit before or after the subcommand
    # without the subparser's default clobbering the top-level value.
    common.add_argument("--config", default=argparse.SUPPRESS, help="path to a JSON run config")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the run seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory for this run")

    parser = argparse.ArgumentParser(
        prog="tsgen",
        parents=[common],
        description="Hierarchically encoded time series, aligned to label text, "
        "classified by a generative language model.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    sub.add_parser("prepare", parents=[common], help="load, normalize, and export the dataset")
    sub.add_parser("train-encoders", parents=[common], help="stage E: train the patch encoders")
    sub.add_parser("train-align", parents=[common], help="stage A: train series/text alignment")
    sub.add_parser("sft", parents=[common], help="stage G: adapter fine-tuning on answer targets")
    sub.add_parser("classify", parents=[common], help="generate and parse predictions for the test split")
    sub.add_parser("evaluate", parents=[common], help="full evaluation: metrics, confusion, attention, embeddings")
    ablate = sub.add_parser("ablate", parents=[common], help="run an ablation sweep")
    ablate.add_argument("mode", choices=ABLATION_MODES, help="which sweep to run")
    sub.add_parser("report", parents=[common], help="summarize metrics and ablation tables under --out")
    return parser


def _resolve_config(args, need_out: bool = True) -> pipeline.RunConfig:
    cfg = pipeline.load_run_config(
        path=getattr(args, "config", None),
        seed=getattr(args, "seed", None),
        out_dir=getattr(args, "out", None),
    )
    if need_out and not cfg.out_dir:
        raise ConfigurationError("this command needs an output directory (--out or out_dir in the config)")
    return cfg


def _load_components(cfg: pipeline.RunConfig, out):
    data_enc = pipeline.load_encoder_checkpoint(out, "data_encoder")
    task_enc = pipeline.load_encoder_checkpoint(out, "task_encoder")
    align = pipeline.load_alignment_checkpoint(out)
    model = pipeline.load_lm_checkpoint(out)
    projection = pipeline.load_projection_checkpoint(out)
    return data_enc, task_enc, align, model, projection


def cmd_prepare(args) -> int:
    cfg = _resolve_config(args)
    bundle = pipeline.load_bundle_for(cfg)
    pipeline.prepare_outputs(bundle, cfg, cfg.out_dir)
    print(
        f"prepared {bundle.name}: {len(bundle.train)} train / {len(bundle.test)} test, "
        f"{bundle.num_classes} classes, {bundle.num_channels} channels, max length {bundle.max_length}"
    )
    return 0


def cmd_train_encoders(args) -> int:
    cfg = _resolve_config(args)
    bundle = pipeline.load_bundle_for(cfg)
    pipeline.run_stage_E(bundle, cfg, cfg.out_dir)
    print(f"stage E done: encoders saved under {pipeline.checkpoint_path(cfg.out_dir, 'data_encoder').parent}")
    return 0


def cmd_train_align(args) -> int:
    cfg = _resolve_config(args)
    bundle = pipeline.load_bundle_for(cfg)
    data_enc = pipeline.load_encoder_checkpoint(cfg.out_dir, "data_encoder")
    task_enc = pipeline.load_encoder_checkpoint(cfg.out_dir, "task_encoder")
    pipeline.run_stage_A(bundle, cfg, cfg.out_dir, data_enc, task_enc)
    print(f"stage A done: alignment saved under {pipeline.checkpoint_path(cfg.out_dir, 'alignment').parent}")
    return 0


def cmd_sft(args) -> int:
    cfg = _resolve_config(args)
    bundle = pipeline.load_bundle_for(cfg)
    data_enc = pipeline.load_encoder_checkpoint(cfg.out_dir, "data_encoder")
    task_enc = pipeline.load_encoder_checkpoint(cfg.out_dir, "task_encoder")
    align = pipeline.load_alignment_checkpoint(cfg.out_dir)
    pipeline.run_stage_G(bundle, cfg, cfg.out_dir, data_enc, task_enc, align)
    print(f"stage G done: adapters saved under {pipeline.checkpoint_path(cfg.out_dir, 'lm').parent}")
    return 0


def cmd_classify(args) -> int:
    cfg = _resolve_config(args)
    bundle = pipeline.load_bundle_for(cfg)
    data_enc, task_enc, align, model, projection = _load_components(cfg, cfg.out_dir)
    specs = register_label_texts(bundle, cfg.prompt["label_overrides"])
    results, truths = pipeline.classify_split(
        bundle, cfg, data_enc, task_enc, align, model, projection, specs
    )
    out = Path(cfg.out_dir)
    with open(out / "predictions.jsonl", "w", encoding="utf-8") as fh:
        for i, (truth, res) in enumerate(zip(truths, results)):
            record = {
                "name": f"{bundle.name}-test-{i}",
                "true_label_id": truth,
                "generated_text": res.generated_text,
                "parsed_label_id": res.parsed_label_id,
                "match_kind": res.match_kind,
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    correct = sum(1 for t, r in zip(truths, results) if r.parsed_label_id == t)
    print(f"classified {len(results)} instances, {correct} correct ({out / 'predictions.jsonl'})")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _resolve_config(args)
    bundle = pipeline.load_bundle_for(cfg)
    data_enc, task_enc, align, model, projection = _load_components(cfg, cfg.out_dir)
    specs = register_label_texts(bundle, cfg.prompt["label_overrides"])
    report = pipeline.evaluate_run(
        bundle, cfg, cfg.out_dir, data_enc, task_enc, align, model, projection, specs
    )
    print(
        f"accuracy {report.accuracy:.4f}, macro-F1 {report.macro_f1:.4f}, "
        f"unparsed rate {report.unparsed_rate:.4f}"
    )
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    runner, fieldnames = _ABLATION_TABLE[args.mode]
    sweep_dir = Path(cfg.out_dir) / f"ablate-{args.mode}"
    sweep_dir.mkdir(parents=True, exist_ok=True)
    rows = runner(cfg.canonical, sweep_dir)
    evaluation.write_table_csv(rows, fieldnames, sweep_dir / "table.csv")
    if args.mode == "few-shot":
        evaluation.write_table_csv(rows, fieldnames, Path(cfg.out_dir) / "fewshot.csv")
    with open(sweep_dir / "table.json", "w", encoding="utf-8") as fh:
        json.dump(rows, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"ablation {args.mode}: {len(rows)} rows")
    for row in rows:
        print("  " + ", ".join(f"{k}={row[k]}" for k in fieldnames if k in row))
    return 0


def cmd_report(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg.out_dir)
    summary = {}
    metrics_path = out / "metrics.json"
    if metrics_path.exists():
        with open(metrics_path, "r", encoding="utf-8") as fh:
            summary["metrics"] = json.load(fh)
    ablations = {}
    for table in sorted(out.glob("ablate-*/table.json")):
        with open(table, "r", encoding="utf-8") as fh:
            ablations[table.parent.name.removeprefix("ablate-")] = json.load(fh)
    if ablations:
        summary["ablations"] = ablations
    if not summary:
        raise ConfigurationError(f"nothing to report under {out}")
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    if "metrics" in summary:
        m = summary["metrics"]
        print(
            f"run {m.get('provenance', {}).get('run_id', '?')}: accuracy {m['accuracy']:.4f}, "
            f"macro-F1 {m['macro_f1']:.4f}, unparsed rate {m['unparsed_rate']:.4f}"
        )
    for mode, rows in ablations.items():
        print(f"ablation {mode}: {len(rows)} rows")
    print(f"wrote {out / 'report.json'}")
    return 0


_COMMANDS = {
    "prepare": cmd_prepare,
    "train-encoders": cmd_train_encoders,
    "train-align": cmd_train_align,
    "sft": cmd_sft,
    "classify": cmd_classify,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigurationError, TsParseError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
