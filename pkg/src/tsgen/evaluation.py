"""Metrics, report files, ablation drivers, and diagnostic exports.

Accuracy counts unparsed generations as incorrect; macro-F1 averages
per-class F1 with the 0/0 -> 0 convention. Report writers are deterministic:
sorted keys, no timestamps, provenance via config hash.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import DatasetBundle
from .encoders import encode_hierarchical_batch
from .errors import ConfigurationError
from .lm import UNPARSED, GenerationResult


@dataclass
class ConfusionMatrix:
    """counts[true][predicted] over parsed results; unparsed tallied apart."""

    counts: np.ndarray
    unparsed_count: int

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError("counts must be a square matrix")
        if (self.counts < 0).any() or self.unparsed_count < 0:
            raise ValueError("counts must be non-negative")

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.unparsed_count


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    per_class_f1: list
    unparsed_rate: float
    provenance: dict

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "per_class_f1": self.per_class_f1,
            "unparsed_rate": self.unparsed_rate,
            "provenance": self.provenance,
        }


def score_predictions(truths, results, num_classes: int) -> ConfusionMatrix:
    """Tally (true, predicted) pairs; UNPARSED results go to unparsed_count."""
    if len(truths) != len(results):
        raise ValueError(f"{len(truths)} truths vs {len(results)} results")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    unparsed = 0
    for truth, result in zip(truths, results):
        if not (0 <= truth < num_classes):
            raise ValueError(f"true label {truth} out of range for {num_classes} classes")
        pred = result.parsed_label_id if isinstance(result, GenerationResult) else result
        if pred == UNPARSED:
            unparsed += 1
            continue
        if not (0 <= pred < num_classes):
            raise ValueError(f"predicted label {pred} out of range for {num_classes} classes")
        counts[truth, pred] += 1
    return ConfusionMatrix(counts=counts, unparsed_count=unparsed)


def compute_metrics(cm: ConfusionMatrix, provenance: dict = None) -> MetricsReport:
    """Accuracy = trace / (parsed + unparsed); macro-F1 over parsed counts."""
    if cm.total == 0:
        raise ValueError("cannot compute metrics over zero instances")
    counts = cm.counts
    accuracy = float(np.trace(counts)) / cm.total
    per_class = []
    for k in range(cm.num_classes):
        tp = float(counts[k, k])
        fp = float(counts[:, k].sum()) - tp
        fn = float(counts[k, :].sum()) - tp
        denom = 2 * tp + fp + fn
        per_class.append(0.0 if denom == 0 else 2 * tp / denom)
    return MetricsReport(
        accuracy=accuracy,
        macro_f1=float(sum(per_class) / cm.num_classes),
        per_class_f1=per_class,
        unparsed_rate=cm.unparsed_count / cm.total,
        provenance=dict(provenance or {}),
    )


# ---------------------------------------------------------------------------
# Report writers
# ---------------------------------------------------------------------------


def write_metrics_json(report: MetricsReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")


def write_confusion_csv(cm: ConfusionMatrix, label_texts, path) -> None:
    """Rows are true labels, columns predicted; trailing row holds the
    unparsed tally."""
    if len(label_texts) != cm.num_classes:
        raise ValueError("label_texts size does not match matrix")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true\\predicted", *label_texts])
        for k, text in enumerate(label_texts):
            writer.writerow([text, *cm.counts[k].tolist()])
        writer.writerow(["unparsed", *([""] * (cm.num_classes - 1)), cm.unparsed_count])


def write_table_csv(rows, fieldnames, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in fieldnames})


def write_attention_json(aggregate: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(aggregate, fh, sort_keys=True, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Attention aggregation
# ---------------------------------------------------------------------------


def aggregate_attention(reports) -> dict:
    """Mean span mass per (layer, head) over reports with identical span maps."""
    if not reports:
        raise ConfigurationError("aggregate_attention needs at least one report")
    spans = reports[0]["spans"]
    for rep in reports[1:]:
        if rep["spans"] != spans:
            raise ConfigurationError("cannot aggregate attention reports with mixed span maps")
    num_layers = len(reports[0]["masses"])
    num_heads = len(reports[0]["masses"][0])
    masses = []
    for layer in range(num_layers):
        per_head = []
        for head in range(num_heads):
            entry = {}
            for label in spans:
                entry[label] = sum(r["masses"][layer][head][label] for r in reports) / len(reports)
            per_head.append(entry)
        masses.append(per_head)
    return {"spans": spans, "num_reports": len(reports), "masses": masses}


# ---------------------------------------------------------------------------
# Embedding export
# ---------------------------------------------------------------------------

EXPORT_SOURCES = ("data", "task", "concat")


def export_embeddings(
    bundle: DatasetBundle,
    data_enc,
    task_enc,
    which: str = "concat",
    path=None,
    split: str = "test",
) -> list:
    """Mean-pooled projected token embeddings per instance, as JSONL records
    {name, label_id, label_text, vector}. `which` selects the data rows, the
    task rows, or the full concatenation of the hierarchical embedding."""
    if which not in EXPORT_SOURCES:
        raise ConfigurationError(f"which must be one of {EXPORT_SOURCES}")
    if split not in ("train", "test"):
        raise ConfigurationError("split must be train or test")
    instances = bundle.train if split == "train" else bundle.test
    records = []
    with torch.no_grad():
        for i, inst in enumerate(instances):
            z = encode_hierarchical_batch([inst], data_enc, task_enc)
            tokens = z.tokens[0]
            if which == "data":
                vec = tokens[: z.boundary].mean(dim=0)
            elif which == "task":
                vec = tokens[z.boundary :].mean(dim=0)
            else:
                vec = tokens.mean(dim=0)
            records.append(
                {
                    "name": f"{bundle.name}-{split}-{i}",
                    "label_id": inst.label_id,
                    "label_text": bundle.label_texts[inst.label_id],
                    "vector": [float(v) for v in vec],
                }
            )
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return records


# ---------------------------------------------------------------------------
# Few-shot sweep and ablation drivers (each row is a full pipeline run)
# ---------------------------------------------------------------------------

FEWSHOT_FRACTIONS = (0.2, 0.4, 0.8, 1.0)


def _run_variant(base_config: dict, mutate, out_dir, row_name: str):
    """Deep-copy the config, apply `mutate`, run the full pipeline under
    out_dir/row_name. Returns the MetricsReport."""
    from .pipeline import RunConfig, run_full

    cfg_dict = json.loads(json.dumps(base_config))
    mutate(cfg_dict)
    cfg_dict["out_dir"] = str(out_dir / row_name)
    return run_full(RunConfig.from_dict(cfg_dict))


def few_shot_sweep(base_config: dict, out_dir, fractions=FEWSHOT_FRACTIONS) -> list:
    """One full run per training fraction; unsatisfiable fractions are
    recorded as skipped rows rather than aborting the sweep."""
    from .pipeline import RunConfig, load_bundle_for, run_full

    rows = []
    for fraction in fractions:
        if not (0.0 < fraction <= 1.0):
            raise ConfigurationError(f"fraction {fraction} outside (0, 1]")

        def set_fraction(cfg, fraction=fraction):
            cfg["few_shot"] = {
                "fraction": fraction,
                "seed": cfg["seed"],
                "min_per_class": 1,
            }

        row = {"fraction": fraction}
        try:
            cfg_dict = json.loads(json.dumps(base_config))
            set_fraction(cfg_dict)
            cfg_dict["out_dir"] = str(out_dir / f"fraction-{fraction}")
            run_cfg = RunConfig.from_dict(cfg_dict)
            bundle = load_bundle_for(run_cfg)
            report = run_full(run_cfg)
            row.update(
                {
                    "train_size": len(bundle.train),
                    "accuracy": report.accuracy,
                    "macro_f1": report.macro_f1,
                    "unparsed_rate": report.unparsed_rate,
                    "status": "ok",
                }
            )
        except ConfigurationError as exc:
            row.update({"status": f"skipped: {exc}"})
        rows.append(row)
    return rows


def ablate_encoder_variant(base_config: dict, out_dir) -> list:
    rows = []
    for variant in ("both", "data_only", "task_only"):

        def mutate(cfg, variant=variant):
            cfg["encoder_variant"] = variant

        report = _run_variant(base_config, mutate, out_dir, f"encoder-{variant}")
        rows.append(
            {
                "variant": variant,
                "accuracy": report.accuracy,
                "macro_f1": report.macro_f1,
                "unparsed_rate": report.unparsed_rate,
            }
        )
    return rows


def ablate_alignment_variant(base_config: dict, out_dir) -> list:
    rows = []
    for name, alpha, beta in (("both", 1.0, 1.0), ("coarse_only", 1.0, 0.0), ("fine_only", 0.0, 1.0)):

        def mutate(cfg, alpha=alpha, beta=beta):
            cfg["alignment"]["alpha"] = alpha
            cfg["alignment"]["beta"] = beta

        report = _run_variant(base_config, mutate, out_dir, f"alignment-{name}")
        rows.append(
            {
                "variant": name,
                "accuracy": report.accuracy,
                "macro_f1": report.macro_f1,
                "unparsed_rate": report.unparsed_rate,
            }
        )
    return rows


def ablate_prompt_on_off(base_config: dict, out_dir) -> list:
    from .prompting import MINIMAL_PROMPT_CONFIG

    rows = []
    for name in ("on", "off"):

        def mutate(cfg, name=name):
            if name == "off":
                minimal = dict(MINIMAL_PROMPT_CONFIG)
                minimal["order"] = cfg["prompt"]["order"]
                cfg["prompt"] = minimal

        report = _run_variant(base_config, mutate, out_dir, f"prompt-{name}")
        rows.append(
            {
                "variant": name,
                "accuracy": report.accuracy,
                "macro_f1": report.macro_f1,
                "unparsed_rate": report.unparsed_rate,
            }
        )
    return rows


PARADIGMS = (
    {"name": "A:F,T G:T,T", "A_encoders": False, "G_encoders": True},
    {"name": "A:F,T G:F,T", "A_encoders": False, "G_encoders": False},
    {"name": "A:T,T G:T,T", "A_encoders": True, "G_encoders": True},
    {"name": "A:T,T G:F,T", "A_encoders": True, "G_encoders": False},
)


def ablate_paradigm(base_config: dict, out_dir) -> list:
    """Four freeze/tune paradigms over the encoders in stages A and G; the
    alignment module trains in both stages in every row."""
    rows = []
    for i, paradigm in enumerate(PARADIGMS):

        def mutate(cfg, paradigm=paradigm):
            for stage in cfg["stages"]:
                if stage["stage"] == "A":
                    stage["tunable"]["data_encoder"] = paradigm["A_encoders"]
                    stage["tunable"]["task_encoder"] = paradigm["A_encoders"]
                    stage["tunable"]["alignment"] = True
                elif stage["stage"] == "G":
                    stage["tunable"]["data_encoder"] = paradigm["G_encoders"]
                    stage["tunable"]["task_encoder"] = paradigm["G_encoders"]
                    stage["tunable"]["alignment"] = True

        report = _run_variant(base_config, mutate, out_dir, f"paradigm-{i}")
        rows.append(
            {
                "variant": paradigm["name"],
                "accuracy": report.accuracy,
                "macro_f1": report.macro_f1,
                "unparsed_rate": report.unparsed_rate,
            }
        )
    return rows


def ablate_prompt_position(base_config: dict, out_dir) -> list:
    """Slot-first vs slot-last: metrics plus each arm's aggregate attention
    masses over the aligned and prompt spans."""
    rows = []
    for order in ("slot-first", "slot-last"):

        def mutate(cfg, order=order):
            cfg["prompt"]["order"] = order

        report = _run_variant(base_config, mutate, out_dir, f"order-{order}")
        attn_path = out_dir / f"order-{order}" / "attention.json"
        aligned_mass = prompt_mass = ""
        if attn_path.exists():
            with open(attn_path, "r", encoding="utf-8") as fh:
                agg = json.load(fh)
            flat = [entry for layer in agg["masses"] for entry in layer]
            aligned_mass = sum(e.get("aligned", 0.0) for e in flat) / len(flat)
            prompt_mass = sum(e.get("prompt", 0.0) for e in flat) / len(flat)
        rows.append(
            {
                "variant": order,
                "accuracy": report.accuracy,
                "macro_f1": report.macro_f1,
                "unparsed_rate": report.unparsed_rate,
                "mean_aligned_mass": aligned_mass,
                "mean_prompt_mass": prompt_mass,
            }
        )
    return rows
