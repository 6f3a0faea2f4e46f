"""Three-stage training orchestration, run configuration, and checkpoints.

Stage E trains the two encoders (masked reconstruction + supervised CE),
stage A the alignment module, stage G the LoRA adapters, aligned projection,
and optionally upstream modules through the SFT loss. Each stage re-seeds
the RNGs, constructs only its own new modules after seeding, and saves every
component it touched, so running stages in one process and running them from
saved checkpoints produce identical parameters.

Optimizer: AdamW for all stages; multiplicative LR decay in stage E, linear
warmup + cosine decay in stages A and G. A non-finite loss aborts the stage.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import evaluation
from .alignment import AlignmentConfig, AlignmentModule, sample_negatives, total_alignment_loss
from .checkpoint import load_checkpoint, load_module_tensors, module_tensors, save_checkpoint
from .data import DatasetBundle, SplitSpec, few_shot_subsample, generate_synthetic, parse_ts_dataset, write_jsonl, zscore_normalize
from .encoders import (
    DATA_SPECIFIC,
    TASK_SPECIFIC,
    HierarchicalEmbedding,
    PatchConfig,
    TimeSeriesEncoder,
    batch_patches,
    encode_hierarchical_batch,
    encoder_config_dict,
    encoder_from_config,
    masked_reconstruction_loss,
    sample_mask,
    supervised_loss,
)
from .errors import ConfigurationError, TrainingDiverged
from .lm import (
    CausalLM,
    LoraConfig,
    apply_lora,
    assemble_input,
    attention_report,
    classify_text,
    generate_batch,
    lora_parameters,
    project_aligned,
    sft_loss,
)
from .prompting import (
    DEFAULT_PROMPT_CONFIG,
    load_prompt_config,
    prompt_vocabulary_texts,
    register_label_texts,
    render_prompt,
    render_training_prompt,
    template_from_config,
)
from .vocab import WordVocab

STAGE_ORDER = ("E", "A", "G")
ENCODER_VARIANTS = ("both", "data_only", "task_only")
STAGE_E_DECAY = 0.995

TUNABLE_KEYS = ("data_encoder", "task_encoder", "alignment", "lora", "aligned_projection")

DEFAULT_TUNABLE = {
    "E": {"data_encoder": True, "task_encoder": True, "alignment": False, "lora": False, "aligned_projection": False},
    # Stage A default follows the best freeze paradigm: encoders frozen,
    # alignment tunable. Stage G: everything tunable on top of frozen base LM.
    "A": {"data_encoder": False, "task_encoder": False, "alignment": True, "lora": False, "aligned_projection": False},
    "G": {"data_encoder": True, "task_encoder": True, "alignment": True, "lora": True, "aligned_projection": True},
}

DEFAULT_STAGE_PARAMS = {
    "E": {"epochs": 15, "batch_size": 32, "learning_rate": 1e-3, "warmup_steps": 0},
    "A": {"epochs": 20, "batch_size": 16, "learning_rate": 5e-4, "warmup_steps": 100},
    "G": {"epochs": 25, "batch_size": 16, "learning_rate": 1e-3, "warmup_steps": 100},
}

DEFAULT_CONFIG = {
    "dataset": {
        "kind": "synthetic",
        "num_classes": 3,
        "per_class_train": 70,
        "per_class_test": 35,
        "channels": 2,
        "length": 128,
        "noise_sigma": 0.1,
        "seed": 7,
    },
    "normalize": True,
    "few_shot": None,
    "encoder": {
        "patch_size": 16,
        "stride": 16,
        "embed_width": 128,
        "num_heads": 4,
        "num_layers": 2,
        "ffn_dim": 256,
        "dropout": 0.0,
        "shared_width": 256,
        "mask_ratio": 0.3,
    },
    "alignment": {
        "alpha": 1.0,
        "beta": 1.0,
        "num_queries": 8,
        "negatives_per_positive": 2,
        "aggregation": "max",
        "num_heads": 4,
        "num_self_blocks": 2,
        "max_text_len": 64,
    },
    "lora": {"rank": 8, "alpha": 16.0, "dropout": 0.05, "targets": ["query", "key", "value", "output"]},
    "lm": {"width": 256, "num_layers": 4, "num_heads": 4, "ffn_dim": 512, "max_seq_len": 256, "max_new_tokens": 16},
    "prompt": DEFAULT_PROMPT_CONFIG,
    "encoder_variant": "both",
    "stages": ["E", "A", "G"],
    "out_dir": None,
    "seed": 7,
    "attention_sample": 8,
}

_STAGE_SEED_OFFSET = {"E": 1, "A": 2, "G": 3}


@dataclass
class StageConfig:
    stage: str
    epochs: int
    batch_size: int
    learning_rate: float
    seed: int
    warmup_steps: int
    tunable: dict

    def __post_init__(self):
        if self.stage not in STAGE_ORDER:
            raise ConfigurationError(f"unknown stage {self.stage!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0 or self.warmup_steps < 0:
            raise ConfigurationError(f"stage {self.stage}: invalid epochs/batch/lr/warmup")
        unknown = set(self.tunable) - set(TUNABLE_KEYS)
        if unknown:
            raise ConfigurationError(f"stage {self.stage}: unknown tunable flags {sorted(unknown)}")
        merged = dict(DEFAULT_TUNABLE[self.stage])
        merged.update(self.tunable)
        self.tunable = merged
        if self.stage == "E" and not (self.tunable["data_encoder"] or self.tunable["task_encoder"]):
            raise ConfigurationError("stage E must tune at least one encoder")
        if self.stage == "G" and not self.tunable["lora"]:
            raise ConfigurationError("stage G must tune the adapters")

    @classmethod
    def from_entry(cls, entry, run_seed: int) -> "StageConfig":
        if isinstance(entry, str):
            entry = {"stage": entry}
        if not isinstance(entry, dict) or "stage" not in entry:
            raise ConfigurationError(f"stage entry must be a letter or mapping with 'stage': {entry!r}")
        stage = entry["stage"]
        if stage not in STAGE_ORDER:
            raise ConfigurationError(f"unknown stage {stage!r}")
        known = {"stage", "epochs", "batch_size", "learning_rate", "seed", "warmup_steps", "tunable"}
        unknown = set(entry) - known
        if unknown:
            raise ConfigurationError(f"stage {stage}: unknown fields {sorted(unknown)}")
        params = dict(DEFAULT_STAGE_PARAMS[stage])
        return cls(
            stage=stage,
            epochs=int(entry.get("epochs", params["epochs"])),
            batch_size=int(entry.get("batch_size", params["batch_size"])),
            learning_rate=float(entry.get("learning_rate", params["learning_rate"])),
            seed=int(entry.get("seed", run_seed + _STAGE_SEED_OFFSET[stage])),
            warmup_steps=int(entry.get("warmup_steps", params["warmup_steps"])),
            tunable=dict(entry.get("tunable", {})),
        )

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
            "warmup_steps": self.warmup_steps,
            "tunable": dict(sorted(self.tunable.items())),
        }


def _merged_section(name: str, defaults: dict, override) -> dict:
    if override is None:
        return dict(defaults)
    if not isinstance(override, dict):
        raise ConfigurationError(f"config section {name!r} must be a mapping")
    unknown = set(override) - set(defaults)
    if unknown:
        raise ConfigurationError(f"config section {name!r}: unknown keys {sorted(unknown)}")
    merged = dict(defaults)
    merged.update(override)
    return merged


@dataclass
class RunConfig:
    """Fully resolved run description; `canonical` is the exact dict that is
    hashed into every report's provenance."""

    dataset: dict
    normalize: bool
    few_shot: dict
    encoder: dict
    alignment: dict
    lora: dict
    lm: dict
    prompt: dict
    encoder_variant: str
    stages: list
    out_dir: str
    seed: int
    attention_sample: int
    canonical: dict = field(repr=False)
    config_hash: str = ""

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigurationError("run config must be a JSON object")
        raw = dict(raw)
        if "prompt_config" in raw:
            path = raw.pop("prompt_config")
            if path is not None:
                raw["prompt"] = load_prompt_config(path)
        unknown = set(raw) - set(DEFAULT_CONFIG)
        if unknown:
            raise ConfigurationError(f"unknown run config keys {sorted(unknown)}")

        seed = int(raw.get("seed", DEFAULT_CONFIG["seed"]))
        dataset = raw.get("dataset", DEFAULT_CONFIG["dataset"])
        if not isinstance(dataset, dict) or dataset.get("kind") not in ("synthetic", "ts"):
            raise ConfigurationError("dataset.kind must be 'synthetic' or 'ts'")
        if dataset["kind"] == "synthetic":
            dataset = _merged_section("dataset", DEFAULT_CONFIG["dataset"], dataset)
        else:
            for key in ("train_path", "test_path"):
                if key not in dataset:
                    raise ConfigurationError(f"ts dataset needs {key}")
            unknown = set(dataset) - {"kind", "train_path", "test_path"}
            if unknown:
                raise ConfigurationError(f"ts dataset: unknown keys {sorted(unknown)}")

        few_shot = raw.get("few_shot", None)
        if few_shot is not None:
            few_shot = _merged_section(
                "few_shot", {"fraction": 1.0, "seed": seed, "min_per_class": 1}, few_shot
            )

        encoder_variant = raw.get("encoder_variant", "both")
        if encoder_variant not in ENCODER_VARIANTS:
            raise ConfigurationError(f"encoder_variant must be one of {ENCODER_VARIANTS}")

        stage_entries = raw.get("stages", DEFAULT_CONFIG["stages"])
        stages = [StageConfig.from_entry(e, seed) for e in stage_entries]
        letters = tuple(s.stage for s in stages)
        if letters != STAGE_ORDER[: len(letters)]:
            raise ConfigurationError(f"stages must be a prefix of {STAGE_ORDER} in order, got {letters}")

        prompt = _merged_section("prompt", DEFAULT_PROMPT_CONFIG, raw.get("prompt"))

        cfg = cls(
            dataset=dataset,
            normalize=bool(raw.get("normalize", True)),
            few_shot=few_shot,
            encoder=_merged_section("encoder", DEFAULT_CONFIG["encoder"], raw.get("encoder")),
            alignment=_merged_section("alignment", DEFAULT_CONFIG["alignment"], raw.get("alignment")),
            lora=_merged_section("lora", DEFAULT_CONFIG["lora"], raw.get("lora")),
            lm=_merged_section("lm", DEFAULT_CONFIG["lm"], raw.get("lm")),
            prompt=prompt,
            encoder_variant=encoder_variant,
            stages=stages,
            out_dir=raw.get("out_dir"),
            seed=seed,
            attention_sample=int(raw.get("attention_sample", DEFAULT_CONFIG["attention_sample"])),
            canonical={},
        )
        cfg.canonical = {
            "dataset": cfg.dataset,
            "normalize": cfg.normalize,
            "few_shot": cfg.few_shot,
            "encoder": cfg.encoder,
            "alignment": cfg.alignment,
            "lora": cfg.lora,
            "lm": cfg.lm,
            "prompt": cfg.prompt,
            "encoder_variant": cfg.encoder_variant,
            "stages": [s.to_dict() for s in cfg.stages],
            "seed": cfg.seed,
            "attention_sample": cfg.attention_sample,
        }
        cfg.config_hash = hashlib.sha256(
            json.dumps(cfg.canonical, sort_keys=True).encode("utf-8")
        ).hexdigest()[:12]
        return cfg

    def stage(self, letter: str) -> StageConfig:
        for s in self.stages:
            if s.stage == letter:
                return s
        raise ConfigurationError(f"run config does not include stage {letter}")


def load_run_config(path=None, seed=None, out_dir=None) -> RunConfig:
    raw = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    if seed is not None:
        raw["seed"] = seed
    if out_dir is not None:
        raw["out_dir"] = str(out_dir)
    return RunConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def load_bundle_for(cfg: RunConfig) -> DatasetBundle:
    ds = cfg.dataset
    if ds["kind"] == "synthetic":
        bundle = generate_synthetic(
            num_classes=int(ds["num_classes"]),
            per_class_train=int(ds["per_class_train"]),
            per_class_test=int(ds["per_class_test"]),
            channels=int(ds["channels"]),
            length=int(ds["length"]),
            noise_sigma=float(ds["noise_sigma"]),
            seed=int(ds["seed"]),
        )
    else:
        bundle = parse_ts_dataset(ds["train_path"], ds["test_path"])
    if cfg.normalize:
        bundle = zscore_normalize(bundle)
    if cfg.few_shot is not None and cfg.few_shot["fraction"] < 1.0:
        spec = SplitSpec(
            fraction=float(cfg.few_shot["fraction"]),
            seed=int(cfg.few_shot["seed"]),
            min_per_class=int(cfg.few_shot["min_per_class"]),
        )
        bundle = few_shot_subsample(bundle, spec)
    return bundle


def build_encoder(cfg: RunConfig, bundle: DatasetBundle, source: str) -> TimeSeriesEncoder:
    enc = cfg.encoder
    return TimeSeriesEncoder(
        patch=PatchConfig(enc["patch_size"], enc["stride"], enc["embed_width"]),
        num_channels=bundle.num_channels,
        series_length=bundle.max_length,
        num_classes=bundle.num_classes,
        source=source,
        shared_width=enc["shared_width"],
        num_heads=enc["num_heads"],
        num_layers=enc["num_layers"],
        ffn_dim=enc["ffn_dim"],
        dropout=enc["dropout"],
    )


def build_alignment(cfg: RunConfig, bundle: DatasetBundle) -> AlignmentModule:
    al = cfg.alignment
    return AlignmentModule(
        label_texts=bundle.label_texts,
        width=cfg.encoder["shared_width"],
        num_heads=al["num_heads"],
        num_queries=al["num_queries"],
        num_self_blocks=al["num_self_blocks"],
        max_text_len=al["max_text_len"],
        aggregation=al["aggregation"],
    )


def alignment_config(cfg: RunConfig) -> AlignmentConfig:
    al = cfg.alignment
    return AlignmentConfig(
        alpha=al["alpha"],
        beta=al["beta"],
        num_queries=al["num_queries"],
        negatives_per_positive=al["negatives_per_positive"],
        aggregation=al["aggregation"],
    )


def build_lm(cfg: RunConfig, bundle: DatasetBundle, specs):
    """Closed-vocabulary LM with adapters applied, plus the aligned projection."""
    texts = prompt_vocabulary_texts(cfg.prompt, specs, bundle.name)
    vocab = WordVocab.from_texts(texts)
    lm_cfg = cfg.lm
    model = CausalLM(
        vocab,
        width=lm_cfg["width"],
        num_layers=lm_cfg["num_layers"],
        num_heads=lm_cfg["num_heads"],
        ffn_dim=lm_cfg["ffn_dim"],
        max_seq_len=lm_cfg["max_seq_len"],
    )
    apply_lora(model, LoraConfig(
        rank=cfg.lora["rank"],
        alpha=cfg.lora["alpha"],
        dropout=cfg.lora["dropout"],
        targets=tuple(cfg.lora["targets"]),
    ))
    projection = nn.Linear(cfg.encoder["shared_width"], lm_cfg["width"])
    return model, projection


def apply_variant(z: HierarchicalEmbedding, variant: str) -> HierarchicalEmbedding:
    """Select which encoder's rows reach downstream modules."""
    if variant == "both":
        return z
    b = z.boundary
    if variant == "data_only":
        return HierarchicalEmbedding(tokens=z.tokens[..., :b, :], boundary=b, valid=z.valid[..., :b])
    if variant == "task_only":
        return HierarchicalEmbedding(tokens=z.tokens[..., b:, :], boundary=0, valid=z.valid[..., b:])
    raise ConfigurationError(f"unknown encoder variant {variant!r}")


def set_trainable(module: nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def _guard(loss: torch.Tensor, stage: str, step: int) -> None:
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"stage {stage}: non-finite loss at step {step}")


def make_scheduler(stage: str, optimizer, total_steps: int, warmup: int):
    if stage == "E":
        return torch.optim.lr_scheduler.LambdaLR(optimizer, lambda step: STAGE_E_DECAY**step)

    def factor(step: int) -> float:
        if warmup > 0 and step < warmup:
            return (step + 1) / warmup
        span = max(1, total_steps - warmup)
        progress = min(1.0, max(0.0, (step - warmup) / span))
        return 0.5 * (1.0 + math.cos(math.pi * progress))

    return torch.optim.lr_scheduler.LambdaLR(optimizer, factor)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield [int(i) for i in order[start : start + batch_size]]


# ---------------------------------------------------------------------------
# Checkpoint wiring
# ---------------------------------------------------------------------------

COMPONENTS = ("data_encoder", "task_encoder", "alignment", "lm", "aligned_projection")


def checkpoint_path(out_dir, name: str) -> Path:
    return Path(out_dir) / "checkpoints" / f"{name}.ckpt"


def save_component(out_dir, name: str, module: nn.Module, config: dict, metadata: dict) -> None:
    save_checkpoint(checkpoint_path(out_dir, name), name, module_tensors(module), config, metadata)


def load_encoder_checkpoint(out_dir, name: str) -> TimeSeriesEncoder:
    _, tensors, config, _ = load_checkpoint(checkpoint_path(out_dir, name), expect_component=name)
    enc = encoder_from_config(config)
    load_module_tensors(enc, tensors)
    return enc


def load_alignment_checkpoint(out_dir) -> AlignmentModule:
    _, tensors, config, _ = load_checkpoint(checkpoint_path(out_dir, "alignment"), expect_component="alignment")
    module = AlignmentModule.from_config(config)
    load_module_tensors(module, tensors)
    return module


def load_lm_checkpoint(out_dir) -> CausalLM:
    _, tensors, config, _ = load_checkpoint(checkpoint_path(out_dir, "lm"), expect_component="lm")
    model = CausalLM.from_config(config["lm"])
    if config.get("lora"):
        lora = dict(config["lora"])
        lora["targets"] = tuple(lora["targets"])
        apply_lora(model, LoraConfig(**lora))
    load_module_tensors(model, tensors)
    return model


def load_projection_checkpoint(out_dir) -> nn.Linear:
    _, tensors, config, _ = load_checkpoint(
        checkpoint_path(out_dir, "aligned_projection"), expect_component="aligned_projection"
    )
    projection = nn.Linear(config["in_features"], config["out_features"])
    load_module_tensors(projection, tensors)
    return projection


def _stage_metadata(stage_cfg: StageConfig, curves: dict, cfg: RunConfig) -> dict:
    return {
        "stage": stage_cfg.stage,
        "epochs": stage_cfg.epochs,
        "loss_curve": curves,
        "config_hash": cfg.config_hash,
    }


def _write_stage_log(out_dir, stage: str, curves: dict) -> None:
    logs = Path(out_dir) / "logs"
    logs.mkdir(parents=True, exist_ok=True)
    with open(logs / f"stage_{stage}.json", "w", encoding="utf-8") as fh:
        json.dump(curves, fh, sort_keys=True, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def run_stage_E(bundle: DatasetBundle, cfg: RunConfig, out_dir):
    """Train (per flags) the data-specific encoder by masked reconstruction
    and the task-specific encoder by supervised cross-entropy."""
    stage_cfg = cfg.stage("E")
    torch.manual_seed(stage_cfg.seed)
    rng = np.random.default_rng(stage_cfg.seed)
    data_enc = build_encoder(cfg, bundle, DATA_SPECIFIC)
    task_enc = build_encoder(cfg, bundle, TASK_SPECIFIC)
    set_trainable(data_enc, stage_cfg.tunable["data_encoder"])
    set_trainable(task_enc, stage_cfg.tunable["task_encoder"])
    data_enc.train()
    task_enc.train()

    patch_cfg = data_enc.patch
    patches, valid = batch_patches(bundle.train, patch_cfg)
    labels = torch.as_tensor([inst.label_id for inst in bundle.train], dtype=torch.long)
    q = data_enc.num_patches

    params = [p for m in (data_enc, task_enc) for p in m.parameters() if p.requires_grad]
    curves = {"masked": [], "supervised": []}
    if stage_cfg.epochs > 0 and params:
        optimizer = torch.optim.AdamW(params, lr=stage_cfg.learning_rate)
        steps_per_epoch = math.ceil(len(bundle.train) / stage_cfg.batch_size)
        scheduler = make_scheduler("E", optimizer, stage_cfg.epochs * steps_per_epoch, stage_cfg.warmup_steps)
        step = 0
        for _ in range(stage_cfg.epochs):
            for idx in _batches(len(bundle.train), stage_cfg.batch_size, rng):
                loss = torch.zeros(())
                if stage_cfg.tunable["data_encoder"]:
                    mask = sample_mask(q, cfg.encoder["mask_ratio"], seed=int(rng.integers(2**31 - 1)))
                    masked = masked_reconstruction_loss(data_enc, patches[idx], valid[idx], mask)
                    curves["masked"].append(float(masked.detach()))
                    loss = loss + masked
                if stage_cfg.tunable["task_encoder"]:
                    sup = supervised_loss(task_enc, patches[idx], valid[idx], labels[idx])
                    curves["supervised"].append(float(sup.detach()))
                    loss = loss + sup
                _guard(loss, "E", step)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                scheduler.step()
                step += 1

    data_enc.eval()
    task_enc.eval()
    meta = _stage_metadata(stage_cfg, curves, cfg)
    save_component(out_dir, "data_encoder", data_enc, encoder_config_dict(data_enc), meta)
    save_component(out_dir, "task_encoder", task_enc, encoder_config_dict(task_enc), meta)
    _write_stage_log(out_dir, "E", curves)
    return data_enc, task_enc


def _slice_rows(z: HierarchicalEmbedding):
    return [
        HierarchicalEmbedding(tokens=z.tokens[i], boundary=z.boundary, valid=z.valid[i])
        for i in range(z.tokens.shape[0])
    ]


def run_stage_A(bundle: DatasetBundle, cfg: RunConfig, out_dir, data_enc, task_enc) -> AlignmentModule:
    """Train the alignment module (and, per flags, the encoders) with the
    combined coarse + fine loss over sampled pairs."""
    stage_cfg = cfg.stage("A")
    torch.manual_seed(stage_cfg.seed)
    rng = np.random.default_rng(stage_cfg.seed)
    align = build_alignment(cfg, bundle)
    align_cfg = alignment_config(cfg)

    set_trainable(data_enc, stage_cfg.tunable["data_encoder"])
    set_trainable(task_enc, stage_cfg.tunable["task_encoder"])
    set_trainable(align, stage_cfg.tunable["alignment"])
    for m in (data_enc, task_enc, align):
        m.train()

    params = [p for m in (data_enc, task_enc, align) for p in m.parameters() if p.requires_grad]
    curve = []
    if stage_cfg.epochs > 0 and params:
        optimizer = torch.optim.AdamW(params, lr=stage_cfg.learning_rate)
        steps_per_epoch = math.ceil(len(bundle.train) / stage_cfg.batch_size)
        scheduler = make_scheduler("A", optimizer, stage_cfg.epochs * steps_per_epoch, stage_cfg.warmup_steps)
        step = 0
        for _ in range(stage_cfg.epochs):
            for idx in _batches(len(bundle.train), stage_cfg.batch_size, rng):
                instances = [bundle.train[i] for i in idx]
                z = apply_variant(encode_hierarchical_batch(instances, data_enc, task_enc), cfg.encoder_variant)
                encoded = list(zip(_slice_rows(z), [inst.label_id for inst in instances]))
                pair_batch = sample_negatives(encoded, bundle.label_texts, align_cfg, align, rng)
                loss = total_alignment_loss(pair_batch, align_cfg, align.matcher)
                curve.append(float(loss.detach()))
                _guard(loss, "A", step)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                scheduler.step()
                step += 1

    for m in (data_enc, task_enc, align):
        m.eval()
    curves = {"alignment": curve}
    meta = _stage_metadata(stage_cfg, curves, cfg)
    save_component(out_dir, "alignment", align, align.to_config(), meta)
    save_component(out_dir, "data_encoder", data_enc, encoder_config_dict(data_enc), meta)
    save_component(out_dir, "task_encoder", task_enc, encoder_config_dict(task_enc), meta)
    _write_stage_log(out_dir, "A", curves)
    return align


def run_stage_G(bundle: DatasetBundle, cfg: RunConfig, out_dir, data_enc, task_enc, align):
    """SFT: next-token loss on answer targets, training adapters, projection,
    and (per flags) the upstream modules; the base LM stays frozen."""
    stage_cfg = cfg.stage("G")
    torch.manual_seed(stage_cfg.seed)
    rng = np.random.default_rng(stage_cfg.seed)

    specs = register_label_texts(bundle, cfg.prompt["label_overrides"])
    model, projection = build_lm(cfg, bundle, specs)
    template = template_from_config(cfg.prompt)
    answer_template = cfg.prompt["answer_template"]
    train_prompts = {
        spec.label_id: render_training_prompt(template, bundle.name, spec, answer_template)
        for spec in specs
    }

    set_trainable(data_enc, stage_cfg.tunable["data_encoder"])
    set_trainable(task_enc, stage_cfg.tunable["task_encoder"])
    set_trainable(align, stage_cfg.tunable["alignment"])
    set_trainable(projection, stage_cfg.tunable["aligned_projection"])
    for p in lora_parameters(model):
        p.requires_grad_(stage_cfg.tunable["lora"])
    for m in (data_enc, task_enc, align, model, projection):
        m.train()

    params = [
        p
        for m in (data_enc, task_enc, align, model, projection)
        for p in m.parameters()
        if p.requires_grad
    ]
    curve = []
    if stage_cfg.epochs > 0 and params:
        optimizer = torch.optim.AdamW(params, lr=stage_cfg.learning_rate)
        steps_per_epoch = math.ceil(len(bundle.train) / stage_cfg.batch_size)
        scheduler = make_scheduler("G", optimizer, stage_cfg.epochs * steps_per_epoch, stage_cfg.warmup_steps)
        step = 0
        for _ in range(stage_cfg.epochs):
            for idx in _batches(len(bundle.train), stage_cfg.batch_size, rng):
                instances = [bundle.train[i] for i in idx]
                z = apply_variant(encode_hierarchical_batch(instances, data_enc, task_enc), cfg.encoder_variant)
                query_outputs = align.compute_query_outputs(z)
                inputs = []
                for qo, inst in zip(query_outputs, instances):
                    aligned = project_aligned(qo, projection)
                    inputs.append(assemble_input(aligned, train_prompts[inst.label_id], model.vocab, "train"))
                loss = sft_loss(model, inputs)
                curve.append(float(loss.detach()))
                _guard(loss, "G", step)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                scheduler.step()
                step += 1

    for m in (data_enc, task_enc, align, model, projection):
        m.eval()
    curves = {"sft": curve}
    meta = _stage_metadata(stage_cfg, curves, cfg)
    save_component(out_dir, "lm", model, {"lm": model.to_config(), "lora": dict(cfg.lora)}, meta)
    save_component(
        out_dir,
        "aligned_projection",
        projection,
        {"in_features": projection.in_features, "out_features": projection.out_features},
        meta,
    )
    save_component(out_dir, "alignment", align, align.to_config(), meta)
    save_component(out_dir, "data_encoder", data_enc, encoder_config_dict(data_enc), meta)
    save_component(out_dir, "task_encoder", task_enc, encoder_config_dict(task_enc), meta)
    _write_stage_log(out_dir, "G", curves)
    return model, projection, specs


# ---------------------------------------------------------------------------
# Inference and evaluation
# ---------------------------------------------------------------------------


def classify_split(
    bundle: DatasetBundle,
    cfg: RunConfig,
    data_enc,
    task_enc,
    align,
    model,
    projection,
    specs,
    split: str = "test",
    batch_size: int = 16,
):
    """Greedy generation + parsing over one split; returns (results, truths)."""
    for m in (data_enc, task_enc, align, model, projection):
        m.eval()
    template = template_from_config(cfg.prompt)
    infer_prompt = render_prompt(template, bundle.name)
    instances = bundle.train if split == "train" else bundle.test
    max_new = cfg.lm["max_new_tokens"]
    results = []
    with torch.no_grad():
        for start in range(0, len(instances), batch_size):
            chunk = instances[start : start + batch_size]
            z = apply_variant(encode_hierarchical_batch(chunk, data_enc, task_enc), cfg.encoder_variant)
            inputs = [
                assemble_input(project_aligned(qo, projection), infer_prompt, model.vocab, "infer")
                for qo in align.compute_query_outputs(z)
            ]
            for text in generate_batch(model, inputs, max_new_tokens=max_new):
                results.append(classify_text(text, specs))
    truths = [inst.label_id for inst in instances]
    return results, truths


def evaluate_run(bundle, cfg: RunConfig, out_dir, data_enc, task_enc, align, model, projection, specs):
    """Predictions, metrics, confusion, attention aggregate, embedding export."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results, truths = classify_split(bundle, cfg, data_enc, task_enc, align, model, projection, specs)

    with open(out / "predictions.jsonl", "w", encoding="utf-8") as fh:
        for i, (truth, res) in enumerate(zip(truths, results)):
            fh.write(
                json.dumps(
                    {
                        "name": f"{bundle.name}-test-{i}",
                        "true_label_id": truth,
                        "generated_text": res.generated_text,
                        "parsed_label_id": res.parsed_label_id,
                        "match_kind": res.match_kind,
                    },
                    sort_keys=True,
                )
                + "\n"
            )

    cm = evaluation.score_predictions(truths, results, bundle.num_classes)
    provenance = {"run_id": f"run-{cfg.config_hash}", "config_hash": cfg.config_hash}
    report = evaluation.compute_metrics(cm, provenance)
    evaluation.write_metrics_json(report, out / "metrics.json")
    evaluation.write_confusion_csv(cm, [s.canonical_text for s in specs], out / "confusion.csv")

    template = template_from_config(cfg.prompt)
    infer_prompt = render_prompt(template, bundle.name)
    sample = bundle.test[: max(1, min(cfg.attention_sample, len(bundle.test)))]
    reports = []
    with torch.no_grad():
        z = apply_variant(encode_hierarchical_batch(sample, data_enc, task_enc), cfg.encoder_variant)
        for qo in align.compute_query_outputs(z):
            minput = assemble_input(project_aligned(qo, projection), infer_prompt, model.vocab, "infer")
            reports.append(attention_report(model, minput))
    evaluation.write_attention_json(evaluation.aggregate_attention(reports), out / "attention.json")

    evaluation.export_embeddings(bundle, data_enc, task_enc, "concat", out / "embeddings.jsonl")
    return report


def prepare_outputs(bundle: DatasetBundle, cfg: RunConfig, out_dir) -> None:
    """Interchange files plus a dataset summary for inspection."""
    prepared = Path(out_dir) / "prepared"
    prepared.mkdir(parents=True, exist_ok=True)
    write_jsonl(bundle, prepared / "train.jsonl", prepared / "test.jsonl")
    summary = {
        "name": bundle.name,
        "num_classes": bundle.num_classes,
        "num_channels": bundle.num_channels,
        "max_length": bundle.max_length,
        "train_size": len(bundle.train),
        "test_size": len(bundle.test),
        "label_texts": bundle.label_texts,
        "normalized": cfg.normalize,
        "config_hash": cfg.config_hash,
    }
    with open(prepared / "dataset.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")


def run_full(cfg: RunConfig):
    """Load data, run every configured stage, and (when stage G is present)
    evaluate. Returns the MetricsReport, or None without stage G."""
    if not cfg.out_dir:
        raise ConfigurationError("run config needs an out_dir")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg.canonical, fh, sort_keys=True, indent=2)
        fh.write("\n")

    bundle = load_bundle_for(cfg)
    letters = [s.stage for s in cfg.stages]
    data_enc = task_enc = align = None
    data_enc, task_enc = run_stage_E(bundle, cfg, out)
    if "A" in letters:
        align = run_stage_A(bundle, cfg, out, data_enc, task_enc)
    if "G" in letters:
        model, projection, specs = run_stage_G(bundle, cfg, out, data_enc, task_enc, align)
        return evaluate_run(bundle, cfg, out, data_enc, task_enc, align, model, projection, specs)
    return None
