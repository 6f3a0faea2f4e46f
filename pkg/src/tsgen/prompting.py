"""Hybrid prompt assembly: three text segments plus an embedding slot.

A prompt is domain description, prior knowledge, and task description joined
by single newlines, with a slot for projected series embeddings either before
all text (slot-first, the default) or after it (slot-last). Labels live in a
registry of canonical texts plus optional aliases; training targets come from
an answer template with a {label} placeholder. Everything here is pure and
byte-deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .data import DatasetBundle
from .errors import ConfigurationError

SLOT_FIRST = "slot-first"
SLOT_LAST = "slot-last"
ORDERS = (SLOT_FIRST, SLOT_LAST)

SLOT_MARKER = "<series-embeddings>"
DEFAULT_ANSWER_TEMPLATE = "Answer: {label}."

DEFAULT_PROMPT_CONFIG = {
    "domain_description": (
        "You are given a multivariate time series from the {dataset} dataset. "
        "Each channel records one measured variable over the same time window."
    ),
    "prior_knowledge": (
        "Different classes produce distinct temporal shapes such as oscillation "
        "rate, phase, and amplitude. The series embeddings summarize these shapes."
    ),
    "task_description": (
        "Classify the series into exactly one of the known classes and answer "
        "with the class name."
    ),
    "order": SLOT_FIRST,
    "answer_template": DEFAULT_ANSWER_TEMPLATE,
    "label_overrides": {},
}

# Deliberately uninformative segments for the prompt-ablation arm: the slot
# and answer cue survive, the descriptive text does not.
MINIMAL_PROMPT_CONFIG = {
    "domain_description": "Input follows.",
    "prior_knowledge": "None.",
    "task_description": "Classify.",
    "order": SLOT_FIRST,
    "answer_template": DEFAULT_ANSWER_TEMPLATE,
    "label_overrides": {},
}


@dataclass(frozen=True)
class PromptTemplate:
    """The three fixed text segments and where the embedding slot sits."""

    domain_description: str
    prior_knowledge: str
    task_description: str
    order: str = SLOT_FIRST
    embedding_slot: str = SLOT_MARKER

    def __post_init__(self):
        for name in ("domain_description", "prior_knowledge", "task_description"):
            value = getattr(self, name)
            if not value or not value.strip():
                raise ConfigurationError(f"prompt segment {name} must be non-empty")
            if self.embedding_slot in value:
                raise ConfigurationError(f"slot marker may not appear inside {name}")
        if self.order not in ORDERS:
            raise ConfigurationError(f"order must be one of {ORDERS}, got {self.order!r}")
        if not self.embedding_slot:
            raise ConfigurationError("embedding_slot marker must be non-empty")


@dataclass(frozen=True)
class LabelSpec:
    """One class: canonical answer text plus accepted aliases."""

    label_id: int
    canonical_text: str
    aliases: tuple = ()

    def __post_init__(self):
        if not self.canonical_text or not self.canonical_text.strip():
            raise ConfigurationError(f"label {self.label_id}: canonical text must be non-empty")
        if any(not a or not a.strip() for a in self.aliases):
            raise ConfigurationError(f"label {self.label_id}: aliases must be non-empty")


@dataclass
class PromptBundle:
    """Rendered prompt halves around the slot; training form carries the
    target text and its label id."""

    rendered_text_before_slot: str
    rendered_text_after_slot: str
    target_text: str = None
    label_id: int = None

    def full_text(self, slot_marker: str = SLOT_MARKER) -> str:
        return self.rendered_text_before_slot + slot_marker + self.rendered_text_after_slot


def register_label_texts(bundle: DatasetBundle, overrides: dict = None) -> list:
    """One LabelSpec per class, in label-id order.

    `overrides` maps an original label text to either a replacement canonical
    string or {"canonical": text, "aliases": [texts]}. Distinctness is
    enforced case-insensitively across all canonical texts and aliases.
    """
    overrides = dict(overrides or {})
    unknown = set(overrides) - set(bundle.label_texts)
    if unknown:
        raise ConfigurationError(f"label overrides name unknown labels: {sorted(unknown)}")

    specs = []
    for label_id, original in enumerate(bundle.label_texts):
        canonical, aliases = original, []
        if original in overrides:
            ov = overrides[original]
            if isinstance(ov, str):
                canonical = ov
            elif isinstance(ov, dict):
                canonical = ov.get("canonical", original)
                aliases = list(ov.get("aliases", []))
            else:
                raise ConfigurationError(f"override for {original!r} must be text or mapping")
        seen = set()
        deduped = []
        for a in aliases:
            key = a.strip().lower()
            if key != canonical.strip().lower() and key not in seen:
                seen.add(key)
                deduped.append(a)
        specs.append(LabelSpec(label_id=label_id, canonical_text=canonical, aliases=tuple(deduped)))

    claimed: dict[str, int] = {}
    for spec in specs:
        for text in (spec.canonical_text, *spec.aliases):
            key = text.strip().lower()
            if key in claimed and claimed[key] != spec.label_id:
                raise ConfigurationError(
                    f"label text {text!r} collides between labels {claimed[key]} and {spec.label_id}"
                )
            claimed.setdefault(key, spec.label_id)
    return specs


def render_prompt(template: PromptTemplate, dataset_name: str) -> PromptBundle:
    """Deterministic assembly: domain, prior, task joined by single newlines,
    split around the embedding slot per template.order. The only substitution
    is {dataset} -> dataset_name."""
    segments = [
        template.domain_description,
        template.prior_knowledge,
        template.task_description,
    ]
    body = "\n".join(seg.replace("{dataset}", dataset_name) for seg in segments)
    if template.order == SLOT_FIRST:
        return PromptBundle(rendered_text_before_slot="", rendered_text_after_slot=body)
    return PromptBundle(rendered_text_before_slot=body, rendered_text_after_slot="")


def build_training_target(label: LabelSpec, answer_template: str = DEFAULT_ANSWER_TEMPLATE) -> str:
    """Substitute the canonical label text into the answer template."""
    if "{label}" not in answer_template:
        raise ConfigurationError("answer template must contain a {label} placeholder")
    return answer_template.replace("{label}", label.canonical_text)


def render_training_prompt(
    template: PromptTemplate,
    dataset_name: str,
    label: LabelSpec,
    answer_template: str = DEFAULT_ANSWER_TEMPLATE,
) -> PromptBundle:
    """Inference rendering plus the SFT target for one label."""
    bundle = render_prompt(template, dataset_name)
    bundle.target_text = build_training_target(label, answer_template)
    bundle.label_id = label.label_id
    return bundle


def load_prompt_config(path) -> dict:
    """Read an editable prompt config, filling absent fields with defaults.

    Schema: {domain_description, prior_knowledge, task_description, order,
    answer_template, label_overrides}.
    """
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: prompt config must be a JSON object")
    unknown = set(raw) - set(DEFAULT_PROMPT_CONFIG)
    if unknown:
        raise ConfigurationError(f"{path}: unknown prompt config fields {sorted(unknown)}")
    cfg = dict(DEFAULT_PROMPT_CONFIG)
    cfg.update(raw)
    if not isinstance(cfg["label_overrides"], dict):
        raise ConfigurationError(f"{path}: label_overrides must be a mapping")
    return cfg


def template_from_config(cfg: dict) -> PromptTemplate:
    return PromptTemplate(
        domain_description=cfg["domain_description"],
        prior_knowledge=cfg["prior_knowledge"],
        task_description=cfg["task_description"],
        order=cfg["order"],
    )


def prompt_vocabulary_texts(cfg: dict, specs, dataset_name: str) -> list:
    """Every string the language model may see or must emit under this config:
    rendered prompt halves, answer targets, canonical texts, and aliases."""
    template = template_from_config(cfg)
    rendered = render_prompt(template, dataset_name)
    texts = [rendered.rendered_text_before_slot, rendered.rendered_text_after_slot]
    for spec in specs:
        texts.append(build_training_target(spec, cfg["answer_template"]))
        texts.append(spec.canonical_text)
        texts.extend(spec.aliases)
    return [t for t in texts if t]
