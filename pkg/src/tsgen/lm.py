"""Small decoder-only language model with low-rank adapters and the
generation-parsing classification head.

The model is trained from scratch over a closed word-level vocabulary; its
input is a multimodal sequence of projected aligned embeddings and prompt
token embeddings, optionally followed by target tokens for next-token SFT.
Decoding is greedy and halts at the end-of-sequence token. Generated text is
mapped back to a label by case-insensitive keyword search with an
edit-distance fallback; unparseable generations stay unparsed and are scored
as incorrect downstream.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .alignment import QueryOutput
from .errors import ConfigurationError
from .prompting import LabelSpec, PromptBundle
from .vocab import WordVocab

UNPARSED = -1

LORA_TARGETS = ("query", "key", "value", "output")

_TARGET_ATTRS = {"query": "q_proj", "key": "k_proj", "value": "v_proj", "output": "o_proj"}


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    dropout: float = 0.05
    targets: tuple = LORA_TARGETS

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigurationError("LoRA rank must be >= 1")
        if self.alpha <= 0:
            raise ConfigurationError("LoRA alpha must be > 0")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigurationError("LoRA dropout must be in [0, 1)")
        targets = tuple(self.targets)
        if not targets:
            raise ConfigurationError("LoRA needs at least one target projection")
        unknown = set(targets) - set(LORA_TARGETS)
        if unknown:
            raise ConfigurationError(f"unknown LoRA targets {sorted(unknown)}")
        if len(set(targets)) != len(targets):
            raise ConfigurationError("duplicate LoRA targets")
        object.__setattr__(self, "targets", targets)


@dataclass
class GenerationResult:
    generated_text: str
    parsed_label_id: int
    match_kind: str  # exact | alias | fallback | none

    def __post_init__(self):
        if self.parsed_label_id != UNPARSED and self.match_kind == "none":
            raise ValueError("a parsed label cannot carry match_kind 'none'")


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


class CausalSelfAttention(nn.Module):
    """Multi-head causal attention with separate q/k/v/o projections, so each
    can carry its own low-rank adapter."""

    def __init__(self, width: int, num_heads: int):
        super().__init__()
        if width % num_heads != 0:
            raise ConfigurationError("width must be divisible by num_heads")
        self.width = width
        self.num_heads = num_heads
        self.head_dim = width // num_heads
        self.q_proj = nn.Linear(width, width)
        self.k_proj = nn.Linear(width, width)
        self.v_proj = nn.Linear(width, width)
        self.o_proj = nn.Linear(width, width)

    def forward(self, x: torch.Tensor, valid: torch.Tensor = None, collect=None) -> torch.Tensor:
        b, t, _ = x.shape

        def split(proj):
            return proj(x).view(b, t, self.num_heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.q_proj), split(self.k_proj), split(self.v_proj)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        causal = torch.ones(t, t, dtype=torch.bool, device=x.device).tril()
        scores = scores.masked_fill(~causal, float("-inf"))
        if valid is not None:
            scores = scores.masked_fill(~valid[:, None, None, :], float("-inf"))
        probs = torch.softmax(scores, dim=-1)
        if collect is not None:
            collect.append(probs.detach())
        out = (probs @ v).transpose(1, 2).reshape(b, t, self.width)
        return self.o_proj(out)


class DecoderBlock(nn.Module):
    def __init__(self, width: int, num_heads: int, ffn_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = CausalSelfAttention(width, num_heads)
        self.norm2 = nn.LayerNorm(width)
        self.ffn = nn.Sequential(nn.Linear(width, ffn_dim), nn.GELU(), nn.Linear(ffn_dim, width))

    def forward(self, x: torch.Tensor, valid: torch.Tensor = None, collect=None) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), valid=valid, collect=collect)
        return x + self.ffn(self.norm2(x))


class CausalLM(nn.Module):
    """Decoder-only transformer over a closed vocabulary, learned positions."""

    def __init__(
        self,
        vocab: WordVocab,
        width: int = 256,
        num_layers: int = 4,
        num_heads: int = 4,
        ffn_dim: int = None,
        max_seq_len: int = 512,
    ):
        super().__init__()
        self.vocab = vocab
        self.width = width
        self.max_seq_len = max_seq_len
        self.ffn_dim = ffn_dim or 2 * width
        self.token_embed = nn.Embedding(len(vocab), width)
        self.pos = nn.Parameter(torch.empty(1, max_seq_len, width).normal_(std=0.02))
        self.blocks = nn.ModuleList(
            DecoderBlock(width, num_heads, self.ffn_dim) for _ in range(num_layers)
        )
        self.final_norm = nn.LayerNorm(width)
        self.lm_head = nn.Linear(width, len(vocab), bias=False)

    def forward(self, embeddings: torch.Tensor, valid: torch.Tensor = None, collect_attention=False):
        """embeddings [B x T x width] -> logits [B x T x vocab].

        With collect_attention, also returns the per-layer attention tensors
        [B x heads x T x T] (detached).
        """
        b, t, w = embeddings.shape
        if w != self.width:
            raise ConfigurationError(f"embedding width {w} does not match model width {self.width}")
        if t > self.max_seq_len:
            raise ConfigurationError(f"sequence of {t} exceeds max_seq_len {self.max_seq_len}")
        x = embeddings + self.pos[:, :t, :].to(embeddings.dtype)
        collect = [] if collect_attention else None
        for block in self.blocks:
            x = block(x, valid=valid, collect=collect)
        logits = self.lm_head(self.final_norm(x))
        if collect_attention:
            return logits, collect
        return logits

    def to_config(self) -> dict:
        block = self.blocks[0]
        return {
            "vocab_tokens": self.vocab.to_config()["tokens"],
            "width": self.width,
            "num_layers": len(self.blocks),
            "num_heads": block.attn.num_heads,
            "ffn_dim": self.ffn_dim,
            "max_seq_len": self.max_seq_len,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "CausalLM":
        return cls(
            vocab=WordVocab.from_config({"tokens": cfg["vocab_tokens"]}),
            width=cfg["width"],
            num_layers=cfg["num_layers"],
            num_heads=cfg["num_heads"],
            ffn_dim=cfg["ffn_dim"],
            max_seq_len=cfg["max_seq_len"],
        )


# ---------------------------------------------------------------------------
# LoRA
# ---------------------------------------------------------------------------


class LoraLinear(nn.Module):
    """W x + (alpha/rank) * B A x on a frozen base linear; B starts at zero,
    so the adapted map equals the base map at initialization."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float, dropout: float):
        super().__init__()
        self.base = base
        self.rank = rank
        self.scaling = alpha / rank
        self.lora_a = nn.Parameter(torch.empty(rank, base.in_features).normal_(std=0.02))
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank))
        self.drop = nn.Dropout(dropout)

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        update = self.drop(x) @ self.lora_a.transpose(0, 1) @ self.lora_b.transpose(0, 1)
        return self.base(x) + self.scaling * update


def apply_lora(model: CausalLM, cfg: LoraConfig) -> CausalLM:
    """Freeze every base parameter and wrap the targeted attention projections
    with low-rank adapters; only adapter parameters remain trainable."""
    for block in model.blocks:
        for target in cfg.targets:
            proj = getattr(block.attn, _TARGET_ATTRS[target])
            if isinstance(proj, LoraLinear):
                raise ConfigurationError("model already carries adapters")
            if cfg.rank > min(proj.in_features, proj.out_features):
                raise ConfigurationError(
                    f"rank {cfg.rank} exceeds {target} projection of "
                    f"{proj.in_features}x{proj.out_features}"
                )
    for p in model.parameters():
        p.requires_grad_(False)
    for block in model.blocks:
        for target in cfg.targets:
            attr = _TARGET_ATTRS[target]
            setattr(block.attn, attr, LoraLinear(getattr(block.attn, attr), cfg.rank, cfg.alpha, cfg.dropout))
    return model


def lora_parameters(model: nn.Module):
    """The adapter parameters, in state-dict order."""
    return [p for name, p in model.named_parameters() if ".lora_a" in name or ".lora_b" in name]


def lora_parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in lora_parameters(model))


def base_state_tensors(model: nn.Module) -> dict:
    """All non-adapter tensors, for freeze-contract hashing."""
    return {
        name: t.detach().clone()
        for name, t in model.state_dict().items()
        if ".lora_a" not in name and ".lora_b" not in name
    }


# ---------------------------------------------------------------------------
# Multimodal input assembly
# ---------------------------------------------------------------------------


@dataclass
class MultimodalInput:
    """One LM sequence: [prompt-before][aligned rows][prompt-after][target].

    Exactly one prompt half is non-empty (the slot sits at an end), so the
    span map has contiguous ranges for aligned, prompt, and (train) target
    that partition [0, length).
    """

    aligned: torch.Tensor  # [S x lm_width]; S may be 0
    pre_ids: list
    post_ids: list
    target_ids: list  # None in infer mode; includes the end token in train mode
    spans: dict  # label -> (start, end)
    mode: str  # train | infer

    @property
    def length(self) -> int:
        target = len(self.target_ids) if self.target_ids is not None else 0
        return len(self.pre_ids) + self.aligned.shape[0] + len(self.post_ids) + target

    @property
    def attention_mask(self) -> torch.Tensor:
        return torch.ones(self.length, dtype=torch.bool)


def assemble_input(
    aligned: torch.Tensor,
    prompt: PromptBundle,
    vocab: WordVocab,
    mode: str,
) -> MultimodalInput:
    """Tokenize the prompt halves around the aligned rows and record spans.

    Train mode appends the tokenized target text plus the end token and marks
    its positions as the only loss positions.
    """
    if mode not in ("train", "infer"):
        raise ConfigurationError(f"mode must be train or infer, got {mode!r}")
    if aligned is None:
        aligned = torch.zeros(0, 1)
    if aligned.ndim != 2:
        raise ConfigurationError("aligned rows must be a [S x width] matrix")
    pre_ids = vocab.encode(prompt.rendered_text_before_slot) if prompt.rendered_text_before_slot else []
    post_ids = vocab.encode(prompt.rendered_text_after_slot) if prompt.rendered_text_after_slot else []
    if not pre_ids and not post_ids:
        raise ConfigurationError("prompt renders to no tokens")
    if pre_ids and post_ids:
        raise ConfigurationError("embedding slot must sit at an end of the prompt")

    target_ids = None
    if mode == "train":
        if not prompt.target_text:
            raise ConfigurationError("train mode needs a prompt with target_text")
        target_ids = vocab.encode(prompt.target_text) + [vocab.eos_id]

    s = aligned.shape[0]
    if pre_ids:
        spans = {"prompt": (0, len(pre_ids)), "aligned": (len(pre_ids), len(pre_ids) + s)}
        cursor = len(pre_ids) + s
    else:
        spans = {"aligned": (0, s), "prompt": (s, s + len(post_ids))}
        cursor = s + len(post_ids)
    if target_ids is not None:
        spans["target"] = (cursor, cursor + len(target_ids))
    return MultimodalInput(
        aligned=aligned,
        pre_ids=pre_ids,
        post_ids=post_ids,
        target_ids=target_ids,
        spans=spans,
        mode=mode,
    )


def project_aligned(q_out: QueryOutput, projection: nn.Linear) -> torch.Tensor:
    """Rowwise linear map of the per-query outputs into the LM input space."""
    return projection(q_out.e_c_tokens)


def build_embeddings(model: CausalLM, minput: MultimodalInput, extra_ids=None) -> torch.Tensor:
    """Concatenate the sequence's embeddings in span order; [T x width]."""
    parts = []
    if minput.pre_ids:
        parts.append(model.token_embed(torch.as_tensor(minput.pre_ids, dtype=torch.long)))
    if minput.aligned.shape[0]:
        if minput.aligned.shape[1] != model.width:
            raise ConfigurationError(
                f"aligned width {minput.aligned.shape[1]} does not match LM width {model.width}"
            )
        parts.append(minput.aligned.to(model.pos.dtype))
    if minput.post_ids:
        parts.append(model.token_embed(torch.as_tensor(minput.post_ids, dtype=torch.long)))
    if minput.target_ids:
        parts.append(model.token_embed(torch.as_tensor(minput.target_ids, dtype=torch.long)))
    if extra_ids:
        parts.append(model.token_embed(torch.as_tensor(extra_ids, dtype=torch.long)))
    return torch.cat(parts, dim=0)


def _pad_stack(rows):
    """Stack ragged [T_i x W] rows into ([B x T x W], [B x T] valid)."""
    tmax = max(r.shape[0] for r in rows)
    width = rows[0].shape[1]
    out = rows[0].new_zeros(len(rows), tmax, width)
    valid = torch.zeros(len(rows), tmax, dtype=torch.bool)
    for i, r in enumerate(rows):
        out[i, : r.shape[0]] = r
        valid[i, : r.shape[0]] = True
    return out, valid


def sft_loss(model: CausalLM, inputs) -> torch.Tensor:
    """Mean next-token cross-entropy over the target spans of one input or a
    batch of inputs; every other position only conditions, never scores."""
    if isinstance(inputs, MultimodalInput):
        inputs = [inputs]
    if not inputs:
        raise ConfigurationError("sft_loss needs at least one input")
    for minput in inputs:
        if minput.mode != "train" or "target" not in minput.spans or minput.target_ids is None:
            raise ConfigurationError("sft_loss needs train-mode inputs with a target span")
    rows = [build_embeddings(model, m) for m in inputs]
    stacked, valid = _pad_stack(rows)
    logits = model(stacked, valid=valid)
    losses = []
    for i, minput in enumerate(inputs):
        t0, t1 = minput.spans["target"]
        # position t-1 predicts the target token at position t
        pred = logits[i, t0 - 1 : t1 - 1]
        ids = torch.as_tensor(minput.target_ids, dtype=torch.long)
        losses.append(F.cross_entropy(pred, ids, reduction="none"))
    return torch.cat(losses).mean()


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------


def generate(model: CausalLM, minput: MultimodalInput, max_new_tokens: int = 16, trace_path=None) -> str:
    """Greedy decoding from an infer-mode input; halts at the end token or
    after max_new_tokens; deterministic for fixed parameters."""
    if minput.mode != "infer":
        raise ConfigurationError("generate expects an infer-mode input")
    if max_new_tokens < 1:
        raise ConfigurationError("max_new_tokens must be >= 1")
    trace = []
    generated = []
    with torch.no_grad():
        for step in range(max_new_tokens):
            emb = build_embeddings(model, minput, extra_ids=generated).unsqueeze(0)
            if emb.shape[1] >= model.max_seq_len:
                break
            logits = model(emb)[0, -1]
            next_id = int(torch.argmax(logits))
            trace.append({"step": step, "token": model.vocab.tokens()[next_id], "logit": float(logits[next_id])})
            if next_id == model.vocab.eos_id:
                break
            generated.append(next_id)
    if trace_path is not None:
        with open(trace_path, "w", encoding="utf-8") as fh:
            for rec in trace:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return model.vocab.decode(generated)


def generate_batch(model: CausalLM, inputs, max_new_tokens: int = 16) -> list:
    """Greedy decoding over same-length infer inputs in one batch; rows halt
    independently at their end token. Returns one text per input."""
    if not inputs:
        return []
    lengths = {m.length for m in inputs}
    if len(lengths) != 1:
        raise ConfigurationError("generate_batch expects equal-length inputs")
    for m in inputs:
        if m.mode != "infer":
            raise ConfigurationError("generate_batch expects infer-mode inputs")
    generated = [[] for _ in inputs]
    done = [False] * len(inputs)
    with torch.no_grad():
        base = torch.stack([build_embeddings(model, m) for m in inputs])
        current = base
        for _ in range(max_new_tokens):
            if all(done) or current.shape[1] >= model.max_seq_len:
                break
            logits = model(current)[:, -1]
            next_ids = torch.argmax(logits, dim=-1)
            for i, nid in enumerate(next_ids.tolist()):
                if done[i]:
                    continue
                if nid == model.vocab.eos_id:
                    done[i] = True
                else:
                    generated[i].append(nid)
            current = torch.cat([current, model.token_embed(next_ids).unsqueeze(1)], dim=1)
    return [model.vocab.decode(ids) for ids in generated]


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def levenshtein(a: str, b: str) -> int:
    """Plain character edit distance (insert/delete/substitute, all cost 1)."""
    if len(a) < len(b):
        a, b = b, a
    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        current = [i]
        for j, cb in enumerate(b, start=1):
            current.append(min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + (ca != cb)))
        previous = current
    return previous[-1]


def _contains_phrase(lower_text: str, lower_phrase: str) -> bool:
    # Boundary-checked containment: a one-letter label like "a" must not hit
    # the "a" inside "Answer", but punctuation next to the phrase is fine.
    pattern = r"(?<![a-z0-9])" + re.escape(lower_phrase) + r"(?![a-z0-9])"
    return re.search(pattern, lower_text) is not None


def parse_label(text: str, registry) -> tuple:
    """(label_id or UNPARSED, match_kind) by keyword detection.

    Case-insensitive word-boundary search over canonical texts (longest
    first, ties to the lowest label id), then aliases the same way; otherwise
    the label whose text is within edit distance 2 of the last whitespace-
    delimited word; otherwise UNPARSED.
    """
    if not registry:
        raise ConfigurationError("parse_label needs a non-empty registry")
    lower = text.lower()

    canonical = sorted(registry, key=lambda s: (-len(s.canonical_text), s.label_id))
    for spec in canonical:
        if _contains_phrase(lower, spec.canonical_text.lower()):
            return spec.label_id, "exact"

    aliases = []
    for spec in registry:
        aliases.extend((alias, spec.label_id) for alias in spec.aliases)
    aliases.sort(key=lambda pair: (-len(pair[0]), pair[1]))
    for alias, label_id in aliases:
        if _contains_phrase(lower, alias.lower()):
            return label_id, "alias"

    words = text.split()
    if words:
        last = words[-1].lower()
        best_id, best_dist = UNPARSED, None
        for spec in sorted(registry, key=lambda s: s.label_id):
            for candidate in (spec.canonical_text, *spec.aliases):
                dist = levenshtein(last, candidate.lower())
                if best_dist is None or dist < best_dist:
                    best_id, best_dist = spec.label_id, dist
        if best_dist is not None and best_dist <= 2:
            return best_id, "fallback"
    return UNPARSED, "none"


def classify_text(text: str, registry) -> GenerationResult:
    label_id, kind = parse_label(text, registry)
    return GenerationResult(generated_text=text, parsed_label_id=label_id, match_kind=kind)


# ---------------------------------------------------------------------------
# Attention diagnostics
# ---------------------------------------------------------------------------


def attention_report(model: CausalLM, minput: MultimodalInput) -> dict:
    """Span attention masses at the final position of an infer-mode input.

    Returns {"spans": {label: [start, end]}, "masses": [layer][head] dict of
    span -> probability mass}. Masses per head sum to 1 because the spans
    partition the sequence and the final causal row covers all of it.
    """
    if minput.mode != "infer":
        raise ConfigurationError("attention_report expects an infer-mode input")
    with torch.no_grad():
        emb = build_embeddings(model, minput).unsqueeze(0)
        _, layers = model(emb, collect_attention=True)
    masses = []
    for probs in layers:
        final_row = probs[0, :, -1, :]  # [heads x T]
        per_head = []
        for h in range(final_row.shape[0]):
            entry = {}
            for label, (s, e) in minput.spans.items():
                entry[label] = float(final_row[h, s:e].sum())
            per_head.append(entry)
        masses.append(per_head)
    return {"spans": {k: [s, e] for k, (s, e) in minput.spans.items()}, "masses": masses}
