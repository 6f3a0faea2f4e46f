"""Dual-view alignment between series embeddings and label text.

Learned queries and label-text tokens run through one SHARED pre-norm
self-attention stack and one shared feed-forward block; only the queries then
cross-attend to the hierarchical series tokens, which never self-attend.
Coarse matching scores a pair as the logistic of a query/text dot product;
fine matching feeds the concatenated pair through a small trainable map.
Both losses are mean binary cross-entropies over positive and negative pairs
and combine as alpha * coarse + beta * fine.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .encoders import HierarchicalEmbedding
from .errors import ConfigurationError
from .vocab import WordVocab

PROB_CLAMP = 1e-7  # keeps log() finite inside the losses

AGGREGATIONS = ("max", "mean")


@dataclass(frozen=True)
class AlignmentConfig:
    alpha: float = 1.0
    beta: float = 1.0
    num_queries: int = 8
    negatives_per_positive: int = 2
    aggregation: str = "max"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError("alpha and beta must be >= 0")
        if self.alpha + self.beta <= 0:
            raise ConfigurationError("alpha + beta must be positive")
        if self.num_queries < 1:
            raise ConfigurationError("num_queries must be >= 1")
        if self.negatives_per_positive < 1:
            raise ConfigurationError("negatives_per_positive must be >= 1")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigurationError(f"aggregation must be one of {AGGREGATIONS}")


class LearnedQuerySet(nn.Module):
    """Trainable query bank [Q x width]."""

    def __init__(self, num_queries: int, width: int):
        super().__init__()
        if num_queries < 1:
            raise ConfigurationError("num_queries must be >= 1")
        self.queries = nn.Parameter(torch.empty(num_queries, width).normal_(std=0.02))

    @property
    def num_queries(self) -> int:
        return self.queries.shape[0]


@dataclass
class TextEmbedding:
    """Pooled text-pathway vector e_t for one label text."""

    e_t: torch.Tensor
    source_text: str


@dataclass
class QueryOutput:
    """Query-pathway result: per-query rows and their elementwise aggregation.

    e_c collapses the query axis (mean or elementwise max per the configured
    aggregation); pair scoring works on e_c_tokens directly.
    """

    e_c_tokens: torch.Tensor
    e_c: torch.Tensor


@dataclass
class PairBatch:
    """Scored alignment pairs; |D| = len(positives) + len(negatives)."""

    positives: list
    negatives: list

    def __post_init__(self):
        if not self.positives:
            raise ConfigurationError("PairBatch needs at least one positive pair")

    def __len__(self) -> int:
        return len(self.positives) + len(self.negatives)


class SelfAttentionBlock(nn.Module):
    """Pre-norm residual self-attention, no feed-forward."""

    def __init__(self, width: int, num_heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, num_heads, batch_first=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm(x)
        out, _ = self.attn(h, h, h, need_weights=False)
        return x + out


class CrossAttentionBlock(nn.Module):
    """Pre-norm residual cross-attention; keeps the last attention map for
    diagnostics (detached, [B x heads x Q x T])."""

    def __init__(self, width: int, num_heads: int):
        super().__init__()
        self.norm_q = nn.LayerNorm(width)
        self.norm_kv = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, num_heads, batch_first=True)
        self.last_weights = None

    def forward(self, queries: torch.Tensor, tokens: torch.Tensor, token_valid: torch.Tensor = None):
        key_padding = None if token_valid is None else ~token_valid
        out, weights = self.attn(
            self.norm_q(queries),
            self.norm_kv(tokens),
            self.norm_kv(tokens),
            key_padding_mask=key_padding,
            need_weights=True,
            average_attn_weights=False,
        )
        self.last_weights = weights.detach()
        return queries + out


class FeedForwardBlock(nn.Module):
    """Pre-norm residual two-layer feed-forward."""

    def __init__(self, width: int, ffn_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.ffn = nn.Sequential(nn.Linear(width, ffn_dim), nn.GELU(), nn.Linear(ffn_dim, width))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.ffn(self.norm(x))


class FineMatcher(nn.Module):
    """Two-layer map from a concatenated (e_c, e_t) pair to a match logit."""

    def __init__(self, width: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(2 * width, width), nn.GELU(), nn.Linear(width, 1))

    def logit(self, e_c: torch.Tensor, e_t: torch.Tensor) -> torch.Tensor:
        """Accepts [..., width] pairs, returns [...] logits."""
        return self.net(torch.cat([e_c, e_t], dim=-1)).squeeze(-1)


class AlignmentModule(nn.Module):
    """Holds both pathways. The self-attention stack and the feed-forward
    block are single objects used by text and query paths alike, so one
    gradient step moves both pathways together."""

    def __init__(
        self,
        label_texts,
        width: int = 256,
        num_heads: int = 4,
        num_queries: int = 8,
        num_self_blocks: int = 2,
        ffn_dim: int = None,
        max_text_len: int = 64,
        aggregation: str = "max",
    ):
        super().__init__()
        if aggregation not in AGGREGATIONS:
            raise ConfigurationError(f"aggregation must be one of {AGGREGATIONS}")
        self.width = width
        self.max_text_len = max_text_len
        self.aggregation = aggregation
        self.label_texts = list(label_texts)
        self.vocab = WordVocab.from_texts(self.label_texts)
        self.token_embed = nn.Embedding(len(self.vocab), width)
        self.text_pos = nn.Parameter(torch.empty(1, max_text_len, width).normal_(std=0.02))
        self.query_set = LearnedQuerySet(num_queries, width)
        self.self_blocks = nn.ModuleList(
            SelfAttentionBlock(width, num_heads) for _ in range(num_self_blocks)
        )
        self.cross_block = CrossAttentionBlock(width, num_heads)
        self.ffn_block = FeedForwardBlock(width, ffn_dim or 2 * width)
        self.matcher = FineMatcher(width)

    def _shared_stack(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.self_blocks:
            x = block(x)
        return x

    def embed_text(self, text: str) -> TextEmbedding:
        """Tokenize -> shared self-attention -> shared feed-forward -> mean-pool."""
        if not text:
            raise ConfigurationError("cannot embed empty text")
        ids = self.vocab.encode(text)
        if not ids:
            raise ConfigurationError(f"text {text!r} produced no tokens")
        if len(ids) > self.max_text_len:
            raise ConfigurationError(
                f"text of {len(ids)} tokens exceeds alignment limit {self.max_text_len}"
            )
        x = self.token_embed(torch.as_tensor(ids, dtype=torch.long)).unsqueeze(0)
        x = x + self.text_pos[:, : x.shape[1], :]
        x = self._shared_stack(x)
        x = self.ffn_block(x)
        return TextEmbedding(e_t=x[0].mean(dim=0), source_text=text)

    def _query_tokens(self, tokens: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        """Batched query pathway: tokens [B x T x h] -> e_c_tokens [B x Q x h]."""
        b = tokens.shape[0]
        q = self.query_set.queries.unsqueeze(0).expand(b, -1, -1)
        q = self._shared_stack(q)
        q = self.cross_block(q, tokens, valid)
        return self.ffn_block(q)

    def aggregate(self, e_c_tokens: torch.Tensor) -> torch.Tensor:
        """Collapse the query axis (dim -2) per the configured aggregation."""
        if self.aggregation == "mean":
            return e_c_tokens.mean(dim=-2)
        return e_c_tokens.amax(dim=-2)

    def compute_query_output(self, z: HierarchicalEmbedding) -> QueryOutput:
        """Single-instance query pathway over one hierarchical embedding."""
        tokens, valid = z.tokens, z.valid
        if tokens.ndim == 2:
            tokens, valid = tokens.unsqueeze(0), valid.unsqueeze(0)
        e_c_tokens = self._query_tokens(tokens, valid)[0]
        return QueryOutput(e_c_tokens=e_c_tokens, e_c=self.aggregate(e_c_tokens))

    def compute_query_outputs(self, z: HierarchicalEmbedding) -> list:
        """Batched variant; returns one QueryOutput per batch row."""
        e_c_tokens = self._query_tokens(z.tokens, z.valid)
        return [QueryOutput(e_c_tokens=t, e_c=self.aggregate(t)) for t in e_c_tokens]

    def to_config(self) -> dict:
        block = self.self_blocks[0]
        return {
            "label_texts": self.label_texts,
            "width": self.width,
            "num_heads": block.attn.num_heads,
            "num_queries": self.query_set.num_queries,
            "num_self_blocks": len(self.self_blocks),
            "ffn_dim": self.ffn_block.ffn[0].out_features,
            "max_text_len": self.max_text_len,
            "aggregation": self.aggregation,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "AlignmentModule":
        return cls(**cfg)


# ---------------------------------------------------------------------------
# Pair scoring and losses
# ---------------------------------------------------------------------------


def coarse_prob(e_c: torch.Tensor, e_t: torch.Tensor) -> torch.Tensor:
    """Exactly sigmoid(<e_c, e_t>): no temperature, no input normalization."""
    return torch.sigmoid((e_c * e_t).sum(dim=-1))


def coarse_pair_logit(qo: QueryOutput, te: TextEmbedding, aggregation: str) -> torch.Tensor:
    """Pre-sigmoid coarse score: max (or mean) of per-query dot products."""
    dots = qo.e_c_tokens @ te.e_t
    return dots.max() if aggregation == "max" else dots.mean()


def fine_match_prob(e_c: torch.Tensor, e_t: torch.Tensor, matcher: FineMatcher) -> torch.Tensor:
    """Trainable two-layer match probability for one (e_c, e_t) pair."""
    return torch.sigmoid(matcher.logit(e_c, e_t))


def fine_pair_logit(qo: QueryOutput, te: TextEmbedding, matcher: FineMatcher) -> torch.Tensor:
    """Pre-sigmoid fine score: per-query match logits, averaged."""
    e_t = te.e_t.unsqueeze(0).expand_as(qo.e_c_tokens)
    return matcher.logit(qo.e_c_tokens, e_t).mean()


def _bce_from_logits(pos_logits: torch.Tensor, neg_logits: torch.Tensor) -> torch.Tensor:
    probs_pos = torch.sigmoid(pos_logits).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    terms = [torch.log(probs_pos)]
    total = pos_logits.numel()
    if neg_logits.numel():
        probs_neg = torch.sigmoid(neg_logits).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
        terms.append(torch.log(1.0 - probs_neg))
        total += neg_logits.numel()
    return -torch.cat(terms).sum() / total


def coarse_loss(batch: PairBatch, aggregation: str = "max") -> torch.Tensor:
    """-(1/|D|) [ sum_pos log F + sum_neg log(1-F) ] with clamped F."""
    pos = torch.stack([coarse_pair_logit(q, t, aggregation) for q, t in batch.positives])
    neg = (
        torch.stack([coarse_pair_logit(q, t, aggregation) for q, t in batch.negatives])
        if batch.negatives
        else torch.empty(0)
    )
    return _bce_from_logits(pos, neg)


def fine_loss(batch: PairBatch, matcher: FineMatcher) -> torch.Tensor:
    """Same form as coarse_loss with the trainable match probability."""
    pos = torch.stack([fine_pair_logit(q, t, matcher) for q, t in batch.positives])
    neg = (
        torch.stack([fine_pair_logit(q, t, matcher) for q, t in batch.negatives])
        if batch.negatives
        else torch.empty(0)
    )
    return _bce_from_logits(pos, neg)


def total_alignment_loss(batch: PairBatch, cfg: AlignmentConfig, matcher: FineMatcher) -> torch.Tensor:
    """alpha * coarse + beta * fine, exactly affine in (alpha, beta)."""
    return cfg.alpha * coarse_loss(batch, cfg.aggregation) + cfg.beta * fine_loss(batch, matcher)


def sample_negatives(
    encoded,
    label_texts,
    cfg: AlignmentConfig,
    module: AlignmentModule,
    rng: np.random.Generator,
) -> PairBatch:
    """Build a PairBatch from (HierarchicalEmbedding, label_id) pairs.

    Each instance contributes one positive against its own label's text and
    negatives_per_positive negatives against distinct other labels, drawn
    uniformly without repeats. Deterministic for a given rng state.
    """
    if len(label_texts) < 2:
        raise ConfigurationError("negative sampling needs at least two registered labels")
    k = cfg.negatives_per_positive
    if k > len(label_texts) - 1:
        raise ConfigurationError(
            f"cannot draw {k} distinct negatives from {len(label_texts) - 1} other labels"
        )
    text_embs = {i: module.embed_text(t) for i, t in enumerate(label_texts)}
    positives, negatives = [], []
    for z, label_id in encoded:
        if not (0 <= label_id < len(label_texts)):
            raise ConfigurationError(f"label_id {label_id} outside registered labels")
        qo = module.compute_query_output(z)
        positives.append((qo, text_embs[label_id]))
        others = [i for i in range(len(label_texts)) if i != label_id]
        picks = rng.choice(len(others), size=k, replace=False)
        for p in picks:
            negatives.append((qo, text_embs[others[int(p)]]))
    return PairBatch(positives=positives, negatives=negatives)


def write_pair_diagnostics(batch: PairBatch, module: AlignmentModule, path) -> None:
    """One JSON line per pair: aggregated dot product, coarse F, fine match
    probability, the label text, and whether the pair was positive."""
    with open(path, "w", encoding="utf-8") as fh:
        with torch.no_grad():
            for kind, pairs in (("positive", batch.positives), ("negative", batch.negatives)):
                for qo, te in pairs:
                    dot = coarse_pair_logit(qo, te, module.aggregation)
                    fine = torch.sigmoid(fine_pair_logit(qo, te, module.matcher))
                    rec = {
                        "kind": kind,
                        "text": te.source_text,
                        "dot": float(dot),
                        "coarse_prob": float(torch.sigmoid(dot)),
                        "fine_prob": float(fine),
                    }
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
