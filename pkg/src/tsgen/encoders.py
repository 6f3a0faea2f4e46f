"""Patch transformer encoders over raw series and their training objectives.

Two encoders share one architecture: a data-specific encoder trained by
masked-patch reconstruction and a task-specific encoder trained by supervised
cross-entropy. Series are cut into flattened channel-major windows, embedded
with learned positions, and run through pre-norm transformer blocks. The
hierarchical embedding projects each encoder's tokens to a shared width and
concatenates them along the token axis, recording the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import TimeSeriesInstance
from .errors import ConfigurationError

DATA_SPECIFIC = "data_specific"
TASK_SPECIFIC = "task_specific"


@dataclass(frozen=True)
class PatchConfig:
    """Sliding-window tokenization plus the encoder's embedding width."""

    patch_size: int
    stride: int
    embed_width: int

    def __post_init__(self):
        if not (1 <= self.stride <= self.patch_size):
            raise ConfigurationError(
                f"need 1 <= stride <= patch_size, got stride={self.stride} patch_size={self.patch_size}"
            )
        if self.embed_width < 1:
            raise ConfigurationError("embed_width must be >= 1")

    def num_patches(self, series_length: int) -> int:
        if series_length < self.patch_size:
            raise ConfigurationError(
                f"series length {series_length} shorter than patch_size {self.patch_size}"
            )
        return (series_length - self.patch_size) // self.stride + 1


def patchify(instance: TimeSeriesInstance, cfg: PatchConfig) -> torch.Tensor:
    """Cut an instance into q = floor((L - patch_size)/stride) + 1 tokens.

    Token j flattens the channels-major window starting at j*stride, giving a
    [q x (channels * patch_size)] float32 tensor over the padded length.
    """
    channels, length = instance.values.shape
    q = cfg.num_patches(length)
    out = np.empty((q, channels * cfg.patch_size), dtype=np.float32)
    for j in range(q):
        start = j * cfg.stride
        out[j] = instance.values[:, start : start + cfg.patch_size].reshape(-1)
    return torch.from_numpy(out)


def patch_validity(instance: TimeSeriesInstance, cfg: PatchConfig) -> torch.Tensor:
    """Bool tensor [q]: a patch is real when its window starts before the true
    length, so every instance keeps at least one valid patch."""
    q = cfg.num_patches(instance.values.shape[1])
    starts = np.arange(q) * cfg.stride
    return torch.from_numpy(starts < instance.length)


@dataclass(frozen=True)
class MaskSpec:
    """A concrete reconstruction mask: which patch indices are hidden."""

    ratio: float
    masked_indices: tuple
    seed: int

    def __post_init__(self):
        if not (0.0 <= self.ratio < 1.0):
            raise ConfigurationError(f"mask ratio must be in [0, 1), got {self.ratio}")
        if len(set(self.masked_indices)) != len(self.masked_indices):
            raise ConfigurationError("masked_indices must be unique")


def sample_mask(num_patches: int, ratio: float, seed: int) -> MaskSpec:
    """Draw round(ratio * q) distinct patch indices; error when that is zero."""
    if not (0.0 <= ratio < 1.0):
        raise ConfigurationError(f"mask ratio must be in [0, 1), got {ratio}")
    count = int(round(ratio * num_patches))
    if count == 0:
        raise ConfigurationError(
            f"ratio {ratio} over {num_patches} patches masks nothing; reconstruction loss undefined"
        )
    rng = np.random.default_rng(seed)
    idx = rng.choice(num_patches, size=count, replace=False)
    return MaskSpec(ratio=ratio, masked_indices=tuple(sorted(int(i) for i in idx)), seed=seed)


@dataclass
class EncoderOutput:
    """Per-patch states of one encoder: tokens [q x width] plus which encoder
    produced them (data_specific or task_specific)."""

    tokens: torch.Tensor
    source: str


class EncoderBlock(nn.Module):
    """Pre-norm self-attention + feed-forward residual block."""

    def __init__(self, width: int, num_heads: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, num_heads, dropout=dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(width)
        self.ffn = nn.Sequential(
            nn.Linear(width, ffn_dim),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(ffn_dim, width),
        )
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, key_padding_mask: torch.Tensor = None) -> torch.Tensor:
        h = self.norm1(x)
        attn_out, _ = self.attn(h, h, h, key_padding_mask=key_padding_mask, need_weights=False)
        x = x + self.drop(attn_out)
        x = x + self.drop(self.ffn(self.norm2(x)))
        return x


class TimeSeriesEncoder(nn.Module):
    """One encoder: patch embedding -> transformer blocks -> per-patch states.

    Carries a learnable token substituted for masked patches before the
    positional embedding, a reconstruction head back to patch space, a class
    head over the valid-mean of states, and a projection to the shared width
    used by the hierarchical concatenation.
    """

    def __init__(
        self,
        patch: PatchConfig,
        num_channels: int,
        series_length: int,
        num_classes: int,
        source: str,
        shared_width: int = 256,
        num_heads: int = 4,
        num_layers: int = 2,
        ffn_dim: int = 256,
        dropout: float = 0.0,
    ):
        super().__init__()
        if source not in (DATA_SPECIFIC, TASK_SPECIFIC):
            raise ConfigurationError(f"unknown encoder source {source!r}")
        if patch.embed_width % num_heads != 0:
            raise ConfigurationError("embed_width must be divisible by num_heads")
        self.patch = patch
        self.source = source
        self.num_channels = num_channels
        self.series_length = series_length
        self.shared_width = shared_width
        self.patch_dim = num_channels * patch.patch_size
        self.num_patches = patch.num_patches(series_length)
        width = patch.embed_width
        self.embed = nn.Linear(self.patch_dim, width)
        self.pos = nn.Parameter(torch.empty(1, self.num_patches, width).normal_(std=0.02))
        self.mask_token = nn.Parameter(torch.empty(1, 1, width).normal_(std=0.02))
        self.blocks = nn.ModuleList(
            EncoderBlock(width, num_heads, ffn_dim, dropout) for _ in range(num_layers)
        )
        self.final_norm = nn.LayerNorm(width)
        self.recon_head = nn.Linear(width, self.patch_dim)
        self.class_head = nn.Linear(width, num_classes)
        self.project = nn.Linear(width, shared_width)

    def forward(self, patches: torch.Tensor, valid: torch.Tensor, mask: MaskSpec = None) -> torch.Tensor:
        """patches [B x q x patch_dim], valid [B x q] bool -> states [B x q x width].

        Patches at mask.masked_indices are replaced by the mask token before
        the positional embedding; padding patches are excluded from attention
        keys, so real-position states never depend on padding content.
        """
        if patches.ndim != 3 or patches.shape[1] != self.num_patches or patches.shape[2] != self.patch_dim:
            raise ValueError(
                f"expected patches [B x {self.num_patches} x {self.patch_dim}], got {tuple(patches.shape)}"
            )
        x = self.embed(patches)
        if mask is not None and mask.masked_indices:
            idx = torch.as_tensor(mask.masked_indices, dtype=torch.long)
            if int(idx.max()) >= self.num_patches:
                raise ConfigurationError("masked index out of range for this encoder")
            x = x.clone()
            x[:, idx, :] = self.mask_token.to(x.dtype)
        x = x + self.pos.to(x.dtype)
        key_padding = ~valid
        for block in self.blocks:
            x = block(x, key_padding_mask=key_padding)
        return self.final_norm(x)

    def reconstruct(self, patches: torch.Tensor, valid: torch.Tensor, mask: MaskSpec) -> torch.Tensor:
        """Patch-space reconstruction [B x q x patch_dim] from the masked pass."""
        return self.recon_head(self(patches, valid, mask=mask))

    def pooled(self, states: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        """Mean over valid patch states (every row has at least one)."""
        w = valid.to(states.dtype).unsqueeze(-1)
        return (states * w).sum(dim=1) / w.sum(dim=1).clamp_min(1.0)

    def encode_instance(self, instance: TimeSeriesInstance) -> EncoderOutput:
        patches = patchify(instance, self.patch).unsqueeze(0)
        valid = patch_validity(instance, self.patch).unsqueeze(0)
        states = self(patches, valid)
        return EncoderOutput(tokens=states[0], source=self.source)


def batch_patches(instances, cfg: PatchConfig):
    """Stack patchified instances: ([B x q x D] tokens, [B x q] validity)."""
    pats = torch.stack([patchify(inst, cfg) for inst in instances])
    valid = torch.stack([patch_validity(inst, cfg) for inst in instances])
    return pats, valid


def masked_reconstruction_loss(
    encoder: TimeSeriesEncoder,
    patches: torch.Tensor,
    valid: torch.Tensor,
    mask: MaskSpec,
) -> torch.Tensor:
    """MSE between reconstruction and original patch content, averaged over
    masked (and real) patches only."""
    if not mask.masked_indices:
        raise ConfigurationError("mask hides no patches; reconstruction loss undefined")
    recon = encoder.reconstruct(patches, valid, mask)
    sel = torch.zeros(patches.shape[1], dtype=torch.bool)
    sel[list(mask.masked_indices)] = True
    use = (sel.unsqueeze(0) & valid).unsqueeze(-1).to(recon.dtype)
    denom = use.sum() * patches.shape[-1]
    if denom.item() == 0:
        raise ConfigurationError("every masked patch falls in padding; loss undefined")
    return ((recon - patches) ** 2 * use).sum() / denom


def supervised_loss(
    encoder: TimeSeriesEncoder,
    patches: torch.Tensor,
    valid: torch.Tensor,
    labels: torch.Tensor,
) -> torch.Tensor:
    """Mean cross-entropy of the softmax class head over pooled states."""
    states = encoder(patches, valid)
    logits = encoder.class_head(encoder.pooled(states, valid))
    return F.cross_entropy(logits, labels)


@dataclass
class HierarchicalEmbedding:
    """Both encoders' projected tokens as one sequence.

    tokens: [(q_d + q_s) x h] (or [B x (q_d+q_s) x h] for the batched helper);
    boundary: index where data-specific rows end; valid: matching bool mask
    marking non-padding tokens, carried for downstream attention masking.
    """

    tokens: torch.Tensor
    boundary: int
    valid: torch.Tensor = None

    def __post_init__(self):
        if self.valid is None:
            shape = self.tokens.shape[:-1]
            self.valid = torch.ones(shape, dtype=torch.bool)


def encode_hierarchical(
    instance: TimeSeriesInstance,
    data_enc: TimeSeriesEncoder,
    task_enc: TimeSeriesEncoder,
) -> HierarchicalEmbedding:
    """Project each encoder's tokens to the shared width and concatenate along
    the token axis: rows [0, boundary) from the data-specific encoder, rows
    [boundary, end) from the task-specific encoder."""
    batched = encode_hierarchical_batch([instance], data_enc, task_enc)
    return HierarchicalEmbedding(
        tokens=batched.tokens[0], boundary=batched.boundary, valid=batched.valid[0]
    )


def encode_hierarchical_batch(instances, data_enc, task_enc) -> HierarchicalEmbedding:
    """Batched form of encode_hierarchical; tokens [B x (q_d+q_s) x h]."""
    if data_enc.shared_width != task_enc.shared_width:
        raise ConfigurationError("encoders project to different shared widths")
    if data_enc.source != DATA_SPECIFIC or task_enc.source != TASK_SPECIFIC:
        raise ConfigurationError("encode_hierarchical expects (data_specific, task_specific)")
    dp, dv = batch_patches(instances, data_enc.patch)
    tp, tv = batch_patches(instances, task_enc.patch)
    zd = data_enc.project(data_enc(dp, dv))
    zt = task_enc.project(task_enc(tp, tv))
    tokens = torch.cat([zd, zt], dim=1)
    valid = torch.cat([dv, tv], dim=1)
    return HierarchicalEmbedding(tokens=tokens, boundary=data_enc.num_patches, valid=valid)


def encoder_config_dict(encoder: TimeSeriesEncoder) -> dict:
    """JSON-serializable constructor arguments, for checkpoint headers."""
    block = encoder.blocks[0]
    return {
        "patch_size": encoder.patch.patch_size,
        "stride": encoder.patch.stride,
        "embed_width": encoder.patch.embed_width,
        "num_channels": encoder.num_channels,
        "series_length": encoder.series_length,
        "num_classes": encoder.class_head.out_features,
        "source": encoder.source,
        "shared_width": encoder.shared_width,
        "num_heads": block.attn.num_heads,
        "num_layers": len(encoder.blocks),
        "ffn_dim": block.ffn[0].out_features,
        "dropout": block.drop.p,
    }


def encoder_from_config(cfg: dict) -> TimeSeriesEncoder:
    return TimeSeriesEncoder(
        patch=PatchConfig(cfg["patch_size"], cfg["stride"], cfg["embed_width"]),
        num_channels=cfg["num_channels"],
        series_length=cfg["series_length"],
        num_classes=cfg["num_classes"],
        source=cfg["source"],
        shared_width=cfg["shared_width"],
        num_heads=cfg["num_heads"],
        num_layers=cfg["num_layers"],
        ffn_dim=cfg["ffn_dim"],
        dropout=cfg["dropout"],
    )
