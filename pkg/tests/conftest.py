import numpy as np
import pytest
import torch

from tsgen.data import DatasetBundle, TimeSeriesInstance


def max_fd_relative_error(loss_fn, modules, eps=1e-5, max_entries=12, seed=0):
    """Worst relative disagreement between autograd and central finite
    differences over the trainable parameters of `modules`.

    `loss_fn` must rebuild the loss from scratch on every call; run the
    modules in double precision so the FD truncation error stays far below
    the 1e-4 acceptance threshold. Large tensors are subsampled.
    """
    params = [p for m in modules for p in m.parameters() if p.requires_grad]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.view(-1)
        n = flat.numel()
        if n <= max_entries:
            idxs = range(n)
        else:
            idxs = sorted(int(i) for i in rng.choice(n, size=max_entries, replace=False))
        for i in idxs:
            orig = flat[i].item()
            flat[i] = orig + eps
            plus = float(loss_fn().detach())
            flat[i] = orig - eps
            minus = float(loss_fn().detach())
            flat[i] = orig
            fd = (plus - minus) / (2.0 * eps)
            an = 0.0 if g is None else float(g.reshape(-1)[i])
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    return worst


def make_instance(values, label_id, length=None):
    values = np.asarray(values, dtype=np.float64)
    return TimeSeriesInstance(values, label_id, length if length is not None else values.shape[1])


def make_bundle(per_class, num_classes=2, channels=1, length=8, seed=0, name="toy"):
    """Small deterministic bundle with distinguishable per-class offsets."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for k in range(num_classes):
        for _ in range(per_class):
            train.append(make_instance(rng.normal(k, 0.1, size=(channels, length)), k))
            test.append(make_instance(rng.normal(k, 0.1, size=(channels, length)), k))
    return DatasetBundle(
        name=name,
        train=train,
        test=test,
        num_classes=num_classes,
        label_texts=[f"kind {k} series" for k in range(num_classes)],
        num_channels=channels,
        max_length=length,
    )


@pytest.fixture
def fixtures_dir(request):
    return request.path.parent / "fixtures"


def deep_merge(base, override):
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def tiny_run_config(out_dir=None, **overrides):
    """Full-pipeline config small enough for about one second per run."""
    cfg = {
        "dataset": {
            "kind": "synthetic",
            "num_classes": 2,
            "per_class_train": 6,
            "per_class_test": 3,
            "channels": 1,
            "length": 32,
            "noise_sigma": 0.05,
            "seed": 5,
        },
        "encoder": {
            "patch_size": 8,
            "stride": 8,
            "embed_width": 16,
            "num_heads": 2,
            "num_layers": 1,
            "ffn_dim": 32,
            "dropout": 0.0,
            "shared_width": 16,
            "mask_ratio": 0.5,
        },
        "alignment": {
            "num_queries": 2,
            "negatives_per_positive": 1,
            "num_heads": 2,
            "num_self_blocks": 1,
            "max_text_len": 16,
        },
        "lora": {"rank": 2, "alpha": 4.0, "dropout": 0.0},
        "lm": {"width": 16, "num_layers": 1, "num_heads": 2, "ffn_dim": 32,
               "max_seq_len": 128, "max_new_tokens": 6},
        "stages": [
            {"stage": "E", "epochs": 2, "batch_size": 8, "warmup_steps": 0},
            {"stage": "A", "epochs": 2, "batch_size": 8, "warmup_steps": 2},
            {"stage": "G", "epochs": 2, "batch_size": 8, "warmup_steps": 2},
        ],
        "seed": 11,
        "attention_sample": 2,
    }
    cfg = deep_merge(cfg, overrides)
    if out_dir is not None:
        cfg["out_dir"] = str(out_dir)
    return cfg
