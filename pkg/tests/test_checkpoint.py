"""Binary checkpoint container: round-trips, corruption handling, module IO."""

import numpy as np
import pytest
import torch
import torch.nn as nn

from tsgen.checkpoint import load_checkpoint, load_module_tensors, module_tensors, save_checkpoint
from tsgen.errors import CheckpointError


def sample_tensors():
    torch.manual_seed(0)
    return {
        "weight": torch.randn(4, 3),
        "bias": torch.randn(4, dtype=torch.float64),
        "steps": torch.arange(6, dtype=torch.int64).reshape(2, 3),
        "flag": torch.tensor([True, False]),
    }


def test_round_trip_values(tmp_path):
    path = tmp_path / "c.ckpt"
    tensors = sample_tensors()
    save_checkpoint(path, "demo", tensors, {"width": 4}, {"note": "x"})
    component, loaded, config, metadata = load_checkpoint(path)
    assert component == "demo"
    assert config == {"width": 4}
    assert metadata == {"note": "x"}
    assert set(loaded) == set(tensors)
    for name, t in tensors.items():
        assert loaded[name].dtype == t.dtype
        torch.testing.assert_close(loaded[name], t, rtol=0, atol=0)


def test_save_load_save_identical_bytes(tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    tensors = sample_tensors()
    save_checkpoint(a, "demo", tensors, {"k": 1}, {"m": 2})
    _, loaded, config, metadata = load_checkpoint(a)
    save_checkpoint(b, "demo", loaded, config, metadata)
    assert a.read_bytes() == b.read_bytes()


def test_expect_component_mismatch(tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, "data_encoder", {"w": torch.zeros(2)}, {}, {})
    with pytest.raises(CheckpointError, match="component"):
        load_checkpoint(path, expect_component="lm")
    component, _, _, _ = load_checkpoint(path, expect_component="data_encoder")
    assert component == "data_encoder"


def test_truncated_file_errors(tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, "demo", sample_tensors(), {}, {})
    blob = path.read_bytes()
    for cut in (4, 10, len(blob) - 3):
        (tmp_path / "cut.ckpt").write_bytes(blob[:cut])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(tmp_path / "cut.ckpt")


def test_bad_magic_errors(tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, "demo", {"w": torch.zeros(2)}, {}, {})
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_corrupt_header_errors(tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, "demo", {"w": torch.zeros(2)}, {}, {})
    blob = bytearray(path.read_bytes())
    blob[16] = ord("!")  # first header byte, breaks the JSON
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="corrupt header"):
        load_checkpoint(path)


def test_unsupported_dtype_rejected(tmp_path):
    with pytest.raises(CheckpointError, match="dtype"):
        save_checkpoint(tmp_path / "c.ckpt", "demo", {"w": torch.zeros(2, dtype=torch.complex64)}, {}, {})


def test_numpy_inputs_accepted(tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, "demo", {"w": np.arange(4, dtype=np.float32)}, {}, {})
    _, loaded, _, _ = load_checkpoint(path)
    assert loaded["w"].tolist() == [0.0, 1.0, 2.0, 3.0]


def test_module_round_trip(tmp_path):
    torch.manual_seed(1)
    module = nn.Sequential(nn.Linear(3, 5), nn.LayerNorm(5))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, "demo", module_tensors(module), {}, {})
    _, tensors, _, _ = load_checkpoint(path)

    torch.manual_seed(2)
    other = nn.Sequential(nn.Linear(3, 5), nn.LayerNorm(5))
    load_module_tensors(other, tensors)
    x = torch.randn(2, 3)
    torch.testing.assert_close(module(x), other(x), rtol=0, atol=0)


def test_module_shape_mismatch_errors():
    module = nn.Linear(3, 5)
    other = nn.Linear(4, 5)
    with pytest.raises(CheckpointError, match="state mismatch"):
        load_module_tensors(other, {k: torch.as_tensor(v) for k, v in module_tensors(module).items()})


def test_atomic_write_leaves_no_temp_files(tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, "demo", {"w": torch.zeros(2)}, {}, {})
    save_checkpoint(path, "demo", {"w": torch.ones(2)}, {}, {})
    assert [p.name for p in tmp_path.iterdir()] == ["c.ckpt"]
    _, loaded, _, _ = load_checkpoint(path)
    assert loaded["w"].tolist() == [1.0, 1.0]
