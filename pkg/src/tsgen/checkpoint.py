"""Self-describing binary checkpoint container.

Layout: magic b"TSGC", u32 format version, u64 header length, UTF-8 JSON
header (sorted keys), then raw little-endian tensor bytes in header order.
The header records component id, config, metadata, and a tensor table of
{name, shape, dtype, offset, nbytes}. Saves are atomic (temp file + rename)
and the byte stream is a pure function of the contents, so save -> load ->
save reproduces identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"TSGC"
FORMAT_VERSION = 1

_DTYPES = {
    "float32": (np.dtype("<f4"), torch.float32),
    "float64": (np.dtype("<f8"), torch.float64),
    "int64": (np.dtype("<i8"), torch.int64),
    "int32": (np.dtype("<i4"), torch.int32),
    "bool": (np.dtype("?"), torch.bool),
}
_TORCH_NAMES = {t: name for name, (_, t) in _DTYPES.items()}


def save_checkpoint(path, component: str, tensors: dict, config: dict, metadata: dict) -> None:
    """Write tensors plus JSON-serializable config/metadata under `component`."""
    if not component:
        raise CheckpointError("component id must be non-empty")
    table = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        t = tensors[name]
        if isinstance(t, torch.Tensor):
            t = t.detach().cpu()
            if t.dtype not in _TORCH_NAMES:
                raise CheckpointError(f"tensor {name!r} has unsupported dtype {t.dtype}")
            dtype_name = _TORCH_NAMES[t.dtype]
            arr = t.numpy()
        else:
            arr = np.asarray(t)
            dtype_name = {"f4": "float32", "f8": "float64", "i8": "int64", "i4": "int32", "b1": "bool"}.get(
                arr.dtype.str.lstrip("<>|=")
            )
            if dtype_name is None:
                raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[dtype_name][0]).tobytes()
        table.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": dtype_name,
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)

    header = {
        "component": component,
        "config": config,
        "metadata": metadata,
        "tensors": table,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", FORMAT_VERSION))
            fh.write(struct.pack("<Q", len(header_bytes)))
            fh.write(header_bytes)
            for blob in blobs:
                fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path, expect_component: str = None):
    """Read a checkpoint; returns (component, tensors as torch, config, metadata).

    Raises CheckpointError for bad magic, version, truncation, or, when
    `expect_component` is given, a component id mismatch.
    """
    try:
        with open(path, "rb") as fh:
            prefix = fh.read(4 + 4 + 8)
            if len(prefix) < 16:
                raise CheckpointError(f"{path}: truncated before header")
            if prefix[:4] != MAGIC:
                raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
            (version,) = struct.unpack("<I", prefix[4:8])
            if version != FORMAT_VERSION:
                raise CheckpointError(f"{path}: unsupported format version {version}")
            (header_len,) = struct.unpack("<Q", prefix[8:16])
            header_bytes = fh.read(header_len)
            if len(header_bytes) != header_len:
                raise CheckpointError(f"{path}: truncated header")
            try:
                header = json.loads(header_bytes.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError):
                raise CheckpointError(f"{path}: corrupt header") from None
            body = fh.read()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from None

    for key in ("component", "config", "metadata", "tensors"):
        if key not in header:
            raise CheckpointError(f"{path}: header missing {key!r}")
    component = header["component"]
    if expect_component is not None and component != expect_component:
        raise CheckpointError(
            f"{path}: checkpoint holds component {component!r}, expected {expect_component!r}"
        )

    tensors = {}
    for entry in header["tensors"]:
        name, shape, dtype = entry["name"], entry["shape"], entry["dtype"]
        off, nbytes = entry["offset"], entry["nbytes"]
        if dtype not in _DTYPES:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype {dtype!r}")
        if off + nbytes > len(body):
            raise CheckpointError(f"{path}: truncated tensor data for {name!r}")
        np_dtype, _ = _DTYPES[dtype]
        expected = int(np.prod(shape, dtype=np.int64)) * np_dtype.itemsize if shape else np_dtype.itemsize
        if expected != nbytes:
            raise CheckpointError(f"{path}: tensor {name!r} size mismatch")
        arr = np.frombuffer(body[off : off + nbytes], dtype=np_dtype).reshape(shape).copy()
        tensors[name] = torch.from_numpy(arr)
    return component, tensors, header["config"], header["metadata"]


def module_tensors(module: torch.nn.Module) -> dict:
    """state_dict as a plain name->tensor mapping (buffers included)."""
    return {k: v.detach().cpu() for k, v in module.state_dict().items()}


def load_module_tensors(module: torch.nn.Module, tensors: dict) -> None:
    """Load a tensor mapping produced by `module_tensors` back into `module`."""
    try:
        module.load_state_dict({k: v for k, v in tensors.items()}, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"state mismatch while loading module: {exc}") from None
