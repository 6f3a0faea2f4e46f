"""Dataset ingestion and preparation for multivariate series classification.

Covers the `.ts` archive subset, a synthetic sinusoid generator, train-stat
z-score normalization, stratified few-shot subsampling, right padding, and a
JSON-lines interchange format.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, TsParseError

STD_FLOOR = 1e-8  # divisor guard for zero-variance channels


@dataclass(frozen=True)
class TimeSeriesInstance:
    """One multivariate series: values [channels x timesteps] plus its label.

    `length` is the true (pre-padding) number of timesteps; columns at or
    beyond `length` are padding and carry zeros.
    """

    values: np.ndarray
    label_id: int
    length: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"values must be [channels x timesteps], got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("values must be finite")
        if not (1 <= self.length <= v.shape[1]):
            raise ValueError(f"length {self.length} out of range for {v.shape[1]} timesteps")

    @property
    def num_channels(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class SplitSpec:
    """Stratified subsampling request: keep `fraction` of the train split,
    at least `min_per_class` instances of every class."""

    fraction: float
    seed: int
    min_per_class: int = 1

    def __post_init__(self):
        if not (0.0 < self.fraction <= 1.0):
            raise ConfigurationError(f"fraction must be in (0, 1], got {self.fraction}")
        if self.min_per_class < 1:
            raise ConfigurationError("min_per_class must be >= 1")


@dataclass
class DatasetBundle:
    """A named train/test dataset with a fixed label vocabulary.

    `norm_stats` holds per-channel (mean, std) computed from the train split
    over non-padded positions only; it is filled in automatically.
    """

    name: str
    train: list[TimeSeriesInstance]
    test: list[TimeSeriesInstance]
    num_classes: int
    label_texts: list[str]
    num_channels: int
    max_length: int
    norm_stats: tuple[np.ndarray, np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.label_texts) != self.num_classes:
            raise ValueError("label_texts must have one entry per class")
        if any(not t for t in self.label_texts):
            raise ValueError("label_texts must be non-empty")
        if len(set(self.label_texts)) != self.num_classes:
            raise ValueError("label_texts must be pairwise distinct")
        for inst in list(self.train) + list(self.test):
            if inst.num_channels != self.num_channels:
                raise ValueError("instance channel count differs from bundle")
            if not (0 <= inst.label_id < self.num_classes):
                raise ValueError(f"label_id {inst.label_id} out of range")
        if self.norm_stats is None:
            self.norm_stats = channel_stats(self.train, self.num_channels)


def channel_stats(instances: Sequence[TimeSeriesInstance], num_channels: int):
    """Per-channel (mean, std) over the non-padded positions of `instances`."""
    if not instances:
        raise ValueError("cannot compute stats of an empty split")
    cols = [inst.values[:, : inst.length] for inst in instances]
    flat = np.concatenate(cols, axis=1)
    return flat.mean(axis=1), flat.std(axis=1)


# ---------------------------------------------------------------------------
# .ts subset parsing
#
# Supported tags: @problemName, @univariate, @dimensions, @seriesLength,
# @equalLength, @classLabel, @data.  Data lines hold one instance each:
# channels separated by ':', values by ',', class label last.
# ---------------------------------------------------------------------------

_KNOWN_TAGS = {
    "problemname",
    "univariate",
    "dimensions",
    "serieslength",
    "equallength",
    "classlabel",
    "data",
}


def _parse_ts_file(path) -> tuple[str, list[tuple[list[list[float]], str]], list[str]]:
    """Parse one .ts file into (problem name, raw instances, valid label list).

    Raw instances keep per-channel value lists and the label string; all
    structural errors name the 1-based line number.
    """
    name = ""
    declared_dims = None
    declared_len = None
    class_labels: list[str] = []
    instances: list[tuple[list[list[float]], str]] = []
    in_data = False
    num_dims = None

    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("@"):
                if in_data:
                    raise TsParseError(f"{path}: line {lineno}: metadata after @data")
                tokens = line.split()
                tag = tokens[0][1:].lower()
                if tag not in _KNOWN_TAGS:
                    raise TsParseError(f"{path}: line {lineno}: unknown tag {tokens[0]}")
                if tag == "data":
                    if len(tokens) != 1:
                        raise TsParseError(f"{path}: line {lineno}: @data takes no value")
                    in_data = True
                    continue
                if len(tokens) < 2:
                    raise TsParseError(f"{path}: line {lineno}: {tokens[0]} needs a value")
                if tag == "problemname":
                    name = tokens[1]
                elif tag == "dimensions":
                    declared_dims = _int_value(tokens[1], path, lineno)
                elif tag == "serieslength":
                    declared_len = _int_value(tokens[1], path, lineno)
                elif tag == "classlabel":
                    if tokens[1].lower() == "true":
                        if len(tokens) < 3:
                            raise TsParseError(
                                f"{path}: line {lineno}: @classLabel true needs label values"
                            )
                        class_labels = tokens[2:]
                    elif tokens[1].lower() == "false":
                        raise TsParseError(
                            f"{path}: line {lineno}: classification requires @classLabel true"
                        )
                    else:
                        raise TsParseError(f"{path}: line {lineno}: invalid @classLabel value")
                # @univariate and @equalLength are accepted and checked against
                # the data itself rather than trusted.
                continue

            if not in_data:
                raise TsParseError(f"{path}: line {lineno}: data before @data tag")

            parts = line.split(":")
            if len(parts) < 2:
                raise TsParseError(f"{path}: line {lineno}: missing class label field")
            label = parts[-1].strip()
            if not label:
                raise TsParseError(f"{path}: line {lineno}: empty class label")
            if class_labels and label not in class_labels:
                raise TsParseError(f"{path}: line {lineno}: class label {label!r} not declared")
            dims = parts[:-1]
            if num_dims is None:
                num_dims = len(dims)
                if declared_dims is not None and declared_dims != num_dims:
                    raise TsParseError(
                        f"{path}: line {lineno}: @dimensions says {declared_dims}, "
                        f"data line has {num_dims}"
                    )
            elif len(dims) != num_dims:
                raise TsParseError(
                    f"{path}: line {lineno}: expected {num_dims} dimensions, got {len(dims)}"
                )
            channels = []
            dim_len = None
            for d, dim in enumerate(dims):
                try:
                    vals = [float(v) for v in dim.split(",")]
                except ValueError:
                    raise TsParseError(
                        f"{path}: line {lineno}: non-numeric value in dimension {d + 1}"
                    ) from None
                if not all(math.isfinite(v) for v in vals):
                    raise TsParseError(
                        f"{path}: line {lineno}: non-finite value in dimension {d + 1}"
                    )
                if dim_len is None:
                    dim_len = len(vals)
                elif len(vals) != dim_len:
                    raise TsParseError(
                        f"{path}: line {lineno}: dimensions have unequal lengths"
                    )
                channels.append(vals)
            if declared_len is not None and dim_len != declared_len:
                raise TsParseError(
                    f"{path}: line {lineno}: @seriesLength says {declared_len}, got {dim_len}"
                )
            instances.append((channels, label))

    if not in_data:
        raise TsParseError(f"{path}: missing @data tag")
    if not instances:
        raise TsParseError(f"{path}: empty data section")
    return name, instances, class_labels


def _int_value(token: str, path, lineno: int) -> int:
    try:
        return int(token)
    except ValueError:
        raise TsParseError(f"{path}: line {lineno}: expected integer, got {token!r}") from None


def parse_ts_dataset(train_path, test_path) -> DatasetBundle:
    """Load a train/test pair of .ts files into a DatasetBundle.

    Label ids follow first appearance in the train data section; a test label
    never seen in train is a parse error.
    """
    name, train_raw, _ = _parse_ts_file(train_path)
    test_name, test_raw, _ = _parse_ts_file(test_path)
    if not name:
        name = test_name or Path(str(train_path)).stem

    label_order: list[str] = []
    for _, label in train_raw:
        if label not in label_order:
            label_order.append(label)
    label_to_id = {lab: i for i, lab in enumerate(label_order)}
    for channels, label in test_raw:
        if label not in label_to_id:
            raise TsParseError(f"{test_path}: unknown class label {label!r} in test split")

    num_channels = len(train_raw[0][0])
    if len(test_raw[0][0]) != num_channels:
        raise TsParseError(
            f"{test_path}: test split has {len(test_raw[0][0])} dimensions, train has {num_channels}"
        )
    max_length = max(len(ch[0]) for ch, _ in train_raw + test_raw)

    def build(raw):
        out = []
        for channels, label in raw:
            length = len(channels[0])
            values = np.zeros((num_channels, max_length), dtype=np.float64)
            values[:, :length] = np.asarray(channels, dtype=np.float64)
            out.append(TimeSeriesInstance(values, label_to_id[label], length))
        return out

    return DatasetBundle(
        name=name,
        train=build(train_raw),
        test=build(test_raw),
        num_classes=len(label_order),
        label_texts=list(label_order),
        num_channels=num_channels,
        max_length=max_length,
    )


def write_ts_dataset(bundle: DatasetBundle, train_path, test_path) -> None:
    """Serialize a bundle back to the supported .ts subset (round-trip aid)."""
    equal = all(i.length == bundle.max_length for i in bundle.train + bundle.test)
    for path, split in ((train_path, bundle.train), (test_path, bundle.test)):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"@problemName {bundle.name}\n")
            fh.write(f"@univariate {'true' if bundle.num_channels == 1 else 'false'}\n")
            fh.write(f"@dimensions {bundle.num_channels}\n")
            fh.write(f"@equalLength {'true' if equal else 'false'}\n")
            if equal:
                fh.write(f"@seriesLength {bundle.max_length}\n")
            fh.write("@classLabel true " + " ".join(bundle.label_texts) + "\n")
            fh.write("@data\n")
            for inst in split:
                dims = [
                    ",".join(repr(float(v)) for v in inst.values[c, : inst.length])
                    for c in range(bundle.num_channels)
                ]
                fh.write(":".join(dims) + ":" + bundle.label_texts[inst.label_id] + "\n")


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


def generate_synthetic(
    num_classes: int,
    per_class_train: int,
    per_class_test: int,
    channels: int,
    length: int,
    noise_sigma: float,
    seed: int,
) -> DatasetBundle:
    """Sinusoid classification stand-in: class k oscillates at 2**k cycles per
    window (channel c phase-shifted by c*pi/2), plus N(0, noise_sigma) noise."""
    if min(num_classes, per_class_train, per_class_test, channels, length) < 1:
        raise ConfigurationError("all synthetic counts must be >= 1")
    if noise_sigma < 0:
        raise ConfigurationError("noise_sigma must be >= 0")

    rng = np.random.default_rng(seed)
    t = np.arange(length, dtype=np.float64) / length
    waveforms = np.empty((num_classes, channels, length), dtype=np.float64)
    for k in range(num_classes):
        for c in range(channels):
            waveforms[k, c] = np.sin(2.0 * np.pi * (2.0**k) * t + c * np.pi / 2.0)

    def draw(per_class):
        out = []
        for k in range(num_classes):
            for _ in range(per_class):
                noise = rng.normal(0.0, noise_sigma, size=(channels, length)) if noise_sigma > 0 else 0.0
                out.append(TimeSeriesInstance(waveforms[k] + noise, k, length))
        return out

    return DatasetBundle(
        name="synthetic",
        train=draw(per_class_train),
        test=draw(per_class_test),
        num_classes=num_classes,
        label_texts=[f"class-{k} frequency pattern" for k in range(num_classes)],
        num_channels=channels,
        max_length=length,
    )


# ---------------------------------------------------------------------------
# Normalization / subsampling / padding
# ---------------------------------------------------------------------------


def zscore_normalize(bundle: DatasetBundle) -> DatasetBundle:
    """Z-score both splits with per-channel stats of the bundle's train split.

    Zero-variance channels divide by STD_FLOOR instead, mapping them to ~0.
    Padding positions stay zero.
    """
    mean, std = bundle.norm_stats
    divisor = np.where(std < STD_FLOOR, STD_FLOOR, std)

    def transform(inst: TimeSeriesInstance) -> TimeSeriesInstance:
        values = np.zeros_like(inst.values)
        real = inst.values[:, : inst.length]
        values[:, : inst.length] = (real - mean[:, None]) / divisor[:, None]
        return TimeSeriesInstance(values, inst.label_id, inst.length)

    return DatasetBundle(
        name=bundle.name,
        train=[transform(i) for i in bundle.train],
        test=[transform(i) for i in bundle.test],
        num_classes=bundle.num_classes,
        label_texts=list(bundle.label_texts),
        num_channels=bundle.num_channels,
        max_length=bundle.max_length,
    )


def few_shot_subsample(bundle: DatasetBundle, spec: SplitSpec) -> DatasetBundle:
    """Stratified train subsample of size max(floor(fraction*N), C*min_per_class).

    Per-class counts follow proportional allocation with largest-remainder
    rounding, floored at min_per_class. Deterministic in spec.seed; the test
    split is untouched.
    """
    n = len(bundle.train)
    c = bundle.num_classes
    if n < c * spec.min_per_class:
        raise ConfigurationError(
            f"train split of {n} cannot hold {spec.min_per_class} per class over {c} classes"
        )
    target = max(int(math.floor(spec.fraction * n)), c * spec.min_per_class)

    by_class: dict[int, list[int]] = {k: [] for k in range(c)}
    for idx, inst in enumerate(bundle.train):
        by_class[inst.label_id].append(idx)
    for k, idxs in by_class.items():
        if len(idxs) < spec.min_per_class:
            raise ConfigurationError(
                f"class {k} has only {len(idxs)} train instances, need {spec.min_per_class}"
            )

    alloc = {k: max(spec.min_per_class, int(math.floor(spec.fraction * len(by_class[k])))) for k in by_class}
    for k in alloc:
        alloc[k] = min(alloc[k], len(by_class[k]))
    # largest-remainder adjustment toward the target size, stable tie-break on class id
    while sum(alloc.values()) < target:
        candidates = [k for k in alloc if alloc[k] < len(by_class[k])]
        if not candidates:
            break
        k = max(candidates, key=lambda k: (spec.fraction * len(by_class[k]) - alloc[k], -k))
        alloc[k] += 1
    while sum(alloc.values()) > target:
        candidates = [k for k in alloc if alloc[k] > spec.min_per_class]
        if not candidates:
            break
        k = max(candidates, key=lambda k: (alloc[k] - spec.fraction * len(by_class[k]), -k))
        alloc[k] -= 1

    rng = np.random.default_rng(spec.seed)
    chosen: list[int] = []
    for k in range(c):
        idxs = np.array(by_class[k])
        rng.shuffle(idxs)
        chosen.extend(idxs[: alloc[k]].tolist())

    return DatasetBundle(
        name=bundle.name,
        train=[bundle.train[i] for i in chosen],
        test=list(bundle.test),
        num_classes=bundle.num_classes,
        label_texts=list(bundle.label_texts),
        num_channels=bundle.num_channels,
        max_length=bundle.max_length,
    )


def pad_to_length(instance: TimeSeriesInstance, target: int):
    """Right-pad with zeros to `target` timesteps; mask marks real positions."""
    if target < instance.length:
        raise ValueError(f"target {target} < true length {instance.length}")
    values = np.zeros((instance.num_channels, target), dtype=np.float64)
    values[:, : instance.values.shape[1]] = instance.values
    mask = np.zeros(target, dtype=bool)
    mask[: instance.length] = True
    return TimeSeriesInstance(values, instance.label_id, instance.length), mask


def padding_mask(instance: TimeSeriesInstance) -> np.ndarray:
    mask = np.zeros(instance.values.shape[1], dtype=bool)
    mask[: instance.length] = True
    return mask


# ---------------------------------------------------------------------------
# JSON-lines interchange
# ---------------------------------------------------------------------------


def write_jsonl(bundle: DatasetBundle, train_path, test_path) -> None:
    """Write both splits as one JSON record per line:
    {name, values (channel-major), label_id, label_text}."""
    for path, split, tag in ((train_path, bundle.train, "train"), (test_path, bundle.test, "test")):
        with open(path, "w", encoding="utf-8") as fh:
            for i, inst in enumerate(split):
                rec = {
                    "name": f"{bundle.name}-{tag}-{i}",
                    "values": inst.values[:, : inst.length].tolist(),
                    "label_id": inst.label_id,
                    "label_text": bundle.label_texts[inst.label_id],
                }
                fh.write(json.dumps(rec) + "\n")


def read_jsonl_instances(path) -> tuple[list[TimeSeriesInstance], dict[int, str], int]:
    """Read interchange records; returns (instances at true length, id->text map, max length)."""
    instances = []
    labels: dict[int, str] = {}
    max_len = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                values = np.asarray(rec["values"], dtype=np.float64)
                label_id = int(rec["label_id"])
                text = str(rec["label_text"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                raise TsParseError(f"{path}: line {lineno}: malformed interchange record") from None
            if values.ndim != 2:
                raise TsParseError(f"{path}: line {lineno}: values must be channel-major 2d")
            prior = labels.setdefault(label_id, text)
            if prior != text:
                raise TsParseError(f"{path}: line {lineno}: label_id {label_id} has two texts")
            instances.append(TimeSeriesInstance(values, label_id, values.shape[1]))
            max_len = max(max_len, values.shape[1])
    if not instances:
        raise TsParseError(f"{path}: no interchange records")
    return instances, labels, max_len
