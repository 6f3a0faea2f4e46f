"""Dataset layer: .ts parsing, synthetic generation, normalization,
stratified subsampling, padding, and the JSON-lines interchange."""

import json
import math

import numpy as np
import pytest

from conftest import make_bundle, make_instance
from tsgen.data import (
    DatasetBundle,
    SplitSpec,
    TimeSeriesInstance,
    few_shot_subsample,
    generate_synthetic,
    pad_to_length,
    padding_mask,
    parse_ts_dataset,
    read_jsonl_instances,
    write_jsonl,
    write_ts_dataset,
    zscore_normalize,
)
from tsgen.errors import ConfigurationError, TsParseError


# --- independent oracles ---------------------------------------------------


def nearest_centroid_accuracy(bundle):
    """Classify test instances by nearest train-class centroid on raw values."""
    flat = np.stack([inst.values.reshape(-1) for inst in bundle.train])
    labels = np.array([inst.label_id for inst in bundle.train])
    centroids = np.stack([flat[labels == k].mean(axis=0) for k in range(bundle.num_classes)])
    correct = 0
    for inst in bundle.test:
        dist = ((centroids - inst.values.reshape(-1)) ** 2).sum(axis=1)
        correct += int(np.argmin(dist)) == inst.label_id
    return correct / len(bundle.test)


def largest_remainder_counts(class_sizes, fraction, min_per_class, target):
    """Standalone apportionment: proportional floors, then ±1 adjustments by
    largest remainder (ties toward the lowest class id)."""
    alloc = [min(len_k, max(min_per_class, math.floor(fraction * len_k))) for len_k in class_sizes]
    while sum(alloc) < target:
        cands = [k for k in range(len(alloc)) if alloc[k] < class_sizes[k]]
        k = max(cands, key=lambda k: (fraction * class_sizes[k] - alloc[k], -k))
        alloc[k] += 1
    while sum(alloc) > target:
        cands = [k for k in range(len(alloc)) if alloc[k] > min_per_class]
        k = max(cands, key=lambda k: (alloc[k] - fraction * class_sizes[k], -k))
        alloc[k] -= 1
    return alloc


# --- .ts parsing -----------------------------------------------------------


def test_fixture_bundle_shape(fixtures_dir):
    bundle = parse_ts_dataset(fixtures_dir / "toy_TRAIN.ts", fixtures_dir / "toy_TEST.ts")
    assert bundle.num_channels == 2
    assert bundle.max_length == 4
    assert bundle.num_classes == 2
    assert bundle.label_texts == ["a", "b"]
    assert len(bundle.train) == 2 and len(bundle.test) == 2
    assert bundle.train[0].values[0].tolist() == [1.0, 2.0, 3.0, 4.0]
    assert bundle.train[1].label_id == 1


def test_fixture_round_trip(fixtures_dir, tmp_path):
    bundle = parse_ts_dataset(fixtures_dir / "toy_TRAIN.ts", fixtures_dir / "toy_TEST.ts")
    write_ts_dataset(bundle, tmp_path / "rt_TRAIN.ts", tmp_path / "rt_TEST.ts")
    again = parse_ts_dataset(tmp_path / "rt_TRAIN.ts", tmp_path / "rt_TEST.ts")
    assert again.name == bundle.name
    assert again.label_texts == bundle.label_texts
    for a, b in zip(bundle.train + bundle.test, again.train + again.test):
        assert a.label_id == b.label_id and a.length == b.length
        np.testing.assert_array_equal(a.values, b.values)


def _write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


HEADER = "@problemName t\n@dimensions 1\n@classLabel true a b\n"


def test_empty_data_section_errors(tmp_path):
    path = _write(tmp_path, "bad.ts", HEADER + "@data\n")
    with pytest.raises(TsParseError, match="empty data"):
        parse_ts_dataset(path, path)


def test_missing_data_tag_errors(tmp_path):
    path = _write(tmp_path, "bad.ts", HEADER)
    with pytest.raises(TsParseError, match="missing @data"):
        parse_ts_dataset(path, path)


def test_unknown_tag_errors(tmp_path):
    path = _write(tmp_path, "bad.ts", "@nonsense x\n" + HEADER + "@data\n1.0:a\n")
    with pytest.raises(TsParseError, match="line 1"):
        parse_ts_dataset(path, path)


def test_metadata_after_data_errors(tmp_path):
    path = _write(tmp_path, "bad.ts", HEADER + "@data\n1.0:a\n@dimensions 1\n")
    with pytest.raises(TsParseError, match="metadata after @data"):
        parse_ts_dataset(path, path)


def test_undeclared_label_errors(tmp_path):
    path = _write(tmp_path, "bad.ts", HEADER + "@data\n1.0:zzz\n")
    with pytest.raises(TsParseError, match="not declared"):
        parse_ts_dataset(path, path)


def test_non_numeric_value_errors(tmp_path):
    path = _write(tmp_path, "bad.ts", HEADER + "@data\n1.0,oops:a\n")
    with pytest.raises(TsParseError, match="non-numeric"):
        parse_ts_dataset(path, path)


def test_non_finite_value_errors(tmp_path):
    path = _write(tmp_path, "bad.ts", HEADER + "@data\n1.0,nan:a\n")
    with pytest.raises(TsParseError, match="non-finite"):
        parse_ts_dataset(path, path)


def test_ragged_dimensions_error(tmp_path):
    text = "@problemName t\n@dimensions 2\n@classLabel true a\n@data\n1.0,2.0:3.0:a\n"
    path = _write(tmp_path, "bad.ts", text)
    with pytest.raises(TsParseError, match="unequal lengths"):
        parse_ts_dataset(path, path)


def test_unknown_test_label_errors(tmp_path):
    train = _write(tmp_path, "tr.ts", HEADER + "@data\n1.0:a\n")
    test = _write(tmp_path, "te.ts", HEADER + "@data\n1.0:b\n")
    with pytest.raises(TsParseError, match="unknown class label"):
        parse_ts_dataset(train, test)


def test_unequal_series_lengths_pad_to_max(tmp_path):
    text = "@problemName t\n@dimensions 1\n@equalLength false\n@classLabel true a b\n@data\n1.0,2.0,3.0:a\n4.0,5.0:b\n"
    path = _write(tmp_path, "var.ts", text)
    bundle = parse_ts_dataset(path, path)
    assert bundle.max_length == 3
    short = bundle.train[1]
    assert short.length == 2
    assert short.values.shape == (1, 3)
    assert short.values[0, 2] == 0.0


# --- synthetic generator ---------------------------------------------------


def test_synthetic_shapes():
    bundle = generate_synthetic(3, 10, 5, 2, 128, 0.1, 7)
    assert len(bundle.train) == 30 and len(bundle.test) == 15
    assert all(inst.values.shape == (2, 128) for inst in bundle.train)
    assert bundle.num_classes == 3
    assert bundle.name == "synthetic"
    assert bundle.label_texts[0] == "class-0 frequency pattern"


def test_synthetic_determinism():
    for sigma in (0.0, 0.1):
        a = generate_synthetic(2, 4, 2, 2, 32, sigma, 11)
        b = generate_synthetic(2, 4, 2, 2, 32, sigma, 11)
        for x, y in zip(a.train + a.test, b.train + b.test):
            np.testing.assert_array_equal(x.values, y.values)


def test_synthetic_noiseless_nearest_centroid():
    bundle = generate_synthetic(3, 6, 4, 2, 64, 0.0, 5)
    assert nearest_centroid_accuracy(bundle) == 1.0


def test_synthetic_rejects_bad_counts():
    with pytest.raises(ConfigurationError):
        generate_synthetic(0, 1, 1, 1, 8, 0.0, 0)
    with pytest.raises(ConfigurationError):
        generate_synthetic(2, 1, 1, 1, 8, -0.5, 0)


# --- z-score normalization --------------------------------------------------


def test_zscore_train_moments_recomputed():
    bundle = zscore_normalize(generate_synthetic(3, 8, 4, 2, 64, 0.2, 9))
    flat = np.concatenate([inst.values for inst in bundle.train], axis=1)
    np.testing.assert_allclose(flat.mean(axis=1), 0.0, atol=1e-9)
    np.testing.assert_allclose(flat.std(axis=1), 1.0, atol=1e-9)


def test_zscore_constant_channel_maps_to_zero():
    insts = [make_instance(np.full((2, 6), [[3.0], [float(i)]]), i % 2) for i in range(4)]
    bundle = DatasetBundle("c", insts, insts[:1], 2, ["x", "y"], 2, 6)
    out = zscore_normalize(bundle)
    for inst in out.train:
        np.testing.assert_array_equal(inst.values[0], np.zeros(6))


def test_zscore_idempotent():
    once = zscore_normalize(generate_synthetic(2, 6, 3, 1, 32, 0.3, 2))
    twice = zscore_normalize(once)
    for a, b in zip(once.train + once.test, twice.train + twice.test):
        np.testing.assert_allclose(a.values, b.values, atol=1e-6)


def test_zscore_leaves_padding_zero():
    full = make_instance(np.ones((1, 4)) * 5.0, 0)
    short = make_instance([[5.0, 7.0, 0.0, 0.0]], 1, length=2)
    bundle = DatasetBundle("p", [full, short], [short], 2, ["x", "y"], 1, 4)
    out = zscore_normalize(bundle)
    assert out.train[1].values[0, 2] == 0.0 and out.train[1].values[0, 3] == 0.0
    # stats must come from real positions only: mean of (5,5,5,5,5,7)
    assert abs(bundle.norm_stats[0][0] - np.mean([5, 5, 5, 5, 5, 7])) < 1e-12


# --- few-shot subsampling ---------------------------------------------------


def _sized_bundle(class_sizes, length=6):
    train = []
    for k, size in enumerate(class_sizes):
        for i in range(size):
            train.append(make_instance(np.full((1, length), float(k * 100 + i)), k))
    test = [make_instance(np.zeros((1, length)), k) for k in range(len(class_sizes))]
    return DatasetBundle(
        "sized", train, test, len(class_sizes),
        [f"class {k}" for k in range(len(class_sizes))], 1, length,
    )


def test_few_shot_137_instances_fraction_fifth():
    sizes = [34, 34, 34, 35]
    bundle = _sized_bundle(sizes)
    out = few_shot_subsample(bundle, SplitSpec(fraction=0.2, seed=3, min_per_class=1))
    assert len(out.train) == 27  # floor(0.2 * 137)
    counts = [0] * 4
    for inst in out.train:
        counts[inst.label_id] += 1
    assert all(c >= 1 for c in counts)
    assert counts == largest_remainder_counts(sizes, 0.2, 1, 27)


def test_few_shot_target_arithmetic_random():
    rng = np.random.default_rng(0)
    for _ in range(25):
        sizes = [int(rng.integers(2, 40)) for _ in range(int(rng.integers(2, 6)))]
        fraction = float(rng.uniform(0.05, 1.0))
        bundle = _sized_bundle(sizes)
        out = few_shot_subsample(bundle, SplitSpec(fraction=fraction, seed=1, min_per_class=1))
        expected = max(math.floor(fraction * sum(sizes)), len(sizes))
        expected = min(expected, sum(sizes))
        assert len(out.train) == expected
        counts = [0] * len(sizes)
        for inst in out.train:
            counts[inst.label_id] += 1
        assert counts == largest_remainder_counts(sizes, fraction, 1, expected)


def test_few_shot_fraction_one_is_permutation():
    bundle = _sized_bundle([5, 7])
    out = few_shot_subsample(bundle, SplitSpec(fraction=1.0, seed=9))
    orig = sorted(inst.values.tobytes() for inst in bundle.train)
    kept = sorted(inst.values.tobytes() for inst in out.train)
    assert orig == kept


def test_few_shot_deterministic():
    bundle = _sized_bundle([10, 12, 8])
    a = few_shot_subsample(bundle, SplitSpec(fraction=0.4, seed=21))
    b = few_shot_subsample(bundle, SplitSpec(fraction=0.4, seed=21))
    assert [i.values.tobytes() for i in a.train] == [i.values.tobytes() for i in b.train]


def test_few_shot_unsatisfiable_min_errors():
    bundle = _sized_bundle([3, 3])
    with pytest.raises(ConfigurationError):
        few_shot_subsample(bundle, SplitSpec(fraction=0.5, seed=0, min_per_class=4))


def test_split_spec_validation():
    with pytest.raises(ConfigurationError):
        SplitSpec(fraction=0.0, seed=0)
    with pytest.raises(ConfigurationError):
        SplitSpec(fraction=1.5, seed=0)
    with pytest.raises(ConfigurationError):
        SplitSpec(fraction=0.5, seed=0, min_per_class=0)


# --- padding -----------------------------------------------------------------


def test_pad_identity():
    inst = make_instance([[1.0, 2.0, 3.0, 4.0]], 0)
    padded, mask = pad_to_length(inst, 4)
    np.testing.assert_array_equal(padded.values, inst.values)
    assert mask.tolist() == [True] * 4


def test_pad_extends_with_zeros():
    inst = make_instance([[1.0, 2.0, 3.0]], 0)
    padded, mask = pad_to_length(inst, 5)
    assert padded.values[0].tolist() == [1.0, 2.0, 3.0, 0.0, 0.0]
    assert mask.tolist() == [True, True, True, False, False]
    with pytest.raises(ValueError):
        pad_to_length(inst, 2)


def test_padding_mask_counts_true_length():
    rng = np.random.default_rng(4)
    for _ in range(50):
        length = int(rng.integers(1, 20))
        target = length + int(rng.integers(0, 10))
        inst, mask = pad_to_length(make_instance(rng.normal(size=(2, length)), 0), target)
        assert int(mask.sum()) == length
        assert int(padding_mask(inst).sum()) == length


# --- JSON-lines interchange ---------------------------------------------------


def test_jsonl_round_trip(tmp_path):
    bundle = make_bundle(per_class=3, num_classes=2, channels=2, length=6)
    write_jsonl(bundle, tmp_path / "train.jsonl", tmp_path / "test.jsonl")
    instances, labels, max_len = read_jsonl_instances(tmp_path / "train.jsonl")
    assert len(instances) == len(bundle.train)
    assert max_len == 6
    assert labels == {0: "kind 0 series", 1: "kind 1 series"}
    for orig, back in zip(bundle.train, instances):
        np.testing.assert_allclose(back.values, orig.values[:, : orig.length])


def test_jsonl_names_are_stable(tmp_path):
    bundle = make_bundle(per_class=2)
    write_jsonl(bundle, tmp_path / "train.jsonl", tmp_path / "test.jsonl")
    first = json.loads((tmp_path / "train.jsonl").read_text().splitlines()[0])
    assert first["name"] == "toy-train-0"


def test_jsonl_malformed_record_errors(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"values": [[1.0]], "label_id": 0}\n')
    with pytest.raises(TsParseError, match="malformed"):
        read_jsonl_instances(path)


def test_jsonl_conflicting_label_text_errors(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(
        '{"values": [[1.0]], "label_id": 0, "label_text": "x"}\n'
        '{"values": [[2.0]], "label_id": 0, "label_text": "y"}\n'
    )
    with pytest.raises(TsParseError, match="two texts"):
        read_jsonl_instances(path)


# --- instance / bundle validation ----------------------------------------------


def test_instance_validation():
    with pytest.raises(ValueError):
        TimeSeriesInstance(np.zeros(4), 0, 4)  # not 2-d
    with pytest.raises(ValueError):
        TimeSeriesInstance(np.array([[np.inf]]), 0, 1)
    with pytest.raises(ValueError):
        TimeSeriesInstance(np.zeros((1, 3)), 0, 5)  # length beyond data


def test_bundle_validation():
    inst = make_instance(np.zeros((1, 4)), 0)
    with pytest.raises(ValueError):
        DatasetBundle("b", [inst], [inst], 2, ["only one"], 1, 4)
    with pytest.raises(ValueError):
        DatasetBundle("b", [inst], [inst], 1, [""], 1, 4)
    bad = make_instance(np.zeros((1, 4)), 3)
    with pytest.raises(ValueError):
        DatasetBundle("b", [bad], [], 2, ["x", "y"], 1, 4)
