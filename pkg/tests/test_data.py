import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slt_sim.data import (Dataset, PartitionSpec, SynthSpec, encode_idx, hflip, load_idx,
                          parse_idx, partition, read_idx, synth_gen, write_idx)
from slt_sim.errors import ConfigError, IdxParseError, UsageError

# Four 2x3 grey images and their labels, written out byte by byte.
IMAGES_HEX = (
    "00000803"                  # magic: unsigned byte, 3 dims
    "00000004" "00000002" "00000003"
    "000000ffff00"              # sample 0
    "ff80ff008000"              # sample 1
    "010203040506"              # sample 2
    "fffffffefefe"              # sample 3
)
LABELS_HEX = "00000801" "00000004" "03000109"
IMAGES_WANT = np.array([
    [[0, 0, 0], [255, 255, 0]],
    [[255, 128, 255], [0, 128, 0]],
    [[1, 2, 3], [4, 5, 6]],
    [[255, 255, 255], [254, 254, 254]],
], dtype=np.float32) / 255.0


def _chi2_quantile(dof, z):
    # Wilson-Hilferty approximation
    return dof * (1 - 2 / (9 * dof) + z * math.sqrt(2 / (9 * dof))) ** 3


# -- synthetic data ------------------------------------------------------


def test_synth_is_deterministic():
    spec = SynthSpec(classes=3, train_per_class=10, test_per_class=5)
    a_tr, a_te = synth_gen(spec, 7)
    b_tr, b_te = synth_gen(spec, 7)
    assert a_tr.x.tobytes() == b_tr.x.tobytes() and a_te.y.tobytes() == b_te.y.tobytes()
    c_tr, _ = synth_gen(spec, 8)
    assert c_tr.x.tobytes() != a_tr.x.tobytes()


def test_synth_shapes_and_priors():
    spec = SynthSpec(classes=4, train_per_class=12, test_per_class=6, image_shape=(2, 8, 8))
    train, test = synth_gen(spec, 0)
    assert train.x.shape == (48, 2, 8, 8) and train.x.dtype == np.float32
    assert test.x.shape == (24, 2, 8, 8)
    assert np.bincount(train.y).tolist() == [12] * 4
    assert np.bincount(test.y).tolist() == [6] * 4
    assert (train.split, test.split) == ("train", "test")


def test_synth_splits_are_disjoint():
    train, test = synth_gen(SynthSpec(classes=3, train_per_class=30, test_per_class=30), 1)
    seen = {row.tobytes() for row in train.x}
    assert not any(row.tobytes() in seen for row in test.x)


def test_two_separated_classes_are_linearly_separable():
    spec = SynthSpec(classes=2, train_per_class=300, test_per_class=200, image_shape=(3, 16, 16),
                     separation=3.0, modes=1)
    train, test = synth_gen(spec, 3)

    def design(x):
        flat = x.reshape(len(x), -1).astype(np.float64)
        return np.hstack([flat, np.ones((len(x), 1))])

    target = np.where(train.y == 1, 1.0, -1.0)
    w, *_ = np.linalg.lstsq(design(train.x), target, rcond=None)
    pred = (design(test.x) @ w > 0).astype(int)
    assert (pred == test.y).mean() > 0.95


@pytest.mark.parametrize("kwargs", [
    {"classes": 1}, {"train_per_class": 0}, {"image_shape": (3, 8)}, {"difficulty": -1.0},
    {"separation": 0.0}, {"modes": 0},
])
def test_synth_spec_validation(kwargs):
    with pytest.raises(ConfigError):
        SynthSpec(**kwargs)


def test_dataset_validation():
    with pytest.raises(UsageError):
        Dataset(np.zeros((3, 1, 2, 2)), np.zeros(2, dtype=int), 2)
    with pytest.raises(UsageError):
        Dataset(np.zeros((2, 1, 2, 2)), np.array([0, 2]), 2)
    with pytest.raises(UsageError):
        Dataset(np.zeros((2, 4)), np.array([0, 1]), 2)


def test_hflip():
    x = np.arange(2 * 1 * 2 * 3, dtype=np.float32).reshape(2, 1, 2, 3)
    rng = np.random.default_rng(0)
    assert hflip(x, rng, p=0.0) is x
    flipped = hflip(x, rng, p=1.0)
    assert np.array_equal(flipped, x[..., ::-1])
    assert np.array_equal(x[0, 0, 0], [0, 1, 2])


# -- IDX -----------------------------------------------------------------


def test_idx_fixture_decodes_exactly(tmp_path):
    img, lab = tmp_path / "img.idx", tmp_path / "lab.idx"
    img.write_bytes(bytes.fromhex(IMAGES_HEX))
    lab.write_bytes(bytes.fromhex(LABELS_HEX))
    ds = load_idx(img, lab, num_classes=10)
    assert ds.x.shape == (4, 1, 2, 3)
    assert np.array_equal(ds.x[:, 0], IMAGES_WANT)
    assert ds.y.tolist() == [3, 0, 1, 9]
    assert ds.x.min() >= 0 and ds.x.max() <= 1


def test_idx_raw_dtype():
    arr = parse_idx(bytes.fromhex(LABELS_HEX))
    assert arr.dtype == np.uint8 and arr.tolist() == [3, 0, 1, 9]


def test_load_idx_without_labels(tmp_path):
    img = tmp_path / "img.idx"
    img.write_bytes(bytes.fromhex(IMAGES_HEX))
    ds = load_idx(img)
    assert ds.y.tolist() == [0, 0, 0, 0] and ds.num_classes == 1


@pytest.mark.parametrize("buf, offset", [
    (b"", 0),
    (bytes.fromhex("0100080100000001ff"), 0),          # bad magic
    (bytes.fromhex("0000070100000001ff"), 2),          # unknown type
    (bytes.fromhex("00000800"), 3),                     # zero dims
    (bytes.fromhex("000008020000000a"), 8),            # truncated header
    (bytes.fromhex("0000080100000003ffff"), 10),       # truncated data
    (bytes.fromhex("0000080100000001ffee"), 9),        # trailing bytes
])
def test_idx_errors_carry_offsets(buf, offset):
    with pytest.raises(IdxParseError) as info:
        parse_idx(buf)
    assert info.value.offset == offset


@settings(max_examples=30)
@given(dtype=st.sampled_from([np.uint8, np.int8, np.int16, np.int32, np.float32, np.float64]),
       shape=st.lists(st.integers(1, 4), min_size=1, max_size=4), seed=st.integers(0, 99))
def test_idx_round_trip(dtype, shape, seed):
    arr = (np.random.default_rng(seed).standard_normal(shape) * 50).astype(dtype)
    back = parse_idx(encode_idx(arr))
    assert back.dtype == np.dtype(dtype) and np.array_equal(back, arr)


def test_idx_file_round_trip(tmp_path):
    arr = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    write_idx(tmp_path / "a.idx", arr)
    assert np.array_equal(read_idx(tmp_path / "a.idx"), arr)


def test_idx_rejects_unsupported_dtype():
    with pytest.raises(UsageError):
        encode_idx(np.zeros(3, dtype=np.uint32))


# -- partitioning --------------------------------------------------------


def _labels(counts):
    y = np.repeat(np.arange(len(counts)), counts)
    return Dataset(np.zeros((len(y), 1, 1, 1), np.float32), y, len(counts))


@pytest.mark.parametrize("kind", ["iid", "dirichlet"])
@pytest.mark.parametrize("n, devices", [(1000, 20), (1003, 20), (57, 7)])
def test_shards_equal_and_disjoint(kind, n, devices):
    ds = _labels(np.full(10, n // 10) + (np.arange(10) < n % 10))
    shards = partition(ds, PartitionSpec(kind, 0.3, devices, seed=2))
    assert len(shards) == devices
    assert {len(s) for s in shards} == {n // devices}
    flat = np.concatenate(shards)
    assert len(np.unique(flat)) == len(flat) == devices * (n // devices)
    assert all(np.all(np.diff(s) > 0) for s in shards)


def test_partition_is_deterministic():
    ds = _labels([50] * 10)
    spec = PartitionSpec("dirichlet", 0.1, 10, seed=4)
    a, b = partition(ds, spec), partition(ds, spec)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    c = partition(ds, PartitionSpec("dirichlet", 0.1, 10, seed=5))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_too_many_devices():
    with pytest.raises(UsageError):
        partition(_labels([2, 2]), PartitionSpec("iid", 1.0, 5))


@pytest.mark.parametrize("kwargs", [{"kind": "zipf"}, {"alpha": 0.0}, {"devices": 0}])
def test_partition_spec_validation(kwargs):
    with pytest.raises(ConfigError):
        PartitionSpec(**kwargs)


def test_large_alpha_is_close_to_iid():
    ds = _labels([200] * 10)
    shards = partition(ds, PartitionSpec("dirichlet", 100.0, 20, seed=0))
    counts = np.array([np.bincount(ds.y[s], minlength=10) for s in shards])
    expected = counts.sum(axis=1, keepdims=True) / 10
    stat = ((counts - expected) ** 2 / expected).sum()
    dof = 20 * 9
    assert stat < _chi2_quantile(dof, 3.09)


def test_small_alpha_concentrates_shards():
    medians = []
    for seed in range(5):
        ds = _labels([200] * 10)
        shards = partition(ds, PartitionSpec("dirichlet", 0.1, 100, seed=seed))
        top2 = [np.sort(np.bincount(ds.y[s], minlength=10))[-2:].sum() / len(s) for s in shards]
        medians.append(np.median(top2))
    assert min(medians) > 0.5


def test_dirichlet_class_totals_match_prior():
    ds = _labels([120, 80, 100, 60, 140])
    shards = partition(ds, PartitionSpec("dirichlet", 0.5, 20, seed=1))
    totals = np.bincount(ds.y[np.concatenate(shards)], minlength=5)
    assert totals.tolist() == [120, 80, 100, 60, 140]


def test_iid_shards_follow_global_mix():
    ds = _labels([300] * 10)
    shards = partition(ds, PartitionSpec("iid", 1.0, 10, seed=0))
    counts = np.array([np.bincount(ds.y[s], minlength=10) for s in shards])
    expected = 30.0
    stat = ((counts - expected) ** 2 / expected).sum()
    assert stat < _chi2_quantile(90, 3.09)
