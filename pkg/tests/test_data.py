import gzip

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from plab.data import (DataFormatError, Dataset, SynthSpec, apply_trigger, build_poisoned_set,
                       load_cifar_binary, load_idx, plan_poison, poison_count, synth_clusters,
                       write_idx)
from plab.tensor import f32_floor
from plab.triggers import BudgetError, TriggerSet


def small_set(n_per=10, classes=3, seed=0):
    return synth_clusters(SynthSpec(classes=classes, per_class=n_per, shape=(1, 4, 4)), seed)


def test_idx_round_trip(tmp_path):
    pix = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4) * 10
    write_idx(tmp_path / "i", tmp_path / "l", pix, [3, 7])
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    assert ds.images.shape == (2, 1, 3, 4)
    np.testing.assert_allclose(ds.images[0, 0], pix[0] / 255.0, rtol=1e-6)
    np.testing.assert_array_equal(ds.labels, [3, 7])


def test_idx_gzip(tmp_path):
    pix = np.zeros((1, 2, 2), np.uint8)
    write_idx(tmp_path / "i", tmp_path / "l", pix, [1])
    for name in ("i", "l"):
        (tmp_path / f"{name}.gz").write_bytes(gzip.compress((tmp_path / name).read_bytes()))
    assert len(load_idx(tmp_path / "i.gz", tmp_path / "l.gz")) == 1


def test_idx_errors(tmp_path):
    pix = np.zeros((2, 2, 2), np.uint8)
    write_idx(tmp_path / "i", tmp_path / "l", pix, [0, 1])
    raw = (tmp_path / "i").read_bytes()
    (tmp_path / "bad").write_bytes(b"\0\0\x09\x99" + raw[4:])
    with pytest.raises(DataFormatError, match="magic"):
        load_idx(tmp_path / "bad", tmp_path / "l")
    (tmp_path / "trunc").write_bytes(raw[:-1])
    with pytest.raises(DataFormatError):
        load_idx(tmp_path / "trunc", tmp_path / "l")
    write_idx(tmp_path / "i3", tmp_path / "l3", np.zeros((3, 2, 2), np.uint8), [0, 1, 2])
    with pytest.raises(DataFormatError, match="labels"):
        load_idx(tmp_path / "i", tmp_path / "l3")
    with pytest.raises(FileNotFoundError):
        load_idx(tmp_path / "missing", tmp_path / "l")


def test_cifar_binary(tmp_path):
    rec = np.zeros((2, 3073), np.uint8)
    rec[:, 0] = [4, 9]
    rec[1, 1:] = 255
    (tmp_path / "b.bin").write_bytes(rec.tobytes())
    ds = load_cifar_binary(tmp_path / "b.bin")
    assert ds.images.shape == (2, 3, 32, 32)
    np.testing.assert_array_equal(ds.labels, [4, 9])
    assert ds.images[1].min() == 1.0
    (tmp_path / "c.bin").write_bytes(rec.tobytes()[:-5])
    with pytest.raises(DataFormatError):
        load_cifar_binary(tmp_path / "c.bin")


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.full((1, 1, 2, 2), 1.5), [0])
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 2, 2)), [0])
    with pytest.raises(ValueError):
        Dataset(np.zeros((1, 1, 2, 2)), [3], classes=2)


def test_synth_is_deterministic_clamped_and_ordered():
    a, b = small_set(seed=4), small_set(seed=4)
    np.testing.assert_array_equal(a.images, b.images)
    assert a.images.min() >= 0 and a.images.max() <= 1
    np.testing.assert_array_equal(a.labels, np.repeat([0, 1, 2], 10))
    with pytest.raises(ValueError):
        synth_clusters(SynthSpec(sigma=-0.1), 0)


def test_split_partitions():
    ds = small_set()
    a, b = ds.split(0.3, 1)
    assert len(a) == 9 and len(b) == 21
    assert len(a) + len(b) == len(ds)


def test_poison_count_is_floor():
    assert poison_count(100, 0.1) == 10
    assert poison_count(99, 0.1) == 9
    assert poison_count(10, 0.0) == 0


def shared_trigger(ds, eta=0.05):
    return TriggerSet(np.full((len(ds),) + ds.shape, f32_floor(eta)), eta, "rn_linf")


def test_poisoning_only_touches_selected_target_samples():
    ds = small_set(20)
    pd = build_poisoned_set(ds, shared_trigger(ds), target=1, rate=0.25, seed=3)
    idx = np.array(pd.plan.selected_indices)
    assert len(idx) == 5 and (ds.labels[idx] == 1).all()
    np.testing.assert_array_equal(pd.labels, ds.labels)
    untouched = np.setdiff1d(np.arange(len(ds)), idx)
    np.testing.assert_array_equal(pd.images[untouched], ds.images[untouched])
    np.testing.assert_array_equal(pd.images[idx], apply_trigger(ds.images[idx], f32_floor(0.05)))
    assert pd.flags.sum() == 5


def test_poisoning_rejects_over_budget_and_bad_rate():
    ds = small_set()
    bad = TriggerSet(np.full((len(ds),) + ds.shape, 0.2, np.float32), 0.1, "rn_linf")
    with pytest.raises(BudgetError):
        build_poisoned_set(ds, bad, 0, 0.5, 0)
    with pytest.raises(ValueError):
        plan_poison(ds, 0, 1.5, 0)


def test_zero_rate_is_clean():
    ds = small_set()
    pd = build_poisoned_set(ds, shared_trigger(ds), 0, 0.0, 0)
    np.testing.assert_array_equal(pd.images, ds.images)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1), st.integers(0, 2), st.integers(0, 1000))
def test_poisoning_preserves_labels_and_stays_in_range(rate, target, seed):
    ds = small_set(8)
    pd = build_poisoned_set(ds, shared_trigger(ds, 0.3), target, rate, seed)
    np.testing.assert_array_equal(pd.labels, ds.labels)
    assert pd.images.min() >= 0 and pd.images.max() <= 1
    assert len(pd.plan.selected_indices) == poison_count(8, rate)
