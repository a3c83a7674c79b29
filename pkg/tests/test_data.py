import numpy as np
import pytest

from donna.data import CLASSES, gen_data, generate, load_dataset, read_dds


def test_generation_is_seeded_and_balanced():
    a, b = generate(3, 64, 32), generate(3, 64, 32)
    np.testing.assert_array_equal(a.x_train, b.x_train)
    np.testing.assert_array_equal(a.y_heldout, b.y_heldout)
    assert not np.array_equal(a.x_train, generate(4, 64, 32).x_train)
    assert np.bincount(a.y_train, minlength=len(CLASSES)).tolist() == [8] * 8
    assert a.x_train.shape == (64, 3, 16, 16)
    assert 0.0 <= a.x_train.min() and a.x_train.max() <= 1.0


def test_splits_differ():
    ds = generate(1, 64, 64)
    assert not np.array_equal(ds.x_train, ds.x_heldout)


def test_files_roundtrip_and_hash_check(tmp_path):
    m = gen_data(2, tmp_path, 32, 16)
    assert m["train"] == 32 and m["classes"] == list(CLASSES)
    ds = load_dataset(tmp_path)
    np.testing.assert_array_equal(ds.x_train, generate(2, 32, 16).x_train)
    again = gen_data(2, tmp_path / "again", 32, 16)
    assert again["content_hash"] == m["content_hash"]
    raw = bytearray((tmp_path / "train.dds").read_bytes())
    raw[100] ^= 1
    (tmp_path / "train.dds").write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="content hash"):
        load_dataset(tmp_path)
    (tmp_path / "train.dds").write_bytes(bytes(raw[:-1]))
    with pytest.raises(ValueError, match="size"):
        read_dds(tmp_path / "train.dds")


def test_class_count_must_divide():
    with pytest.raises(ValueError):
        generate(0, 30, 16)
