import numpy as np
import pytest

from blockindex.features import FeatureSet, read_features, write_features


def _random_set(rng, count=20, dim=6, labeled=True):
    vectors = rng.normal(size=(count, dim)).astype(np.float32)
    if labeled:
        return FeatureSet(vectors, rng.integers(0, 4, size=count), class_count=4)
    return FeatureSet(vectors)


def test_labeled_roundtrip_bit_exact(tmp_path):
    fs = _random_set(np.random.default_rng(0))
    path = tmp_path / "a.cipl"
    write_features(path, fs)
    back = read_features(path)
    np.testing.assert_array_equal(back.vectors, fs.vectors)
    np.testing.assert_array_equal(back.labels, fs.labels)
    assert back.class_count == fs.class_count
    # second write is byte-identical
    path2 = tmp_path / "b.cipl"
    write_features(path2, back)
    assert path.read_bytes() == path2.read_bytes()


def test_unlabeled_roundtrip(tmp_path):
    fs = _random_set(np.random.default_rng(1), labeled=False)
    path = tmp_path / "a.cipf"
    write_features(path, fs)
    back = read_features(path)
    np.testing.assert_array_equal(back.vectors, fs.vectors)
    assert back.labels is None


def test_empty_set_roundtrip(tmp_path):
    fs = FeatureSet(np.zeros((0, 5), dtype=np.float32))
    path = tmp_path / "empty.cipf"
    write_features(path, fs)
    back = read_features(path)
    assert back.count == 0 and back.dim == 5


def test_size_mismatch_is_explicit(tmp_path):
    fs = _random_set(np.random.default_rng(2), labeled=False)
    path = tmp_path / "a.cipf"
    write_features(path, fs)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])  # drop two floats
    with pytest.raises(ValueError, match="bytes"):
        read_features(path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.cipf"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ValueError, match="magic"):
        read_features(path)


def test_version_mismatch_rejected(tmp_path):
    fs = _random_set(np.random.default_rng(3), labeled=False)
    path = tmp_path / "a.cipf"
    write_features(path, fs)
    raw = bytearray(path.read_bytes())
    raw[4] = 99  # version field
    path.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="version"):
        read_features(path)


def test_label_range_validated():
    with pytest.raises(ValueError, match="label"):
        FeatureSet(np.zeros((2, 3), dtype=np.float32), labels=[0, 7], class_count=4)


def test_nonfinite_vectors_rejected():
    bad = np.array([[np.nan, 0.0]], dtype=np.float32)
    with pytest.raises(ValueError, match="finite"):
        FeatureSet(bad)
