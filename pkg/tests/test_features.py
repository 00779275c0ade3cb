import struct

import numpy as np
import pytest

from cardamage.features import (FeatureFormatError, FeatureSet, from_bytes, read_feature_file, to_bytes,
                                write_feature_file)
from cardamage.tensor import Prng


def test_hand_built_bytes():
    rows = [[1.5, -2.0, 0.0, 3.25], [0.5, 0.25, -0.125, 8.0], [1e-3, 2e3, -7.0, 1.0]]
    data = b"FEAT" + struct.pack("<4I", 1, 3, 4, 5)
    data += b"".join(struct.pack("<4d", *r) for r in rows)
    data += struct.pack("<3H", 0, 4, 2)
    fs = from_bytes(data)
    np.testing.assert_array_equal(fs.features, rows)
    np.testing.assert_array_equal(fs.labels, [0, 4, 2])
    assert fs.num_classes == 5 and fs.dim == 4
    assert to_bytes(fs) == data


def test_empty_feature_set():
    with pytest.raises(FeatureFormatError, match="empty feature set"):
        from_bytes(b"FEAT" + struct.pack("<4I", 1, 0, 4, 2))


@pytest.mark.parametrize("suffix", [".feat", ".csv"])
def test_roundtrip_bitwise(tmp_path, suffix):
    fs = FeatureSet(Prng(1).normal((7, 5)) * 1e3, [0, 1, 2, 0, 1, 2, 2], 3, "resnet")
    path = tmp_path / f"f{suffix}"
    write_feature_file(fs, path)
    back = read_feature_file(path)
    assert back.features.tobytes() == fs.features.tobytes()
    np.testing.assert_array_equal(back.labels, fs.labels)
    assert back.extractor == "resnet" and back.num_classes == 3


def test_bad_magic_and_sizes():
    fs = FeatureSet(np.ones((2, 3)), [0, 1], 2)
    data = to_bytes(fs)
    with pytest.raises(FeatureFormatError, match="magic"):
        from_bytes(b"XXXX" + data[4:])
    with pytest.raises(FeatureFormatError, match="expected"):
        from_bytes(data[:-1])


def test_validation():
    with pytest.raises(FeatureFormatError, match="non-finite"):
        FeatureSet(np.array([[np.nan]]), [0], 1)
    with pytest.raises(FeatureFormatError):
        FeatureSet(np.ones((2, 2)), [0], 2)
    with pytest.raises(FeatureFormatError):
        FeatureSet(np.ones((2, 2)), [0, 3], 2)


def test_csv_header_checked(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("y,f0\n0,1.0\n")
    with pytest.raises(FeatureFormatError):
        read_feature_file(p)
    p.write_text("label,f0\n")
    with pytest.raises(FeatureFormatError, match="empty feature set"):
        read_feature_file(p)
