# test_weight_archive.py

import numpy as np
import pytest

from src.errors import InputError
from src.weight_archive import BLOB_NAME, MANIFEST_NAME, load_archive, save_archive


def test_save_then_load_preserves_order_and_values(tmp_path, rng):
    tensors = {"b.second": rng.normal(size=(2, 3)), "a.first": rng.normal(size=4)}
    save_archive(tmp_path, tensors)

    manifest = (tmp_path / MANIFEST_NAME).read_text(encoding="utf-8").splitlines()
    assert manifest == ["b.second\t2,3\t0", "a.first\t4\t48"]
    assert (tmp_path / BLOB_NAME).stat().st_size == 10 * 8

    loaded = load_archive(tmp_path)
    assert list(loaded) == ["b.second", "a.first"]
    for name, value in tensors.items():
        np.testing.assert_array_equal(loaded[name], value)


def test_missing_files(tmp_path):
    with pytest.raises(InputError, match="not a weight archive"):
        load_archive(tmp_path)


@pytest.mark.parametrize(
    "manifest, message",
    [
        ("w\t2\n", "3 tab-separated fields"),
        ("w\t2\t0\nw\t2\t0\n", "duplicate tensor name"),
        ("w\tx\t0\n", "malformed shape"),
        ("w\t8\t0\n", "runs past the end"),
    ],
)
def test_bad_manifest_reports_line(tmp_path, manifest, message):
    (tmp_path / BLOB_NAME).write_bytes(np.zeros(4, dtype="<f8").tobytes())
    (tmp_path / MANIFEST_NAME).write_text(manifest, encoding="utf-8")
    with pytest.raises(InputError, match=message) as info:
        load_archive(tmp_path)
    assert f"{MANIFEST_NAME}:" in str(info.value)


def test_name_with_tab_rejected(tmp_path):
    with pytest.raises(InputError):
        save_archive(tmp_path, {"bad\tname": np.zeros(1)})
