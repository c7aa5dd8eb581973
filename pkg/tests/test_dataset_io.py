# tests/test_dataset_io.py

import numpy as np
import pytest
from hypothesis import given, strategies as st

from agrg.errors import DatasetFormatError
from agrg.ingestion.dataset_io import (
    DATASET_MAGIC, bitmask_to_labels, dataset_header, labels_to_bitmask, read_dataset, read_json, read_jsonl,
    write_dataset, write_json, write_jsonl,
)

from conftest import TINY_SHAPE


@pytest.fixture
def split_file(tmp_path, tiny_cases, registry):
    path = tmp_path / "train.agds"
    write_dataset(path, tiny_cases, len(tiny_cases), registry.k, TINY_SHAPE)
    return path


def test_cases_survive_the_file(split_file, tiny_cases):
    restored = read_dataset(split_file)
    assert [case.seed for case in restored] == [case.seed for case in tiny_cases]
    for original, copy in zip(tiny_cases, restored):
        np.testing.assert_array_equal(original.volume, copy.volume)
        np.testing.assert_array_equal(original.labels, copy.labels)
        assert original.report == copy.report
        assert copy.sentences == original.sentences


def test_header(split_file, tiny_cases, registry):
    header = dataset_header(split_file)
    assert (header.k, header.shape, header.count) == (registry.k, TINY_SHAPE, len(tiny_cases))
    assert split_file.read_bytes()[:4] == DATASET_MAGIC


def test_writing_is_byte_deterministic(tmp_path, tiny_cases, registry):
    for name in ("a.agds", "b.agds"):
        write_dataset(tmp_path / name, tiny_cases, len(tiny_cases), registry.k, TINY_SHAPE)
    assert (tmp_path / "a.agds").read_bytes() == (tmp_path / "b.agds").read_bytes()


def test_bad_magic(split_file):
    payload = bytearray(split_file.read_bytes())
    payload[:4] = b"NOPE"
    split_file.write_bytes(bytes(payload))
    with pytest.raises(DatasetFormatError, match="magic"):
        read_dataset(split_file)


def test_unsupported_version(split_file):
    payload = bytearray(split_file.read_bytes())
    payload[4:6] = (99).to_bytes(2, "little")
    split_file.write_bytes(bytes(payload))
    with pytest.raises(DatasetFormatError, match="version"):
        read_dataset(split_file)


def test_truncated_file(split_file):
    split_file.write_bytes(split_file.read_bytes()[:-7])
    with pytest.raises(DatasetFormatError, match="truncated"):
        read_dataset(split_file)


def test_trailing_bytes(split_file):
    split_file.write_bytes(split_file.read_bytes() + b"\x00")
    with pytest.raises(DatasetFormatError, match="trailing"):
        read_dataset(split_file)


def test_count_mismatch_is_reported(tmp_path, tiny_cases, registry):
    with pytest.raises(DatasetFormatError):
        write_dataset(tmp_path / "short.agds", tiny_cases[:2], 3, registry.k, TINY_SHAPE)


def test_shape_mismatch_is_reported(tmp_path, tiny_cases, registry):
    with pytest.raises(DatasetFormatError):
        write_dataset(tmp_path / "bad.agds", tiny_cases, len(tiny_cases), registry.k, (4, 4, 4))


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_dataset(tmp_path / "absent.agds")


@given(st.lists(st.integers(0, 1), min_size=1, max_size=18))
def test_bitmask_matches_labels(bits):
    labels = np.array(bits, dtype=np.uint8)
    mask = labels_to_bitmask(labels)
    assert all(((mask >> i) & 1) == bit for i, bit in enumerate(bits))
    np.testing.assert_array_equal(bitmask_to_labels(mask, len(bits)), labels)


def test_bitmask_beyond_k():
    with pytest.raises(DatasetFormatError):
        bitmask_to_labels(0b1000, 3)


def test_json_helpers(tmp_path):
    write_json(tmp_path / "m.json", {"b": 1, "a": np.array([1.5, 2.0])})
    assert read_json(tmp_path / "m.json") == {"a": [1.5, 2.0], "b": 1}
    assert write_jsonl(tmp_path / "g.jsonl", [{"case_id": 1}, {"case_id": 2}]) == 2
    assert [r["case_id"] for r in read_jsonl(tmp_path / "g.jsonl")] == [1, 2]


def test_invalid_json_line(tmp_path):
    (tmp_path / "g.jsonl").write_text('{"case_id": 1}\n{oops\n', encoding="utf-8")
    with pytest.raises(DatasetFormatError, match=":2:"):
        read_jsonl(tmp_path / "g.jsonl")
