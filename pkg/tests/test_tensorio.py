import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semcal.errors import ValidationError
from semcal import tensorio
from semcal.tensorio import (
    load_manifest,
    read_tensor,
    read_tensor_shape,
    write_tensor,
)


def test_single_f32_value_exact_bytes(tmp_path):
    # hand-encoded layout: magic, version u16, dtype u8, rank u8, one
    # u64 dim, then the IEEE-754 little-endian payload for 1.0
    path = tmp_path / "one.semc"
    write_tensor([1.0], [1], "f32", path)
    data = path.read_bytes()
    expected = (
        b"SEMC"
        + struct.pack("<H", 1)
        + struct.pack("<B", 0)
        + struct.pack("<B", 1)
        + struct.pack("<Q", 1)
        + bytes.fromhex("0000803f")
    )
    assert data == expected
    assert len(data) == 20
    values, dims, dtype = read_tensor(path)
    assert values.tolist() == [1.0]
    assert dims == [1]
    assert dtype == "f32"


def test_empty_tensor_header_only(tmp_path):
    path = tmp_path / "empty.semc"
    write_tensor([], [0], "f32", path)
    assert len(path.read_bytes()) == 16
    values, dims, dtype = read_tensor(path)
    assert values.size == 0
    assert dims == [0]


def test_matrix_round_trip(tmp_path):
    path = tmp_path / "m.semc"
    x = np.arange(6, dtype=np.float32).reshape(2, 3) / 7.0
    write_tensor(x.ravel(), [2, 3], "f32", path)
    values, dims, _ = read_tensor(path)
    assert dims == [2, 3]
    np.testing.assert_array_equal(values, x.astype(np.float32))


def test_write_rejects_count_mismatch(tmp_path):
    with pytest.raises(ValidationError, match="value count"):
        write_tensor([1.0, 2.0], [3], "f32", tmp_path / "x.semc")


def test_write_rejects_rank_above_four(tmp_path):
    with pytest.raises(ValidationError, match="rank"):
        write_tensor([1.0], [1, 1, 1, 1, 1], "f32", tmp_path / "x.semc")


def test_read_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.semc"
    write_tensor([1.0], [1], "f32", path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(ValidationError, match="bad magic"):
        read_tensor(path)


def test_read_rejects_truncated_payload(tmp_path):
    path = tmp_path / "short.semc"
    write_tensor([1.0, 2.0], [2], "f64", path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(ValidationError, match="payload"):
        read_tensor(path)


def test_read_rejects_trailing_bytes(tmp_path):
    path = tmp_path / "long.semc"
    write_tensor([1.0], [1], "f32", path)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(ValidationError, match="payload"):
        read_tensor(path)


def test_read_rejects_unknown_version_and_dtype(tmp_path):
    path = tmp_path / "v.semc"
    write_tensor([1.0], [1], "f32", path)
    raw = bytearray(path.read_bytes())
    raw[4:6] = struct.pack("<H", 9)
    path.write_bytes(bytes(raw))
    with pytest.raises(ValidationError, match="version"):
        read_tensor(path)
    raw = bytearray(write_and_read_raw(tmp_path))
    raw[6] = 7
    path.write_bytes(bytes(raw))
    with pytest.raises(ValidationError, match="dtype"):
        read_tensor(path)


def write_and_read_raw(tmp_path):
    path = tmp_path / "tmp.semc"
    write_tensor([1.0], [1], "f32", path)
    return path.read_bytes()


@settings(max_examples=60, deadline=None)
@given(
    dtype=st.sampled_from(["f32", "f64", "u32"]),
    dims=st.lists(st.integers(min_value=0, max_value=5), min_size=0, max_size=4),
    seed=st.integers(min_value=0, max_value=2**32 - 1),
)
def test_round_trip_bit_exact(tmp_path_factory, dtype, dims, seed):
    rng = np.random.default_rng(seed)
    count = int(np.prod(dims)) if dims else 1
    if dtype == "u32":
        values = rng.integers(0, 2**32, size=count, dtype=np.uint32)
    else:
        np_dtype = np.float32 if dtype == "f32" else np.float64
        values = rng.standard_normal(count).astype(np_dtype)
    path = tmp_path_factory.mktemp("rt") / "t.semc"
    write_tensor(values, dims, dtype, path)
    out, out_dims, out_dtype = read_tensor(path)
    assert out_dims == list(dims)
    assert out_dtype == dtype
    assert out.tobytes() == values.tobytes()


def _write_embedding(tmp_path, name, rows):
    path = tmp_path / name
    arr = np.asarray(rows, dtype=np.float32)
    write_tensor(arr.ravel(), list(arr.shape), "f32", path)
    return name


def _manifest_record(tmp_path, example_id, n_tokens=3, hidden_rows=None):
    refs = ["a dog barks", "a dog is barking"]
    cand_ref = _write_embedding(tmp_path, f"{example_id}_cand.semc", [[1.0, 0.0]])
    ref_ref = _write_embedding(tmp_path, f"{example_id}_refs.semc", [[1.0, 0.0], [0.0, 1.0]])
    record = {
        "example_id": example_id,
        "references": refs,
        "candidates": [
            {
                "caption": "a dog barks",
                "token_ids": list(range(n_tokens)),
                "token_logprobs": [-0.5] * n_tokens,
                "token_mask": [True] * n_tokens,
            }
        ],
        "embedding_refs": {"clap/candidates": cand_ref, "clap/references": ref_ref},
    }
    if hidden_rows is not None:
        hidden_name = f"{example_id}_hidden.semc"
        arr = np.asarray(hidden_rows, dtype=np.float32)
        write_tensor(arr.ravel(), list(arr.shape), "f32", tmp_path / hidden_name)
        record["candidates"][0]["hidden_state_ref"] = hidden_name
    return record


def test_load_manifest_two_valid_lines(tmp_path):
    records = [_manifest_record(tmp_path, "ex0"), _manifest_record(tmp_path, "ex1")]
    manifest = tmp_path / "manifest.jsonl"
    manifest.write_text("\n".join(json.dumps(r) for r in records) + "\n")
    eval_set = load_manifest(manifest)
    assert len(eval_set) == 2
    assert [r.example_id for r in eval_set] == ["ex0", "ex1"]


def test_load_manifest_duplicate_id_names_line(tmp_path):
    lines = [
        json.dumps(_manifest_record(tmp_path, f"ex{i}" if i != 6 else "ex0"))
        for i in range(7)
    ]
    manifest = tmp_path / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValidationError, match=r"line 7.*duplicate"):
        load_manifest(manifest)


def test_load_manifest_hidden_state_shape_mismatch(tmp_path):
    record = _manifest_record(tmp_path, "ex0", n_tokens=10, hidden_rows=np.zeros((9, 4)))
    manifest = tmp_path / "manifest.jsonl"
    manifest.write_text(json.dumps(record) + "\n")
    with pytest.raises(ValidationError, match="leading dim 9"):
        load_manifest(manifest)


def test_load_manifest_malformed_line_reports_number(tmp_path):
    good = json.dumps(_manifest_record(tmp_path, "ex0"))
    manifest = tmp_path / "manifest.jsonl"
    manifest.write_text(good + "\n{not json\n")
    with pytest.raises(ValidationError, match="line 2.*malformed"):
        load_manifest(manifest)


def test_load_manifest_dangling_tensor(tmp_path):
    record = _manifest_record(tmp_path, "ex0")
    record["embedding_refs"]["clap/candidates"] = "missing.semc"
    manifest = tmp_path / "manifest.jsonl"
    manifest.write_text(json.dumps(record) + "\n")
    with pytest.raises(ValidationError, match="dangling"):
        load_manifest(manifest)


def test_load_manifest_embedding_count_mismatch(tmp_path):
    record = _manifest_record(tmp_path, "ex0")
    # candidate tensor has leading dim 1 but two candidates are declared
    record["candidates"].append(dict(record["candidates"][0]))
    manifest = tmp_path / "manifest.jsonl"
    manifest.write_text(json.dumps(record) + "\n")
    with pytest.raises(ValidationError, match="leading dim 1"):
        load_manifest(manifest)


def test_load_manifest_rejects_positive_logprob(tmp_path):
    record = _manifest_record(tmp_path, "ex0")
    record["candidates"][0]["token_logprobs"] = [0.5, -0.5, -0.5]
    manifest = tmp_path / "manifest.jsonl"
    manifest.write_text(json.dumps(record) + "\n")
    with pytest.raises(ValidationError, match="<= 0"):
        load_manifest(manifest)


def test_load_manifest_rejects_schema_version_mismatch(tmp_path):
    record = _manifest_record(tmp_path, "ex0")
    record["schema_version"] = 99
    manifest = tmp_path / "manifest.jsonl"
    manifest.write_text(json.dumps(record) + "\n")
    with pytest.raises(ValidationError, match="schema_version"):
        load_manifest(manifest)


def test_manifest_round_trip_preserves_order(tmp_path):
    records = [_manifest_record(tmp_path, f"ex{i}") for i in range(5)]
    manifest = tmp_path / "manifest.jsonl"
    manifest.write_text("\n".join(json.dumps(r) for r in records) + "\n")
    eval_set = load_manifest(manifest)
    out = tmp_path / "again.jsonl"
    tensorio.write_manifest(eval_set.records, out)
    again = load_manifest(out, resolver=eval_set.resolver)
    assert [r.example_id for r in again] == [f"ex{i}" for i in range(5)]
    assert again.records == eval_set.records


def test_read_tensor_shape_reads_header_only(tmp_path):
    path = tmp_path / "t.semc"
    write_tensor(np.zeros(12), [3, 4], "f64", path)
    dims, dtype = read_tensor_shape(path)
    assert dims == [3, 4]
    assert dtype == "f64"
