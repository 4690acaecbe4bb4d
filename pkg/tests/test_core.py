import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from residual_lens.core import (TaskSpec, TraceManifest, UnitEntry, UnitId, UnitKind, UnitTensor, ValidationError,
                                decode_tensor, encode_tensor, load_trace, read_tensor, save_manifest, sort_units,
                                write_tensor)

ZERO_1X1 = bytes.fromhex(
    "52445431310000007b226474797065223a22663332222c227368617065223a5b312c315d"
    "2c226f72646572223a22726f772d6d616a6f72227d00000000")
ROW_1X3 = bytes.fromhex(
    "52445431310000007b226474797065223a22663332222c227368617065223a5b312c335d"
    "2c226f72646572223a22726f772d6d616a6f72227d0000c03f000000c00000803e")


def test_zero_scalar_roundtrip(tmp_path):
    write_tensor(tmp_path / "z.rdt", np.array([[0.0]]))
    assert (tmp_path / "z.rdt").read_bytes() == ZERO_1X1
    assert read_tensor(tmp_path / "z.rdt").data.tolist() == [[0.0]]


def test_frozen_bytes_for_known_row():
    assert encode_tensor(np.array([[1.5, -2.0, 0.25]])) == ROW_1X3


def test_distinct_values_roundtrip(tmp_path):
    x = np.array([[1.0, 2.0, 3.0], [-4.5, 0.125, 6.0]])
    write_tensor(tmp_path / "x.rdt", x)
    back = read_tensor(tmp_path / "x.rdt")
    assert back.shape == (2, 3)
    np.testing.assert_array_equal(back.data, x)


def test_nan_rejected(tmp_path):
    with pytest.raises(ValidationError):
        write_tensor(tmp_path / "n.rdt", np.array([[1.0, np.nan]]))


def test_truncated_payload(tmp_path):
    (tmp_path / "t.rdt").write_bytes(ROW_1X3[:-2])
    with pytest.raises(ValidationError, match="payload length mismatch"):
        read_tensor(tmp_path / "t.rdt")


def test_bad_magic(tmp_path):
    (tmp_path / "m.rdt").write_bytes(b"NOPE" + ROW_1X3[4:])
    with pytest.raises(ValidationError, match="unrecognized format"):
        read_tensor(tmp_path / "m.rdt")


def test_non_finite_payload_rejected():
    blob = ROW_1X3[:-4] + np.array([np.inf], dtype="<f4").tobytes()
    with pytest.raises(ValidationError, match="non-finite"):
        decode_tensor(blob)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_roundtrip_is_bit_exact(x):
    blob = encode_tensor(x.astype(np.float64))
    back = decode_tensor(blob)
    assert back.astype(np.float32).tobytes() == x.tobytes()
    assert encode_tensor(back) == blob


def test_unit_id_names_roundtrip():
    for u in (UnitId.head(3, 5), UnitId.mlp(2), UnitId.embed(), UnitId.output()):
        assert UnitId.parse(u.name) == u
        assert UnitId.from_json(json.loads(json.dumps(u.to_json()))) == u
    assert UnitId.head(3, 5).name == "L3.head5"


def test_unit_id_invariants():
    with pytest.raises(ValidationError):
        UnitId(1, UnitKind.EMBED, 0)
    with pytest.raises(ValidationError):
        UnitId(0, UnitKind.MLP, 2)
    with pytest.raises(ValidationError):
        UnitId.parse("L1.attn")


def test_sort_units_order():
    units = [UnitId.output(), UnitId.mlp(0), UnitId.head(1, 0), UnitId.head(0, 1), UnitId.embed(), UnitId.head(0, 0)]
    assert [u.name for u in sort_units(units)] == ["embed", "L0.head0", "L0.head1", "L0.mlp", "L1.head0", "output"]


def test_unit_tensor_is_read_only():
    t = UnitTensor(UnitId.embed(), np.ones((2, 3)))
    with pytest.raises(ValueError):
        t.data[0, 0] = 5.0
    with pytest.raises(ValidationError):
        UnitTensor(UnitId.embed(), np.ones((0, 3)))


def test_task_spec_invariants(tmp_path):
    with pytest.raises(ValidationError):
        TaskSpec(("a",), np.ones((1, 3)))
    with pytest.raises(ValidationError):
        TaskSpec(("a", "b"), np.array([[1.0, 0.0], [0.0, 0.0]]))
    task = TaskSpec(("a", "b"), np.array([[3.0, 4.0], [0.0, 2.0]]))
    np.testing.assert_allclose(task.normalized, [[0.6, 0.8], [0.0, 1.0]])
    task.save(tmp_path / "task.json")
    back = TaskSpec.load(tmp_path / "task.json")
    np.testing.assert_array_equal(back.encodings, task.encodings)
    assert back.class_names == ("a", "b")


def _write_manifest(root, n_layers=2, heads=2, d_out=8, n=5, drop=None, odd=None, odd_n=None):
    entries = []
    units = [UnitId.embed()]
    for layer in range(n_layers):
        units += [UnitId.head(layer, h) for h in range(heads)] + [UnitId.mlp(layer)]
    units.append(UnitId.output())
    rng = np.random.default_rng(0)
    for u in units:
        if u == drop:
            continue
        rows = odd_n if u == odd else n
        write_tensor(root / f"{u.name}.rdt", rng.standard_normal((rows, d_out)))
        entries.append({"unit": u.to_json(), "path": f"{u.name}.rdt", "n_samples": rows})
    manifest = {"model_name": "m", "n_layers": n_layers, "heads_per_layer": heads, "d_model": 4 * heads,
                "d_head": 4, "d_out": d_out, "splits": {"train": entries}, "labels": None}
    (root / "manifest.json").write_text(json.dumps(manifest))
    return root / "manifest.json"


def test_unit_count_per_split(tmp_path):
    trace = load_trace(_write_manifest(tmp_path))
    assert trace.manifest.units_per_split == 2 * 2 + 2 + 2 == 8
    assert len(trace.manifest.entries("train")) == 8
    assert len(trace.units("train", include_output=True)) == 8


def test_missing_unit(tmp_path):
    with pytest.raises(ValidationError, match="missing unit"):
        load_trace(_write_manifest(tmp_path, drop=UnitId.mlp(1)))


def test_inconsistent_sample_count(tmp_path):
    with pytest.raises(ValidationError, match="inconsistent sample count"):
        load_trace(_write_manifest(tmp_path, odd=UnitId.head(0, 1), odd_n=7))


def test_dimension_mismatch_detected_lazily(tmp_path):
    path = _write_manifest(tmp_path)
    write_tensor(tmp_path / "L0.mlp.rdt", np.ones((5, 3)))
    trace = load_trace(path)
    with pytest.raises(ValidationError, match="dimension mismatch"):
        trace.unit("train", UnitId.mlp(0))


def test_manifest_head_width_invariant():
    with pytest.raises(ValidationError):
        TraceManifest("m", 1, 3, 10, 3, 4, {})


def test_manifest_json_roundtrip(tmp_path, small_trace):
    m = small_trace.manifest
    save_manifest(m, tmp_path / "m.json")
    assert TraceManifest.from_json(json.loads((tmp_path / "m.json").read_text())) == m


def test_entry_lookup():
    e = UnitEntry(UnitId.embed(), "x", 1)
    assert e.unit.kind is UnitKind.EMBED
