import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from latentmatch.checkpoint import (
    CheckpointHeaderError,
    CheckpointOffsetError,
    CheckpointTrailingBytesError,
    CheckpointVersionError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)


def table(rng):
    return {
        "E.0.weight": rng.standard_normal((3, 4)).astype(np.float32),
        "E.0.bias": rng.standard_normal(4).astype(np.float32),
        "bn.running_mean": np.zeros(2, dtype=np.float32),
        "scalar": np.array(1.5, dtype=np.float32),
    }


def test_round_trip_is_bit_exact(tmp_path, rng):
    tensors = table(rng)
    meta = {"step_a": "7", "config.hp.lambda": "0.2"}
    save_checkpoint(tmp_path / "a.ckpt", tensors, meta)
    back, back_meta = load_checkpoint(tmp_path / "a.ckpt")
    assert back_meta == meta
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].dtype == np.float32 and back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()


def test_header_layout(rng):
    blob = encode_checkpoint({"w": np.ones((2, 3), np.float32), "b": np.zeros(3, np.float32)})
    head, payload = blob.split(b"\n\n", 1)
    assert head.decode().split("\n") == ["LMCKPT v1", "w 2 3 0", "b 3 24"]
    assert len(payload) == 36
    assert payload[:4] == np.float32(1).tobytes()  # little-endian


finite32 = st.floats(-1e6, 1e6, allow_nan=False, width=32)


@settings(max_examples=40, deadline=None)
@given(st.lists(arrays(np.float32, array_shapes(min_dims=0, max_dims=3, max_side=4), elements=finite32), max_size=4))
def test_round_trip_property(arrays_):
    tensors = {f"t{i}": a for i, a in enumerate(arrays_)}
    back, _ = decode_checkpoint(encode_checkpoint(tensors))
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape and back[k].tobytes() == tensors[k].tobytes()


def test_permuted_header_lines_still_load(rng):
    tensors = table(rng)
    head, payload = encode_checkpoint(tensors).split(b"\n\n", 1)
    lines = head.split(b"\n")
    edited = b"\n".join([lines[0]] + lines[1:][::-1]) + b"\n\n" + payload
    back, _ = decode_checkpoint(edited)
    for k, v in tensors.items():
        assert back[k].tobytes() == v.tobytes()


def test_truncated_payload_names_expected_size(rng):
    blob = encode_checkpoint(table(rng))
    with pytest.raises(CheckpointOffsetError, match="expected payload size at least 76, found 75"):
        decode_checkpoint(blob[:-1])


def test_trailing_bytes_rejected(rng):
    with pytest.raises(CheckpointTrailingBytesError, match="1 trailing bytes"):
        decode_checkpoint(encode_checkpoint(table(rng)) + b"\x00")


def test_version_mismatch_names_both_versions(rng):
    blob = encode_checkpoint(table(rng)).replace(b"LMCKPT v1", b"LMCKPT v2", 1)
    with pytest.raises(CheckpointVersionError, match="version 2.*supports 1"):
        decode_checkpoint(blob)


@pytest.mark.parametrize(
    "blob",
    [
        b"LMCKPT v1\nw 2 0",  # no terminator
        b"NOTCKPT v1\n\n",
        b"LMCKPT vX\n\n",
        b"LMCKPT v1\nw two 0\n\n",
        b"LMCKPT v1\nw\n\n",
        b"LMCKPT v1\nw 1 0\nw 1 0\n\n\x00\x00\x00\x00",
        b"LMCKPT v1\nw 1 -4\n\n",
    ],
)
def test_corrupt_headers_rejected(blob):
    with pytest.raises(CheckpointHeaderError):
        decode_checkpoint(blob)


def test_error_kinds_are_distinct():
    kinds = [CheckpointHeaderError, CheckpointOffsetError, CheckpointTrailingBytesError, CheckpointVersionError]
    assert len(set(kinds)) == 4
    assert not any(issubclass(a, b) for a in kinds for b in kinds if a is not b)


def test_unsafe_names_rejected():
    with pytest.raises(CheckpointHeaderError):
        encode_checkpoint({"has space": np.zeros(1)})
    with pytest.raises(CheckpointHeaderError):
        encode_checkpoint({}, {"key": "two\nlines"})


def test_save_is_atomic_and_leaves_no_temp_files(tmp_path):
    save_checkpoint(tmp_path / "sub" / "x.ckpt", {"w": np.ones(2)})
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["x.ckpt"]
