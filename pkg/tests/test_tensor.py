import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from umask.tensor import (BehaviorTensor, EvidenceMask, EventHistory, FormatError, ShapeError,
                          apply_mask, mask_to_tensor, read_histories_csv, read_tensor,
                          tensor_from_bytes, tensor_to_bytes, write_histories_csv, write_mask_csv,
                          write_tensor)

dims4 = st.tuples(*[st.integers(1, 4)] * 4)


def tensors():
    return dims4.flatmap(lambda d: arrays(np.float32, d, elements=st.floats(-1e6, 1e6, width=32)))


def test_all_ones_mask_is_identity(rng):
    x = BehaviorTensor(rng.random((3, 4, 2, 2)).astype(np.float32))
    out = apply_mask(x, EvidenceMask.full((4, 2, 2)))
    assert out.values.tobytes() == x.values.tobytes()


def test_all_zeros_mask_zeroes_everything(rng):
    x = BehaviorTensor(rng.random((3, 4, 2, 2)) + 0.5)
    assert not apply_mask(x, EvidenceMask.empty((4, 2, 2))).values.any()


def test_single_coordinate_mask_keeps_one_column(rng):
    x = BehaviorTensor(rng.random((3, 4, 2, 2)) + 0.5)
    b = np.zeros((4, 2, 2), np.uint8)
    b[2, 1, 0] = 1
    out = apply_mask(x, EvidenceMask.from_binary(b)).values
    nz = np.argwhere(out != 0)
    assert len(nz) == 3
    assert {tuple(r[1:]) for r in nz} == {(2, 1, 0)}


def test_apply_mask_does_not_touch_input(rng):
    v = rng.random((2, 3, 2, 2))
    x = BehaviorTensor(v)
    before = x.values.copy()
    apply_mask(x, EvidenceMask.from_binary(rng.integers(0, 2, (3, 2, 2))))
    assert np.array_equal(x.values, before)


def test_apply_mask_shape_mismatch():
    with pytest.raises(ShapeError):
        apply_mask(BehaviorTensor(np.zeros((1, 2, 2, 2))), EvidenceMask.empty((3, 2, 2)))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_apply_mask_idempotent(seed):
    r = np.random.default_rng(seed)
    x = BehaviorTensor(r.random((2, 3, 2, 2)))
    m = EvidenceMask.from_binary(r.integers(0, 2, (3, 2, 2)))
    once = apply_mask(x, m)
    assert apply_mask(once, m) == once


def test_mask_invariants_enforced():
    b = np.zeros((2, 2, 2), np.uint8)
    b[0, 0, 0] = 1
    with pytest.raises(ValueError):
        EvidenceMask(b, b * 0.5, 2)          # budget mismatch
    w = np.zeros((2, 2, 2))
    with pytest.raises(ValueError):
        EvidenceMask(b, w, 1)                # weight zero where selected
    w[0, 0, 0], w[1, 1, 1] = 0.5, 0.1
    with pytest.raises(ValueError):
        EvidenceMask(b, w, 1)                # weight where not selected


def test_behavior_tensor_rejects_bad_values():
    with pytest.raises(ShapeError):
        BehaviorTensor(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        BehaviorTensor(np.full((1, 1, 1, 1), np.nan))


@given(tensors())
@settings(max_examples=60, deadline=None)
def test_stbt_round_trip(values):
    back = tensor_from_bytes(tensor_to_bytes(values))
    assert back.values.tobytes() == values.tobytes()
    assert back.dims == values.shape


def test_stbt_file_round_trip(tmp_path, rng):
    x = BehaviorTensor(rng.random((3, 32, 8, 8)).astype(np.float32))
    write_tensor(tmp_path / "x.stbt", x)
    assert read_tensor(tmp_path / "x.stbt") == x


def test_stbt_layout_matches_format():
    v = np.arange(24, dtype=np.float32).reshape(1, 2, 3, 4)
    buf = tensor_to_bytes(v)
    assert buf[:4] == b"STBT"
    assert struct.unpack("<5I", buf[4:24]) == (1, 1, 2, 3, 4)
    assert np.array_equal(np.frombuffer(buf[24:], "<f4"), np.arange(24))


def test_stbt_bad_magic():
    buf = bytearray(tensor_to_bytes(np.zeros((1, 1, 1, 2), np.float32)))
    buf[:4] = b"XXXX"
    with pytest.raises(FormatError):
        tensor_from_bytes(bytes(buf))


def test_stbt_payload_inconsistent_with_header():
    buf = tensor_to_bytes(np.zeros((1, 2, 2, 2), np.float32))
    with pytest.raises(FormatError):
        tensor_from_bytes(buf[:-4])
    with pytest.raises(FormatError):
        tensor_from_bytes(buf + b"\0\0\0\0")


def test_stbt_dim_overflow():
    header = struct.pack("<4s5I", b"STBT", 1, 65536, 65536, 1, 1)
    with pytest.raises(FormatError):
        tensor_from_bytes(header)


def test_stbt_truncated_header():
    with pytest.raises(FormatError):
        tensor_from_bytes(b"STBT\x01")


def test_mask_exports(tmp_path):
    b = np.zeros((2, 1, 2), np.uint8)
    b[1, 0, 1] = 1
    m = EvidenceMask(b, b * 0.25, 1)
    planes = mask_to_tensor(m)
    assert planes.shape == (2, 2, 1, 2)
    assert planes[1, 1, 0, 1] == np.float32(0.25)
    write_mask_csv(tmp_path / "m.csv", m)
    rows = (tmp_path / "m.csv").read_text().splitlines()
    assert rows[0] == "t,h,w,binary,weight"
    assert "1,0,1,1,0.25" in rows


def test_event_history_validation():
    with pytest.raises(ValueError):
        EventHistory.from_events([(0, 0, 3), (0, 0, 1)], 2, 2)
    with pytest.raises(ValueError):
        EventHistory.from_events([(5, 0, 0)], 2, 2)
    with pytest.raises(ValueError):
        EventHistory.from_events([(0, 9, 0)], 2, 2)


def test_history_csv_round_trip(tmp_path):
    hs = {3: EventHistory.from_events([(0, 1, 0), (1, 1, 2)], 2, 4),
          7: EventHistory.from_events([(1, 3, 5)], 2, 4)}
    write_histories_csv(tmp_path / "h.csv", hs)
    back = read_histories_csv(tmp_path / "h.csv", 2, 4)
    assert {k: v.events() for k, v in back.items()} == {k: v.events() for k, v in hs.items()}
