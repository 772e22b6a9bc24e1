import numpy as np
import pytest

from rosfl.checkpoint import (
    dumps,
    load_param_sets,
    load_tensors,
    loads,
    save_param_sets,
    save_tensors,
)
from rosfl.errors import CorruptionError, WireProtocolError
from rosfl.nn import ParamSet


def test_tensor_container_round_trip(tmp_path, rng):
    tensors = {
        "head/enc1.conv1.w": rng.normal(size=(4, 1, 3, 3)),
        "head/enc1.conv1.b": rng.normal(size=(4,)),
        "body/bott.conv1.w": rng.normal(size=(8, 4, 3, 3)).astype(np.float32),
        "scalarish": rng.normal(size=()),
    }
    path = tmp_path / "model.ckpt"
    save_tensors(path, tensors)
    loaded = load_tensors(path)
    assert list(loaded) == list(tensors)
    for name in tensors:
        assert loaded[name].dtype == tensors[name].dtype
        assert np.array_equal(loaded[name], tensors[name])


def test_param_set_prefixing(tmp_path, rng):
    sets = {
        "head": ParamSet("head", {"w": rng.normal(size=(2, 2))}),
        "tail": ParamSet("tail", {"w": rng.normal(size=(3,))}),
    }
    path = tmp_path / "parts.ckpt"
    save_param_sets(path, sets)
    loaded = load_param_sets(path, round_index=7)
    assert set(loaded) == {"head", "tail"}
    assert loaded["head"].round_index == 7
    assert loaded["head"].equals(sets["head"])
    assert loaded["tail"].equals(sets["tail"])


def test_bad_magic_rejected():
    with pytest.raises(WireProtocolError):
        loads(b"XXXX\x01\x00\x00\x00\x00")


def test_truncated_rejected(rng):
    blob = dumps({"w": rng.normal(size=(4, 4))})
    with pytest.raises(CorruptionError):
        loads(blob[:-8])


def test_trailing_garbage_rejected(rng):
    blob = dumps({"w": rng.normal(size=(2,))})
    with pytest.raises(CorruptionError):
        loads(blob + b"\x00")
