"""Binary checkpoint container roundtrip and determinism."""

import numpy as np

from moeforge.ndcore import Tensor, load_checkpoint, save_checkpoint, sidecar_path


def test_roundtrip(tmp_path, rng):
    params = {
        "enc.0.w": Tensor(rng.normal(size=(4, 3))),
        "bias": Tensor(rng.normal(size=7)),
        "scalarish": Tensor(rng.normal(size=(1,))),
    }
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, params, step=42, config_hash="abc123")
    loaded, meta = load_checkpoint(path)
    assert meta == {"step": 42, "config_hash": "abc123"}
    assert set(loaded) == set(params)
    for name in params:
        np.testing.assert_array_equal(loaded[name].data, params[name].data)
        assert loaded[name].requires_grad


def test_byte_identical_across_writes(tmp_path, rng):
    params = {"a": Tensor(rng.normal(size=(5, 5))), "b": Tensor(rng.normal(size=2))}
    p1, p2 = tmp_path / "one.bin", tmp_path / "two.bin"
    save_checkpoint(p1, params, step=7, config_hash="h")
    save_checkpoint(p2, params, step=7, config_hash="h")
    assert p1.read_bytes() == p2.read_bytes()
    assert sidecar_path(p1).read_bytes() == sidecar_path(p2).read_bytes()
