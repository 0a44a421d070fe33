import numpy as np
import pytest

from routelock.checkpoint import load_checkpoint, save_checkpoint
from routelock.model import forward
from routelock.tokenizer import Route

from conftest import tiny_model

TOKENS = [1, 8, 9, 4, 10]


def test_save_load_save_identical_bytes(tmp_path):
    model = tiny_model(seed=5)
    p1, p2 = tmp_path / "a.ple", tmp_path / "b.ple"
    save_checkpoint(model, p1)
    loaded = load_checkpoint(p1)
    save_checkpoint(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_loaded_model_reproduces_logits_bitwise(tmp_path):
    model = tiny_model(seed=6)
    before = forward(model, TOKENS, Route.THINK).data
    path = tmp_path / "m.ple"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    after = forward(loaded, TOKENS, Route.THINK).data
    assert np.array_equal(before, after)
    assert before.tobytes() == after.tobytes()


def test_loaded_segments_bitwise_equal(tmp_path):
    model = tiny_model(seed=7)
    path = tmp_path / "m.ple"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.config == model.config
    assert loaded.params.names == model.params.names
    for name, arr in model.params.items():
        assert arr.tobytes() == loaded.params[name].tobytes()


def test_roundtrip_without_final_norm(tmp_path):
    from routelock.model import DenseModel, ModelConfig, ModelParams

    cfg = ModelConfig(
        vocab_size=16, d_model=8, n_layers=1, n_heads=2, d_ff=12, max_seq=16, final_norm=False
    )
    model = ModelParams.clone_from_dense(DenseModel.init_random(cfg, seed=3))
    assert "final_norm" not in model.params
    path = tmp_path / "m.ple"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.config.final_norm is False
    a = forward(model, [1, 5, 7], Route.NO_THINK).data
    b = forward(loaded, [1, 5, 7], Route.NO_THINK).data
    assert np.array_equal(a, b)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.ple"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path)


def test_manifest_groups_label_partition(tmp_path):
    import json
    import struct

    model = tiny_model(seed=8)
    path = tmp_path / "m.ple"
    save_checkpoint(model, path)
    blob = path.read_bytes()
    (hlen,) = struct.unpack_from("<Q", blob, 8)
    header = json.loads(blob[16 : 16 + hlen])
    groups = {e["name"]: e["group"] for e in header["segments"]}
    assert groups["layer0.expert0.w_gate"] == "beta0"
    assert groups["layer1.expert1.w_down"] == "beta1"
    assert groups["embed"] == "alpha"
    assert set(g for g in groups.values()) == {"alpha", "beta0", "beta1"}
