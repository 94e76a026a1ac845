"""Tensor file format and checkpoint directories."""

import numpy as np
import pytest

from hopa.serialize import (
    MAGIC,
    load_checkpoint,
    read_tensor,
    save_checkpoint,
    write_tensor,
)
from hopa.model import ModelConfig, SegModel, load_model, model_forward
from hopa.backbone import BackboneConfig
from hopa.tensor import Tensor, no_grad


def test_tensor_round_trip_exact(tmp_path):
    rng = np.random.default_rng(5)
    for shape in [(2, 3, 4, 5), (1, 1, 1, 1), (3, 1, 2, 1)]:
        arr = rng.normal(size=shape)
        path = tmp_path / "t.hot4"
        write_tensor(path, arr)
        back = read_tensor(path)
        assert back.shape == shape
        assert np.array_equal(back, arr)


def test_lower_rank_arrays_pad_to_rank_four(tmp_path):
    arr = np.arange(6.0).reshape(2, 3)
    path = tmp_path / "t.hot4"
    write_tensor(path, arr)
    back = read_tensor(path)
    assert back.shape == (2, 3, 1, 1)
    assert np.array_equal(back.reshape(2, 3), arr)
    write_tensor(path, np.array(7.0))
    assert read_tensor(path).shape == (1, 1, 1, 1)


def test_rank_limit(tmp_path):
    with pytest.raises(ValueError, match="rank 4"):
        write_tensor(tmp_path / "t.hot4", np.zeros((1, 1, 1, 1, 1)))


def test_header_layout(tmp_path):
    path = tmp_path / "t.hot4"
    write_tensor(path, np.zeros((2, 1, 3, 1)))
    blob = path.read_bytes()
    assert blob[:4] == MAGIC
    assert np.array_equal(np.frombuffer(blob[4:20], dtype="<u4"), [2, 1, 3, 1])
    assert len(blob) == 20 + 8 * 6


def test_bad_magic_and_truncation(tmp_path):
    path = tmp_path / "t.hot4"
    write_tensor(path, np.ones((1, 2, 2, 1)))
    blob = path.read_bytes()
    path.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ValueError, match="magic"):
        read_tensor(path)
    path.write_bytes(blob[:10])
    with pytest.raises(ValueError, match="truncated"):
        read_tensor(path)
    path.write_bytes(blob[:-8])
    with pytest.raises(ValueError, match="expected"):
        read_tensor(path)


def test_write_is_deterministic(tmp_path):
    arr = np.random.default_rng(0).normal(size=(2, 2, 2, 2))
    write_tensor(tmp_path / "a.hot4", arr)
    write_tensor(tmp_path / "b.hot4", arr)
    assert (tmp_path / "a.hot4").read_bytes() == (tmp_path / "b.hot4").read_bytes()


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(21)
    arrays = [
        ("backbone.stem.conv.weight", rng.normal(size=(4, 3, 3, 3))),
        ("head.bias", rng.normal(size=(5,))),
        ("stats.running_mean", rng.normal(size=(1, 4, 1, 1))),
    ]
    state = {"kind": "pcg64", "word": 123}
    save_checkpoint(tmp_path / "ck", arrays, iteration=17, rng_state=state,
                    extra={"note": "x"})
    loaded, iteration, rng_state, extra = load_checkpoint(tmp_path / "ck")
    assert iteration == 17
    assert rng_state == state
    assert extra == {"note": "x"}
    assert set(loaded) == {name for name, _ in arrays}
    for name, arr in arrays:
        assert loaded[name].shape == arr.shape
        assert np.array_equal(loaded[name], arr)


def test_checkpoint_rejects_unknown_format(tmp_path):
    save_checkpoint(tmp_path / "ck", [("w", np.ones(2))], 0, {})
    manifest = tmp_path / "ck" / "manifest.json"
    manifest.write_text(manifest.read_text().replace("hopa-checkpoint-v1", "v0"))
    with pytest.raises(ValueError, match="unknown checkpoint format"):
        load_checkpoint(tmp_path / "ck")


def test_model_save_load_reproduces_outputs(tmp_path):
    cfg = ModelConfig(
        num_classes=3,
        backbone=BackboneConfig(blocks_per_stage=(1, 1, 1, 1), base_width=4),
        order=2,
        rank=2,
        degree_width=3,
        branch_width=3,
        fuse_width=4,
    )
    model = SegModel(cfg, np.random.default_rng(2))
    model.save(tmp_path / "ck", iteration=5, rng_state={"s": 1})
    clone = load_model(tmp_path / "ck")
    assert clone.cfg == cfg
    x = np.random.default_rng(3).uniform(size=(1, 3, 32, 32))
    with no_grad():
        a = model_forward(Tensor(x), model, training=False).data
        b = model_forward(Tensor(x), clone, training=False).data
    assert np.array_equal(a, b)
