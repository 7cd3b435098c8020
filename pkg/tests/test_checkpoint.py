import numpy as np
import pytest

from backwarp.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from backwarp.errors import CheckpointError


def test_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    entries = {
        "encoder/level1/layer0/weight": rng.standard_normal((4, 3, 3, 3)).astype(np.float32),
        "encoder/level1/layer0/bias": rng.standard_normal(4).astype(np.float32),
        "optim/t/encoder/level1/layer0/weight": np.asarray([3.0], np.float32),
        "meta/epoch": np.asarray([7.0], np.float32),
    }
    path = tmp_path / "test.bwck"
    save_checkpoint(path, entries)
    loaded = load_checkpoint(path)
    assert set(loaded) == set(entries)
    for k in entries:
        assert loaded[k].shape == entries[k].shape
        assert np.array_equal(loaded[k], entries[k])


def test_magic_bytes(tmp_path):
    path = tmp_path / "m.bwck"
    save_checkpoint(path, {"x": np.zeros(2, np.float32)})
    assert path.read_bytes()[:4] == MAGIC == b"BWCK"


def test_write_is_deterministic(tmp_path):
    entries = {"b": np.arange(6, dtype=np.float32).reshape(2, 3),
               "a": np.ones(4, np.float32)}
    p1, p2 = tmp_path / "1.bwck", tmp_path / "2.bwck"
    save_checkpoint(p1, entries)
    save_checkpoint(p2, dict(reversed(list(entries.items()))))
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.bwck"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_truncation_detected(tmp_path):
    path = tmp_path / "t.bwck"
    save_checkpoint(path, {"x": np.ones((2, 2), np.float32)})
    data = path.read_bytes()
    path.write_bytes(data + b"\x00\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_model_load_reports_missing(tmp_path):
    from backwarp.model import Model, ModelConfig
    cfg = ModelConfig(levels=2, channels=(4, 6), frames_per_blur=3, max_disp=1,
                      flow_widths=(8, 6), synth_width=6, stn_width=4)
    model = Model(cfg)
    entries = model.state_entries()
    dropped = sorted(entries)[0]
    del entries[dropped]
    path = tmp_path / "part.bwck"
    save_checkpoint(path, entries)
    fresh = Model(cfg)
    with pytest.raises(CheckpointError, match=dropped.split("/")[0]):
        fresh.load_state_entries(load_checkpoint(path))


def test_roundtrip_through_model(tmp_path):
    from backwarp.model import Model, ModelConfig
    cfg = ModelConfig(levels=2, channels=(4, 6), frames_per_blur=3, max_disp=1,
                      flow_widths=(8, 6), synth_width=6, stn_width=4)
    model = Model(cfg)
    path = tmp_path / "full.bwck"
    save_checkpoint(path, model.state_entries())
    clone = Model(ModelConfig(**{**cfg.to_dict(), "seed": 99}))
    clone.load_state_entries(load_checkpoint(path))
    for name, p in model.params.items():
        assert np.array_equal(clone.params[name].data, p.data), name
