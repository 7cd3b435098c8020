import numpy as np
import pytest

from backwarp.errors import DimensionError
from backwarp.flowio import FLO_MAGIC, flow_to_color, read_flo, write_flo


def test_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(0)
    flow = rng.standard_normal((2, 6, 9)).astype(np.float32)
    path = tmp_path / "f.flo"
    write_flo(path, flow)
    back = read_flo(path)
    assert back.shape == (2, 6, 9)
    assert np.array_equal(back, flow)


def test_header_layout(tmp_path):
    flow = np.zeros((2, 3, 5), np.float32)
    path = tmp_path / "h.flo"
    write_flo(path, flow)
    raw = path.read_bytes()
    assert np.frombuffer(raw, np.float32, 1)[0] == FLO_MAGIC
    w, h = np.frombuffer(raw, np.int32, 2, offset=4)
    assert (w, h) == (5, 3)
    assert len(raw) == 12 + 4 * 2 * 3 * 5


def test_bad_shape_rejected(tmp_path):
    with pytest.raises(DimensionError):
        write_flo(tmp_path / "x.flo", np.zeros((3, 4, 4), np.float32))


def test_zero_flow_maps_to_white_center():
    img = flow_to_color(np.zeros((2, 8, 8), np.float32))
    assert img.shape == (8, 8, 3)
    assert (img >= 250).all()  # neutral/white center of the wheel


def test_direction_changes_hue():
    right = np.zeros((2, 4, 4), np.float32)
    right[0] = 1.0
    left = -right
    a = flow_to_color(right, max_radius=1.0)
    b = flow_to_color(left, max_radius=1.0)
    assert not np.array_equal(a, b)
