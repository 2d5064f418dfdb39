import numpy as np
import pytest

from densityflow.formats import heat_image, read_dmap, read_ppm, write_dmap, write_ppm


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).uniform(size=(3, 5, 7))
    write_ppm(tmp_path / "a.ppm", img)
    raw = (tmp_path / "a.ppm").read_bytes()
    assert raw.startswith(b"P6\n7 5\n255\n")
    back = read_ppm(tmp_path / "a.ppm")
    assert back.shape == (3, 5, 7)
    np.testing.assert_allclose(back, img, atol=0.5 / 255 + 1e-12)


def test_ppm_rejects_other_magic(tmp_path):
    (tmp_path / "b.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "b.ppm")


def test_dmap_layout_and_round_trip(tmp_path):
    values = np.arange(12, dtype=np.float64).reshape(3, 4) / 7
    write_dmap(tmp_path / "d.dmap", values)
    raw = (tmp_path / "d.dmap").read_bytes()
    assert raw[:4] == b"DMAP"
    assert np.frombuffer(raw[4:12], "<u4").tolist() == [3, 4]
    assert len(raw) == 12 + 4 * 12
    np.testing.assert_array_equal(read_dmap(tmp_path / "d.dmap"), values.astype(np.float32))


def test_dmap_truncated(tmp_path):
    write_dmap(tmp_path / "d.dmap", np.ones((2, 2)))
    (tmp_path / "d.dmap").write_bytes((tmp_path / "d.dmap").read_bytes()[:-1])
    with pytest.raises(ValueError):
        read_dmap(tmp_path / "d.dmap")


def test_heat_image():
    v = np.array([[0.0, 1.0], [2.0, 4.0]])
    img = heat_image(v)
    assert img.shape == (3, 2, 2)
    np.testing.assert_allclose(img[0], v / 4)
    np.testing.assert_array_equal(img[0], img[2])
    assert not heat_image(np.zeros((3, 3))).any()
