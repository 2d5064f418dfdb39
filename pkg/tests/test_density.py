import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from densityflow.density import DensityGrid, PointAnnotation, count, read_points, render_density, write_points

from oracles import density_pixels


def random_points(rng, n, H, W):
    return [PointAnnotation(0, float(rng.uniform(0, W)), float(rng.uniform(0, H))) for _ in range(n)]


def test_empty_frame_is_zero():
    grid = render_density([], 64, 64)
    assert grid.shape == (8, 8)
    assert count(grid) == 0.0
    assert not grid.numpy().any()


def test_single_center_point():
    grid = render_density([PointAnnotation(0, 32.0, 32.0)], 64, 64)
    assert grid.shape == (8, 8)
    assert count(grid) == pytest.approx(1.0, rel=1e-9)
    assert np.unravel_index(grid.numpy().argmax(), grid.shape) == (4, 4)


def test_random_points_match_pixel_oracle():
    rng = np.random.default_rng(37)
    pts = random_points(rng, 37, 96, 160)
    grid = render_density(pts, 96, 160)
    assert grid.shape == (12, 20)
    assert count(grid) == pytest.approx(37.0, rel=1e-9)
    np.testing.assert_allclose(grid.numpy(), density_pixels(pts, 96, 160, 3.0), atol=1e-9)


def test_corner_points_keep_mass():
    pts = [PointAnnotation(0, 0.0, 0.0), PointAnnotation(0, 63.9, 63.9), PointAnnotation(0, 0.0, 63.0)]
    grid = render_density(pts, 64, 64)
    assert count(grid) == pytest.approx(3.0, rel=1e-9)
    np.testing.assert_allclose(grid.numpy(), density_pixels(pts, 64, 64, 3.0), atol=1e-9)


@given(st.integers(0, 2**32 - 1), st.integers(0, 60))
@settings(max_examples=40, deadline=None)
def test_mass_preservation(seed, n):
    rng = np.random.default_rng(seed)
    grid = render_density(random_points(rng, n, 40, 48), 40, 48, sigma=float(rng.uniform(0.5, 6)))
    assert count(grid) == pytest.approx(n, rel=1e-9, abs=1e-12)
    assert grid.numpy().min() >= 0


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_translation_by_one_cell(seed):
    rng = np.random.default_rng(seed)
    # kernels stay inside the frame both before and after the shift
    pts = [PointAnnotation(0, float(rng.uniform(12, 64 - 13 - 8)), float(rng.uniform(12, 48 - 13))) for _ in range(5)]
    moved = [PointAnnotation(0, p.x + 8, p.y) for p in pts]
    a = render_density(pts, 48, 64).numpy()
    b = render_density(moved, 48, 64).numpy()
    np.testing.assert_allclose(b[:, 1:], a[:, :-1], atol=1e-9)
    np.testing.assert_allclose(b[:, 0], 0.0, atol=1e-9)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_adding_a_point_is_monotone(seed):
    rng = np.random.default_rng(seed)
    pts = random_points(rng, 6, 32, 32)
    extra = random_points(rng, 1, 32, 32)
    before = render_density(pts, 32, 32).numpy()
    after = render_density(pts + extra, 32, 32).numpy()
    assert np.all(after >= before)


def test_errors():
    with pytest.raises(ValueError, match="outside"):
        render_density([PointAnnotation(0, 64.0, 3.0)], 64, 64)
    with pytest.raises(ValueError, match="divisible"):
        render_density([], 60, 64)


def test_count_hand_built():
    assert count(DensityGrid(np.zeros((3, 3)))) == 0.0
    assert count(DensityGrid(np.array([[0.5, 0.5], [1.0, 0.0]]))) == 2.0


def test_count_of_rendered_points():
    rng = np.random.default_rng(4)
    assert count(render_density(random_points(rng, 12, 64, 64), 64, 64)) == pytest.approx(12, rel=1e-9)


def test_annotation_file_round_trip(tmp_path):
    pts = [PointAnnotation(0, 1.25, 2.5), PointAnnotation(3, 10.0, 0.1)]
    path = tmp_path / "points.txt"
    write_points(path, pts)
    raw = path.read_bytes()
    assert b"\r" not in raw and raw.endswith(b"\n")
    assert read_points(path) == pts


def test_annotation_file_skips_comments(tmp_path):
    path = tmp_path / "p.txt"
    path.write_bytes(b"# header\n0 1.5 2.5\n\n# another\n1 3 4\n")
    assert read_points(path) == [PointAnnotation(0, 1.5, 2.5), PointAnnotation(1, 3.0, 4.0)]
