import numpy as np
import pytest

from eaformer.exceptions import DegenerateLineError, ProjectionError, ShapeError
from eaformer.services.oracle_service import DISTANCE_TOL, oracle_service
from eaformer.utils.geometry import (
    BevGrid, CameraView, EpipolarLine, camera_points, cheirality, epipolar_line, epipolar_lines,
    level_camera, make_camera, normalize_line, point_line_distance, project, project_points,
    ray_points, scale_intrinsics,
)


def _grid_with_cell_at(x: float, y: float) -> BevGrid:
    # one-cell grid whose only center is (x, y)
    return BevGrid(1, 1, 0.5, (x, y))


def _random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _random_view(rng) -> CameraView:
    rot = _random_rotation(rng)
    t = rng.uniform(-1.0, 1.0, 3)
    t *= rng.uniform(0.0, 5.0) / max(np.linalg.norm(t), 1e-12)
    fx, fy = rng.uniform(50.0, 500.0, 2)
    return CameraView(np.array([[fx, 0, 320.0], [0, fy, 240.0], [0, 0, 1]]), rot, t, (640, 480))


# === CameraView ===
def test_rotation_must_be_orthonormal():
    with pytest.raises(ShapeError):
        CameraView(np.eye(3), np.diag([1.0, 1.0, 1.1]), np.zeros(3), (10, 10))


def test_rotation_must_be_proper():
    with pytest.raises(ShapeError):
        CameraView(np.eye(3), np.diag([1.0, 1.0, -1.0]), np.zeros(3), (10, 10))


def test_focal_must_be_positive():
    with pytest.raises(ShapeError):
        CameraView(np.diag([0.0, 1.0, 1.0]), np.eye(3), np.zeros(3), (10, 10))


def test_canonical_camera_center(canonical):
    np.testing.assert_allclose(canonical.center, [0.0, 0.0, 1.5], atol=1e-15)


# === scale_intrinsics ===
def test_scale_intrinsics_to_quarter(canonical):
    small = scale_intrinsics(canonical, (60, 30))
    assert small.fx == pytest.approx(25.0)
    assert small.cx == pytest.approx(30.0)
    assert small.fy == pytest.approx(25.0)
    assert small.cy == pytest.approx(15.0)
    assert small.image_size == (60, 30)


def test_scale_intrinsics_identity(canonical):
    same = scale_intrinsics(canonical, canonical.image_size)
    np.testing.assert_array_equal(same.intrinsics, canonical.intrinsics)


def test_scale_intrinsics_rejects_empty_map(canonical):
    with pytest.raises(ShapeError):
        scale_intrinsics(canonical, (0, 30))


def test_scale_intrinsics_commutes_with_projection(canonical):
    point = [7.0, 1.3, 0.4]
    full, _ = project(canonical, point)
    quarter, _ = project(scale_intrinsics(canonical, (60, 30)), point)
    np.testing.assert_allclose(quarter, full / 4.0, atol=1e-9)


def test_scale_commutes_for_random_rigs():
    rng = np.random.default_rng(10)
    for _ in range(50):
        view = _random_view(rng)
        p = view.center + view.rotation.T @ np.array([0.3, -0.2, 4.0])
        full, _ = project(view, p)
        half, _ = project(scale_intrinsics(view, (320, 240)), p)
        np.testing.assert_allclose(half, full / 2.0, atol=1e-9)


# === project ===
def test_project_optical_axis(canonical):
    pixel, depth = project(canonical, [10.0, 0.0, 1.5])
    np.testing.assert_allclose(pixel, [120.0, 60.0], atol=1e-12)
    assert depth == pytest.approx(10.0)


def test_project_ground_point(canonical):
    pixel, depth = project(canonical, [10.0, 0.0, 0.0])
    np.testing.assert_allclose(pixel, [120.0, 75.0], atol=1e-12)
    assert depth == pytest.approx(10.0)


def test_project_behind_camera_reports_negative_depth(canonical):
    pixel, depth = project(canonical, [-10.0, 1.0, 0.0])
    assert depth < 0
    assert np.all(np.isfinite(pixel))


def test_project_at_infinity(canonical):
    with pytest.raises(ProjectionError):
        project(canonical, [0.0, 1.0, 1.5])


def test_project_points_matches_project(canonical):
    pts = np.array([[10.0, 0.0, 0.0], [5.0, 2.0, 1.0]])
    pixels, depths = project_points(canonical, pts)
    for p, px, d in zip(pts, pixels, depths):
        ref, ref_d = project(canonical, p)
        np.testing.assert_allclose(px, ref, atol=1e-12)
        assert d == pytest.approx(ref_d)


# === epipolar_line ===
def test_epipolar_line_of_on_axis_cell(canonical):
    line = epipolar_line(canonical, _grid_with_cell_at(10.0, 0.0), (0, 0))
    assert not line.degenerate
    sign = np.sign(line.a)
    np.testing.assert_allclose(sign * line.coeffs, [1.0, 0.0, -120.0], atol=1e-9)


def test_epipolar_line_under_the_camera_is_degenerate(canonical):
    assert epipolar_line(canonical, _grid_with_cell_at(0.0, 0.0), (0, 0)).degenerate


def test_epipolar_line_entirely_behind_is_degenerate(canonical):
    assert epipolar_line(canonical, _grid_with_cell_at(-10.0, 0.0), (0, 0)).degenerate


def test_normalized_line_has_unit_normal():
    rng = np.random.default_rng(11)
    grid = BevGrid.centered(20, 20, 0.5)
    view = level_camera(30.0, (0.5, 0.2, 1.5))
    for _ in range(50):
        cell = (int(rng.integers(20)), int(rng.integers(20)))
        line = epipolar_line(view, grid, cell)
        if not line.degenerate:
            assert line.a ** 2 + line.b ** 2 == pytest.approx(1.0, abs=1e-12)


def test_normalization_is_idempotent():
    line = normalize_line([3.0, 4.0, 10.0])
    again = normalize_line(line.coeffs)
    np.testing.assert_allclose(again.coeffs, line.coeffs, atol=1e-12)


def test_line_invariant_under_ray_point_choice():
    rng = np.random.default_rng(12)
    grid = BevGrid.centered(30, 30, 0.5)
    for _ in range(50):
        view = _random_view(rng)
        cell = (int(rng.integers(30)), int(rng.integers(30)))
        a = epipolar_line(view, grid, cell, (0.0, 1.0))
        b = epipolar_line(view, grid, cell, (-3.0, 7.0))
        if a.degenerate or b.degenerate or not cheirality(view, grid, cell):
            continue
        sign = np.sign(a.coeffs @ b.coeffs)
        np.testing.assert_allclose(a.coeffs, sign * b.coeffs, atol=1e-9, rtol=1e-9)


def test_vectorised_lines_match_single_lines(toy_grid):
    view = level_camera(45.0, (0.3, -0.2, 1.2), fx=40.0, image_size=(128, 64))
    coeffs, degenerate = epipolar_lines(view, toy_grid)
    for q, cell in enumerate(toy_grid.cells()):
        line = epipolar_line(view, toy_grid, cell)
        assert degenerate[q] == line.degenerate
        if not line.degenerate:
            np.testing.assert_allclose(coeffs[q], line.coeffs, atol=1e-12)


def test_epipolar_constraint_for_random_rigs():
    rng = np.random.default_rng(13)
    grid = BevGrid.centered(40, 40, 0.5)
    checked = 0
    for _ in range(40_000):
        if checked == 1000:
            break
        view = _random_view(rng)
        cell = (int(rng.integers(40)), int(rng.integers(40)))
        if not cheirality(view, grid, cell):
            continue
        line = epipolar_line(view, grid, cell)
        if line.degenerate:
            continue
        x, y = grid.cell_center(cell)
        z = rng.uniform(-5.0, 10.0, 100)
        cam = camera_points(view, np.column_stack([np.full(100, x), np.full(100, y), z]))
        cam = cam[cam[:, 2] > 0.05]
        if len(cam) == 0:
            continue
        uv = cam[:, :2] / cam[:, 2:3] * [view.fx, view.fy] + [view.cx, view.cy]
        assert np.max(np.abs(uv @ line.coeffs[:2] + line.c)) < 1e-6
        checked += 1
    assert checked == 1000


# === point_line_distance ===
def test_point_line_distance_vertical_line():
    assert point_line_distance([125.0, 40.0, 1.0], EpipolarLine(1.0, 0.0, -120.0)) == pytest.approx(5.0)


def test_point_on_line_has_zero_distance():
    assert point_line_distance([120.0, 7.0, 1.0], EpipolarLine(1.0, 0.0, -120.0)) == 0.0


def test_distance_to_degenerate_line_fails():
    with pytest.raises(DegenerateLineError):
        point_line_distance([1.0, 2.0, 1.0], normalize_line([0.0, 0.0, 1.0]))


def test_distance_matches_dense_line_samples():
    rng = np.random.default_rng(14)
    for _ in range(20):
        line = normalize_line(rng.standard_normal(3) * [1.0, 1.0, 100.0])
        x = rng.uniform(0.0, 200.0, 2)
        normal = line.coeffs[:2]
        foot = -line.c * normal
        direction = np.array([-normal[1], normal[0]])
        s = np.linspace(-1000.0, 1000.0, 100_000)
        pts = foot + s[:, None] * direction
        brute = np.min(np.linalg.norm(pts - x, axis=1))
        assert abs(abs(point_line_distance(x, line)) - brute) < 1e-3 + 2000.0 / 100_000


def test_distance_agrees_with_brute_force_on_random_rigs():
    rng = np.random.default_rng(15)
    grid = BevGrid.centered(40, 40, 0.5)
    errors = []
    for _ in range(20_000):
        if len(errors) == 100:
            break
        view = _random_view(rng)
        cell = (int(rng.integers(40)), int(rng.integers(40)))
        # both ray anchors at least 1 m in front keeps the projected segment in a sane pixel range
        if not cheirality(view, grid, cell) or np.any(camera_points(view, ray_points(grid, cell))[:, 2] < 1.0):
            continue
        err = oracle_service.check_distance(view, grid, cell, rng)
        if err is not None:
            errors.append(err)
    assert len(errors) == 100
    assert max(errors) < DISTANCE_TOL


# === cheirality ===
def test_cheirality_front_and_back(canonical):
    assert cheirality(canonical, _grid_with_cell_at(10.0, 0.0), (0, 0))
    assert not cheirality(canonical, _grid_with_cell_at(-10.0, 0.0), (0, 0))


def test_visible_fraction_is_forward_half_plane():
    grid = BevGrid.centered(20, 20, 0.5)
    view = make_camera(100.0, 100.0, 120.0, 60.0, (240, 120),
                       np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]]), (0.0, 0.0, 1.5))
    visible = sum(cheirality(view, grid, c) for c in grid.cells())
    forward = sum(grid.cell_center(c)[0] > 0 for c in grid.cells())
    assert visible == forward


# === BevGrid ===
def test_default_grid_is_200_by_200_half_meter_cells():
    grid = BevGrid.centered()
    assert grid.extent == (100.0, 100.0)
    assert grid.n_cells == 40_000


def test_grid_parse_and_query_order():
    grid = BevGrid.parse("4x3@0.5")
    assert (grid.cells_x, grid.cells_y, grid.cell_size) == (4, 3, 0.5)
    assert grid.query_index((1, 2)) == 9
    assert grid.cell_of(9) == (1, 2)
    np.testing.assert_allclose(grid.centers()[9], grid.cell_center((1, 2)))
    np.testing.assert_allclose(grid.cell_center((1, 0)) - grid.cell_center((0, 0)), [0.5, 0.0])


def test_grid_parse_rejects_garbage():
    with pytest.raises(ValueError):
        BevGrid.parse("16by16")
