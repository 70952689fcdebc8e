import numpy as np
import pytest

from eaformer.exceptions import PlacementError
from eaformer.models import Box, RenderParams, SceneParams, SyntheticScene
from eaformer.services.rig_service import rig_service
from eaformer.services.synth_service import SceneStream, box_surface_points, synth_service
from eaformer.utils.geometry import BevGrid, project

NO_FOG = RenderParams(fog_distance=None)


def _vehicle_pixels(image: np.ndarray, params: RenderParams = NO_FOG) -> np.ndarray:
    return np.all(image == np.asarray(params.vehicle), axis=-1)


# === generate ===
def test_generation_is_deterministic(toy_grid):
    a = synth_service.generate(7, toy_grid)
    b = synth_service.generate(7, toy_grid)
    assert a.model_dump() == b.model_dump()
    assert synth_service.generate(8, toy_grid).model_dump() != a.model_dump()


def test_zero_boxes(toy_grid):
    scene = synth_service.generate(0, toy_grid, SceneParams(min_boxes=0, max_boxes=0))
    assert scene.boxes == []
    assert len(scene.drivable) == 4


@pytest.mark.parametrize("seed", range(20))
def test_boxes_are_disjoint_inside_the_grid_and_clear_of_ego(seed, toy_grid):
    params = SceneParams()
    scene = synth_service.generate(seed, toy_grid, params)
    gx0, gx1, gy0, gy1 = toy_grid.bounds
    for k, box in enumerate(scene.boxes):
        x0, x1, y0, y1 = box.bounds
        assert gx0 <= x0 and x1 <= gx1 and gy0 <= y0 and y1 <= gy1
        dx = max(x0, 0.0, -x1)
        dy = max(y0, 0.0, -y1)
        assert np.hypot(dx, dy) >= params.ego_clearance
        for other in scene.boxes[k + 1:]:
            assert not box.intersects(other)


def test_drivable_band_covers_the_ego_row(toy_grid):
    for seed in range(10):
        gt = synth_service.ground_truth(synth_service.generate(seed, toy_grid), toy_grid)
        rows = [j for j in range(toy_grid.cells_y) if abs(toy_grid.cell_center((0, j))[1]) < 0.5]
        assert gt[1][rows].all()


def test_impossible_placement_raises():
    grid = BevGrid.centered(4, 4, 1.0)
    params = SceneParams(min_boxes=5, max_boxes=5, min_box_size=3.9, max_box_size=4.0, max_tries=50)
    with pytest.raises(PlacementError):
        synth_service.generate(0, grid, params)


# === render ===
def test_empty_scene_sky_is_background(canonical):
    image = synth_service.render(SyntheticScene(), canonical)
    assert image.shape == (120, 240, 3)
    np.testing.assert_array_equal(image[:60], np.broadcast_to(RenderParams().background, (60, 240, 3)))
    assert not np.allclose(image[-1], RenderParams().background)


def test_box_on_the_optical_axis_is_centred(canonical):
    scene = SyntheticScene(boxes=[Box(center=(6.0, 0.0), size=(1.0, 1.0), height=3.0)])
    row = _vehicle_pixels(synth_service.render(scene, canonical, NO_FOG))[60]
    cols = np.flatnonzero(row)
    assert cols.size > 0
    assert (cols.min() + cols.max() + 1) / 2.0 == pytest.approx(120.0, abs=1.0)


def test_near_box_hides_the_far_box(canonical):
    near = Box(center=(4.0, 0.0), size=(1.0, 1.0), height=3.0)
    far = Box(center=(8.0, 0.0), size=(1.0, 1.0), height=1.0)
    both = synth_service.render(SyntheticScene(boxes=[near, far]), canonical, NO_FOG)
    only_near = synth_service.render(SyntheticScene(boxes=[near]), canonical, NO_FOG)
    assert both.tobytes() == only_near.tobytes()


def test_fog_fades_towards_background(canonical):
    scene = SyntheticScene(boxes=[Box(center=(6.0, 0.0), size=(1.0, 1.0), height=3.0)])
    foggy = synth_service.render(scene, canonical)[60, 120]
    clear = synth_service.render(scene, canonical, NO_FOG)[60, 120]
    bg = np.asarray(RenderParams().background)
    assert np.linalg.norm(foggy - bg) < np.linalg.norm(clear - bg)


def test_surface_points_lie_on_the_box():
    box = Box(center=(1.0, 2.0), size=(2.0, 1.0), height=1.5)
    pts = box_surface_points(box, 0.0, 10.0)
    x0, x1, y0, y1 = box.bounds
    assert pts[:, 0].min() == pytest.approx(x0) and pts[:, 0].max() == pytest.approx(x1)
    assert pts[:, 1].min() == pytest.approx(y0) and pts[:, 1].max() == pytest.approx(y1)
    assert pts[:, 2].min() == pytest.approx(0.0) and pts[:, 2].max() == pytest.approx(1.5)


def test_threaded_rendering_matches_serial(toy_views, toy_grid):
    scene = synth_service.generate(3, toy_grid)
    serial = synth_service.render_views(scene, toy_views, workers=1)
    threaded = synth_service.render_views(scene, toy_views, workers=4)
    for a, b in zip(serial, threaded):
        assert a.tobytes() == b.tobytes()


# === ground truth ===
def test_box_cells(toy_grid):
    scene = SyntheticScene(boxes=[Box(center=(2.0, 1.0), size=(1.0, 1.0), height=1.0)])
    assert synth_service.ground_truth(scene, toy_grid)[0].sum() == 4


def test_box_edges_through_cell_centers_are_inclusive(toy_grid):
    scene = SyntheticScene(boxes=[Box(center=(2.25, 0.75), size=(1.0, 1.0), height=1.0)])
    assert synth_service.ground_truth(scene, toy_grid)[0].sum() == 9


def test_ground_truth_does_not_depend_on_the_rig(rigs_dir, toy_views, toy_grid):
    six = rig_service.parse_rig(rigs_dir / "six_camera.json")
    params = RenderParams(samples_per_meter=10.0)
    a = synth_service.make_sample(11, toy_grid, toy_views, render_params=params)
    b = synth_service.make_sample(11, toy_grid, six, render_params=params)
    np.testing.assert_array_equal(a.targets, b.targets)
    assert len(a.images) == 2 and len(b.images) == 6


def test_ground_truth_cells_project_onto_rendered_vehicle_pixels(canonical, toy_grid):
    box = Box(center=(3.0, 0.0), size=(1.0, 1.0), height=2.0)
    scene = SyntheticScene(boxes=[box])
    gt = synth_service.ground_truth(scene, toy_grid)[0]
    vehicle = _vehicle_pixels(synth_service.render(scene, canonical, NO_FOG))
    assert gt.sum() == 4
    for j, i in zip(*np.nonzero(gt)):
        x, y = toy_grid.cell_center((i, j))
        (u, v), depth = project(canonical, [x, y, 1.0])
        assert depth > 0
        assert vehicle[int(np.floor(v)), int(np.floor(u))]


# === serialization / streaming ===
def test_scene_json_roundtrip(tmp_path, toy_grid):
    scene = synth_service.generate(5, toy_grid, rig_ref="toy")
    path = synth_service.write_scene(tmp_path / "scene.json", scene)
    back = synth_service.read_scene(path)
    assert back.model_dump() == scene.model_dump()
    assert back.grid_spec == "16x16@0.5"


def test_stream_delivers_in_seed_order(toy_views, toy_grid):
    seeds = [5, 3, 9]
    params = RenderParams(samples_per_meter=10.0)
    got = [s.scene.seed for s in SceneStream(seeds, toy_grid, toy_views, render_params=params, prefetch=1)]
    assert got == seeds


def test_stream_reraises_producer_errors():
    grid = BevGrid.centered(4, 4, 1.0)
    params = SceneParams(min_boxes=5, max_boxes=5, min_box_size=3.9, max_box_size=4.0, max_tries=5)
    stream = SceneStream([1, 2], grid, [], scene_params=params)
    with pytest.raises(PlacementError):
        list(stream)
