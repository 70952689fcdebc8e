"""
合成场景服务
生成地面上的方盒与可行驶带、点溅射渲染多相机图像、BEV 真值掩码
"""
import logging
import queue
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from matplotlib.path import Path as PolygonPath

from eaformer.config import settings
from eaformer.exceptions import PlacementError
from eaformer.models import Box, RenderParams, SceneParams, SemanticClass, SyntheticScene
from eaformer.utils.geometry import BevGrid, CameraView, camera_points

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
INSIDE_TOL = 1e-9
CLASS_ORDER = (SemanticClass.VEHICLE, SemanticClass.DRIVABLE)


@dataclass
class Sample:
    """One training / evaluation example."""

    scene: SyntheticScene
    images: List[np.ndarray]  # per view, (H, W, 3) in [0, 1]
    targets: np.ndarray  # (classes, cells_y, cells_x) in {0, 1}


def _rect_distance(box: Box, point: Tuple[float, float]) -> float:
    x0, x1, y0, y1 = box.bounds
    dx = max(x0 - point[0], 0.0, point[0] - x1)
    dy = max(y0 - point[1], 0.0, point[1] - y1)
    return float(np.hypot(dx, dy))


def _face_points(corner: np.ndarray, e1: np.ndarray, e2: np.ndarray, density: float) -> np.ndarray:
    """Regular samples on the parallelogram corner + a*e1 + b*e2, a, b in [0, 1]."""
    n1 = max(2, int(np.ceil(np.linalg.norm(e1) * density)) + 1)
    n2 = max(2, int(np.ceil(np.linalg.norm(e2) * density)) + 1)
    a, b = np.meshgrid(np.linspace(0.0, 1.0, n1), np.linspace(0.0, 1.0, n2), indexing="ij")
    return corner + a.reshape(-1, 1) * e1 + b.reshape(-1, 1) * e2


def box_surface_points(box: Box, ground_height: float, density: float) -> np.ndarray:
    """Samples on the four sides and the top of a box."""
    x0, x1, y0, y1 = box.bounds
    z0, z1 = ground_height, ground_height + box.height
    up = np.array([0.0, 0.0, z1 - z0])
    faces = [
        (np.array([x0, y0, z0]), np.array([x1 - x0, 0.0, 0.0]), up),
        (np.array([x0, y1, z0]), np.array([x1 - x0, 0.0, 0.0]), up),
        (np.array([x0, y0, z0]), np.array([0.0, y1 - y0, 0.0]), up),
        (np.array([x1, y0, z0]), np.array([0.0, y1 - y0, 0.0]), up),
        (np.array([x0, y0, z1]), np.array([x1 - x0, 0.0, 0.0]), np.array([0.0, y1 - y0, 0.0])),
    ]
    return np.concatenate([_face_points(c, e1, e2, density) for c, e1, e2 in faces], axis=0)


class SynthService:
    """合成世界服务类"""

    # === 生成 ===
    @staticmethod
    def generate(seed: int, grid: BevGrid, params: Optional[SceneParams] = None, rig_ref: str = "") -> SyntheticScene:
        """
        Boxes placed uniformly inside the grid without overlap (rejection
        sampling), plus an axis-aligned drivable band through the ego origin.
        """
        params = params or SceneParams()
        rng = np.random.default_rng(seed)
        gx0, gx1, gy0, gy1 = grid.bounds

        width = rng.uniform(params.min_drivable_width, params.max_drivable_width)
        slack = max(width / 2.0 - 0.5, 0.0)
        y_mid = rng.uniform(-slack, slack)
        drivable = [(gx0, y_mid - width / 2.0), (gx1, y_mid - width / 2.0),
                    (gx1, y_mid + width / 2.0), (gx0, y_mid + width / 2.0)]

        n_boxes = int(rng.integers(params.min_boxes, params.max_boxes + 1))
        boxes: List[Box] = []
        for k in range(n_boxes):
            for _ in range(params.max_tries):
                sx, sy = rng.uniform(params.min_box_size, params.max_box_size, size=2)
                height = rng.uniform(params.min_box_height, params.max_box_height)
                if sx > gx1 - gx0 or sy > gy1 - gy0:
                    continue
                cx = rng.uniform(gx0 + sx / 2.0, gx1 - sx / 2.0)
                cy = rng.uniform(gy0 + sy / 2.0, gy1 - sy / 2.0)
                box = Box(center=(cx, cy), size=(sx, sy), height=height)
                if _rect_distance(box, (0.0, 0.0)) < params.ego_clearance:
                    continue
                if any(box.intersects(other) for other in boxes):
                    continue
                boxes.append(box)
                break
            else:
                raise PlacementError(f"could not place box {k + 1}/{n_boxes} after {params.max_tries} tries")
        logger.debug("scene seed=%d: %d boxes", seed, len(boxes))
        return SyntheticScene(boxes=boxes, drivable=drivable, rig_ref=rig_ref, seed=seed, grid_spec=grid.spec)

    # === 渲染 ===
    @staticmethod
    def render(scene: SyntheticScene, view: CameraView, params: Optional[RenderParams] = None,
               ground_height: float = 0.0) -> np.ndarray:
        """Point-splat rendering of ``scene`` into ``view``; returns (H, W, 3) floats in [0, 1]."""
        params = params or RenderParams()
        w, h = view.image_size
        background = np.asarray(params.background, dtype=np.float64)
        image = np.broadcast_to(background, (h, w, 3)).copy()

        # ground: intersect every pixel ray with the ground plane
        vv, uu = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
        rays_cam = np.stack([(uu - view.cx) / view.fx, (vv - view.cy) / view.fy, np.ones_like(uu)], axis=-1)
        rays_ego = rays_cam @ view.rotation  # R^T d for every pixel
        origin = view.center
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (ground_height - origin[2]) / rays_ego[..., 2]
        ground_depth = np.where((rays_ego[..., 2] < 0.0) & (t > 0.0), t, np.inf)
        hit = np.isfinite(ground_depth)
        if np.any(hit):
            pts = origin[:2] + t[hit][:, None] * rays_ego[hit][:, :2]
            color = np.broadcast_to(np.asarray(params.ground), (len(pts), 3)).copy()
            if scene.drivable:
                inside = PolygonPath(np.asarray(scene.drivable)).contains_points(pts)
                color[inside] = params.drivable
            image[hit] = color

        # boxes: splat surface samples through a depth buffer
        box_depth = np.full((h, w), np.inf)
        samples = [box_surface_points(b, ground_height, params.samples_per_meter) for b in scene.boxes]
        if samples:
            cam = camera_points(view, np.concatenate(samples, axis=0))
            front = cam[:, 2] > 1e-9
            cam = cam[front]
            u = np.floor(view.fx * cam[:, 0] / cam[:, 2] + view.cx).astype(np.int64)
            v = np.floor(view.fy * cam[:, 1] / cam[:, 2] + view.cy).astype(np.int64)
            keep = (u >= 0) & (u < w) & (v >= 0) & (v < h)
            np.minimum.at(box_depth, (v[keep], u[keep]), cam[keep, 2])
        boxes_win = box_depth < ground_depth
        image[boxes_win] = params.vehicle

        depth = np.where(boxes_win, box_depth, ground_depth)
        if params.fog_distance is not None:
            seen = np.isfinite(depth)
            a = np.exp(-depth[seen] / params.fog_distance)[:, None]
            image[seen] = image[seen] * a + background * (1.0 - a)
        return image

    def render_views(self, scene: SyntheticScene, views: Sequence[CameraView],
                     params: Optional[RenderParams] = None, workers: Optional[int] = None) -> List[np.ndarray]:
        """Render every view; views are independent and may run concurrently."""
        workers = settings.worker_count if workers is None else workers
        if workers <= 1 or len(views) <= 1:
            return [self.render(scene, v, params) for v in views]
        with ThreadPoolExecutor(max_workers=min(workers, len(views))) as pool:
            return list(pool.map(lambda v: self.render(scene, v, params), views))

    # === 真值 ===
    @staticmethod
    def ground_truth(scene: SyntheticScene, grid: BevGrid) -> np.ndarray:
        """(classes, cells_y, cells_x) bool masks in CLASS_ORDER."""
        centers = grid.centers()
        vehicle = np.zeros(len(centers), dtype=bool)
        for b in scene.boxes:
            x0, x1, y0, y1 = b.bounds
            vehicle |= ((centers[:, 0] >= x0 - INSIDE_TOL) & (centers[:, 0] <= x1 + INSIDE_TOL)
                        & (centers[:, 1] >= y0 - INSIDE_TOL) & (centers[:, 1] <= y1 + INSIDE_TOL))
        drivable = np.zeros(len(centers), dtype=bool)
        if scene.drivable:
            drivable = PolygonPath(np.asarray(scene.drivable)).contains_points(centers)
        return np.stack([vehicle, drivable]).reshape(len(CLASS_ORDER), grid.cells_y, grid.cells_x)

    def make_sample(self, seed: int, grid: BevGrid, views: Sequence[CameraView],
                    scene_params: Optional[SceneParams] = None, render_params: Optional[RenderParams] = None,
                    rig_ref: str = "") -> Sample:
        scene = self.generate(seed, grid, scene_params, rig_ref)
        scene.rig = list(views)
        images = self.render_views(scene, views, render_params)
        return Sample(scene, images, self.ground_truth(scene, grid).astype(np.float64))

    # === 序列化 ===
    @staticmethod
    def scene_to_json(scene: SyntheticScene) -> str:
        return scene.model_dump_json(indent=2)

    @staticmethod
    def scene_from_json(text: str) -> SyntheticScene:
        return SyntheticScene.model_validate_json(text)

    def write_scene(self, path: PathLike, scene: SyntheticScene) -> Path:
        path = Path(path)
        path.write_text(self.scene_to_json(scene) + "\n", encoding="utf-8")
        return path

    def read_scene(self, path: PathLike) -> SyntheticScene:
        return self.scene_from_json(Path(path).read_text(encoding="utf-8"))


# 全局实例
synth_service = SynthService()


class SceneStream:
    """
    Samples for seeds ``seeds[0], seeds[1], ...`` produced ahead of time on a
    background thread; delivery order always follows ``seeds``.
    """

    _DONE = object()

    def __init__(self, seeds: Sequence[int], grid: BevGrid, views: Sequence[CameraView],
                 scene_params: Optional[SceneParams] = None, render_params: Optional[RenderParams] = None,
                 prefetch: int = 2):
        self.seeds = list(seeds)
        self.grid = grid
        self.views = list(views)
        self.scene_params = scene_params
        self.render_params = render_params
        self._queue: "queue.Queue" = queue.Queue(maxsize=max(1, prefetch))
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def _produce(self) -> None:
        try:
            for seed in self.seeds:
                if self._stop.is_set():
                    return
                sample = synth_service.make_sample(seed, self.grid, self.views,
                                                   self.scene_params, self.render_params)
                self._put(sample)
        except Exception as e:  # re-raised on the consumer thread
            self._put(e)
        self._put(self._DONE)

    def _put(self, item) -> None:
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return
            except queue.Full:
                continue

    def __iter__(self) -> Iterator[Sample]:
        self._stop.clear()
        self._thread = threading.Thread(target=self._produce, name="scene-stream", daemon=True)
        self._thread.start()
        try:
            while True:
                item = self._queue.get()
                if item is self._DONE:
                    return
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            self.close()

    def close(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5.0)
            self._thread = None
        while not self._queue.empty():
            self._queue.get_nowait()
