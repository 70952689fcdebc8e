"""
Camera geometry
针孔相机、BEV 平面（第 0 视角）、极线构造与点线距离

Conventions: ego frame x-forward / y-left / z-up; camera frame z-forward /
x-right / y-down. ``rotation``/``translation`` map ego -> camera.
"""
import logging
import re
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np

from eaformer.exceptions import DegenerateLineError, ProjectionError, ShapeError

logger = logging.getLogger(__name__)

ORTHONORMAL_TOL = 1e-9
PROJECTION_EPS = 1e-9
COINCIDENT_PX = 1e-9

Cell = Tuple[int, int]


# === Camera ===
@dataclass(frozen=True, eq=False)
class CameraView:
    """Intrinsics, ego->camera pose and image geometry of one camera (view n >= 1)."""

    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    image_size: Tuple[int, int]
    view_id: int = 1
    name: str = ""

    def __post_init__(self):
        k = np.array(self.intrinsics, dtype=np.float64).reshape(3, 3)
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))

        if not np.allclose(r @ r.T, np.eye(3), atol=ORTHONORMAL_TOL, rtol=0.0):
            raise ShapeError(f"camera {self.label}: rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHONORMAL_TOL:
            raise ShapeError(f"camera {self.label}: rotation determinant must be +1")
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise ShapeError(f"camera {self.label}: focal lengths must be positive")
        if min(self.image_size) <= 0:
            raise ShapeError(f"camera {self.label}: image size must be positive")

    @property
    def label(self) -> str:
        return self.name or f"view{self.view_id}"

    @property
    def fx(self) -> float:
        return float(self.intrinsics[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsics[1, 1])

    @property
    def cx(self) -> float:
        return float(self.intrinsics[0, 2])

    @property
    def cy(self) -> float:
        return float(self.intrinsics[1, 2])

    @property
    def mean_focal(self) -> float:
        return 0.5 * (self.fx + self.fy)

    @property
    def center(self) -> np.ndarray:
        """Camera origin O_n in ego coordinates."""
        return -self.rotation.T @ self.translation

    def fingerprint(self) -> bytes:
        """Byte key identifying the calibration (used for field caching)."""
        return b"".join([
            self.intrinsics.tobytes(), self.rotation.tobytes(), self.translation.tobytes(),
            np.array(self.image_size, dtype=np.int64).tobytes(),
        ])


def make_camera(
        fx: float, fy: float, cx: float, cy: float,
        image_size: Tuple[int, int],
        rotation: np.ndarray, center: Sequence[float],
        view_id: int = 1, name: str = "") -> CameraView:
    """Build a view from intrinsics, ego->camera rotation and the camera center in ego."""
    k = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
    r = np.asarray(rotation, dtype=np.float64)
    t = -r @ np.asarray(center, dtype=np.float64)
    return CameraView(k, r, t, image_size, view_id=view_id, name=name)


# ego (x fwd, y left, z up) -> camera (x right, y down, z fwd) for a level camera facing +x
EGO_TO_RDF = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


def yaw_matrix(yaw_rad: float) -> np.ndarray:
    """Rotation about the ego z axis."""
    c, s = np.cos(yaw_rad), np.sin(yaw_rad)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def level_camera(
        yaw_deg: float, center: Sequence[float],
        fx: float = 100.0, fy: Optional[float] = None,
        image_size: Tuple[int, int] = (240, 120),
        cx: Optional[float] = None, cy: Optional[float] = None,
        view_id: int = 1, name: str = "") -> CameraView:
    """A camera with a horizontal optical axis pointing ``yaw_deg`` from ego +x."""
    w, h = image_size
    camera_to_ego = yaw_matrix(np.deg2rad(yaw_deg)) @ EGO_TO_RDF.T
    return make_camera(
        fx, fx if fy is None else fy,
        w / 2.0 if cx is None else cx, h / 2.0 if cy is None else cy,
        image_size, camera_to_ego.T, center, view_id=view_id, name=name)


def canonical_camera() -> CameraView:
    """Camera at ego (0, 0, 1.5) facing +x, fx=fy=100, cx=120, cy=60, 240x120 px."""
    return level_camera(0.0, (0.0, 0.0, 1.5), fx=100.0, image_size=(240, 120), name="front")


def scale_intrinsics(view: CameraView, feature_size: Tuple[int, int]) -> CameraView:
    """Rescale intrinsics to a feature map of ``feature_size`` = (w, h)."""
    w, h = int(feature_size[0]), int(feature_size[1])
    if w <= 0 or h <= 0:
        raise ShapeError(f"feature size must be positive, got {feature_size}")
    sx = w / view.image_size[0]
    sy = h / view.image_size[1]
    k = view.intrinsics.copy()
    k[0, 0] *= sx
    k[0, 2] *= sx
    k[1, 1] *= sy
    k[1, 2] *= sy
    return replace(view, intrinsics=k, image_size=(w, h))


def feature_size_for(view: CameraView, scale: float) -> Tuple[int, int]:
    """Feature-map size of ``view`` at down-scale factor ``scale`` (e.g. 0.25)."""
    w = view.image_size[0] * scale
    h = view.image_size[1] * scale
    if abs(w - round(w)) > 1e-9 or abs(h - round(h)) > 1e-9 or round(w) <= 0 or round(h) <= 0:
        raise ShapeError(f"image {view.image_size} is not divisible at scale {scale}")
    return int(round(w)), int(round(h))


def camera_points(view: CameraView, points: np.ndarray) -> np.ndarray:
    """Ego points (N, 3) -> camera frame (N, 3)."""
    return np.asarray(points, dtype=np.float64) @ view.rotation.T + view.translation


def project(view: CameraView, point: Sequence[float]) -> Tuple[np.ndarray, float]:
    """Project one ego-frame point; returns (pixel (u, v), depth). Depth < 0 is reported, not rejected."""
    p = view.rotation @ np.asarray(point, dtype=np.float64) + view.translation
    depth = float(p[2])
    if abs(depth) < PROJECTION_EPS:
        raise ProjectionError(f"point {tuple(point)} projects to infinity in {view.label}")
    u = view.fx * p[0] / depth + view.cx
    v = view.fy * p[1] / depth + view.cy
    return np.array([u, v]), depth


def project_points(view: CameraView, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised projection; pixels of near-zero-depth points are NaN."""
    p = camera_points(view, points)
    depth = p[:, 2]
    safe = np.abs(depth) >= PROJECTION_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(safe, view.fx * p[:, 0] / depth + view.cx, np.nan)
        v = np.where(safe, view.fy * p[:, 1] / depth + view.cy, np.nan)
    return np.stack([u, v], axis=1), depth


# === BEV grid ===
_GRID_SPEC = re.compile(r"^\s*(\d+)\s*[xX]\s*(\d+)\s*@\s*([0-9.eE+-]+)\s*$")


@dataclass(frozen=True)
class BevGrid:
    """Orthographic view-0 plane: regular lattice of cell centers on the ground."""

    cells_x: int
    cells_y: int
    cell_size: float
    origin: Tuple[float, float]
    ground_height: float = 0.0

    def __post_init__(self):
        if self.cells_x <= 0 or self.cells_y <= 0:
            raise ShapeError("grid cell counts must be positive")
        if self.cell_size <= 0:
            raise ShapeError("grid cell size must be positive")

    @classmethod
    def centered(cls, cells_x: int = 200, cells_y: int = 200, cell_size: float = 0.5,
                 ground_height: float = 0.0) -> "BevGrid":
        """Grid centred on the ego origin (default 200 x 200 x 0.5 m = 100 m x 100 m)."""
        origin = (-(cells_x - 1) * cell_size / 2.0, -(cells_y - 1) * cell_size / 2.0)
        return cls(cells_x, cells_y, float(cell_size), origin, float(ground_height))

    @classmethod
    def parse(cls, spec: str) -> "BevGrid":
        """Parse ``WxH@CELL`` (e.g. ``16x16@0.5``) into a centred grid."""
        m = _GRID_SPEC.match(spec)
        if not m:
            raise ValueError(f"bad grid spec {spec!r}, expected WxH@CELL")
        return cls.centered(int(m.group(1)), int(m.group(2)), float(m.group(3)))

    @property
    def spec(self) -> str:
        return f"{self.cells_x}x{self.cells_y}@{self.cell_size:g}"

    @property
    def n_cells(self) -> int:
        return self.cells_x * self.cells_y

    @property
    def extent(self) -> Tuple[float, float]:
        return self.cells_x * self.cell_size, self.cells_y * self.cell_size

    @property
    def bounds(self) -> Tuple[float, float, float, float]:
        """(x_min, x_max, y_min, y_max) of the covered area (cell edges)."""
        half = self.cell_size / 2.0
        x0, y0 = self.origin
        return (x0 - half, x0 - half + self.extent[0], y0 - half, y0 - half + self.extent[1])

    def cell_center(self, cell: Cell) -> np.ndarray:
        i, j = cell
        return np.array([self.origin[0] + i * self.cell_size, self.origin[1] + j * self.cell_size])

    def query_index(self, cell: Cell) -> int:
        i, j = cell
        return j * self.cells_x + i

    def cell_of(self, q: int) -> Cell:
        return q % self.cells_x, q // self.cells_x

    def cells(self) -> Iterator[Cell]:
        """Cells in query order q = j * cells_x + i."""
        for j in range(self.cells_y):
            for i in range(self.cells_x):
                yield i, j

    def centers(self) -> np.ndarray:
        """Cell centers (n_q, 2) in query order."""
        jj, ii = np.meshgrid(np.arange(self.cells_y), np.arange(self.cells_x), indexing="ij")
        xs = self.origin[0] + ii.reshape(-1) * self.cell_size
        ys = self.origin[1] + jj.reshape(-1) * self.cell_size
        return np.stack([xs, ys], axis=1)


# === Epipolar lines ===
@dataclass(frozen=True)
class EpipolarLine:
    """Homogeneous line a*u + b*v + c = 0; normalised so a^2 + b^2 = 1 unless degenerate."""

    a: float
    b: float
    c: float
    degenerate: bool = False

    @property
    def coeffs(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c])


DEGENERATE_LINE = EpipolarLine(0.0, 0.0, 0.0, degenerate=True)


def normalize_line(coeffs: Sequence[float]) -> EpipolarLine:
    """Scale homogeneous line coefficients so that a^2 + b^2 = 1."""
    a, b, c = (float(v) for v in coeffs)
    norm = np.hypot(a, b)
    if norm <= 1e-12 * max(1.0, abs(c)):
        return DEGENERATE_LINE
    if abs(norm - 1.0) <= 1e-15:
        return EpipolarLine(a, b, c)
    return EpipolarLine(a / norm, b / norm, c / norm)


def ray_points(grid: BevGrid, cell: Cell, heights: Tuple[float, float] = (0.0, 1.0)) -> np.ndarray:
    """Two ego points on the vertical ray through a cell center (heights relative to the ground)."""
    x, y = grid.cell_center(cell)
    return np.array([[x, y, grid.ground_height + heights[0]], [x, y, grid.ground_height + heights[1]]])


def epipolar_line(view: CameraView, grid: BevGrid, cell: Cell,
                  heights: Tuple[float, float] = (0.0, 1.0)) -> EpipolarLine:
    """
    Image of the vertical ray through ``cell`` in ``view``.

    Joins the projections of two ray points (homogeneous cross product) and
    normalises; equivalent to l = E x0 without forming E.
    """
    pts = ray_points(grid, cell, heights)
    cam = camera_points(view, pts)
    h0 = view.intrinsics @ cam[0]
    h1 = view.intrinsics @ cam[1]
    d0, d1 = cam[0, 2], cam[1, 2]
    if d0 <= 0 and d1 <= 0:
        return DEGENERATE_LINE
    if abs(d0) >= PROJECTION_EPS and abs(d1) >= PROJECTION_EPS:
        if np.linalg.norm(h0[:2] / d0 - h1[:2] / d1) < COINCIDENT_PX:
            return DEGENERATE_LINE
    # cross of de-homogenised pixels == cross(h0, h1) / (d0 * d1)
    line = np.cross(h0, h1)
    if d0 * d1 < 0:
        line = -line
    return normalize_line(line)


def epipolar_lines(view: CameraView, grid: BevGrid,
                   heights: Tuple[float, float] = (0.0, 1.0)) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vectorised ``epipolar_line`` for every cell in query order.

    Returns (coeffs (n_q, 3), degenerate (n_q,) bool); degenerate rows are zero.
    """
    centers = grid.centers()
    n = centers.shape[0]
    pts0 = np.column_stack([centers, np.full(n, grid.ground_height + heights[0])])
    pts1 = np.column_stack([centers, np.full(n, grid.ground_height + heights[1])])
    cam0, cam1 = camera_points(view, pts0), camera_points(view, pts1)
    h0, h1 = cam0 @ view.intrinsics.T, cam1 @ view.intrinsics.T
    d0, d1 = cam0[:, 2], cam1[:, 2]

    degenerate = (d0 <= 0) & (d1 <= 0)
    finite = (np.abs(d0) >= PROJECTION_EPS) & (np.abs(d1) >= PROJECTION_EPS)
    with np.errstate(divide="ignore", invalid="ignore"):
        gap = np.linalg.norm(h0[:, :2] / d0[:, None] - h1[:, :2] / d1[:, None], axis=1)
    degenerate |= finite & (gap < COINCIDENT_PX)

    lines = np.cross(h0, h1)
    lines[d0 * d1 < 0] *= -1.0
    norm = np.hypot(lines[:, 0], lines[:, 1])
    degenerate |= norm <= 1e-12 * np.maximum(1.0, np.abs(lines[:, 2]))
    safe = np.where(degenerate, 1.0, norm)
    lines = np.where(degenerate[:, None], 0.0, lines / safe[:, None])
    return lines, degenerate


def point_line_distance(x: Sequence[float], line: EpipolarLine) -> float:
    """Signed distance x . l^T for a homogeneous pixel x = (u, v, 1)."""
    if line.degenerate:
        raise DegenerateLineError("distance to a degenerate epipolar line")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] == 2:
        x = np.append(x, 1.0)
    return float(x @ line.coeffs)


def cheirality(view: CameraView, grid: BevGrid, cell: Cell) -> bool:
    """True iff the cell's ground point lies in front of the camera."""
    x, y = grid.cell_center(cell)
    p = camera_points(view, np.array([[x, y, grid.ground_height]]))
    return bool(p[0, 2] > 0.0)


def horizontal_distance(view: CameraView, grid: BevGrid, cell: Cell) -> float:
    """Ground-plane distance (m) from the cell center to the camera origin."""
    return float(np.linalg.norm(grid.cell_center(cell) - view.center[:2]))
