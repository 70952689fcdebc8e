"""
几何校验服务 (verify)
对随机 BEV cell 运行暴力 oracle：射线采样、点线距离最小化、宽度定律
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from eaformer.models import FieldConfig
from eaformer.services.field_service import lambda_qi, sigma_pixels
from eaformer.utils.geometry import (
    BevGrid, CameraView, Cell, camera_points, cheirality, epipolar_line, horizontal_distance,
    point_line_distance, ray_points,
)

logger = logging.getLogger(__name__)

RAY_TOL = 1e-6
DISTANCE_TOL = 1e-3
WIDTH_TOL = 1e-9
RAY_SAMPLES = 100
LINE_SAMPLES = 100_000
MIN_DEPTH = 1e-3


@dataclass
class CheckResult:
    name: str
    tolerance: float
    max_error: float = 0.0
    evaluated: int = 0
    failure: Optional[Tuple[Cell, str, float]] = None  # first (cell, view, error) over tolerance

    @property
    def ok(self) -> bool:
        return self.failure is None

    def update(self, error: float, cell: Cell, view: CameraView) -> None:
        self.evaluated += 1
        self.max_error = max(self.max_error, error)
        if error > self.tolerance and self.failure is None:
            self.failure = (cell, view.label, error)


@dataclass
class VerifyReport:
    checks: List[CheckResult] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    @property
    def first_failure(self) -> Optional[Tuple[str, Tuple[Cell, str, float]]]:
        for c in self.checks:
            if c.failure is not None:
                return c.name, c.failure
        return None


def brute_force_distance(x: np.ndarray, p0: np.ndarray, p1: np.ndarray, n: int = LINE_SAMPLES) -> float:
    """
    Minimum Euclidean distance from pixel ``x`` to points densely sampled on
    the line through ``p0`` and ``p1`` (coarse pass, then a refined pass).
    """
    direction = (p1 - p0) / np.linalg.norm(p1 - p0)
    half = np.linalg.norm(x - p0) + 1.0
    s = np.linspace(-half, half, n)
    d = np.linalg.norm(p0 + s[:, None] * direction - x, axis=1)
    k = int(np.argmin(d))
    step = s[1] - s[0]
    s = np.linspace(s[k] - 2.0 * step, s[k] + 2.0 * step, n)
    d = np.linalg.norm(p0 + s[:, None] * direction - x, axis=1)
    return float(d.min())


class OracleService:
    """极线几何 oracle"""

    @staticmethod
    def check_ray(view: CameraView, grid: BevGrid, cell: Cell, rng: np.random.Generator) -> Optional[float]:
        """Max |x . l| over positive-depth samples of the cell's vertical ray."""
        line = epipolar_line(view, grid, cell)
        if line.degenerate:
            return None
        x, y = grid.cell_center(cell)
        z = grid.ground_height + rng.uniform(-5.0, 10.0, size=RAY_SAMPLES)
        pts = np.column_stack([np.full_like(z, x), np.full_like(z, y), z])
        cam = camera_points(view, pts)
        cam = cam[cam[:, 2] > MIN_DEPTH]
        if len(cam) == 0:
            return None
        uv = cam[:, :2] / cam[:, 2:3] * [view.fx, view.fy] + [view.cx, view.cy]
        return float(np.max(np.abs(uv @ line.coeffs[:2] + line.c)))

    @staticmethod
    def check_distance(view: CameraView, grid: BevGrid, cell: Cell, rng: np.random.Generator) -> Optional[float]:
        """| |x . l| - brute-force distance | for a random pixel x."""
        line = epipolar_line(view, grid, cell)
        if line.degenerate:
            return None
        cam = camera_points(view, ray_points(grid, cell, (0.0, 1.0)))
        if np.any(cam[:, 2] <= MIN_DEPTH):
            cam = camera_points(view, ray_points(grid, cell, (-2.0, -1.0)))
            if np.any(cam[:, 2] <= MIN_DEPTH):
                return None
        p = cam[:, :2] / cam[:, 2:3] * [view.fx, view.fy] + [view.cx, view.cy]
        if np.linalg.norm(p[1] - p[0]) < 1e-6:
            return None
        x = rng.uniform([0.0, 0.0], view.image_size)
        return abs(abs(point_line_distance(x, line)) - brute_force_distance(x, p[0], p[1]))

    @staticmethod
    def check_width(view: CameraView, grid: BevGrid, cell: Cell, other: Cell, cfg: FieldConfig) -> Optional[float]:
        """Relative error of sigma_1 / sigma_2 against d_2 / d_1 (both above the clamp)."""
        clamp = cfg.clamp_for(grid)
        if not (cheirality(view, grid, cell) and cheirality(view, grid, other)):
            return None
        d1, d2 = horizontal_distance(view, grid, cell), horizontal_distance(view, grid, other)
        if d1 <= clamp or d2 <= clamp:
            return None
        s1 = sigma_pixels(cfg.lam, lambda_qi(grid, cell, view, cfg.min_distance_clamp))
        s2 = sigma_pixels(cfg.lam, lambda_qi(grid, other, view, cfg.min_distance_clamp))
        expected = d2 / d1
        return abs(s1 / s2 - expected) / expected

    def verify(self, views: Sequence[CameraView], grid: BevGrid, samples: int, seed: int = 0,
               cfg: Optional[FieldConfig] = None) -> VerifyReport:
        cfg = cfg or FieldConfig()
        rng = np.random.default_rng(seed)
        ray = CheckResult("ray", RAY_TOL)
        dist = CheckResult("distance", DISTANCE_TOL)
        width = CheckResult("width", WIDTH_TOL)
        for _ in range(samples):
            cell = (int(rng.integers(grid.cells_x)), int(rng.integers(grid.cells_y)))
            other = (int(rng.integers(grid.cells_x)), int(rng.integers(grid.cells_y)))
            for view in views:
                for check, err in (
                        (ray, self.check_ray(view, grid, cell, rng)),
                        (dist, self.check_distance(view, grid, cell, rng)),
                        (width, self.check_width(view, grid, cell, other, cfg))):
                    if err is not None:
                        check.update(err, cell, view)
        report = VerifyReport([ray, dist, width])
        logger.info("verify: %s", ", ".join(f"{c.name}={c.max_error:.3g} ({c.evaluated})" for c in report.checks))
        return report


# 全局实例
oracle_service = OracleService()
