"""
Epipolar Attention Field 服务
计算每个 (视角, 尺度) 的权重矩阵 W，并按标定缓存复用
"""
import hashlib
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from collections import OrderedDict
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from eaformer.config import settings
from eaformer.exceptions import InvisibleCellError, ShapeError
from eaformer.models import FieldConfig
from eaformer.utils import tensor as T
from eaformer.utils.geometry import (
    BevGrid, CameraView, Cell, camera_points, cheirality, epipolar_lines,
    feature_size_for, horizontal_distance, scale_intrinsics,
)

logger = logging.getLogger(__name__)


# === Scalar pieces ===
def lambda_qi(grid: BevGrid, cell: Cell, view: CameraView, min_distance_clamp: Optional[float] = None) -> float:
    """
    Distance-dependent width factor of one (query, camera) pair.

    ``view`` must already be scaled to the feature map. Returns
    d / (f_mean * cell_size) with d the clamped ground distance to the camera.
    """
    if not cheirality(view, grid, cell):
        raise InvisibleCellError(f"cell {cell} is behind camera {view.label}")
    clamp = grid.cell_size if min_distance_clamp is None else min_distance_clamp
    d = max(horizontal_distance(view, grid, cell), clamp)
    return d / (view.mean_focal * grid.cell_size)


def field_weight(dist, lam: float, lam_qi):
    """W = exp(-(λ λ_qi)^2 dist^2); accepts scalars or arrays."""
    return np.exp(-((lam * np.asarray(lam_qi)) ** 2) * np.asarray(dist) ** 2)


def sigma_pixels(lam: float, lam_qi: float) -> float:
    """Gaussian std (feature pixels) of a field row."""
    return 1.0 / (np.sqrt(2.0) * lam * lam_qi)


def feature_pixels(feature_size: Tuple[int, int]) -> np.ndarray:
    """Homogeneous pixel centers (u + 0.5, v + 0.5, 1) in row-major key order."""
    w, h = feature_size
    vv, uu = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.column_stack([uu.reshape(-1) + 0.5, vv.reshape(-1) + 0.5, np.ones(w * h)])


# === Field ===
@dataclass(eq=False)
class AttentionField:
    """W (n_q x n_k) of one (view, scale) pair plus what is needed to re-evaluate it for another λ."""

    weights: np.ndarray
    view_id: int
    scale_id: int
    query_visibility: np.ndarray  # visible and non-degenerate rows
    lambda_qi: np.ndarray  # 0 on invalid rows
    distances: np.ndarray  # signed x . l^T, 0 on invalid rows
    lam: float
    feature_size: Tuple[int, int]
    scale: float = 1.0

    @property
    def n_queries(self) -> int:
        return self.weights.shape[0]

    @property
    def n_keys(self) -> int:
        return self.weights.shape[1]

    def reweight(self, lam: float) -> np.ndarray:
        """Weights for another distance strength (same geometry)."""
        w = field_weight(self.distances, lam, self.lambda_qi[:, None])
        return np.where(self.query_visibility[:, None], w, 0.0)

    def dweights_dlambda(self, lam: float) -> np.ndarray:
        """Analytic dW/dλ = -2 λ λ_qi^2 d^2 W."""
        w = self.reweight(lam)
        return -2.0 * lam * (self.lambda_qi[:, None] ** 2) * self.distances ** 2 * w

    def sigma(self, q: int) -> float:
        if not self.query_visibility[q]:
            raise InvisibleCellError(f"query {q} has no field in view {self.view_id}")
        return sigma_pixels(self.lam, float(self.lambda_qi[q]))

    def wide_count(self, q: int, threshold: float = 0.5) -> int:
        """Number of keys of query ``q`` with W > threshold."""
        return int(np.count_nonzero(self.weights[q] > threshold))

    def sparsity(self, threshold: float = 0.5) -> float:
        """Fraction of visible-row weights at or below ``threshold``."""
        rows = self.weights[self.query_visibility]
        if rows.size == 0:
            return 1.0
        return float(np.count_nonzero(rows <= threshold) / rows.size)

    def heatmap(self, q: int) -> np.ndarray:
        """8-bit (h, w) image of query ``q``'s weights; 1.0 -> 255."""
        w, h = self.feature_size
        return np.round(self.weights[q].reshape(h, w) * 255.0).astype(np.uint8)


def compute_field(grid: BevGrid, view: CameraView, feature_size: Tuple[int, int], cfg: FieldConfig,
                  scale_id: int = 0) -> AttentionField:
    """Epipolar Attention Field of ``view`` on a feature map of ``feature_size`` = (w, h)."""
    if feature_size[0] <= 0 or feature_size[1] <= 0:
        raise ShapeError(f"feature size must be positive, got {feature_size}")
    fview = scale_intrinsics(view, feature_size)
    lines, degenerate = epipolar_lines(fview, grid)

    centers = grid.centers()
    ground = np.column_stack([centers, np.full(len(centers), grid.ground_height)])
    visible = camera_points(fview, ground)[:, 2] > 0.0
    valid = visible & ~degenerate

    d = np.linalg.norm(centers - fview.center[:2], axis=1)
    d = np.maximum(d, cfg.clamp_for(grid))
    lam_qi = np.where(valid, d / (fview.mean_focal * grid.cell_size), 0.0)

    pixels = feature_pixels(feature_size)
    distances = np.where(valid[:, None], lines @ pixels.T, 0.0)
    weights = np.where(valid[:, None], field_weight(distances, cfg.lam, lam_qi[:, None]), 0.0)

    scale = feature_size[0] / view.image_size[0]
    logger.debug("field view=%s scale=%d size=%s visible=%d/%d",
                 view.label, scale_id, feature_size, int(valid.sum()), len(valid))
    return AttentionField(weights, view.view_id, scale_id, valid, lam_qi, distances,
                          cfg.lam, (int(feature_size[0]), int(feature_size[1])), scale)


def epipolar_weights(field: AttentionField, lam: T.Tensor) -> T.Tensor:
    """W as a differentiable function of a scalar λ tensor (learnable distance strength)."""
    value = lam.item()
    w = field.reweight(value)
    dw = field.dweights_dlambda(value)

    def _backward(g):
        return (np.full(lam.shape, float(np.sum(g * dw))),)

    return T.record_op("epipolar_weights", w, (lam,), _backward)


# === Bank ===
@dataclass
class FieldBank:
    """All fields of a rig, ordered by (view_id, scale_id)."""

    fields: List[AttentionField]
    scales: Tuple[float, ...]
    view_ids: Tuple[int, ...]

    def __len__(self) -> int:
        return len(self.fields)

    def __iter__(self):
        return iter(self.fields)

    def get(self, view_id: int, scale_id: int) -> AttentionField:
        for f in self.fields:
            if f.view_id == view_id and f.scale_id == scale_id:
                return f
        raise KeyError(f"no field for view {view_id}, scale {scale_id}")

    def for_scale(self, scale_id: int) -> List[AttentionField]:
        """Fields of one scale, in the order the views were given."""
        return [self.get(v, scale_id) for v in self.view_ids]

    def sparsity(self, threshold: float = 0.5) -> float:
        """Mean field sparsity over the bank."""
        return float(np.mean([f.sparsity(threshold) for f in self.fields]))

    def recompute(self, lam: float) -> "FieldBank":
        """Same geometry, new λ."""
        fields = [AttentionField(f.reweight(lam), f.view_id, f.scale_id, f.query_visibility, f.lambda_qi,
                                 f.distances, lam, f.feature_size, f.scale) for f in self.fields]
        return FieldBank(fields, self.scales, self.view_ids)


def field_bank(grid: BevGrid, views: Sequence[CameraView], scales: Sequence[float], cfg: FieldConfig,
               workers: Optional[int] = None) -> FieldBank:
    """One field per (view, scale); pairs are computed concurrently, output order is fixed."""
    ids = [v.view_id for v in views]
    if len(set(ids)) != len(ids):
        raise ShapeError(f"view ids must be unique, got {ids}")
    jobs = [(view, scale_id, feature_size_for(view, s)) for view in views for scale_id, s in enumerate(scales)]
    workers = settings.worker_count if workers is None else workers
    if workers <= 1 or len(jobs) <= 1:
        fields = [compute_field(grid, v, size, cfg, sid) for v, sid, size in jobs]
    else:
        with ThreadPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            fields = list(pool.map(lambda job: compute_field(grid, job[0], job[2], cfg, job[1]), jobs))
    fields.sort(key=lambda f: (f.view_id, f.scale_id))
    return FieldBank(fields, tuple(scales), tuple(v.view_id for v in views))


class FieldService:
    """按标定缓存 field bank：同一套相机只计算一次 (LRU, 上限 FIELD_CACHE_SIZE)"""

    def __init__(self, max_entries: Optional[int] = None):
        self.max_entries = settings.FIELD_CACHE_SIZE if max_entries is None else max_entries
        self._cache: "OrderedDict[str, FieldBank]" = OrderedDict()
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._cache)

    @staticmethod
    def rig_key(grid: BevGrid, views: Sequence[CameraView], scales: Sequence[float], cfg: FieldConfig) -> str:
        h = hashlib.sha1()
        h.update(grid.spec.encode())
        h.update(np.array([grid.ground_height, *grid.origin]).tobytes())
        for v in views:
            h.update(str(v.view_id).encode())
            h.update(v.fingerprint())
        h.update(np.array(scales, dtype=np.float64).tobytes())
        h.update(cfg.model_dump_json().encode())
        return h.hexdigest()

    def get_bank(self, grid: BevGrid, views: Sequence[CameraView], scales: Sequence[float],
                 cfg: FieldConfig) -> FieldBank:
        key = self.rig_key(grid, views, scales, cfg)
        with self._lock:
            bank = self._cache.get(key)
            if bank is not None:
                self._cache.move_to_end(key)
        if bank is None:
            bank = field_bank(grid, views, scales, cfg)
            with self._lock:
                self._cache[key] = bank
                while len(self._cache) > max(self.max_entries, 0):
                    self._cache.popitem(last=False)
            logger.info("computed field bank: %d views x %d scales", len(views), len(scales))
        return bank

    def clear(self) -> None:
        with self._lock:
            self._cache.clear()


# 全局实例
field_service = FieldService()
