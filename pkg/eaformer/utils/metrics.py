"""
Loss and segmentation metrics
Focal loss (on the tape) 与 IoU / 距离分段 IoU (numpy)
"""
from typing import List, Optional, Sequence

import numpy as np

from eaformer.exceptions import DomainError, ShapeError
from eaformer.models import LossConfig
from eaformer.utils import tensor as T
from eaformer.utils.geometry import BevGrid
from eaformer.utils.tensor import Tensor

LOG_FLOOR = 1e-12


def focal_loss(logits: Tensor, targets: np.ndarray, cfg: Optional[LossConfig] = None) -> Tensor:
    """
    Mean over cells of -α_t (1 - p_t)^γ log(p_t).

    p_t = sigmoid(x) for positives and 1 - sigmoid(x) = sigmoid(-x) for
    negatives; log is clamped at 1e-12.
    """
    cfg = cfg or LossConfig()
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeError(f"targets {y.shape} vs logits {logits.shape}")
    if np.any((y != 0.0) & (y != 1.0)):
        raise ValueError("targets must be binary")

    p_t = T.sigmoid(T.mul(logits, 2.0 * y - 1.0))
    log_pt = T.log(T.maximum(p_t, LOG_FLOOR))
    alpha_t = np.where(y == 1.0, cfg.focal_alpha, 1.0 - cfg.focal_alpha)
    per_cell = T.mul(log_pt, -alpha_t)
    if cfg.focal_gamma != 0.0:
        per_cell = T.mul(per_cell, T.power(T.maximum(T.sub(1.0, p_t), LOG_FLOOR), cfg.focal_gamma))
    return T.mean(per_cell)


def predict_masks(logits) -> np.ndarray:
    """sigmoid(x) > 0.5, i.e. x > 0."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return data > 0.0


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """|pred ∧ gt| / |pred ∨ gt|; an empty union counts as 1.0."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"iou of {pred.shape} and {gt.shape}")
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def cell_distances(grid: BevGrid) -> np.ndarray:
    """(cells_y, cells_x) distance of every cell center to the ego origin."""
    c = grid.centers()
    return np.hypot(c[:, 0], c[:, 1]).reshape(grid.cells_y, grid.cells_x)


def distance_bands(grid: BevGrid, band_edges: Sequence[float]) -> List[np.ndarray]:
    """
    One (cells_y, cells_x) mask per band [edge_k, edge_k+1).

    The bands must cover every cell center of the grid; DomainError otherwise.
    """
    dist = cell_distances(grid)
    lo, hi = float(band_edges[0]), float(band_edges[-1])
    if dist.min() < lo or dist.max() >= hi:
        raise DomainError(f"distance bands [{lo:g}, {hi:g}) m do not cover grid {grid.spec} "
                          f"(cell centers span {dist.min():.3g}-{dist.max():.3g} m)")
    return [(dist >= a) & (dist < b) for a, b in zip(band_edges[:-1], band_edges[1:])]


def distance_banded_iou(pred: np.ndarray, gt: np.ndarray, grid: BevGrid,
                        band_edges: Sequence[float] = (0.0, 10.0, 20.0, 30.0, 40.0, 50.0)) -> List[float]:
    """IoU restricted to cells whose center distance lies in [edge_k, edge_k+1)."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != (grid.cells_y, grid.cells_x):
        raise ShapeError(f"mask {pred.shape} does not match grid {(grid.cells_y, grid.cells_x)}")
    return [iou(pred[band], gt[band]) for band in distance_bands(grid, band_edges)]
