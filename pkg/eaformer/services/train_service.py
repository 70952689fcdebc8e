"""
训练 / 评估服务
one-cycle 学习率、SGD(momentum) / AdamW、focal loss 训练循环、IoU 评估、checkpoint
"""
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from eaformer.config import RunConfig
from eaformer.exceptions import CheckpointError, DivergenceError, NonFiniteError
from eaformer.models import ModelConfig, OptimizerKind, TrainConfig
from eaformer.network.model import EAFormer
from eaformer.services.field_service import FieldBank, field_service
from eaformer.services.synth_service import CLASS_ORDER, Sample, SceneStream
from eaformer.utils.checkpoint import assign_parameters, load_checkpoint, save_checkpoint
from eaformer.utils.geometry import BevGrid, CameraView
from eaformer.utils.metrics import distance_bands, focal_loss, iou, predict_masks
from eaformer.utils.tensor import Tape, Tensor

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
METRIC_COLUMNS = ["step", "loss", "iou_vehicle", "iou_drivable"]
FLOAT_FORMAT = "%.10g"
EVAL_SEED_OFFSET = 100_000


# === 学习率 ===
def _cosine(start: float, end: float, pct: float) -> float:
    return end + (start - end) / 2.0 * (math.cos(math.pi * pct) + 1.0)


def one_cycle_lr(step: int, total: int, max_lr: float, pct_start: float = 0.3,
                 div_factor: float = 25.0, final_div_factor: float = 1e4) -> float:
    """Cosine one-cycle: max_lr/div_factor -> max_lr over the warm-up, then down to initial/final_div_factor."""
    initial = max_lr / div_factor
    final = initial / final_div_factor
    up = max(1, int(round(pct_start * total)))
    if step < up:
        return _cosine(initial, max_lr, step / up)
    down = max(1, total - 1 - up)
    return _cosine(max_lr, final, min(1.0, (step - up) / down))


# === 优化器 ===
class Optimizer:
    def __init__(self, params: Mapping[str, Tensor], weight_decay: float = 0.0):
        self.params = dict(params)
        self.weight_decay = weight_decay

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    """Heavy-ball momentum SGD, L2 weight decay folded into the gradient."""

    def __init__(self, params: Mapping[str, Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        super().__init__(params, weight_decay)
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float) -> None:
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v = self.velocity[k]
            v *= self.momentum
            v += g
            p.data -= lr * v


class AdamW(Optimizer):
    """Adam with decoupled weight decay."""

    def __init__(self, params: Mapping[str, Tensor], betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        super().__init__(params, weight_decay)
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.betas
        for k, p in self.params.items():
            if p.grad is None:
                continue
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * p.grad
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * p.grad ** 2
            m_hat = self.m[k] / (1.0 - b1 ** self.t)
            v_hat = self.v[k] / (1.0 - b2 ** self.t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(params: Mapping[str, Tensor], cfg: TrainConfig) -> Optimizer:
    if cfg.optimizer == OptimizerKind.ADAMW:
        return AdamW(params, weight_decay=cfg.weight_decay)
    return SGD(params, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


# === 结果 ===
@dataclass
class EvalResult:
    iou: Dict[str, float]
    banded_vehicle: List[float] = field(default_factory=list)
    band_edges: Tuple[float, ...] = ()

    @property
    def iou_vehicle(self) -> float:
        return self.iou["vehicle"]

    @property
    def iou_drivable(self) -> float:
        return self.iou["drivable"]


@dataclass
class TrainResult:
    model: EAFormer
    metrics: pd.DataFrame
    bank: Optional[FieldBank]
    final_eval: EvalResult
    field_sparsity: Optional[float] = None


class TrainService:
    """训练服务类"""

    # === 数据 ===
    @staticmethod
    def train_seeds(cfg: RunConfig) -> List[int]:
        return [cfg.seed + k for k in range(cfg.train_scenes)]

    def eval_seeds(self, cfg: RunConfig) -> List[int]:
        if cfg.eval_on_train:
            return self.train_seeds(cfg)
        return [cfg.seed + EVAL_SEED_OFFSET + k for k in range(cfg.eval_scenes)]

    @staticmethod
    def load_samples(seeds: Sequence[int], grid: BevGrid, views: Sequence[CameraView], cfg: RunConfig) -> List[Sample]:
        return list(SceneStream(seeds, grid, views, cfg.scene_params(), cfg.render_params()))

    @staticmethod
    def field_bank_for(model_cfg: ModelConfig, views: Sequence[CameraView]) -> Optional[FieldBank]:
        if model_cfg.uniform_weights:
            return None
        return field_service.get_bank(model_cfg.grid, views, model_cfg.scales, model_cfg.field_config)

    # === 评估 ===
    @staticmethod
    def evaluate(model: EAFormer, bank: Optional[FieldBank], samples: Sequence[Sample],
                 band_edges: Sequence[float] = (0.0, 10.0, 20.0, 30.0, 40.0, 50.0)) -> EvalResult:
        """IoU pooled over all samples (thresholded sigmoid), plus distance-banded vehicle IoU."""
        preds, gts = [], []
        for s in samples:
            logits = model(s.images, bank)
            preds.append(predict_masks(logits))
            gts.append(s.targets > 0.5)
        # samples side by side along x: pooled counts, same iou() code path
        pred = np.concatenate(preds, axis=2)
        gt = np.concatenate(gts, axis=2)
        scores = {c.value: iou(pred[k], gt[k]) for k, c in enumerate(CLASS_ORDER)}

        bands = [np.tile(band, (1, len(samples))) for band in distance_bands(model.cfg.grid, band_edges)]
        banded = [iou(pred[0][band], gt[0][band]) for band in bands]
        return EvalResult(scores, banded, tuple(band_edges))

    # === 训练 ===
    def train_toy(self, cfg: RunConfig, views: Sequence[CameraView], quiet: bool = False) -> TrainResult:
        """
        Train on the synthetic stream with a one-cycle schedule.

        Deterministic given ``cfg.seed``. Raises DivergenceError on a non-finite loss.
        """
        model_cfg = cfg.model_cfg()
        train_cfg = cfg.train_cfg()
        loss_cfg = cfg.loss_cfg()
        grid = model_cfg.grid

        model = EAFormer(model_cfg, channels=3, n_views=len(views), image_size=views[0].image_size)
        bank = self.field_bank_for(model_cfg, views)
        sparsity = bank.sparsity() if bank is not None else None
        if sparsity is not None:
            logger.info("field sparsity (W <= 0.5) at lambda=%g: %.4f", model_cfg.field_config.lam, sparsity)

        train = self.load_samples(self.train_seeds(cfg), grid, views, cfg)
        evals = train if cfg.eval_on_train else self.load_samples(self.eval_seeds(cfg), grid, views, cfg)

        params = model.parameters()
        optimizer = make_optimizer(params, train_cfg)
        learnable = model.log_lambda is not None
        rows = []
        last_eval: Optional[EvalResult] = None

        disable = quiet or not sys.stdout.isatty()
        bar = tqdm(range(train_cfg.steps), desc="train", disable=disable, leave=False)
        for step in bar:
            sample = train[step % len(train)]
            lr = one_cycle_lr(step, train_cfg.steps, train_cfg.max_lr, train_cfg.pct_start,
                              train_cfg.div_factor, train_cfg.final_div_factor)
            optimizer.zero_grad()
            try:
                with Tape() as tape:
                    loss = focal_loss(model(sample.images, bank), sample.targets, loss_cfg)
                tape.backward(loss)
            except NonFiniteError as e:
                raise DivergenceError(f"non-finite values at step {step + 1} (lr={lr:.3g}): {e}") from e
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise DivergenceError(f"loss is {loss_value} at step {step + 1} (lr={lr:.3g})")
            optimizer.step(lr)
            bar.set_postfix(loss=f"{loss_value:.4f}", lr=f"{lr:.2e}")

            if (step + 1) % train_cfg.eval_interval == 0 or step + 1 == train_cfg.steps:
                last_eval = self.evaluate(model, bank, evals, cfg.band_edges)
                row = {"step": step + 1, "loss": loss_value,
                       "iou_vehicle": last_eval.iou_vehicle, "iou_drivable": last_eval.iou_drivable}
                if learnable:
                    row["lambda"] = model.lam
                rows.append(row)
                logger.info("step %d loss %.5f iou_vehicle %.4f iou_drivable %.4f",
                            step + 1, loss_value, last_eval.iou_vehicle, last_eval.iou_drivable)
        bar.close()

        columns = METRIC_COLUMNS + (["lambda"] if learnable else [])
        metrics = pd.DataFrame(rows, columns=columns)
        return TrainResult(model, metrics, bank, last_eval, sparsity)

    # === 持久化 ===
    @staticmethod
    def write_metrics(path: PathLike, metrics: pd.DataFrame) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        metrics.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        return path

    @staticmethod
    def save_model(path: PathLike, model: EAFormer) -> Path:
        meta = {
            "model": model.cfg.model_dump(mode="json"),
            "channels": model.channels,
            "n_views": model.n_views,
            "image_size": list(model.image_size),
        }
        return save_checkpoint(path, model.parameters(), meta)

    @staticmethod
    def load_model(path: PathLike, expected: Optional[ModelConfig] = None) -> EAFormer:
        """Rebuild the model stored in a checkpoint; ``expected`` must then match its architecture."""
        meta, arrays = load_checkpoint(path)
        try:
            stored = ModelConfig.model_validate(meta["model"])
        except (KeyError, ValueError) as e:
            raise CheckpointError(f"{path}: invalid model config in header ({e})") from e
        cfg = expected or stored
        model = EAFormer(cfg, channels=int(meta.get("channels", 3)), n_views=int(meta.get("n_views", 2)),
                         image_size=tuple(meta.get("image_size", (128, 64))))
        assign_parameters(model.parameters(), arrays)
        return model


# 全局实例
train_service = TrainService()
