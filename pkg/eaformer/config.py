"""
EAFormer Configuration Module
加载环境变量并提供全局配置访问；解析 key=value 运行配置文件
"""
import os
from pathlib import Path
from typing import Optional, Tuple, Union

from dotenv import dotenv_values
from dotenv.parser import parse_stream
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from eaformer.exceptions import ConfigError, DomainError
from eaformer.models import (
    FieldConfig, LossConfig, ModelConfig, OptimizerKind, RenderParams,
    ScaleOrder, SceneParams, TrainConfig, VisibilityMode, parse_scale,
)
from eaformer.utils.metrics import distance_bands


class Settings(BaseSettings):
    """全局配置类 (环境变量 / .env)"""

    # === 基础配置 ===
    PROJECT_NAME: str = "EAFormer-Lab"
    LOG_LEVEL: str = "WARNING"
    OUTPUT_ROOT: str = "runs"

    # === 并行配置 ===
    EAF_THREADS: int = 0  # 0 -> os.cpu_count()

    # === 缓存配置 ===
    FIELD_CACHE_SIZE: int = 8  # field bank LRU 条目数

    model_config = SettingsConfigDict(env_file=".env", case_sensitive=True, extra="ignore")

    @property
    def worker_count(self) -> int:
        """线程池上限"""
        if self.EAF_THREADS > 0:
            return self.EAF_THREADS
        return os.cpu_count() or 1


# 全局配置实例
settings = Settings()


def _split_floats(value) -> Tuple[float, ...]:
    if isinstance(value, str):
        value = [s for s in value.split(",") if s.strip()]
    return tuple(parse_scale(v) for v in value)


class RunConfig(BaseModel):
    """
    Run configuration: every field has a default, unknown keys are errors.

    File format is one ``key=value`` per line (``#`` comments), e.g.::

        grid=16x16@0.5
        lambda=1.0
        scales=1/4,1/16
    """
    model_config = ConfigDict(extra="forbid", frozen=True)

    # === 几何 / 标定 ===
    grid: str = "16x16@0.5"
    rig: str = Field("", description="rig JSON path; empty -> built-in two-camera toy rig")
    image_width: int = Field(128, gt=0, description="built-in rig only")
    image_height: int = Field(64, gt=0, description="built-in rig only")

    # === Epipolar Attention Field ===
    lam: float = Field(1.0, gt=0, alias="lambda")
    lambda_learnable: bool = False
    visibility_mode: VisibilityMode = VisibilityMode.LITERAL
    min_distance_clamp: Optional[float] = Field(None, gt=0)
    uniform_weights: bool = False
    positional_encoding: bool = False

    # === 模型 ===
    d_model: int = Field(32, gt=0)
    n_heads: int = Field(4, gt=0)
    scales: Tuple[float, ...] = (0.25, 0.0625)
    scale_order: ScaleOrder = ScaleOrder.COARSE_TO_FINE
    blocks_per_scale: int = Field(1, ge=1)
    ffn_width: int = Field(64, gt=0)
    decoder_width: int = Field(32, gt=0)

    # === 损失 ===
    focal_gamma: float = Field(2.0, ge=0)
    focal_alpha: float = Field(0.25, gt=0, lt=1)

    # === 训练 ===
    optimizer: OptimizerKind = OptimizerKind.SGD
    lr: float = Field(0.05, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(0.0, ge=0)
    steps: int = Field(2000, ge=1)
    pct_start: float = Field(0.3, gt=0, lt=1)
    div_factor: float = Field(25.0, gt=1)
    final_div_factor: float = Field(1e4, gt=1)
    eval_interval: int = Field(100, ge=1)

    # === 数据 ===
    train_scenes: int = Field(64, ge=1)
    eval_scenes: int = Field(8, ge=1)
    eval_on_train: bool = Field(False, description="evaluate on the training scenes (overfit runs)")
    min_boxes: int = Field(1, ge=0)
    max_boxes: int = Field(3, ge=0)
    samples_per_meter: float = Field(60.0, gt=0)
    fog_distance: Optional[float] = Field(8.0, gt=0)

    # === 评估 / 输出 ===
    band_edges: Tuple[float, ...] = (0.0, 10.0, 20.0, 30.0, 40.0, 50.0)
    seed: int = 0
    output_dir: str = ""

    @field_validator("scales", "band_edges", mode="before")
    @classmethod
    def _comma_list(cls, v):
        return _split_floats(v)

    @field_validator("min_distance_clamp", "fog_distance", mode="before")
    @classmethod
    def _optional_float(cls, v):
        if isinstance(v, str) and v.strip().lower() in ("", "none"):
            return None
        return v

    @field_validator("band_edges")
    @classmethod
    def _increasing(cls, v):
        if len(v) < 2 or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("band_edges must be at least two strictly increasing values")
        return v

    # --- 派生配置 ---
    def field_config(self) -> FieldConfig:
        return FieldConfig(lam=self.lam, lambda_learnable=self.lambda_learnable,
                           visibility_mode=self.visibility_mode,
                           min_distance_clamp=self.min_distance_clamp)

    def model_cfg(self) -> ModelConfig:
        return ModelConfig(
            grid_spec=self.grid, d_model=self.d_model, n_heads=self.n_heads,
            scales=self.scales, scale_order=self.scale_order,
            blocks_per_scale=self.blocks_per_scale, ffn_width=self.ffn_width,
            decoder_width=self.decoder_width, uniform_weights=self.uniform_weights,
            positional_encoding=self.positional_encoding,
            field_config=self.field_config(), seed=self.seed,
        )

    def loss_cfg(self) -> LossConfig:
        return LossConfig(focal_gamma=self.focal_gamma, focal_alpha=self.focal_alpha)

    def train_cfg(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps, max_lr=self.lr, optimizer=self.optimizer, momentum=self.momentum,
            weight_decay=self.weight_decay, pct_start=self.pct_start, div_factor=self.div_factor,
            final_div_factor=self.final_div_factor, eval_interval=self.eval_interval, seed=self.seed,
        )

    def scene_params(self) -> SceneParams:
        return SceneParams(min_boxes=self.min_boxes, max_boxes=self.max_boxes)

    def render_params(self) -> RenderParams:
        return RenderParams(samples_per_meter=self.samples_per_meter, fog_distance=self.fog_distance)

    def resolved_output_dir(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return Path(settings.OUTPUT_ROOT) / f"seed{self.seed}"


def _describe(err: ValidationError) -> str:
    first = err.errors()[0]
    key = ".".join(str(p) for p in first["loc"]) or "<config>"
    if first["type"] == "extra_forbidden":
        return f"unknown key '{key}'"
    return f"{key}: {first['msg']}"


def build_run_config(values: dict) -> RunConfig:
    """Validate a mapping of raw string values into a RunConfig."""
    try:
        cfg = RunConfig.model_validate(values)
        # cross-field checks live in the derived configs
        cfg.model_cfg()
        cfg.scene_params()
    except ValidationError as e:
        raise ConfigError(_describe(e)) from e
    try:
        distance_bands(cfg.model_cfg().grid, cfg.band_edges)
    except DomainError as e:
        raise ConfigError(f"band_edges: {e}") from e
    return cfg


def load_run_config(path: Union[str, Path]) -> RunConfig:
    """读取 key=value 运行配置文件"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    with path.open(encoding="utf-8") as f:
        keys = [b.key for b in parse_stream(f) if b.key is not None]
    repeated = sorted({k for k in keys if keys.count(k) > 1})
    if repeated:
        raise ConfigError(f"key '{repeated[0]}' is set more than once")
    raw = dotenv_values(path)
    missing = [k for k, v in raw.items() if v is None]
    if missing:
        raise ConfigError(f"key '{missing[0]}' has no value")
    return build_run_config(dict(raw))
