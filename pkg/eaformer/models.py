"""
EAFormer Data Models
定义枚举、配置 Schema、标定文件 Schema 与合成场景 Schema
"""
import enum
from fractions import Fraction
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from eaformer.utils.geometry import BevGrid, CameraView

QUATERNION_TOL = 1e-6


# === Enums ===
class VisibilityMode(str, enum.Enum):
    """How all-zero field rows enter the weighted attention"""
    LITERAL = "literal"  # W=0 zeroes the logit
    MASKED = "masked"  # keys of invisible views get -inf logits


class ScaleOrder(str, enum.Enum):
    COARSE_TO_FINE = "coarse_to_fine"
    FINE_TO_COARSE = "fine_to_coarse"


class SemanticClass(str, enum.Enum):
    VEHICLE = "vehicle"
    DRIVABLE = "drivable"


class AxesConvention(str, enum.Enum):
    """Camera body axes used by a rig file"""
    RDF = "rdf"  # x right, y down, z forward (optical)
    FLU = "flu"  # x forward, y left, z up


class OptimizerKind(str, enum.Enum):
    SGD = "sgd"
    ADAMW = "adamw"


def parse_scale(value) -> float:
    """Accept 0.25, '0.25' or '1/4'."""
    if isinstance(value, str):
        return float(Fraction(value.strip()))
    return float(value)


# === Field / attention configs ===
class FieldConfig(BaseModel):
    """Epipolar Attention Field parameters"""
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    lam: float = Field(1.0, gt=0, alias="lambda", description="distance-strength λ")
    lambda_learnable: bool = Field(False, description="learn λ during training")
    visibility_mode: VisibilityMode = Field(VisibilityMode.LITERAL)
    min_distance_clamp: Optional[float] = Field(None, gt=0, description="meters; None -> one cell size")

    def clamp_for(self, grid: BevGrid) -> float:
        return grid.cell_size if self.min_distance_clamp is None else self.min_distance_clamp


class AttentionConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    d_model: int = Field(32, gt=0)
    n_heads: int = Field(4, gt=0)
    visibility_mode: VisibilityMode = VisibilityMode.LITERAL

    @model_validator(mode="after")
    def _heads_divide(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        return self

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads


# === Model / loss / training configs ===
class ModelConfig(BaseModel):
    """Desk-scale EAFormer architecture"""
    model_config = ConfigDict(frozen=True)

    grid_spec: str = Field("16x16@0.5", description="WxH@CELL, centred on ego")
    d_model: int = Field(32, gt=0)
    n_heads: int = Field(4, gt=0)
    scales: Tuple[float, ...] = Field((0.25, 0.0625), description="feature down-scale factors")
    scale_order: ScaleOrder = ScaleOrder.COARSE_TO_FINE
    blocks_per_scale: int = Field(1, ge=1)
    ffn_width: int = Field(64, gt=0)
    decoder_width: int = Field(32, gt=0)
    classes: Tuple[SemanticClass, ...] = (SemanticClass.VEHICLE, SemanticClass.DRIVABLE)
    uniform_weights: bool = Field(False, description="W≡1 ablation (no epipolar weighting)")
    positional_encoding: bool = Field(False, description="learned key positional encoding ablation")
    field_config: FieldConfig = Field(default_factory=FieldConfig)
    seed: int = 0

    @field_validator("scales", mode="before")
    @classmethod
    def _parse_scales(cls, v):
        if isinstance(v, str):
            v = [s for s in v.split(",") if s.strip()]
        return tuple(parse_scale(s) for s in v)

    @model_validator(mode="after")
    def _check(self):
        if not self.scales:
            raise ValueError("scales must not be empty")
        for s in self.scales:
            patch = 1.0 / s
            if s <= 0 or s > 1 or abs(patch - round(patch)) > 1e-9:
                raise ValueError(f"scale {s} must be 1/k for a positive integer k")
        if len(set(self.scales)) != len(self.scales):
            raise ValueError("scales must be distinct")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        BevGrid.parse(self.grid_spec)
        return self

    @property
    def grid(self) -> BevGrid:
        return BevGrid.parse(self.grid_spec)

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(d_model=self.d_model, n_heads=self.n_heads,
                               visibility_mode=self.field_config.visibility_mode)

    def ordered_scales(self) -> List[float]:
        """Scales in encoder order (coarse = smallest factor first for coarse_to_fine)."""
        return sorted(self.scales, reverse=self.scale_order == ScaleOrder.FINE_TO_COARSE)

    @staticmethod
    def patch_size(scale: float) -> int:
        return int(round(1.0 / scale))


class LossConfig(BaseModel):
    """Focal loss parameters (defaults from the focal-loss convention)"""
    model_config = ConfigDict(frozen=True)

    focal_gamma: float = Field(2.0, ge=0)
    focal_alpha: float = Field(0.25, gt=0, lt=1)


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    steps: int = Field(2000, ge=1)
    max_lr: float = Field(0.05, gt=0)
    optimizer: OptimizerKind = OptimizerKind.SGD
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(0.0, ge=0)
    pct_start: float = Field(0.3, gt=0, lt=1)
    div_factor: float = Field(25.0, gt=1)
    final_div_factor: float = Field(1e4, gt=1)
    eval_interval: int = Field(100, ge=1)
    seed: int = 0


# === Synthetic world configs ===
class SceneParams(BaseModel):
    """Scene generation ranges"""
    model_config = ConfigDict(frozen=True)

    min_boxes: int = Field(1, ge=0)
    max_boxes: int = Field(3, ge=0)
    min_box_size: float = Field(0.8, gt=0)
    max_box_size: float = Field(2.0, gt=0)
    min_box_height: float = Field(1.0, gt=0)
    max_box_height: float = Field(1.8, gt=0)
    min_drivable_width: float = Field(3.0, gt=0)
    max_drivable_width: float = Field(5.0, gt=0)
    ego_clearance: float = Field(1.0, ge=0, description="no box footprint within this radius of ego")
    max_tries: int = Field(1000, ge=1)

    @model_validator(mode="after")
    def _ranges(self):
        if self.min_boxes > self.max_boxes:
            raise ValueError("min_boxes > max_boxes")
        if self.min_box_size > self.max_box_size:
            raise ValueError("min_box_size > max_box_size")
        if self.min_box_height > self.max_box_height:
            raise ValueError("min_box_height > max_box_height")
        if self.min_drivable_width > self.max_drivable_width:
            raise ValueError("min_drivable_width > max_drivable_width")
        return self


class RenderParams(BaseModel):
    """Point-splat renderer parameters; colors are RGB in [0, 1]"""
    model_config = ConfigDict(frozen=True)

    samples_per_meter: float = Field(60.0, gt=0)
    fog_distance: Optional[float] = Field(8.0, gt=0, description="None disables depth attenuation")
    background: Tuple[float, float, float] = (0.55, 0.7, 0.9)
    ground: Tuple[float, float, float] = (0.35, 0.3, 0.25)
    drivable: Tuple[float, float, float] = (0.2, 0.2, 0.2)
    vehicle: Tuple[float, float, float] = (1.0, 0.5, 0.0)


# === Rig file schema ===
class IntrinsicsRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    fx: float = Field(..., gt=0)
    fy: float = Field(..., gt=0)
    cx: float
    cy: float


class ImageSizeRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    w: int = Field(..., gt=0)
    h: int = Field(..., gt=0)


class QuaternionRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    w: float
    x: float
    y: float
    z: float

    @property
    def norm(self) -> float:
        return float(np.sqrt(self.w ** 2 + self.x ** 2 + self.y ** 2 + self.z ** 2))


class CameraRecord(BaseModel):
    """One camera of a rig file; pose is camera-in-ego"""
    model_config = ConfigDict(extra="forbid")

    name: str = Field(..., min_length=1)
    intrinsics: IntrinsicsRecord
    image_size: ImageSizeRecord
    rotation: Optional[QuaternionRecord] = Field(None, description="unit quaternion (w, x, y, z)")
    rotation_matrix: Optional[List[List[float]]] = Field(None, description="3x3 camera->ego")
    translation: Tuple[float, float, float]
    axes: AxesConvention = AxesConvention.RDF

    @model_validator(mode="after")
    def _pose(self):
        if (self.rotation is None) == (self.rotation_matrix is None):
            raise ValueError(f"camera {self.name}: give exactly one of rotation / rotation_matrix")
        if self.rotation is not None and abs(self.rotation.norm - 1.0) > QUATERNION_TOL:
            raise ValueError(f"camera {self.name}: quaternion norm {self.rotation.norm:.6f} is not 1")
        if self.rotation_matrix is not None:
            if len(self.rotation_matrix) != 3 or any(len(row) != 3 for row in self.rotation_matrix):
                raise ValueError(f"camera {self.name}: rotation_matrix must be 3x3")
        return self


class RigFile(BaseModel):
    """Calibration document: a named list of cameras"""
    model_config = ConfigDict(extra="forbid")

    name: str = "rig"
    cameras: List[CameraRecord] = Field(..., min_length=1)

    @model_validator(mode="after")
    def _unique_names(self):
        names = [c.name for c in self.cameras]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ValueError(f"duplicate camera names: {', '.join(dupes)}")
        return self


# === Synthetic scene schema ===
class Box(BaseModel):
    """Axis-aligned box standing on the ground plane"""
    model_config = ConfigDict(frozen=True)

    center: Tuple[float, float]
    size: Tuple[float, float]
    height: float = Field(..., ge=0)
    cls: SemanticClass = SemanticClass.VEHICLE

    @field_validator("size")
    @classmethod
    def _non_negative(cls, v):
        if v[0] < 0 or v[1] < 0:
            raise ValueError("box size must be non-negative")
        return v

    @property
    def bounds(self) -> Tuple[float, float, float, float]:
        """(x_min, x_max, y_min, y_max)"""
        hx, hy = self.size[0] / 2.0, self.size[1] / 2.0
        return (self.center[0] - hx, self.center[0] + hx, self.center[1] - hy, self.center[1] + hy)

    def intersects(self, other: "Box") -> bool:
        ax0, ax1, ay0, ay1 = self.bounds
        bx0, bx1, by0, by1 = other.bounds
        return ax0 < bx1 and bx0 < ax1 and ay0 < by1 and by0 < ay1


class SyntheticScene(BaseModel):
    """Ground-plane boxes, drivable polygon and the rig used to render them"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    boxes: List[Box] = Field(default_factory=list)
    drivable: List[Tuple[float, float]] = Field(default_factory=list, description="polygon vertices (m)")
    rig_ref: str = ""
    seed: int = 0
    grid_spec: str = ""
    rig: List[CameraView] = Field(default_factory=list, exclude=True)
