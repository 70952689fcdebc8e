"""
标定服务
解析 / 导出 JSON 相机标定文件，内置 toy rig，标定扰动 (zero-shot rig transfer)
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError
from pyquaternion import Quaternion

from eaformer.exceptions import ConfigError, RigValidationError, ShapeError
from eaformer.models import AxesConvention, CameraRecord, RigFile
from eaformer.utils.geometry import CameraView, level_camera, make_camera, yaw_matrix

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# camera RDF coordinates -> camera FLU coordinates
RDF_TO_FLU = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])

TOY_FOCAL_PER_PX = 40.0 / 128.0
TOY_HEIGHT = 1.2
TOY_OFFSET = 0.3


class RigService:
    """标定服务类"""

    PERTURB_KEYS = ("yaw", "tx", "ty", "tz")

    # === 解析 ===
    @staticmethod
    def camera_to_ego(record: CameraRecord) -> np.ndarray:
        """Rotation taking camera RDF coordinates to ego coordinates."""
        if record.rotation is not None:
            q = record.rotation
            r = Quaternion(w=q.w, x=q.x, y=q.y, z=q.z).rotation_matrix
        else:
            r = np.asarray(record.rotation_matrix, dtype=np.float64)
        if record.axes == AxesConvention.FLU:
            r = r @ RDF_TO_FLU
        return r

    def build_views(self, rig: RigFile) -> List[CameraView]:
        """Validated records -> views sorted by camera name, view ids 1..N."""
        views = []
        for view_id, record in enumerate(sorted(rig.cameras, key=lambda c: c.name), start=1):
            k = record.intrinsics
            try:
                views.append(make_camera(
                    k.fx, k.fy, k.cx, k.cy, (record.image_size.w, record.image_size.h),
                    self.camera_to_ego(record).T, record.translation, view_id=view_id, name=record.name))
            except ShapeError as e:
                raise RigValidationError(f"camera {record.name}: {e}") from e
        return views

    @staticmethod
    def _describe(err: ValidationError, doc: Any) -> str:
        first = err.errors()[0]
        loc = first["loc"]
        parts = []
        for p in loc:
            parts.append(f"[{p}]" if isinstance(p, int) else f".{p}")
        where = "".join(parts).lstrip(".") or "<rig>"
        name = None
        if len(loc) >= 2 and loc[0] == "cameras" and isinstance(loc[1], int):
            try:
                name = doc["cameras"][loc[1]].get("name")
            except (KeyError, IndexError, TypeError, AttributeError):
                name = None
        suffix = f" (camera {name})" if name else ""
        return f"{where}: {first['msg']}{suffix}"

    def parse_document(self, doc: Any) -> List[CameraView]:
        try:
            rig = RigFile.model_validate(doc)
        except ValidationError as e:
            raise RigValidationError(self._describe(e, doc)) from e
        return self.build_views(rig)

    def parse_rig(self, path: PathLike) -> List[CameraView]:
        """Read a rig JSON file."""
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise RigValidationError(f"rig file not found: {path}") from e
        except (OSError, json.JSONDecodeError) as e:
            raise RigValidationError(f"cannot read rig {path}: {e}") from e
        views = self.parse_document(doc)
        logger.info("parsed rig %s: %s", path, ", ".join(v.label for v in views))
        return views

    # === 导出 ===
    @staticmethod
    def serialize_camera(view: CameraView, axes: AxesConvention = AxesConvention.RDF) -> Dict[str, Any]:
        r = view.rotation.T
        if axes == AxesConvention.FLU:
            r = r @ RDF_TO_FLU.T
        q = Quaternion(matrix=r)
        if q.w < 0:
            q = -q
        return {
            "name": view.label,
            "intrinsics": {"fx": view.fx, "fy": view.fy, "cx": view.cx, "cy": view.cy},
            "image_size": {"w": view.image_size[0], "h": view.image_size[1]},
            "rotation": {"w": q.w, "x": q.x, "y": q.y, "z": q.z},
            "translation": [float(c) for c in view.center],
            "axes": axes.value,
        }

    def serialize_rig(self, views: Sequence[CameraView], name: str = "rig",
                      axes: AxesConvention = AxesConvention.RDF) -> Dict[str, Any]:
        return {"name": name, "cameras": [self.serialize_camera(v, axes) for v in views]}

    def write_rig(self, path: PathLike, views: Sequence[CameraView], name: str = "rig") -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.serialize_rig(views, name), indent=2) + "\n", encoding="utf-8")
        return path

    # === 内置 rig ===
    @staticmethod
    def toy_rig(image_size: Tuple[int, int] = (128, 64)) -> List[CameraView]:
        """Two level cameras (front / back) 1.2 m above the ground, ~116° horizontal FOV."""
        f = TOY_FOCAL_PER_PX * image_size[0]
        return [
            level_camera(180.0, (-TOY_OFFSET, 0.0, TOY_HEIGHT), fx=f, image_size=image_size, view_id=1, name="back"),
            level_camera(0.0, (TOY_OFFSET, 0.0, TOY_HEIGHT), fx=f, image_size=image_size, view_id=2, name="front"),
        ]

    def load(self, rig_path: Optional[PathLike], image_size: Tuple[int, int] = (128, 64)) -> List[CameraView]:
        """Rig from file, or the built-in toy rig when no path is given."""
        if rig_path:
            return self.parse_rig(rig_path)
        return self.toy_rig(image_size)

    # === 扰动 ===
    def parse_perturbation(self, spec: str) -> Dict[str, float]:
        """``yaw=10,tx=0.2`` -> {"yaw": 10.0, "tx": 0.2, "ty": 0.0, "tz": 0.0}"""
        out = {k: 0.0 for k in self.PERTURB_KEYS}
        for item in (s.strip() for s in spec.split(",")):
            if not item:
                continue
            key, sep, value = item.partition("=")
            key = key.strip()
            if not sep or key not in out:
                raise ConfigError(f"bad rig perturbation '{item}', expected one of {', '.join(self.PERTURB_KEYS)}")
            try:
                out[key] = float(value)
            except ValueError as e:
                raise ConfigError(f"bad value for '{key}': {value!r}") from e
        return out

    @staticmethod
    def perturb(views: Sequence[CameraView], yaw: float = 0.0, tx: float = 0.0, ty: float = 0.0,
                tz: float = 0.0) -> List[CameraView]:
        """Yaw every camera about the ego z axis through its own center, then translate it."""
        rz = yaw_matrix(np.deg2rad(yaw))
        shift = np.array([tx, ty, tz])
        out = []
        for v in views:
            camera_to_ego = rz @ v.rotation.T
            out.append(make_camera(v.fx, v.fy, v.cx, v.cy, v.image_size, camera_to_ego.T, v.center + shift,
                                   view_id=v.view_id, name=v.name))
        return out


# 全局实例
rig_service = RigService()


def parse_rig(path: PathLike) -> List[CameraView]:
    return rig_service.parse_rig(path)
