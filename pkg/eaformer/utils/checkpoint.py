"""
Checkpoint blob
EAFCKPT1 格式：magic | uint32 头长度 | JSON 头 | little-endian float64 参数数据

Header keys: ``version`` (int), ``meta`` (free-form JSON, the model config),
``tensors`` (ordered list of ``{"name", "shape"}``). Data follows in header order.
"""
import json
import logging
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple, Union

import numpy as np

from eaformer.exceptions import CheckpointError
from eaformer.utils.tensor import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"EAFCKPT1"
VERSION = 1
PathLike = Union[str, Path]


def save_checkpoint(path: PathLike, params: Mapping[str, Tensor], meta: Dict[str, Any]) -> Path:
    header = {
        "version": VERSION,
        "meta": meta,
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(v.data, dtype="<f8").tobytes() for v in params.values())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(MAGIC + struct.pack("<I", len(head)) + head + body)
    logger.info("saved %d tensors to %s", len(params), path)
    return path


def load_checkpoint(path: PathLike) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Returns (meta, ordered name -> array)."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not an EAFormer checkpoint")
    offset = len(MAGIC) + 4
    if len(blob) < offset:
        raise CheckpointError(f"{path}: truncated header")
    (n_head,) = struct.unpack("<I", blob[len(MAGIC):offset])
    try:
        header = json.loads(blob[offset:offset + n_head].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from e
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")

    arrays: Dict[str, np.ndarray] = OrderedDict()
    pos = offset + n_head
    for entry in header["tensors"]:
        shape = tuple(int(s) for s in entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        end = pos + 8 * n
        if end > len(blob):
            raise CheckpointError(f"{path}: data for '{entry['name']}' is truncated")
        arrays[entry["name"]] = np.frombuffer(blob[pos:end], dtype="<f8").astype(np.float64).reshape(shape)
        pos = end
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return header.get("meta", {}), arrays


def assign_parameters(params: Mapping[str, Tensor], arrays: Mapping[str, np.ndarray]) -> None:
    """Copy arrays into parameters in place; every name and shape must match."""
    for name, p in params.items():
        if name not in arrays:
            raise CheckpointError(f"checkpoint is missing parameter '{name}'")
        if tuple(arrays[name].shape) != tuple(p.shape):
            raise CheckpointError(
                f"parameter '{name}' has shape {tuple(arrays[name].shape)} in checkpoint, model expects {p.shape}")
    extra = [k for k in arrays if k not in params]
    if extra:
        raise CheckpointError(f"checkpoint has unexpected parameter '{extra[0]}'")
    for name, p in params.items():
        p.data[...] = arrays[name]
