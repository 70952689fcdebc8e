"""
Netpbm writer / reader
PGM (P5) 灰度与 PPM (P6) 彩色，8 bit，二进制栅格
"""
import re
from pathlib import Path
from typing import Union

import numpy as np

from eaformer.exceptions import ShapeError

PathLike = Union[str, Path]
_HEADER = re.compile(rb"^(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s")


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Float images in [0, 1] -> uint8 (round half to even); uint8 passes through."""
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode(image: np.ndarray) -> bytes:
    """(h, w) -> P5 bytes, (h, w, 3) -> P6 bytes."""
    data = to_uint8(image)
    if data.ndim == 2:
        magic = b"P5"
    elif data.ndim == 3 and data.shape[2] == 3:
        magic = b"P6"
    else:
        raise ShapeError(f"cannot encode image of shape {data.shape}")
    h, w = data.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(data).tobytes()


def decode(blob: bytes) -> np.ndarray:
    m = _HEADER.match(blob)
    if not m:
        raise ValueError("not a binary PGM/PPM file")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise ValueError(f"only 8-bit netpbm is supported (maxval={maxval})")
    channels = 1 if magic == b"P5" else 3
    raster = np.frombuffer(blob[m.end():], dtype=np.uint8)
    if raster.size != w * h * channels:
        raise ValueError(f"raster has {raster.size} bytes, expected {w * h * channels}")
    return raster.reshape((h, w) if channels == 1 else (h, w, 3)).copy()


def write_pgm(path: PathLike, image: np.ndarray) -> Path:
    image = np.asarray(image)
    if image.ndim != 2:
        raise ShapeError(f"PGM needs a 2-D image, got {image.shape}")
    path = Path(path)
    path.write_bytes(encode(image))
    return path


def write_ppm(path: PathLike, image: np.ndarray) -> Path:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"PPM needs an (h, w, 3) image, got {image.shape}")
    path = Path(path)
    path.write_bytes(encode(image))
    return path


def read_netpbm(path: PathLike) -> np.ndarray:
    return decode(Path(path).read_bytes())
