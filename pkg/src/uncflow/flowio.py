"""Flow and image serialization plus color-wheel rendering.

Formats
-------
* Middlebury ``.flo``: little-endian float32 magic 202021.25, int32 width,
  int32 height, then float32 (u, v) interleaved, row-major.  Pixels whose
  magnitude exceeds 1e9 (or are non-finite) are treated as unknown.
* Single-channel rasters (uncertainty maps): same magic, int32 width, int32
  height, an extra int32 channel count (always 1), then float32 values.
* KITTI flow PNG: 16-bit, three channels (u, v, valid) in RGB order with
  ``u = (raw - 2**15) / 64``.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import cv2
import numpy as np
from matplotlib.colors import hsv_to_rgb
from PIL import Image

from .errors import FormatError

FLO_MAGIC = 202021.25
UNKNOWN_FLOW = 1e10
_HEADER = struct.Struct("<fii")


@dataclass
class FlowField:
    """H×W×2 pixel displacements (u right-positive, v down-positive)."""

    data: np.ndarray
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[2] != 2:
            raise ValueError(f"flow must be H×W×2, got {self.data.shape}")
        if self.valid is not None:
            self.valid = np.asarray(self.valid, dtype=bool)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def valid_mask(self) -> np.ndarray:
        finite = np.all(np.isfinite(self.data), axis=-1)
        return finite if self.valid is None else (finite & self.valid)


def _as_flow(flow) -> FlowField:
    return flow if isinstance(flow, FlowField) else FlowField(np.asarray(flow))


# -- .flo ------------------------------------------------------------------

def write_flo(flow) -> bytes:
    flow = _as_flow(flow)
    data = flow.data.copy()
    if flow.valid is not None:
        data[~flow.valid] = UNKNOWN_FLOW
    h, w = data.shape[:2]
    return _HEADER.pack(FLO_MAGIC, w, h) + data.astype("<f4").tobytes()


def read_flo(buf: bytes) -> FlowField:
    if len(buf) < _HEADER.size:
        raise FormatError("flo: truncated header")
    magic, w, h = _HEADER.unpack_from(buf)
    if magic != FLO_MAGIC:
        raise FormatError(f"flo: bad magic {magic!r}")
    if w <= 0 or h <= 0:
        raise FormatError(f"flo: bad dimensions {w}x{h}")
    need = _HEADER.size + 8 * w * h
    if len(buf) != need:
        raise FormatError(f"flo: payload is {len(buf) - _HEADER.size} bytes, expected {need - _HEADER.size}")
    data = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(h, w, 2).astype(np.float32)
    bad = ~np.isfinite(data).all(-1) | (np.abs(data) > 1e9).any(-1)
    return FlowField(data, None if not bad.any() else ~bad)


def write_raster(values: np.ndarray) -> bytes:
    """Serialize a single-channel float map (e.g. predicted variance)."""
    values = np.asarray(values, dtype="<f4")
    if values.ndim == 3 and values.shape[2] == 1:
        values = values[..., 0]
    if values.ndim != 2:
        raise ValueError(f"raster must be H×W, got {values.shape}")
    h, w = values.shape
    return _HEADER.pack(FLO_MAGIC, w, h) + struct.pack("<i", 1) + values.tobytes()


def read_raster(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size + 4:
        raise FormatError("raster: truncated header")
    magic, w, h = _HEADER.unpack_from(buf)
    (channels,) = struct.unpack_from("<i", buf, _HEADER.size)
    if magic != FLO_MAGIC:
        raise FormatError(f"raster: bad magic {magic!r}")
    if w <= 0 or h <= 0 or channels != 1:
        raise FormatError(f"raster: bad header {w}x{h}x{channels}")
    off = _HEADER.size + 4
    if len(buf) != off + 4 * w * h:
        raise FormatError("raster: payload size mismatch")
    return np.frombuffer(buf, dtype="<f4", offset=off).reshape(h, w).astype(np.float32)


# -- KITTI PNG -----------------------------------------------------------------

def write_kitti_png(flow) -> bytes:
    flow = _as_flow(flow)
    raw = np.round(flow.data.astype(np.float64) * 64.0 + 32768.0)
    valid = flow.valid_mask()
    out_of_range = ((raw < 0) | (raw > 65535)).any(-1)
    valid &= ~out_of_range
    raw = np.clip(np.nan_to_num(raw, nan=32768.0), 0, 65535).astype(np.uint16)
    raw[~valid] = 32768
    rgb = np.dstack([raw[..., 0], raw[..., 1], valid.astype(np.uint16)])
    ok, enc = cv2.imencode(".png", rgb[..., ::-1])  # cv2 wants BGR
    if not ok:  # pragma: no cover
        raise FormatError("kitti: png encoding failed")
    return enc.tobytes()


def read_kitti_png(buf: bytes) -> FlowField:
    arr = np.frombuffer(buf, dtype=np.uint8)
    try:
        img = cv2.imdecode(arr, cv2.IMREAD_UNCHANGED) if arr.size else None
    except cv2.error as exc:
        raise FormatError(f"kitti: cannot decode png ({exc})") from exc
    if img is None:
        raise FormatError("kitti: cannot decode png")
    if img.dtype != np.uint16:
        raise FormatError(f"kitti: expected 16-bit png, got {img.dtype}")
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError("kitti: expected 3 channels (u, v, valid)")
    rgb = img[..., ::-1].astype(np.float64)
    data = (rgb[..., :2] - 32768.0) / 64.0
    return FlowField(data.astype(np.float32), rgb[..., 2] > 0)


# -- images --------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    """Load an 8/16-bit image as float H×W×C in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype == np.uint16 or arr.dtype == np.int32:
        arr = arr.astype(np.float32) / 65535.0
    else:
        arr = arr.astype(np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.shape[2] == 4:
        arr = arr[..., :3]
    return np.clip(arr, 0.0, 1.0)


def write_image(path, img: np.ndarray) -> None:
    img = np.clip(np.asarray(img, dtype=np.float64), 0, 1)
    u8 = np.round(img * 255).astype(np.uint8)
    if u8.ndim == 3 and u8.shape[2] == 1:
        u8 = u8[..., 0]
    Image.fromarray(u8).save(path)


def save_flo(path, flow) -> None:
    Path(path).write_bytes(write_flo(flow))


def load_flo(path) -> FlowField:
    return read_flo(Path(path).read_bytes())


# -- visualization ---------------------------------------------------------------

def flow_to_color(flow, max_radius: Optional[float] = None) -> np.ndarray:
    """Render flow on an HSV wheel: hue is direction, saturation is magnitude.

    Zero flow is white.  Without ``max_radius`` the largest finite magnitude
    sets the scale.  Returns float RGB in [0, 1].
    """
    data = _as_flow(flow).data.astype(np.float64)
    u, v = data[..., 0], data[..., 1]
    finite = np.isfinite(u) & np.isfinite(v)
    u = np.where(finite, u, 0.0)
    v = np.where(finite, v, 0.0)
    mag = np.hypot(u, v)
    if max_radius is None:
        max_radius = float(mag.max()) if mag.max() > 0 else 1.0
    hue = (np.arctan2(v, u) / (2 * np.pi)) % 1.0
    sat = np.clip(mag / max_radius, 0.0, 1.0)
    rgb = hsv_to_rgb(np.stack([hue, sat, np.ones_like(hue)], axis=-1))
    rgb[~finite] = 0.0
    return rgb


def uncertainty_to_gray(var: np.ndarray) -> np.ndarray:
    """Log-scaled variance map as a grayscale image (bright = uncertain)."""
    a = np.log(np.maximum(np.asarray(var, dtype=np.float64), 1e-12))
    lo, hi = np.percentile(a, 1), np.percentile(a, 99)
    return np.clip((a - lo) / max(hi - lo, 1e-12), 0, 1)[..., None]


def to_png_bytes(img: np.ndarray) -> bytes:
    bio = io.BytesIO()
    img = np.clip(np.asarray(img, dtype=np.float64), 0, 1)
    u8 = np.round(img * 255).astype(np.uint8)
    if u8.ndim == 3 and u8.shape[2] == 1:
        u8 = u8[..., 0]
    Image.fromarray(u8).save(bio, format="PNG")
    return bio.getvalue()
