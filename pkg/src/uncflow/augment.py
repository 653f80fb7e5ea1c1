"""Appearance and affine augmentation of an image pair together with its flow.

The spatial part is one affine map ``T(p) = A p + t`` applied to both frames,
so a correspondence ``p -> p + F(p)`` becomes ``T(p) -> T(p + F(p))`` and the
transformed flow at ``q = T(p)`` is ``A F(p)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy.ndimage import gaussian_filter

from . import autodiff as ad
from .errors import ContractViolation


@dataclass
class AugmentBounds:
    translation: float = 4.0      # px
    rotation: float = 10.0        # degrees
    log_scale: float = 0.1
    brightness: float = 0.1       # additive
    contrast: float = 0.2         # multiplicative, 1 +- contrast
    saturation: float = 0.2
    hue: float = 0.03             # fraction of a turn
    noise_sigma: float = 0.02
    blur_sigma: float = 0.5
    erase_prob: float = 0.5
    erase_max: int = 2
    erase_size: Tuple[int, int] = (4, 12)

    def validate(self):
        for k in ("translation", "rotation", "log_scale", "brightness", "contrast", "saturation",
                  "hue", "noise_sigma", "blur_sigma", "erase_prob"):
            if getattr(self, k) < 0:
                raise ContractViolation(f"augmentation bound {k} must be >= 0")
        if self.erase_prob > 1 or self.erase_max < 0:
            raise ContractViolation("erase bounds out of range")
        if self.contrast >= 1 or self.saturation >= 1:
            raise ContractViolation("contrast/saturation jitter must stay below 1")


@dataclass
class AugmentSpec:
    affine: np.ndarray = field(default_factory=lambda: np.hstack([np.eye(2), np.zeros((2, 1))]))
    brightness: float = 0.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0
    noise_sigma: float = 0.0
    blur_sigma: float = 0.0
    erase: List[Tuple[int, int, int, int]] = field(default_factory=list)  # x0, y0, x1, y1 (exclusive)
    seed: int = 0

    @property
    def A(self) -> np.ndarray:
        return np.asarray(self.affine, dtype=np.float64)[:, :2]

    @property
    def t(self) -> np.ndarray:
        return np.asarray(self.affine, dtype=np.float64)[:, 2]

    def is_spatial_identity(self) -> bool:
        return np.array_equal(self.A, np.eye(2)) and not self.t.any()


def similarity(height: int, width: int, angle_deg: float, scale: float, tx: float, ty: float) -> np.ndarray:
    """2x3 rotation+scale about the image centre followed by a translation."""
    c = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
    a = np.deg2rad(angle_deg)
    A = scale * np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    t = c - A @ c + np.array([tx, ty])
    return np.hstack([A, t[:, None]])


def sample_spec(rng: np.random.Generator, bounds: AugmentBounds, height: int, width: int) -> AugmentSpec:
    """Draw a spec; spatial and appearance parts come from separate child streams."""
    bounds.validate()
    s_rng, a_rng = (np.random.default_rng(s) for s in rng.integers(0, 2 ** 63, size=2))
    b = bounds

    def u(r, m):
        return float(r.uniform(-m, m)) if m > 0 else 0.0

    affine = similarity(height, width, u(s_rng, b.rotation), float(np.exp(u(s_rng, b.log_scale))),
                        u(s_rng, b.translation), u(s_rng, b.translation))
    erase = []
    lo, hi = b.erase_size
    if b.erase_max > 0 and b.erase_prob > 0 and a_rng.random() < b.erase_prob:
        for _ in range(int(a_rng.integers(1, b.erase_max + 1))):
            ew, eh = (int(v) for v in a_rng.integers(lo, hi + 1, size=2))
            x0, y0 = int(a_rng.integers(0, max(width - ew, 0) + 1)), int(a_rng.integers(0, max(height - eh, 0) + 1))
            erase.append((x0, y0, min(x0 + ew, width), min(y0 + eh, height)))
    return AugmentSpec(
        affine=affine,
        brightness=u(a_rng, b.brightness),
        contrast=1.0 + u(a_rng, b.contrast),
        saturation=1.0 + u(a_rng, b.saturation),
        hue=u(a_rng, b.hue),
        noise_sigma=float(a_rng.uniform(0, b.noise_sigma)) if b.noise_sigma > 0 else 0.0,
        blur_sigma=float(a_rng.uniform(0, b.blur_sigma)) if b.blur_sigma > 0 else 0.0,
        erase=erase,
        seed=int(a_rng.integers(0, 2 ** 31)),
    )


@dataclass
class AugmentedBatch:
    img1: np.ndarray
    img2: np.ndarray
    flow: np.ndarray
    occ: np.ndarray


def _source_coords(spec: AugmentSpec, height: int, width: int) -> np.ndarray:
    A, t = spec.A, spec.t
    if abs(np.linalg.det(A)) <= 1e-6:
        raise ContractViolation("augmentation affine is not invertible")
    q = ad.pixel_grid(height, width, np.float64)
    return (q - t) @ np.linalg.inv(A).T  # p = A^-1 (q - t)


def _sample(img: np.ndarray, coords: np.ndarray) -> np.ndarray:
    return ad.grid_sample(ad.Tensor(img[None].astype(np.float64)), ad.Tensor(coords[None])).data[0]


def _outside(coords: np.ndarray, height: int, width: int) -> np.ndarray:
    x, y = coords[..., 0], coords[..., 1]
    return (x < 0) | (x > width - 1) | (y < 0) | (y > height - 1)


def transform_flow(spec: AugmentSpec, flow: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Transformed flow on the target grid and a mask of unusable target pixels.

    A target pixel is unusable when its source point or its transformed
    correspondence lies off the canvas.
    """
    flow = np.asarray(flow, dtype=np.float64)
    H, W = flow.shape[:2]
    p = _source_coords(spec, H, W)
    f = _sample(flow, p) @ spec.A.T
    dest = ad.pixel_grid(H, W, np.float64) + f
    return f, _outside(p, H, W) | _outside(dest, H, W)


def appearance(spec: AugmentSpec, img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Photometric jitter only; geometry is untouched."""
    out = np.asarray(img, dtype=np.float64)
    if spec.hue or spec.saturation != 1.0:
        hsv = rgb_to_hsv(np.clip(out, 0, 1))
        hsv[..., 0] = (hsv[..., 0] + spec.hue) % 1.0
        hsv[..., 1] = np.clip(hsv[..., 1] * spec.saturation, 0, 1)
        out = hsv_to_rgb(hsv)
    mean = out.mean()
    out = (out - mean) * spec.contrast + mean + spec.brightness
    if spec.blur_sigma > 0:
        out = gaussian_filter(out, sigma=(spec.blur_sigma, spec.blur_sigma, 0), mode="nearest")
    if spec.noise_sigma > 0:
        out = out + rng.normal(scale=spec.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def apply(spec: AugmentSpec, img1, img2, flow, occ=None) -> AugmentedBatch:
    """Augment one pair (H×W×3 images, H×W×2 flow, H×W occlusion)."""
    img1, img2 = np.asarray(img1, np.float64), np.asarray(img2, np.float64)
    flow = np.asarray(flow, np.float64)
    H, W = flow.shape[:2]
    if img1.shape[:2] != (H, W) or img2.shape[:2] != (H, W):
        raise ContractViolation("augment: image and flow extents differ")
    p = _source_coords(spec, H, W)
    i1, i2 = _sample(img1, p), _sample(img2, p)
    f_hat, off_canvas = transform_flow(spec, flow)
    o = np.zeros((H, W), bool) if occ is None else np.asarray(occ, bool).reshape(H, W)
    ix = np.clip(np.rint(p[..., 0]), 0, W - 1).astype(int)
    iy = np.clip(np.rint(p[..., 1]), 0, H - 1).astype(int)
    o_hat = o[iy, ix] | off_canvas
    rng = np.random.default_rng(spec.seed)
    i1, i2 = appearance(spec, i1, rng), appearance(spec, i2, rng)
    if spec.erase:
        erased = np.zeros((H, W), bool)
        fill = i2.reshape(-1, i2.shape[-1]).mean(0)
        for x0, y0, x1, y1 in spec.erase:
            erased[y0:y1, x0:x1] = True
            i2[y0:y1, x0:x1] = fill
        dest = ad.pixel_grid(H, W, np.float64) + f_hat
        dx = np.clip(np.rint(dest[..., 0]), 0, W - 1).astype(int)
        dy = np.clip(np.rint(dest[..., 1]), 0, H - 1).astype(int)
        o_hat |= erased | erased[dy, dx]
    return AugmentedBatch(i1, i2, f_hat, o_hat)


def apply_images(spec: AugmentSpec, img1, img2) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Augmented images plus the erase/off-canvas mask, without needing a flow."""
    H, W = np.shape(img1)[:2]
    b = apply(spec, img1, img2, np.zeros((H, W, 2)))
    return b.img1, b.img2, b.occ


def residual(a, b):
    """Per-pixel l1 distance ``||a - b||_1`` of two flow fields; works on arrays or Tensors."""
    if isinstance(a, ad.Tensor) or isinstance(b, ad.Tensor):
        return ad.sum_(ad.abs_(ad.as_tensor(a) - ad.as_tensor(b)), axis=-1, keepdims=True)
    return np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64)).sum(-1)
