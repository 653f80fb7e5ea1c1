"""Unsupervised training objectives and their masks.

Tensors are batched NHWC: images (N,H,W,3), flows (N,H,W,2), log-variance
(N,H,W,1).  Masks are plain boolean/float arrays and never carry gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation, DegenerateMaskError
from .homography import project, ransac_homography


@dataclass
class LossWeights:
    hg: float = 0.1
    sm: float = 55.0
    ar: float = 0.02
    unc: float = 0.005
    tau_hg: float = 2.0
    zeta: float = 0.8
    w_l1: float = 0.15
    w_ssim: float = 0.85
    w_census: float = 1.0
    occ_alpha1: float = 0.01
    occ_alpha2: float = 0.5
    edge_weight: float = 150.0
    ssim_window: int = 3
    census_window: int = 7

    def validate(self):
        for k in ("hg", "sm", "ar", "unc", "tau_hg", "w_l1", "w_ssim", "w_census"):
            if getattr(self, k) < 0:
                raise ContractViolation(f"loss weight {k} must be >= 0")
        if not 0 < self.zeta <= 1:
            raise ContractViolation("zeta must lie in (0, 1]")


def _np(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _batched(x: np.ndarray, channels: bool = True) -> np.ndarray:
    want = 4 if channels else 3
    return x[None] if x.ndim == want - 1 else x


def masked_mean(x, keep) -> Tensor:
    """Mean of ``x`` over pixels where ``keep`` is nonzero; ``keep`` broadcasts against ``x``."""
    x = ad.as_tensor(x)
    keep = np.broadcast_to(np.asarray(keep, dtype=x.dtype), x.shape)
    total = float(keep.sum())
    if total <= 0:
        raise DegenerateMaskError("masked mean over an empty mask")
    return ad.sum_(x * keep) * (1.0 / total)


# -- occlusion -----------------------------------------------------------------

def occlusion_mask(flow_fwd, flow_bwd, alpha1: float = 0.01, alpha2: float = 0.5) -> np.ndarray:
    """Forward-backward consistency check; True marks occluded pixels.

    ``flow_bwd`` is sampled bilinearly (border clamped) at ``p + flow_fwd(p)``.
    Accepts single H×W×2 fields or NHWC batches; returns matching boolean maps.
    """
    f = _np(flow_fwd).astype(np.float64)
    b = _np(flow_bwd).astype(np.float64)
    if f.shape != b.shape:
        raise ContractViolation(f"occlusion_mask shape mismatch {f.shape} vs {b.shape}")
    single = f.ndim == 3
    f, b = _batched(f), _batched(b)
    bw = ad.warp_bilinear(ad.Tensor(b), ad.Tensor(f)).data
    resid = np.sqrt(((f + bw) ** 2).sum(-1))
    delta = alpha1 * ((f ** 2).sum(-1) + (bw ** 2).sum(-1)) + alpha2
    occ = resid > delta
    return occ[0] if single else occ


# -- photometric ---------------------------------------------------------------

def _box_filter(x: Tensor, k: int) -> Tensor:
    C = x.shape[-1]
    kern = np.zeros((k, k, C, C), dtype=x.dtype)
    kern[:, :, np.arange(C), np.arange(C)] = 1.0 / (k * k)
    return ad.conv2d(ad.pad(x, k // 2, "edge"), kern)


def ssim_dissimilarity(x: Tensor, y: Tensor, window: int = 3) -> Tensor:
    """Per-pixel (1 - SSIM) / 2 averaged over channels, shape (N,H,W,1)."""
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mx, my = _box_filter(x, window), _box_filter(y, window)
    sxx = _box_filter(x * x, window) - mx * mx
    syy = _box_filter(y * y, window) - my * my
    sxy = _box_filter(x * y, window) - mx * my
    num = (mx * my * 2.0 + c1) * (sxy * 2.0 + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    d = ad.clamp((1.0 - num / den) * 0.5, 0.0, 1.0)
    return ad.mean(d, axis=-1, keepdims=True)


def _census_kernel(size: int, dtype) -> np.ndarray:
    k = np.zeros((size, size, 1, size * size), dtype=dtype)
    r = size // 2
    for b in range(size * size):
        k[b // size, b % size, 0, b] += 1.0
        k[r, r, 0, b] -= 1.0
    return k


def census_transform(gray: Tensor, size: int = 7) -> Tensor:
    """Soft census descriptor, one normalized difference per patch neighbour."""
    d = ad.conv2d(ad.pad(gray * 255.0, size // 2, "edge"), _census_kernel(size, gray.dtype))
    return d * ad.power(d * d + 0.81, -0.5)


def census_distance(a: Tensor, b: Tensor, size: int = 7, eps: float = 0.01) -> Tensor:
    """Soft Hamming distance between census descriptors with per-bit Charbonnier, (N,H,W,1)."""
    ga = ad.mean(a, axis=-1, keepdims=True)
    gb = ad.mean(b, axis=-1, keepdims=True)
    diff = census_transform(ga, size) - census_transform(gb, size)
    sq = diff * diff
    ham = sq / (sq + 0.1)
    robust = ad.sqrt(ham * ham + eps * eps) - eps
    return ad.mean(robust, axis=-1, keepdims=True)


def photometric_terms(img1, img2, flow, occ, weights: Optional[LossWeights] = None) -> Dict[str, Tensor]:
    """Occlusion-masked l1, SSIM and census terms for warping ``img2`` back onto ``img1``."""
    w = weights or LossWeights()
    img1, img2, flow = ad.as_tensor(img1), ad.as_tensor(img2), ad.as_tensor(flow)
    if img1.ndim == 3:
        img1, img2 = ad.reshape(img1, (1,) + img1.shape), ad.reshape(img2, (1,) + img2.shape)
        flow = ad.reshape(flow, (1,) + flow.shape)
    keep = 1.0 - _batched(np.asarray(occ, dtype=np.float64), channels=False)[..., None]
    if keep.sum() <= 0:
        raise DegenerateMaskError("photometric loss: every pixel is occluded")
    warped = ad.warp_bilinear(img2, flow)
    l1 = ad.mean(ad.abs_(img1 - warped), axis=-1, keepdims=True)
    return {
        "l1": masked_mean(l1, keep),
        "ssim": masked_mean(ssim_dissimilarity(img1, warped, w.ssim_window), keep),
        "census": masked_mean(census_distance(img1, warped, w.census_window), keep),
    }


def photometric_loss(img1, img2, flow, occ, weights: Optional[LossWeights] = None) -> Tensor:
    w = weights or LossWeights()
    t = photometric_terms(img1, img2, flow, occ, w)
    return t["l1"] * w.w_l1 + t["ssim"] * w.w_ssim + t["census"] * w.w_census


# -- smoothness ----------------------------------------------------------------

def smoothness_loss(flow, img, edge_weight: float = 150.0) -> Tensor:
    """First-order edge-aware smoothness.

    Per axis, the pixel mean of ``||dF||_1 * exp(-edge_weight * |dI|)`` where
    ``||dF||_1`` sums both flow components; the two axes are added.
    """
    flow = ad.as_tensor(flow)
    im = _np(img).astype(flow.dtype)
    if flow.ndim == 3:
        flow = ad.reshape(flow, (1,) + flow.shape)
        im = im[None]
    wx = np.exp(-edge_weight * np.abs(np.diff(im, axis=2)).mean(-1, keepdims=True))
    wy = np.exp(-edge_weight * np.abs(np.diff(im, axis=1)).mean(-1, keepdims=True))
    dx = ad.abs_(flow[:, :, 1:, :] - flow[:, :, :-1, :])
    dy = ad.abs_(flow[:, 1:, :, :] - flow[:, :-1, :, :])
    return (ad.mean(dx * wx) + ad.mean(dy * wy)) * 2.0


# -- homography smoothness -------------------------------------------------------

def fit_region_homography(flow: np.ndarray, region: np.ndarray, logvar: np.ndarray, tau_hg: float = 2.0,
                          rng: Optional[np.random.Generator] = None, min_points: int = 16,
                          min_inlier_ratio: float = 0.5, threshold: float = 1.0) -> Optional[np.ndarray]:
    """Homography-induced flow over ``region`` from its reliable pixels, or None.

    A pixel is reliable when ``exp(logvar) < tau_hg``.  Returns an H×W×2 field
    that is only meaningful inside ``region``.
    """
    flow = np.asarray(flow, dtype=np.float64)
    region = np.asarray(region, dtype=bool)
    if not region.any():
        raise ContractViolation("fit_region_homography: empty region")
    var = np.exp(np.asarray(logvar, dtype=np.float64).reshape(region.shape))
    reliable = region & (var < tau_hg)
    if reliable.sum() < min_points:
        return None
    H_, W_ = region.shape
    ys, xs = np.nonzero(reliable)
    src = np.stack([xs, ys], axis=1).astype(np.float64)
    dst = src + flow[ys, xs]
    H, inliers = ransac_homography(src, dst, rng or np.random.default_rng(0), threshold=threshold)
    if H is None or inliers.mean() < min_inlier_ratio:
        return None
    gy, gx = np.mgrid[0:H_, 0:W_]
    grid = np.stack([gx.ravel(), gy.ravel()], axis=1).astype(np.float64)
    return (project(H, grid) - grid).reshape(H_, W_, 2)


def homography_l1(flow, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean over masked pixels of ``||flow - target||_1`` with ``target`` held constant."""
    flow = ad.as_tensor(flow)
    d = ad.sum_(ad.abs_(flow - target.astype(flow.dtype)), axis=-1, keepdims=True)
    return masked_mean(d, np.asarray(mask, dtype=bool)[..., None])


def homography_smoothness_loss(flow, regions: Sequence[Sequence[np.ndarray]], logvar, tau_hg: float = 2.0,
                               rng: Optional[np.random.Generator] = None):
    """Region-wise homography smoothness on the final flow estimate.

    ``regions[n]`` lists the region masks of batch item ``n``.  Returns
    ``(loss, fitted)``; when no region admits a homography the loss is a zero
    constant and ``fitted`` is False.
    """
    flow = ad.as_tensor(flow)
    if flow.ndim == 3:
        flow = ad.reshape(flow, (1,) + flow.shape)
        regions = [regions]
        logvar = _np(logvar)[None]
    fd, lv = flow.data, _np(logvar)
    target = np.zeros(fd.shape, dtype=np.float64)
    mask = np.zeros(fd.shape[:3], dtype=bool)
    rng = rng or np.random.default_rng(0)
    for n, regs in enumerate(regions):
        for reg in regs:
            if not np.any(reg):
                continue
            fh = fit_region_homography(fd[n], reg, lv[n], tau_hg, rng)
            if fh is not None:
                target[n][reg] = fh[reg]
                mask[n] |= reg
    if not mask.any():
        return ad.constant(0.0, dtype=flow.dtype), False
    return homography_l1(flow, target, mask), True


# -- augmentation consistency -------------------------------------------------------

def uncertainty_nll(logvar, residual, occ) -> Tensor:
    """Occlusion-masked Laplace negative log-likelihood of an l1 residual.

    Per pixel ``sqrt(2) * exp(-logvar/2) * D + logvar/2``; the residual is
    always treated as a constant.
    """
    logvar = ad.as_tensor(logvar)
    d = ad.detach(residual)
    if d.shape != logvar.shape:
        d = ad.reshape(d, logvar.shape)
    per_pixel = ad.exp(logvar * -0.5) * d * np.sqrt(2.0) + logvar * 0.5
    keep = 1.0 - np.asarray(occ, dtype=np.float64).reshape(logvar.shape)
    return masked_mean(per_pixel, keep)


def augmentation_reg_loss(residual, occ) -> Tensor:
    """Occlusion-masked mean of the gradient-carrying residual."""
    residual = ad.as_tensor(residual)
    keep = 1.0 - np.asarray(occ, dtype=np.float64).reshape(residual.shape)
    return masked_mean(residual, keep)


def flow_residual(target, pred) -> Tensor:
    """Per-pixel l1 distance between two flow fields, (N,H,W,1)."""
    return ad.sum_(ad.abs_(ad.as_tensor(target) - ad.as_tensor(pred)), axis=-1, keepdims=True)


# -- total ---------------------------------------------------------------------------

def total_loss(per_iter: List[Dict[str, Tensor]], weights: LossWeights, hg=None) -> Tensor:
    """Decay-weighted sum over iterations plus the final-iteration homography term.

    Each entry of ``per_iter`` may hold ``ph``, ``sm``, ``ar`` and ``unc``;
    missing terms count as zero.
    """
    K = len(per_iter)
    lam = {"ph": 1.0, "sm": weights.sm, "ar": weights.ar, "unc": weights.unc}
    total = ad.constant(0.0)
    for k, terms in enumerate(per_iter, start=1):
        decay = weights.zeta ** (K - k)
        for key, t in terms.items():
            if t is None or lam[key] == 0:
                continue
            total = total + t * (decay * lam[key])
    if hg is not None and weights.hg:
        total = total + hg * weights.hg
    return total
