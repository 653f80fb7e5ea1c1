"""Normalized DLT homography fitting and a vectorized RANSAC wrapper."""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np


def _normalizer(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2) / max(d, 1e-12)
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def project(H: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Apply one (3,3) or a batch (B,3,3) of homographies to (N,2) points."""
    ph = np.concatenate([pts, np.ones((len(pts), 1))], axis=1)
    q = ph @ np.swapaxes(H, -1, -2)
    w = q[..., 2:3]
    w = np.where(np.abs(w) < 1e-12, 1e-12, w)
    return q[..., :2] / w


def _dlt_rows(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    # src, dst: (..., n, 2) -> (..., 2n, 9)
    x, y = src[..., 0], src[..., 1]
    u, v = dst[..., 0], dst[..., 1]
    one, zero = np.ones_like(x), np.zeros_like(x)
    r1 = np.stack([x, y, one, zero, zero, zero, -u * x, -u * y, -u], axis=-1)
    r2 = np.stack([zero, zero, zero, x, y, one, -v * x, -v * y, -v], axis=-1)
    rows = np.stack([r1, r2], axis=-2)  # (..., n, 2, 9)
    return rows.reshape(rows.shape[:-3] + (-1, 9))


def _null_vector(rows: np.ndarray) -> np.ndarray:
    # minimal systems have 8 rows, so the thin SVD would drop the null direction
    _, _, vt = np.linalg.svd(rows, full_matrices=rows.shape[-2] < 9)
    return vt[..., -1, :]


def fit_homography(src: np.ndarray, dst: np.ndarray) -> Optional[np.ndarray]:
    """Least-squares DLT on Hartley-normalized points; None if degenerate."""
    if len(src) < 4:
        return None
    Ts, Td = _normalizer(src), _normalizer(dst)
    sn = project(Ts, src)
    dn = project(Td, dst)
    Hn = _null_vector(_dlt_rows(sn, dn)).reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    if not np.all(np.isfinite(H)) or abs(H[2, 2]) < 1e-12:
        return None
    return H / H[2, 2]


def ransac_homography(src: np.ndarray, dst: np.ndarray, rng: np.random.Generator,
                      iterations: int = 256, threshold: float = 1.0
                      ) -> Tuple[Optional[np.ndarray], np.ndarray]:
    """Robust homography from correspondences ``src -> dst``.

    Minimal 4-point hypotheses are solved in one batched SVD; the best
    consensus set is refit by least squares twice.  Returns ``(H, inliers)``.
    """
    n = len(src)
    none = np.zeros(n, dtype=bool)
    if n < 4:
        return None, none
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    Ts, Td = _normalizer(src), _normalizer(dst)
    sn, dn = project(Ts, src), project(Td, dst)
    idx = np.stack([rng.choice(n, 4, replace=False) for _ in range(iterations)])
    Hn = _null_vector(_dlt_rows(sn[idx], dn[idx])).reshape(-1, 3, 3)
    Hs = np.linalg.inv(Td) @ Hn @ Ts
    scale = Hs[:, 2, 2:3, None]
    good = np.abs(scale[:, 0, 0]) > 1e-12
    Hs = Hs[good] / scale[good]
    if len(Hs) == 0:
        return None, none
    with np.errstate(all="ignore"):
        err = np.sqrt(((project(Hs, src) - dst) ** 2).sum(-1))  # (B, n)
    err = np.where(np.isfinite(err), err, np.inf)
    counts = (err < threshold).sum(axis=1)
    inliers = err[np.argmax(counts)] < threshold
    H = None
    for _ in range(2):
        if inliers.sum() < 4:
            break
        H_new = fit_homography(src[inliers], dst[inliers])
        if H_new is None:
            break
        H = H_new
        inliers = np.sqrt(((project(H, src) - dst) ** 2).sum(-1)) < threshold
    if H is None:
        return None, none
    return H, inliers
