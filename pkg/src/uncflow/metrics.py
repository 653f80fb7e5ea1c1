"""Flow accuracy and uncertainty-quality metrics."""

from __future__ import annotations

import csv
from fractions import Fraction
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateMaskError

GRID_STEPS = 50  # fraction grid 0, 0.02, ..., 1


def _mask(valid, shape) -> np.ndarray:
    if valid is None:
        return np.ones(shape, dtype=bool)
    return np.asarray(valid, dtype=bool)


def epe_map(pred, gt) -> np.ndarray:
    d = np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    return np.sqrt((d ** 2).sum(-1))


def epe(pred, gt, valid=None) -> float:
    e = epe_map(pred, gt)
    m = _mask(valid, e.shape)
    if not m.any():
        raise DegenerateMaskError("epe: no valid pixels")
    return float(e[m].mean())


def outlier_map(pred, gt) -> np.ndarray:
    """KITTI outlier rule: error > 3 px and > 5% of the ground-truth magnitude."""
    e = epe_map(pred, gt)
    mag = np.sqrt((np.asarray(gt, dtype=np.float64) ** 2).sum(-1))
    return (e > 3.0) & (e > 0.05 * mag)


def fl_rate(pred, gt, valid=None, region=None) -> float:
    m = _mask(valid, np.shape(pred)[:2])
    if region is not None:
        m = m & np.asarray(region, dtype=bool)
    if not m.any():
        raise DegenerateMaskError("fl_rate: empty evaluation region")
    return float(100.0 * outlier_map(pred, gt)[m].mean())


@dataclass
class SparsificationResult:
    fractions: np.ndarray
    err_by_uncertainty: np.ndarray
    err_by_oracle: np.ndarray
    degenerate: bool = False


def _removal_curve(errors: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Normalized remaining mean error on the fraction grid."""
    n = errors.size
    # descending key, ties broken by lower pixel index first
    order = np.lexsort((np.arange(n), -keys))
    suffix = np.concatenate([np.cumsum(errors[order][::-1])[::-1], [0.0]])
    removed = (np.arange(GRID_STEPS + 1) * n) // GRID_STEPS
    kept = n - removed
    # (kept sum / kept) / (total / n) with a single final division
    return np.where(kept > 0, suffix[removed] * n / (np.maximum(kept, 1) * suffix[0]), 0.0)


def sparsification(errors, uncertainty, valid=None, min_pixels: int = 50) -> SparsificationResult:
    """Remaining-error curves when dropping pixels by uncertainty vs. by true error.

    At fraction ``i/50`` the ``floor(i*n/50)`` pixels with the largest key are
    dropped (ties: lower pixel index first) and the rest are averaged.  Both
    curves are normalized by the full-set mean error; the final point, with
    nothing left, is 0.  Lower ``min_pixels`` only for toy inputs.
    """
    errors = np.asarray(errors, dtype=np.float64)
    uncertainty = np.asarray(uncertainty, dtype=np.float64)
    m = _mask(valid, errors.shape)
    e, u = errors[m].ravel(), uncertainty[m].ravel()
    if e.size < max(min_pixels, 1):
        raise DegenerateMaskError(f"sparsification: {e.size} valid pixels, need {min_pixels}")
    fractions = np.arange(GRID_STEPS + 1) / GRID_STEPS
    full = e.mean()
    if full == 0:
        z = np.zeros_like(fractions)
        return SparsificationResult(fractions, z, z.copy(), degenerate=True)
    return SparsificationResult(fractions, _removal_curve(e, u), _removal_curve(e, e))


def ause(result: SparsificationResult) -> float:
    """Trapezoidal area between the curves, accumulated exactly and rounded once."""
    gap = [Fraction(float(a)) - Fraction(float(b)) for a, b in zip(result.err_by_uncertainty, result.err_by_oracle)]
    step = Fraction(1, len(gap) - 1)  # the fraction grid is uniform on [0, 1]
    return float(sum((gap[i] + gap[i + 1]) / 2 * step for i in range(len(gap) - 1)))


def spearman_cc(uncertainty, errors, valid=None) -> Optional[float]:
    """Spearman rank correlation; ``None`` when either side has constant ranks."""
    u = np.asarray(uncertainty, dtype=np.float64)
    e = np.asarray(errors, dtype=np.float64)
    m = _mask(valid, u.shape)
    u, e = u[m].ravel(), e[m].ravel()
    if u.size < 3:
        raise DegenerateMaskError("spearman_cc: need at least 3 valid pixels")
    ru, re = rankdata(u), rankdata(e)
    ru -= ru.mean()
    re -= re.mean()
    den = np.sqrt((ru ** 2).sum() * (re ** 2).sum())
    if den == 0:
        return None
    return float(np.clip((ru * re).sum() / den, -1.0, 1.0))


@dataclass
class EvalReport:
    frame: str
    n_valid: int
    epe: float
    fl_all: float
    fl_noc: float = float("nan")
    fl_occ: float = float("nan")
    epe_noc: float = float("nan")
    epe_occ: float = float("nan")
    ause: float = float("nan")
    spearman_cc: float = float("nan")
    extras: dict = field(default_factory=dict, repr=False)


def evaluate_frame(frame: str, pred, gt, valid=None, occluded=None, variance=None) -> EvalReport:
    """All metrics for one frame. ``occluded`` splits EPE/Fl into noc/occ parts."""
    m = _mask(valid, np.shape(pred)[:2])
    e = epe_map(pred, gt)
    rep = EvalReport(frame=frame, n_valid=int(m.sum()), epe=epe(pred, gt, m), fl_all=fl_rate(pred, gt, m))
    if occluded is not None:
        occ = np.asarray(occluded, dtype=bool)
        if (m & ~occ).any():
            rep.fl_noc = fl_rate(pred, gt, m, ~occ)
            rep.epe_noc = float(e[m & ~occ].mean())
        if (m & occ).any():
            rep.fl_occ = fl_rate(pred, gt, m, occ)
            rep.epe_occ = float(e[m & occ].mean())
    if variance is not None:
        res = sparsification(e, variance, m)
        rep.ause = ause(res)
        cc = spearman_cc(variance, e, m)
        rep.spearman_cc = float("nan") if cc is None else cc
        rep.extras["sparsification"] = res
    return rep


_NUMERIC = ("epe", "fl_all", "fl_noc", "fl_occ", "epe_noc", "epe_occ", "ause", "spearman_cc")


def aggregate(reports: Sequence[EvalReport], name: str = "aggregate") -> EvalReport:
    """Valid-pixel-weighted mean of every metric (NaN entries are skipped)."""
    w = np.array([r.n_valid for r in reports], dtype=np.float64)
    out = EvalReport(frame=name, n_valid=int(w.sum()), epe=0.0, fl_all=0.0)
    for key in _NUMERIC:
        vals = np.array([getattr(r, key) for r in reports], dtype=np.float64)
        ok = np.isfinite(vals)
        setattr(out, key, float((vals[ok] * w[ok]).sum() / w[ok].sum()) if ok.any() else float("nan"))
    return out


def write_report_csv(path, reports: Sequence[EvalReport]) -> None:
    """One row per frame followed by the aggregate row."""
    cols = [f.name for f in fields(EvalReport) if f.name != "extras"]
    rows = list(reports) + [aggregate(reports)]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(cols)
        for r in rows:
            d = asdict(r)
            wr.writerow([d[c] for c in cols])


def write_sparsification_data(path, result: SparsificationResult) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["fraction", "oracle", "predicted"])
        for f, o, p in zip(result.fractions, result.err_by_oracle, result.err_by_uncertainty):
            wr.writerow([f"{f:.2f}", repr(float(o)), repr(float(p))])


def plot_sparsification(path, result: SparsificationResult, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(result.fractions, result.err_by_oracle, "k--", label="oracle")
    ax.plot(result.fractions, result.err_by_uncertainty, "b-", label=f"uncertainty (AUSE {ause(result):.3f})")
    ax.set_xlabel("fraction removed")
    ax.set_ylabel("normalized EPE")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
