"""End-to-end fusion training and evaluation on frame triples."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation
from .fusion import FusionExample, FusionNet, fuse, occlusion_masks, reliability_masks, train_fusion_net
from .losses import occlusion_mask
from .metrics import EvalReport, aggregate, evaluate_frame
from .model import FlowNet
from .train import predict

VARIANTS = ("none", "uncertainty", "occlusion")


@dataclass
class TriplePredictions:
    img: np.ndarray
    flow_fwd: np.ndarray
    flow_bwd: np.ndarray
    var_fwd: np.ndarray
    var_bwd: np.ndarray
    occ_fwd: np.ndarray   # forward-backward check on (t, t+1)
    occ_bwd: np.ndarray   # forward-backward check on (t, t-1)

    def example(self) -> FusionExample:
        return FusionExample(self.img, self.flow_fwd, self.flow_bwd, self.var_fwd, self.var_bwd)


def predict_triples(net: FlowNet, triples: Sequence, iterations: Optional[int] = None) -> List[TriplePredictions]:
    """Run the frozen model in all four directions needed for fusion and its baseline."""
    for t in triples:
        if getattr(t, "img0", None) is None:
            raise ContractViolation("fusion needs frame triples (missing frame t-1)")
    prev = [t.img0 for t in triples]
    cur = [t.img1 for t in triples]
    nxt = [t.img2 for t in triples]
    n = len(triples)
    # one stacked call per direction pair keeps batches full
    flows, var = predict(net, cur + cur + nxt + prev, nxt + prev + cur + cur, iterations)
    out = []
    for i in range(n):
        ff, fb, f_nxt, f_prev = flows[i], flows[n + i], flows[2 * n + i], flows[3 * n + i]
        out.append(TriplePredictions(
            img=np.asarray(cur[i], np.float64), flow_fwd=ff, flow_bwd=fb, var_fwd=var[i], var_bwd=var[n + i],
            occ_fwd=occlusion_mask(ff, f_nxt), occ_bwd=occlusion_mask(fb, f_prev)))
    return out


def resolve_theta(theta: float, preds: Sequence[TriplePredictions]) -> float:
    """Positive ``theta`` is used as-is; ``theta`` in [-1, 0) selects that quantile of the forward variance."""
    if theta > 0:
        return float(theta)
    if not -1.0 <= theta < 0:
        raise ContractViolation(f"theta must be > 0 or a negated quantile in [-1, 0), got {theta}")
    return float(np.quantile(np.concatenate([p.var_fwd.ravel() for p in preds]), -theta))


def train_fusion(net: FlowNet, triples: Sequence, theta: float, steps: int = 300, lr: float = 1e-3,
                 batch_size: int = 4, seed: int = 0, width: int = 32, iterations: Optional[int] = None,
                 history: Optional[list] = None) -> FusionNet:
    preds = predict_triples(net, triples, iterations)
    theta = resolve_theta(theta, preds)
    with ad.precision("train"):
        return train_fusion_net([p.example() for p in preds], theta, steps=steps, batch_size=batch_size,
                                lr=lr, seed=seed, width=width, history=history)


@dataclass
class FusionReport:
    theta: float
    variants: Dict[str, EvalReport]
    replaced: Dict[str, float] = field(default_factory=dict)   # share of pixels replaced

    def rows(self):
        for name in VARIANTS:
            r = self.variants[name]
            yield {"variant": name, "theta": self.theta, "replaced": self.replaced.get(name, 0.0),
                   **{k: v for k, v in asdict(r).items() if k not in ("frame", "extras", "ause", "spearman_cc")}}

    def write_csv(self, path):
        rows = list(self.rows())
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=list(rows[0]))
            wr.writeheader()
            wr.writerows(rows)


def run_fusion_eval(net: FlowNet, fusion_net: FusionNet, triples: Sequence, theta: float,
                    iterations: Optional[int] = None) -> FusionReport:
    """Flow metrics without fusion, with variance-mask fusion and with the occlusion-mask baseline.

    Occluded/non-occluded splits use the ground-truth forward occlusion.
    """
    preds = predict_triples(net, triples, iterations)
    per = {v: [] for v in VARIANTS}
    replaced = {v: 0 for v in VARIANTS}
    total = 0
    dtype = fusion_net.params["conv0.w"].dtype
    for i, (p, t) in enumerate(zip(preds, triples)):
        mapped = fusion_net(p.flow_bwd[None].astype(dtype), p.img[None].astype(dtype)).data[0].astype(np.float64)
        masks = {"uncertainty": reliability_masks(p.var_fwd, p.var_bwd, theta),
                 "occlusion": occlusion_masks(p.occ_fwd, p.occ_bwd)}
        flows = {"none": p.flow_fwd}
        for name, m in masks.items():
            flows[name] = fuse(p.flow_fwd, mapped, m)
            replaced[name] += int(m.fused.sum())
        total += p.flow_fwd.shape[0] * p.flow_fwd.shape[1]
        for name in VARIANTS:
            per[name].append(evaluate_frame(f"frame_{i:04d}", flows[name], t.flow_fwd, None, t.occ_fwd))
    return FusionReport(theta, {v: aggregate(per[v], v) for v in VARIANTS},
                        {v: replaced[v] / total for v in VARIANTS})
