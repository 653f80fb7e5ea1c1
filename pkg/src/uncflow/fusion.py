"""Bidirectional flow fusion guided by predicted variance.

Pixels whose forward flow is unreliable but whose backward flow is reliable
take a value mapped from the backward flow by a small convolutional network.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation, FormatError
from .model import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class FusionMasks:
    fwd: np.ndarray     # M_f: forward flow reliable
    bwd: np.ndarray     # M_b: backward flow reliable
    fused: np.ndarray   # replace forward flow here

    def __post_init__(self):
        self.fwd = np.asarray(self.fwd, bool)
        self.bwd = np.asarray(self.bwd, bool)
        self.fused = np.asarray(self.fused, bool)


def reliability_masks(var_fwd, var_bwd, theta: float) -> FusionMasks:
    """Strict thresholding ``var < theta`` of both directions."""
    if not theta > 0:
        raise ContractViolation("theta must be > 0")
    mf = np.asarray(var_fwd) < theta
    mb = np.asarray(var_bwd) < theta
    return FusionMasks(mf, mb, ~mf & mb)


def occlusion_masks(occ_fwd, occ_bwd) -> FusionMasks:
    """Baseline masks: a direction is reliable where it is not flagged occluded."""
    mf = ~np.asarray(occ_fwd, bool)
    mb = ~np.asarray(occ_bwd, bool)
    return FusionMasks(mf, mb, ~mf & mb)


def fuse(flow_fwd, flow_mapped, masks) -> np.ndarray:
    """``F_fwd * (1 - M_fused) + F_mapped * M_fused``."""
    f = np.asarray(flow_fwd, dtype=np.float64)
    g = np.asarray(flow_mapped, dtype=np.float64)
    if f.shape != g.shape:
        raise ContractViolation(f"fuse shape mismatch {f.shape} vs {g.shape}")
    m = masks.fused if isinstance(masks, FusionMasks) else np.asarray(masks, bool)
    return np.where(m[..., None], g, f)


class FusionNet:
    """Four 3x3 conv layers on concat(F_{t->t-1}, I_t).

    The output is a correction added to ``-F_{t->t-1}``, so the network starts
    from the constant-velocity guess and learns deviations from it.
    """

    def __init__(self, width: int = 32, layers: int = 4, seed: int = 0):
        if layers < 2:
            raise ContractViolation("fusion net needs at least 2 layers")
        self.width, self.layers = width, layers
        self.meta: dict = {}  # filled from the checkpoint by load()
        rng = np.random.default_rng(seed)
        self.params: "OrderedDict[str, ad.Tensor]" = OrderedDict()
        ci = 5
        for i in range(layers):
            co = 2 if i == layers - 1 else width
            bound = 1.0 / np.sqrt(9 * ci)
            w = rng.uniform(-bound, bound, (3, 3, ci, co))
            b = rng.uniform(-bound, bound, co)
            if i == layers - 1:
                w *= 0.1
                b[:] = 0.0
            self.params[f"conv{i}.w"] = ad.parameter(w, name=f"conv{i}.w")
            self.params[f"conv{i}.b"] = ad.parameter(b, name=f"conv{i}.b")
            ci = co

    def astype(self, dtype) -> "FusionNet":
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, flow_bwd, img):
        fb = ad.as_tensor(flow_bwd)
        x = ad.concat([fb * 0.1, ad.as_tensor(img) * 2.0 - 1.0], axis=-1)
        for i in range(self.layers):
            x = ad.conv2d(x, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"], padding=1)
            if i < self.layers - 1:
                x = ad.relu(x)
        return x - fb

    def save(self, path, extra: Optional[dict] = None):
        meta = {"kind": "fusionnet", "width": self.width, "layers": self.layers}
        meta.update(extra or {})
        save_checkpoint(path, OrderedDict((n, p.data) for n, p in self.params.items()), meta)

    @classmethod
    def load(cls, path) -> "FusionNet":
        tensors, meta = load_checkpoint(path)
        if meta.get("kind") != "fusionnet":
            raise FormatError("checkpoint does not hold a fusion network")
        net = cls(meta["width"], meta["layers"])
        for n, p in net.params.items():
            if n not in tensors or tensors[n].shape != p.shape:
                raise FormatError(f"fusion checkpoint missing or misshapen {n}")
            p.data = tensors[n].astype(p.dtype)
        net.meta = meta
        return net


@dataclass
class FusionExample:
    """Frozen-model outputs for one triple, all at full resolution."""
    img: np.ndarray          # I_t
    flow_fwd: np.ndarray     # F_{t->t+1}
    flow_bwd: np.ndarray     # F_{t->t-1}
    var_fwd: np.ndarray
    var_bwd: np.ndarray


def masked_l1(pred, target, mask) -> ad.Tensor:
    d = ad.sum_(ad.abs_(pred - np.asarray(target)), axis=-1, keepdims=True)
    m = np.asarray(mask, dtype=d.dtype)[..., None]
    return ad.sum_(d * m) * (1.0 / m.sum())


def train_fusion_net(examples: Sequence[FusionExample], theta: float, steps: int = 300, batch_size: int = 4,
                     lr: float = 1e-3, seed: int = 0, width: int = 32, net: Optional[FusionNet] = None,
                     history: Optional[List[float]] = None) -> FusionNet:
    """Fit F_{t->t-1} -> F_{t->t+1} on pixels where both directions are reliable.

    Batches whose supervision mask is empty are skipped.
    """
    from .train import Adam  # local import: train depends on this module

    if not examples:
        raise ContractViolation("train_fusion_net: no examples")
    rng = np.random.default_rng(seed)
    net = net or FusionNet(width=width, seed=seed)
    dtype = ad.get_dtype()
    net.astype(dtype)
    params = list(net.params.values())
    opt = Adam(params)
    skipped = 0
    for step in range(steps):
        idx = rng.choice(len(examples), size=min(batch_size, len(examples)), replace=False)
        ex = [examples[i] for i in idx]
        mask = np.stack([reliability_masks(e.var_fwd, e.var_bwd, theta).fwd
                         & reliability_masks(e.var_fwd, e.var_bwd, theta).bwd for e in ex])
        if not mask.any():
            skipped += 1
            log.debug("fusion step %d skipped: empty supervision mask", step)
            continue
        fb = np.stack([e.flow_bwd for e in ex]).astype(dtype)
        img = np.stack([e.img for e in ex]).astype(dtype)
        target = np.stack([e.flow_fwd for e in ex]).astype(dtype)
        loss = masked_l1(net(fb, img), target, mask)
        grads = ad.backprop(loss, params)
        opt.step(grads, lr)
        if history is not None:
            history.append(loss.item())
    if skipped:
        log.info("fusion training skipped %d of %d batches with empty masks", skipped, steps)
    net.skipped_batches = skipped
    return net


def fusion_loss(net: FusionNet, examples: Sequence[FusionExample], theta: float) -> float:
    """Masked l1 over all examples (valid-pixel weighted); NaN when nothing is supervised."""
    total, count = 0.0, 0
    for e in examples:
        m = reliability_masks(e.var_fwd, e.var_bwd, theta)
        sup = m.fwd & m.bwd
        if not sup.any():
            continue
        pred = net(e.flow_bwd[None], e.img[None]).data[0]
        total += np.abs(pred - e.flow_fwd).sum(-1)[sup].sum()
        count += sup.sum()
    return total / count if count else float("nan")
