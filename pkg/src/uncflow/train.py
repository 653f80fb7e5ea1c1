"""Optimizer, schedule and the unsupervised training loop."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import losses as L
from .augment import AugmentBounds, apply, sample_spec
from .errors import ContractViolation, TrainingFault
from .metrics import EvalReport, evaluate_frame
from .model import FlowNet, ModelConfig

log = logging.getLogger(__name__)


# -- optimizer -------------------------------------------------------------------------------

class Adam:
    def __init__(self, params: Sequence[ad.Tensor], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Dict[ad.Tensor, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = grads.get(p)
            if g is None:
                continue
            g = g.astype(p.dtype, copy=False)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.dtype, copy=False)

    def state(self):
        return {"t": self.t}


def clip_grad_norm(grads: Dict[ad.Tensor, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global l2 norm is at most ``max_norm``; returns the norm before clipping."""
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if max_norm and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * s
    return norm


def one_cycle_lr(step: int, total: int, max_lr: float, pct_start: float = 0.2,
                 div_factor: float = 25.0, final_div: float = 1e4) -> float:
    """Linear warm-up from max_lr/div_factor to max_lr, then linear decay to
    max_lr/(div_factor*final_div).  The peak sits on exactly one step."""
    start = max_lr / div_factor
    end = start / final_div
    peak = int(round(pct_start * (total - 1)))
    if step <= peak:
        return start + (max_lr - start) * (step / peak if peak else 1.0)
    return max_lr + (end - max_lr) * (step - peak) / max(total - 1 - peak, 1)


# -- configuration -----------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 4
    lr: float = 4e-4
    schedule: str = "one-cycle"     # or "constant"
    pct_start: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    clip: float = 1.0
    aug_start: float = 0.5          # fraction of steps before augmentation losses switch on
    hg_start: float = 0.5           # fraction of steps before the homography term switches on
    use_hg: bool = True
    train_iterations: int = 0       # 0: use the model's iteration count
    seed: int = 0
    checkpoint_every: int = 0
    eval_every: int = 0
    log_every: int = 25
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    augment: AugmentBounds = field(default_factory=AugmentBounds)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self):
        if self.steps <= 0 or self.batch_size <= 0:
            raise ContractViolation("steps and batch_size must be positive")
        if not (0 <= self.aug_start <= 1 and 0 <= self.hg_start <= 1):
            raise ContractViolation("activation fractions must lie in [0, 1]")
        if self.schedule not in ("one-cycle", "constant"):
            raise ContractViolation(f"unknown schedule {self.schedule!r}")
        self.weights.validate()
        self.augment.validate()
        self.model.validate()

    def lr_at(self, step: int) -> float:
        if self.schedule == "constant":
            return self.lr
        return one_cycle_lr(step, self.steps, self.lr, self.pct_start)

    def aug_active(self, step: int) -> bool:
        return self.aug_start < 1.0 and step >= self.aug_start * self.steps

    def hg_active(self, step: int) -> bool:
        return self.use_hg and self.hg_start < 1.0 and step >= self.hg_start * self.steps


@dataclass
class RunLog:
    steps: List[dict] = field(default_factory=list)
    evals: List[dict] = field(default_factory=list)

    def append(self, record: dict):
        if self.steps and record["step"] <= self.steps[-1]["step"]:
            raise ContractViolation("run log step index must increase")
        self.steps.append(record)

    def to_json(self) -> str:
        return json.dumps({"steps": self.steps, "evals": self.evals}, sort_keys=True)

    def save(self, path):
        Path(path).write_text(self.to_json())


# -- loss evaluation -----------------------------------------------------------------------------

@dataclass
class Batch:
    img1: np.ndarray
    img2: np.ndarray
    regions: List[List[np.ndarray]]


def _to_batch(samples, dtype) -> Batch:
    return Batch(np.stack([s.img1 for s in samples]).astype(dtype),
                 np.stack([s.img2 for s in samples]).astype(dtype),
                 [list(s.regions) for s in samples])


def compute_losses(net: FlowNet, batch: Batch, cfg: TrainConfig, step: int, rng: np.random.Generator,
                   iterations: Optional[int] = None):
    """Total loss for one batch plus a dict of logged scalar components."""
    w = cfg.weights
    N = batch.img1.shape[0]
    K = iterations or cfg.train_iterations or net.config.iterations
    i1 = np.concatenate([batch.img1, batch.img2])
    i2 = np.concatenate([batch.img2, batch.img1])
    outs = net(i1, i2, iterations=K)
    per_iter = []
    logs = {"ph": 0.0, "sm": 0.0, "ar": 0.0, "unc": 0.0, "hg": 0.0}
    occ_final = None
    for k, (flow, logvar) in enumerate(outs):
        occ = L.occlusion_mask(flow.data, np.concatenate([flow.data[N:], flow.data[:N]]),
                               w.occ_alpha1, w.occ_alpha2)
        if occ.all():
            occ = np.zeros_like(occ)
        ph = L.photometric_loss(i1, i2, flow, occ, w)
        sm = L.smoothness_loss(flow, i1, w.edge_weight)
        per_iter.append({"ph": ph, "sm": sm})
        occ_final = occ
    logs["ph"], logs["sm"] = per_iter[-1]["ph"].item(), per_iter[-1]["sm"].item()

    if cfg.aug_active(step) and (w.ar > 0 or w.unc > 0):
        H, W = batch.img1.shape[1:3]
        specs = [sample_spec(rng, cfg.augment, H, W) for _ in range(N)]
        final = outs[-1][0].data[:N]
        aug = [apply(sp, batch.img1[n], batch.img2[n], final[n], occ_final[n]) for n, sp in enumerate(specs)]
        a1 = np.stack([a.img1 for a in aug]).astype(i1.dtype)
        a2 = np.stack([a.img2 for a in aug]).astype(i1.dtype)
        occ_hat = np.stack([a.occ for a in aug])
        if (~occ_hat).any():
            aug_outs = net(a1, a2, iterations=K)
            # one pseudo-label from the final original estimate serves every iteration
            target = np.stack([a.flow for a in aug]).astype(i1.dtype)
            for k, (flow_a, logvar_a) in enumerate(aug_outs):
                d = L.flow_residual(target, flow_a)
                per_iter[k]["ar"] = L.augmentation_reg_loss(d, occ_hat)
                per_iter[k]["unc"] = L.uncertainty_nll(logvar_a, d, occ_hat)
            logs["ar"] = per_iter[-1]["ar"].item()
            logs["unc"] = per_iter[-1]["unc"].item()

    hg = None
    if cfg.hg_active(step) and w.hg > 0:
        flow, logvar = outs[-1]
        fwd = flow[:N]
        hg, fitted = L.homography_smoothness_loss(fwd, batch.regions, logvar.data[:N], w.tau_hg, rng)
        logs["hg"] = hg.item()
        logs["hg_fitted"] = bool(fitted)
    total = L.total_loss(per_iter, w, hg)
    logs["total"] = total.item()
    return total, logs


# -- training loop -------------------------------------------------------------------------------

def train(cfg: TrainConfig, dataset: Sequence, net: Optional[FlowNet] = None, out_dir=None,
          params: Optional[Sequence[ad.Tensor]] = None,
          callback: Optional[Callable[[int, dict], None]] = None,
          eval_fn: Optional[Callable[[FlowNet, int], dict]] = None, stop_after: Optional[int] = None):
    """Adam on the total unsupervised loss.  Returns ``(net, RunLog)``.

    ``params`` restricts the optimized parameters (all by default).
    ``stop_after`` runs only that many steps of the configured schedule.  On a
    non-finite loss the last good parameters are written to ``out_dir`` and a
    TrainingFault is raised.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise ContractViolation("train: empty dataset")
    with ad.precision("train"):
        dtype = ad.get_dtype()
        net = net or FlowNet(cfg.model, seed=cfg.seed)
        net.astype(dtype)
        params = list(params) if params is not None else list(net.params.values())
        opt = Adam(params, cfg.beta1, cfg.beta2, weight_decay=cfg.weight_decay)
        rng = np.random.default_rng(cfg.seed + 1)
        runlog = RunLog()
        out = Path(out_dir) if out_dir else None
        if out:
            out.mkdir(parents=True, exist_ok=True)
        order: List[int] = []
        last_good = {n: p.data.copy() for n, p in net.params.items()}
        t0 = time.time()
        for step in range(cfg.steps if stop_after is None else min(stop_after, cfg.steps)):
            if len(order) < cfg.batch_size:
                order.extend(rng.permutation(len(dataset)).tolist())
            idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
            batch = _to_batch([dataset[i] for i in idx], dtype)
            try:
                loss, logs = compute_losses(net, batch, cfg, step, rng)
            except TrainingFault as exc:
                exc.step = step
                _abort(net, last_good, out, str(exc))
                raise
            if not np.isfinite(loss.item()):
                _abort(net, last_good, out, f"non-finite loss at step {step}")
                raise TrainingFault(f"non-finite loss at step {step}", step=step)
            grads = ad.backprop(loss, params)
            gnorm = clip_grad_norm(grads, cfg.clip)
            if not np.isfinite(gnorm):
                _abort(net, last_good, out, f"non-finite gradient at step {step}")
                raise TrainingFault(f"non-finite gradient at step {step}", step=step)
            lr = cfg.lr_at(step)
            last_good = {n: p.data.copy() for n, p in net.params.items()}
            opt.step(grads, lr)
            rec = {"step": step, "lr": lr, "grad_norm": gnorm, **{k: float(v) for k, v in logs.items()}}
            runlog.append(rec)
            if cfg.log_every and step % cfg.log_every == 0:
                log.info("step %d loss %.4f ph %.4f sm %.4f ar %.4f unc %.4f hg %.4f lr %.2e |g| %.3f (%.1fs)",
                         step, logs["total"], logs["ph"], logs["sm"], logs["ar"], logs["unc"], logs["hg"],
                         lr, gnorm, time.time() - t0)
            if callback:
                callback(step, rec)
            if out and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                net.save(out / f"step_{step + 1:06d}.ckpt", {"step": step + 1})
            if eval_fn and cfg.eval_every and (step + 1) % cfg.eval_every == 0:
                runlog.evals.append({"step": step + 1, **eval_fn(net, step + 1)})
        if out:
            net.save(out / "final.ckpt", {"step": cfg.steps})
            runlog.save(out / "runlog.json")
    return net, runlog


def _abort(net: FlowNet, last_good: dict, out: Optional[Path], message: str):
    log.error("training aborted: %s", message)
    if out:
        for n, p in net.params.items():
            p.data = last_good[n]
        net.save(out / "last_good.ckpt", {"aborted": message})


# -- evaluation --------------------------------------------------------------------------------------

def predict(net: FlowNet, img1, img2, iterations: Optional[int] = None, batch_size: int = 8):
    """Final-iteration flow and variance for stacks of images (no gradient kept)."""
    flows, vars_ = [], []
    dtype = net.params["fnet.conv0.w"].dtype
    for s in range(0, len(img1), batch_size):
        a = np.asarray(img1[s:s + batch_size], dtype=dtype)
        b = np.asarray(img2[s:s + batch_size], dtype=dtype)
        flow, logvar = net(a, b, iterations=iterations)[-1]
        flows.append(flow.data.astype(np.float64))
        vars_.append(np.exp(logvar.data[..., 0].astype(np.float64)))
    return np.concatenate(flows), np.concatenate(vars_)


def evaluate(net: FlowNet, dataset: Sequence, iterations: Optional[int] = None) -> List[EvalReport]:
    """Per-frame reports; the occluded split uses the ground-truth occlusion."""
    s = net.config.feature_stride
    for smp in dataset:
        if smp.img1.shape[0] % s or smp.img1.shape[1] % s:
            raise ContractViolation("evaluation image size not divisible by the model stride")
    flows, var = predict(net, [d.img1 for d in dataset], [d.img2 for d in dataset], iterations)
    reports = []
    for i, smp in enumerate(dataset):
        name = f"frame_{i:04d}"
        reports.append(evaluate_frame(name, flows[i], smp.flow_fwd, None, smp.occ_fwd, var[i]))
    return reports
