"""Small recurrent flow network with a log-variance head and uncertainty-aware refinement.

Layout is NHWC throughout.  Images enter in [0, 1]; flow is kept at feature
resolution (1/stride) inside the loop and upsampled bilinearly at the end.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation, FormatError, TrainingFault


@dataclass
class ModelConfig:
    feature_dim: int = 96
    hidden_dim: int = 64
    context_dim: int = 64
    feature_stride: int = 4
    corr_levels: int = 2
    corr_radius: int = 3
    iterations: int = 12
    encoder_width: int = 32
    head_dim: int = 64
    unc_dim: int = 32
    motion_dim: int = 64

    def validate(self):
        if self.feature_stride not in (1, 2, 4, 8):
            raise ContractViolation("feature_stride must be 1, 2, 4 or 8")
        if self.iterations < 1:
            raise ContractViolation("iterations must be >= 1")
        if self.corr_levels < 1 or self.corr_radius < 0:
            raise ContractViolation("invalid correlation pyramid")
        for k in ("feature_dim", "hidden_dim", "context_dim", "encoder_width", "head_dim", "unc_dim"):
            if getattr(self, k) < 1:
                raise ContractViolation(f"{k} must be positive")
        if self.motion_dim < 4:
            raise ContractViolation("motion_dim must be >= 4")


@dataclass
class ModelState:
    hidden: Tensor
    context: Tensor
    flow: Tensor      # (N, h, w, 2) at feature resolution, no gradient history
    logvar: Optional[Tensor] = None
    flow_graph: Optional[Tensor] = None   # flow + delta with its gradient history


@dataclass
class CorrVolume:
    levels: List[Tensor]   # level l: (N*h*w, h_l, w_l, 1)
    shape: Tuple[int, int, int]


# -- parameters -------------------------------------------------------------------------

UNC_PREFIX = "unc."


def _conv_param(rng, kh, kw, ci, co):
    bound = 1.0 / np.sqrt(kh * kw * ci)
    return rng.uniform(-bound, bound, (kh, kw, ci, co)), rng.uniform(-bound, bound, co)


class FlowNet:
    """Parameters plus the forward computation.

    Parameter names starting with ``unc.`` form the uncertainty head; every
    other parameter belongs to the flow branch.
    """

    def __init__(self, config: Optional[ModelConfig] = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.config.validate()
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._init(np.random.default_rng(seed))

    # ---- construction
    def _add(self, rng, name, kh, kw, ci, co):
        w, b = _conv_param(rng, kh, kw, ci, co)
        self.params[name + ".w"] = ad.parameter(w, name=name + ".w")
        self.params[name + ".b"] = ad.parameter(b, name=name + ".b")

    def _encoder_layers(self, prefix, out_dim):
        c, e = self.config, self.config.encoder_width
        layers = [(prefix + ".conv0", 3, 3, e // 2 if c.feature_stride > 1 else e)]
        ch = layers[0][3]
        n_down = int(np.log2(c.feature_stride))
        for i in range(1, max(n_down, 1)):
            layers.append((f"{prefix}.conv{i}", 3, ch, e))
            ch = e
        layers.append((prefix + ".mix", 3, ch, e))
        layers.append((prefix + ".out", 1, e, out_dim))
        return layers

    def _init(self, rng):
        c = self.config
        for prefix, out_dim in (("fnet", c.feature_dim), ("cnet", c.hidden_dim + c.context_dim)):
            ci = 3
            for name, k, _ci, co in self._encoder_layers(prefix, out_dim):
                self._add(rng, name, k, k, ci, co)
                ci = co
        n_corr = c.corr_levels * (2 * c.corr_radius + 1) ** 2
        m = c.motion_dim
        self._add(rng, "motion.corr", 1, 1, n_corr, m)
        self._add(rng, "motion.flow", 3, 3, 2, m // 2)
        self._add(rng, "motion.mix", 3, 3, m + m // 2, m - 2)
        gin = c.hidden_dim + c.context_dim + m
        for g in ("z", "r", "q"):
            self._add(rng, f"gru.{g}", 3, 3, gin, c.hidden_dim)
        self._add(rng, "flowhead.feat", 3, 3, c.hidden_dim, c.head_dim)
        self._add(rng, UNC_PREFIX + "conv0", 3, 3, c.hidden_dim, c.unc_dim)
        self._add(rng, UNC_PREFIX + "conv1", 3, 3, c.unc_dim, 1)
        self._add(rng, "refine.conv0", 3, 3, 2 * c.head_dim + 1, c.head_dim)
        self._add(rng, "refine.conv1", 3, 3, c.head_dim, 2)
        # start near zero update and unit variance
        self.params["refine.conv1.w"].data *= 0.1
        self.params["refine.conv1.b"].data[...] = 0.0
        self.params[UNC_PREFIX + "conv1.b"].data[...] = 0.0

    def _conv(self, name, x, stride=1):
        w = self.params[name + ".w"]
        pad = w.shape[0] // 2
        return ad.conv2d(x, w, self.params[name + ".b"], stride=stride, padding=pad)

    # ---- parameter groups
    def flow_params(self) -> List[Tensor]:
        return [p for n, p in self.params.items() if not n.startswith(UNC_PREFIX)]

    def unc_params(self) -> List[Tensor]:
        return [p for n, p in self.params.items() if n.startswith(UNC_PREFIX)]

    def astype(self, dtype) -> "FlowNet":
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        return self

    # ---- stages
    def _run_encoder(self, prefix, x, out_dim):
        layers = self._encoder_layers(prefix, out_dim)
        n_down = int(np.log2(self.config.feature_stride))
        for i, (name, _, _, _) in enumerate(layers):
            if name.endswith(".out"):
                return self._conv(name, x)
            stride = 2 if i < n_down else 1
            x = ad.relu(ad.instance_norm(self._conv(name, x, stride)))
        raise AssertionError("unreachable")

    def encode(self, img1, img2):
        """Features of both frames and the context split of frame 1.

        Returns ``(f1, f2, hidden0, context)``.
        """
        img1, img2 = ad.as_tensor(img1), ad.as_tensor(img2)
        if img1.ndim == 3:
            img1, img2 = ad.reshape(img1, (1,) + img1.shape), ad.reshape(img2, (1,) + img2.shape)
        if img1.shape != img2.shape:
            raise ContractViolation(f"image shapes differ: {img1.shape} vs {img2.shape}")
        s = self.config.feature_stride
        N, H, W, _ = img1.shape
        if H % s or W % s:
            raise ContractViolation(f"input {H}x{W} not divisible by stride {s}")
        c = self.config
        both = ad.concat([img1, img2], axis=0) * 2.0 - 1.0
        f = self._run_encoder("fnet", both, c.feature_dim)
        f1, f2 = f[:N], f[N:]
        ctx = self._run_encoder("cnet", img1 * 2.0 - 1.0, c.hidden_dim + c.context_dim)
        hidden = ad.tanh(ctx[..., :c.hidden_dim])
        context = ad.relu(ctx[..., c.hidden_dim:])
        return f1, f2, hidden, context

    def build_corr(self, f1, f2) -> CorrVolume:
        return build_corr(f1, f2, self.config.corr_levels)

    def lookup(self, corr: CorrVolume, flow) -> Tensor:
        return lookup(corr, flow, self.config.corr_radius)

    def update_step(self, state: ModelState, corr: CorrVolume, iteration: int = 0, stop_gradients: bool = True):
        """One refinement step; returns ``(new_state, delta, logvar)`` at feature resolution.

        ``stop_gradients=False`` turns every detach into the identity.  That
        graph is only meant for end-to-end gradient checking.
        """
        detach = ad.detach if stop_gradients else (lambda t: t)
        h, ctx, flow = state.hidden, state.context, state.flow
        cf = ad.relu(self._conv("motion.corr", self.lookup(corr, flow)))
        ff = ad.relu(self._conv("motion.flow", flow))
        motion = ad.concat([ad.relu(self._conv("motion.mix", ad.concat([cf, ff]))), flow])
        x = ad.concat([ctx, motion])
        hx = ad.concat([h, x])
        z = ad.sigmoid(self._conv("gru.z", hx))
        r = ad.sigmoid(self._conv("gru.r", hx))
        q = ad.tanh(self._conv("gru.q", ad.concat([r * h, x])))
        h = (1.0 - z) * h + z * q
        feat = ad.relu(self._conv("flowhead.feat", h))
        hd = detach(h)
        logvar = self._conv(UNC_PREFIX + "conv1", ad.relu(self._conv(UNC_PREFIX + "conv0", hd)))
        lv_const = detach(logvar)
        scaled = feat * detach(ad.sigmoid(-lv_const))
        delta = self._conv("refine.conv1", ad.relu(self._conv("refine.conv0", ad.concat([feat, scaled, lv_const]))))
        new_flow = detach(flow + delta)
        if not (np.all(np.isfinite(h.data)) and np.all(np.isfinite(delta.data))
                and np.all(np.isfinite(logvar.data))):
            raise TrainingFault("non-finite activation in update step", iteration=iteration)
        state = ModelState(hidden=h, context=ctx, flow=new_flow, logvar=logvar, flow_graph=flow + delta)
        return state, delta, logvar

    def upsample(self, flow, logvar=None):
        s = self.config.feature_stride
        N, h, w, _ = flow.shape
        up = ad.resize_bilinear(flow, (h * s, w * s)) * float(s)
        if logvar is None:
            return up
        return up, ad.resize_bilinear(logvar, (h * s, w * s))

    def forward(self, img1, img2, iterations: Optional[int] = None, flow_init=None, stop_gradients: bool = True):
        """Run all refinement steps; returns a list of ``(flow, logvar)`` at input resolution."""
        K = iterations or self.config.iterations
        if K < 1:
            raise ContractViolation("iterations must be >= 1")
        f1, f2, h, ctx = self.encode(img1, img2)
        corr = self.build_corr(f1, f2)
        N, hh, ww, _ = f1.shape
        flow = ad.constant(np.zeros((N, hh, ww, 2)) if flow_init is None else flow_init, dtype=f1.dtype)
        state = ModelState(hidden=h, context=ctx, flow=flow)
        out = []
        for k in range(K):
            state, _, logvar = self.update_step(state, corr, k, stop_gradients)
            out.append(self.upsample(state.flow_graph, logvar))
        return out

    __call__ = forward

    # ---- persistence
    def state_dict(self) -> Dict[str, np.ndarray]:
        return OrderedDict((n, p.data) for n, p in self.params.items())

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise FormatError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for n, p in self.params.items():
            if state[n].shape != p.shape:
                raise FormatError(f"checkpoint shape mismatch for {n}: {state[n].shape} vs {p.shape}")
            p.data = np.asarray(state[n], dtype=p.dtype).copy()

    def save(self, path, extra: Optional[dict] = None):
        meta = {"kind": "flownet", "config": asdict(self.config)}
        meta.update(extra or {})
        save_checkpoint(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "FlowNet":
        tensors, meta = load_checkpoint(path)
        if meta.get("kind") != "flownet":
            raise FormatError("checkpoint does not hold a flow network")
        net = cls(ModelConfig(**meta["config"]))
        net.load_state_dict(tensors)
        return net


# -- correlation ------------------------------------------------------------------------

def build_corr(f1, f2, levels: int = 2) -> CorrVolume:
    """All-pairs dot products scaled by 1/sqrt(D), pooled 2x2 over the second frame."""
    f1, f2 = ad.as_tensor(f1), ad.as_tensor(f2)
    if f1.shape != f2.shape:
        raise ContractViolation(f"feature shapes differ: {f1.shape} vs {f2.shape}")
    N, h, w, D = f1.shape
    a = ad.reshape(f1, (N, h * w, D))
    b = ad.transpose(ad.reshape(f2, (N, h * w, D)), (0, 2, 1))
    c = ad.matmul(a, b) * (1.0 / np.sqrt(D))
    lvl = ad.reshape(c, (N * h * w, h, w, 1))
    out = [lvl]
    for _ in range(1, levels):
        hh, ww = lvl.shape[1], lvl.shape[2]
        if hh < 2 or ww < 2:
            break
        hh2, ww2 = hh // 2, ww // 2
        lvl = lvl[:, :2 * hh2, :2 * ww2, :]
        lvl = ad.mean(ad.reshape(lvl, (N * h * w, hh2, 2, ww2, 2, 1)), axis=(2, 4))
        out.append(lvl)
    return CorrVolume(out, (N, h, w))


def _offsets(radius: int, dtype) -> np.ndarray:
    d = np.arange(-radius, radius + 1, dtype=dtype)
    dy, dx = np.meshgrid(d, d, indexing="ij")
    return np.stack([dx, dy], axis=-1)  # (2r+1, 2r+1, 2), x fastest


def lookup(corr: CorrVolume, flow, radius: int) -> Tensor:
    """Sample every pyramid level on a (2r+1)^2 grid around ``p + flow(p)``.

    Returns (N, h, w, levels*(2r+1)^2); level-major, then row-major window.
    """
    flow = ad.as_tensor(flow)
    N, h, w = corr.shape
    if flow.shape != (N, h, w, 2):
        raise ContractViolation(f"flow shape {flow.shape} does not match correlation grid {(N, h, w)}")
    centre = ad.reshape(flow + ad.pixel_grid(h, w, flow.dtype), (N * h * w, 1, 1, 2))
    win = _offsets(radius, flow.dtype)[None]
    n = (2 * radius + 1) ** 2
    slabs = []
    for i, lvl in enumerate(corr.levels):
        # pooled pixel j covers fine pixels 2j, 2j+1: centre maps to (x + 0.5)/2 - 0.5
        scale = 2.0 ** i
        coords = (centre + 0.5) * (1.0 / scale) - 0.5 + win if i else centre + win
        s = ad.grid_sample(lvl, coords)
        slabs.append(ad.reshape(s, (N, h, w, n)))
    return ad.concat(slabs, axis=-1) if len(slabs) > 1 else slabs[0]


# -- checkpoint container ------------------------------------------------------------------

MAGIC = b"UFCKPT\x00\x01"
VERSION = 2


def save_checkpoint(path, tensors: Dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    """Binary container: magic, u32 version, u32 meta length, JSON meta, u32 count,
    then per tensor: u16 name length, utf-8 name, u8 ndim, i32 dims, float32 payload,
    and finally a u32 CRC-32 of every preceding byte.  All integers little-endian."""
    buf = io.BytesIO()
    m = json.dumps(meta or {}, sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(m)))
    buf.write(m)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)) + nb)
        buf.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}i", *arr.shape))
        buf.write(arr.tobytes())
    body = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_checkpoint(data)


def parse_checkpoint(data: bytes):
    if len(data) < len(MAGIC) + 4:
        raise FormatError("truncated checkpoint")
    if data[:len(MAGIC)] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    (crc,) = struct.unpack("<I", data[-4:])
    data = data[:-4]
    if zlib.crc32(data) != crc:
        raise FormatError("checkpoint checksum mismatch (truncated or corrupt)")
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError("truncated checkpoint")
        out = data[pos:pos + n]
        pos += n
        return out

    if take(len(MAGIC)) != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    version, mlen = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        meta = json.loads(take(mlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint metadata: {exc}") from None
    if not isinstance(meta, dict):
        raise FormatError("checkpoint metadata is not an object")
    (count,) = struct.unpack("<I", take(4))
    tensors = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode(errors="replace")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}i", take(4 * ndim))
        if any(s < 0 for s in shape):
            raise FormatError("negative extent in checkpoint")
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(data):
        raise FormatError("trailing bytes after checkpoint payload")
    return tensors, meta
