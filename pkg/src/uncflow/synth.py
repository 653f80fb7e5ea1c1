"""Seeded layered scenes with exact flow, occlusion and region ground truth.

A scene is a stack of layers: a value-noise background and textured
star-shaped polygons on top.  Every layer carries one 3×3 transform per
frame mapping reference-frame coordinates into that frame.  Rendering and
ground truth both evaluate the same continuous scene, so flow is exact and
occlusion is decided by which layer is on top at the warped point.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
from matplotlib.path import Path as PolyPath

from . import flowio
from .errors import ContractViolation


@dataclass
class SynthConfig:
    height: int = 64
    width: int = 64
    stride: int = 4
    n_objects: int = 2
    # motion bounds (pixels / degrees / relative scale)
    bg_translation: float = 6.0
    bg_rotation: float = 3.0
    bg_scale: float = 0.03
    bg_perspective: float = 0.0
    obj_translation: float = 6.0
    obj_rotation: float = 8.0
    obj_scale: float = 0.06
    obj_radius_min: float = 7.0
    obj_radius_max: float = 14.0
    # appearance
    texture_octaves: int = 4
    texture_period: float = 16.0
    noise_sigma: float = 0.0
    brightness_ramp: float = 0.0
    corrupt_patches: int = 0
    patch_min: int = 8
    patch_max: int = 16

    def validate(self):
        if self.height % self.stride or self.width % self.stride:
            raise ContractViolation(f"size {self.height}x{self.width} not divisible by stride {self.stride}")
        reach = max(self.bg_translation, self.obj_translation)
        if reach >= min(self.height, self.width):
            raise ContractViolation("motion bounds exceed the image size")
        if self.n_objects < 0 or self.texture_octaves < 1:
            raise ContractViolation("bad object/texture counts")


@dataclass
class SynthSample:
    """Frames t (``img1``) and t+1 (``img2``), optionally t-1 (``img0``), with ground truth.

    Flows and occlusion masks are indexed by the pixel grid of their source
    frame; ``occ_*`` is True where the pixel has no counterpart.
    """

    img1: np.ndarray
    img2: np.ndarray
    flow_fwd: np.ndarray
    occ_fwd: np.ndarray
    flow_bwd: np.ndarray
    occ_bwd: np.ndarray
    regions: List[np.ndarray]
    corrupted: np.ndarray
    img0: Optional[np.ndarray] = None
    flow_prev: Optional[np.ndarray] = None
    occ_prev: Optional[np.ndarray] = None
    flow_from_prev: Optional[np.ndarray] = None
    occ_from_prev: Optional[np.ndarray] = None
    descriptor: dict = field(default_factory=dict)


# -- texture -------------------------------------------------------------------

class ValueNoise:
    """Multi-octave smooth value noise, evaluable at arbitrary real coordinates."""

    def __init__(self, rng: np.random.Generator, octaves: int, period: float, extent: float, channels: int = 3):
        self.layers = []
        amp = 1.0
        for o in range(octaves):
            p = max(period / 2 ** o, 2.5)
            n = int(np.ceil(2 * extent / p)) + 4
            self.layers.append((p, amp, rng.random((n, n, channels)), extent))
            amp *= 0.55
        self.total = sum(a for _, a, _, _ in self.layers)
        self.tint = rng.uniform(0.6, 1.0, channels)
        self.offset = rng.uniform(0.0, 0.3, channels)

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        out = 0.0
        for p, amp, lat, extent in self.layers:
            gx = (pts[:, 0] + extent) / p + 1
            gy = (pts[:, 1] + extent) / p + 1
            n = lat.shape[0]
            gx = np.clip(gx, 0, n - 1.001)
            gy = np.clip(gy, 0, n - 1.001)
            x0 = np.floor(gx).astype(int)
            y0 = np.floor(gy).astype(int)
            fx = gx - x0
            fy = gy - y0
            fx = (fx * fx * (3 - 2 * fx))[:, None]
            fy = (fy * fy * (3 - 2 * fy))[:, None]
            v = (lat[y0, x0] * (1 - fx) * (1 - fy) + lat[y0, x0 + 1] * fx * (1 - fy)
                 + lat[y0 + 1, x0] * (1 - fx) * fy + lat[y0 + 1, x0 + 1] * fx * fy)
            out = out + amp * v
        v = out / self.total
        v = np.clip(0.5 + (v - 0.5) * 2.2, 0, 1)
        return self.offset + v * self.tint * (1 - self.offset)


# -- geometry ------------------------------------------------------------------

def _apply(M: np.ndarray, pts: np.ndarray) -> np.ndarray:
    h = pts @ M[:, :2].T + M[:, 2]
    return h[:, :2] / h[:, 2:3]


def similarity_about(center, angle_deg: float, scale: float, translation) -> np.ndarray:
    """3×3 transform: rotate/scale about ``center`` then translate."""
    a = np.deg2rad(angle_deg)
    A = scale * np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    c = np.asarray(center, dtype=np.float64)
    M = np.eye(3)
    M[:2, :2] = A
    M[:2, 2] = c - A @ c + np.asarray(translation, dtype=np.float64)
    return M


def mirror_motion(M: np.ndarray) -> np.ndarray:
    """Affine motion of the previous frame under constant velocity: p -> 2p - M(p)."""
    if not np.allclose(M[2], [0, 0, 1]):
        raise ContractViolation("constant-velocity mirroring needs an affine motion")
    out = np.eye(3)
    out[:2, :2] = 2 * np.eye(2) - M[:2, :2]
    out[:2, 2] = -M[:2, 2]
    return out


@dataclass
class Layer:
    texture: ValueNoise
    polygon: Optional[np.ndarray]  # None for the background
    transforms: dict  # frame name -> 3×3 reference->frame

    def contains(self, ref_pts: np.ndarray) -> np.ndarray:
        if self.polygon is None:
            return np.ones(len(ref_pts), dtype=bool)
        return PolyPath(self.polygon).contains_points(ref_pts)


class Scene:
    def __init__(self, layers: List[Layer], height: int, width: int):
        self.layers = layers
        self.H, self.W = height, width
        ys, xs = np.mgrid[0:height, 0:width]
        self.grid = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)

    def owner(self, frame: str, pts: np.ndarray) -> np.ndarray:
        """Index of the top layer covering each point in ``frame`` coordinates."""
        own = np.zeros(len(pts), dtype=int)
        for i, layer in enumerate(self.layers):
            if layer.polygon is None:
                continue
            ref = _apply(np.linalg.inv(layer.transforms[frame]), pts)
            own[layer.contains(ref)] = i
        return own

    def render(self, frame: str) -> np.ndarray:
        pts = self.grid
        own = self.owner(frame, pts)
        img = np.zeros((len(pts), 3))
        for i, layer in enumerate(self.layers):
            sel = own == i
            if sel.any():
                ref = _apply(np.linalg.inv(layer.transforms[frame]), pts[sel])
                img[sel] = layer.texture(ref)
        return img.reshape(self.H, self.W, 3)

    def flow(self, src: str, dst: str):
        """Exact flow src->dst on the src pixel grid, plus its occlusion mask."""
        pts = self.grid
        own = self.owner(src, pts)
        target = np.zeros_like(pts)
        for i, layer in enumerate(self.layers):
            sel = own == i
            if sel.any():
                ref = _apply(np.linalg.inv(layer.transforms[src]), pts[sel])
                target[sel] = _apply(layer.transforms[dst], ref)
        occ = ((target[:, 0] < 0) | (target[:, 0] > self.W - 1)
               | (target[:, 1] < 0) | (target[:, 1] > self.H - 1))
        # covered in dst by a layer stacked above the owner
        own_dst = self.owner(dst, target)
        occ |= own_dst > own
        flow = (target - pts).reshape(self.H, self.W, 2)
        return flow.astype(np.float32), occ.reshape(self.H, self.W)

    def region_masks(self, frame: str) -> List[np.ndarray]:
        own = self.owner(frame, self.grid).reshape(self.H, self.W)
        return [own == i for i in range(len(self.layers))]


def _star_polygon(rng, center, rmin, rmax):
    k = rng.integers(5, 9)
    ang = np.sort(rng.uniform(0, 2 * np.pi, k))
    rad = rng.uniform(rmin, rmax, k)
    return np.stack([center[0] + rad * np.cos(ang), center[1] + rad * np.sin(ang)], axis=1)


def _random_motion(rng, center, max_t, max_rot, max_scale):
    t = rng.uniform(-max_t, max_t, 2)
    rot = rng.uniform(-max_rot, max_rot)
    s = 1.0 + rng.uniform(-max_scale, max_scale)
    return similarity_about(center, rot, s, t)


def build_scene(rng: np.random.Generator, cfg: SynthConfig, triple: bool) -> Scene:
    H, W = cfg.height, cfg.width
    extent = 2.0 * max(H, W)
    center = np.array([(W - 1) / 2, (H - 1) / 2])
    frames = ["t", "t+1"] + (["t-1"] if triple else [])
    M_bg = _random_motion(rng, center, cfg.bg_translation, cfg.bg_rotation, cfg.bg_scale)
    if cfg.bg_perspective and not triple:
        g = rng.uniform(-cfg.bg_perspective, cfg.bg_perspective, 2)
        P = np.eye(3)
        P[2, :2] = g
        C = np.eye(3)
        C[:2, 2] = -center
        M_bg = M_bg @ np.linalg.inv(C) @ P @ C
        M_bg /= M_bg[2, 2]
    layers = [Layer(ValueNoise(rng, cfg.texture_octaves, cfg.texture_period, extent), None,
                    _frame_transforms(M_bg, triple))]
    for _ in range(cfg.n_objects):
        c = rng.uniform([0.15 * W, 0.15 * H], [0.85 * W, 0.85 * H])
        poly = _star_polygon(rng, c, cfg.obj_radius_min, cfg.obj_radius_max)
        M = _random_motion(rng, c, cfg.obj_translation, cfg.obj_rotation, cfg.obj_scale)
        tex = ValueNoise(rng, cfg.texture_octaves, cfg.texture_period * 0.75, extent)
        layers.append(Layer(tex, poly, _frame_transforms(M, triple)))
    assert set(layers[0].transforms) == set(frames)
    return Scene(layers, H, W)


def _frame_transforms(M, triple):
    tr = {"t": np.eye(3), "t+1": M}
    if triple:
        tr["t-1"] = mirror_motion(M)
    return tr


def _corrupt(rng, img: np.ndarray, cfg: SynthConfig):
    """Photometric damage applied to the last frame only; returns the damaged-pixel mask."""
    H, W = img.shape[:2]
    mask = np.zeros((H, W), dtype=bool)
    out = img.copy()
    if cfg.brightness_ramp:
        ramp = 1.0 + cfg.brightness_ramp * (np.arange(W) / max(W - 1, 1) - 0.5)
        out = out * ramp[None, :, None]
    for _ in range(cfg.corrupt_patches):
        h = int(rng.integers(cfg.patch_min, cfg.patch_max + 1))
        w = int(rng.integers(cfg.patch_min, cfg.patch_max + 1))
        y = int(rng.integers(0, H - h + 1))
        x = int(rng.integers(0, W - w + 1))
        out[y:y + h, x:x + w] = rng.random((h, w, 3))
        mask[y:y + h, x:x + w] = True
    if cfg.noise_sigma:
        out = out + rng.normal(scale=cfg.noise_sigma, size=out.shape)
    return np.clip(out, 0, 1), mask


def _landing_mask(flow: np.ndarray, damaged: np.ndarray) -> np.ndarray:
    H, W = damaged.shape
    ys, xs = np.mgrid[0:H, 0:W]
    tx = np.clip(np.round(xs + flow[..., 0]), 0, W - 1).astype(int)
    ty = np.clip(np.round(ys + flow[..., 1]), 0, H - 1).astype(int)
    return damaged[ty, tx]


def generate(seed: int, config: Optional[SynthConfig] = None) -> SynthSample:
    """Image pair (t, t+1) with ground truth, deterministic in ``seed``."""
    cfg = config or SynthConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    scene = build_scene(rng, cfg, triple=False)
    return _sample(scene, rng, cfg, seed, triple=False)


def linear_motion_triple(seed: int, config: Optional[SynthConfig] = None) -> SynthSample:
    """Frames t-1, t, t+1 under constant per-layer velocity.

    On pixels visible in all three frames ``flow_fwd == -flow_prev``.
    """
    cfg = config or SynthConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    scene = build_scene(rng, cfg, triple=True)
    return _sample(scene, rng, cfg, seed, triple=True)


def _sample(scene: Scene, rng, cfg: SynthConfig, seed: int, triple: bool) -> SynthSample:
    img1 = scene.render("t")
    img2, damaged = _corrupt(rng, scene.render("t+1"), cfg)
    f_fwd, o_fwd = scene.flow("t", "t+1")
    f_bwd, o_bwd = scene.flow("t+1", "t")
    s = SynthSample(
        img1=img1.astype(np.float32), img2=img2.astype(np.float32),
        flow_fwd=f_fwd, occ_fwd=o_fwd, flow_bwd=f_bwd, occ_bwd=o_bwd,
        regions=scene.region_masks("t"),
        corrupted=_landing_mask(f_fwd, damaged) & ~o_fwd,
        descriptor={"seed": int(seed), "config": asdict(cfg),
                    "transforms": [{k: v.tolist() for k, v in L.transforms.items()} for L in scene.layers]},
    )
    if triple:
        s.img0 = scene.render("t-1").astype(np.float32)
        s.flow_prev, s.occ_prev = scene.flow("t", "t-1")
        s.flow_from_prev, s.occ_from_prev = scene.flow("t-1", "t")
    return s


# -- export --------------------------------------------------------------------

def save_sample(directory, sample: SynthSample) -> None:
    """Write one sample as PNG/.flo files into ``directory`` (created)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    flowio.write_image(d / "img1.png", sample.img1)
    flowio.write_image(d / "img2.png", sample.img2)
    flowio.save_flo(d / "flow_fwd.flo", sample.flow_fwd)
    flowio.save_flo(d / "flow_bwd.flo", sample.flow_bwd)
    flowio.write_image(d / "occ_fwd.png", sample.occ_fwd.astype(np.float32))
    flowio.write_image(d / "occ_bwd.png", sample.occ_bwd.astype(np.float32))
    flowio.write_image(d / "corrupted.png", sample.corrupted.astype(np.float32))
    for i, r in enumerate(sample.regions):
        flowio.write_image(d / f"region_{i:02d}.png", r.astype(np.float32))
    if sample.img0 is not None:
        flowio.write_image(d / "img0.png", sample.img0)
        flowio.save_flo(d / "flow_prev.flo", sample.flow_prev)
        flowio.write_image(d / "occ_prev.png", sample.occ_prev.astype(np.float32))
        flowio.save_flo(d / "flow_from_prev.flo", sample.flow_from_prev)
        flowio.write_image(d / "occ_from_prev.png", sample.occ_from_prev.astype(np.float32))
    (d / "scene.json").write_text(json.dumps(sample.descriptor, indent=1))


def load_sample(directory) -> SynthSample:
    d = Path(directory)

    def mask(name):
        return flowio.read_image(d / name)[..., 0] > 0.5

    regions = [flowio.read_image(p)[..., 0] > 0.5 for p in sorted(d.glob("region_*.png"))]
    s = SynthSample(
        img1=flowio.read_image(d / "img1.png"), img2=flowio.read_image(d / "img2.png"),
        flow_fwd=flowio.load_flo(d / "flow_fwd.flo").data, occ_fwd=mask("occ_fwd.png"),
        flow_bwd=flowio.load_flo(d / "flow_bwd.flo").data, occ_bwd=mask("occ_bwd.png"),
        regions=regions, corrupted=mask("corrupted.png"),
        descriptor=json.loads((d / "scene.json").read_text()),
    )
    if (d / "img0.png").exists():
        s.img0 = flowio.read_image(d / "img0.png")
        s.flow_prev = flowio.load_flo(d / "flow_prev.flo").data
        s.occ_prev = mask("occ_prev.png")
        s.flow_from_prev = flowio.load_flo(d / "flow_from_prev.flo").data
        s.occ_from_prev = mask("occ_from_prev.png")
    return s


def save_dataset(directory, samples) -> None:
    for i, s in enumerate(samples):
        save_sample(Path(directory) / f"frame_{i:04d}", s)


def load_dataset(directory) -> List[SynthSample]:
    return [load_sample(p) for p in sorted(Path(directory).glob("frame_*")) if p.is_dir()]
