import numpy as np
import pytest

from uncflow import autodiff as ad
from uncflow.augment import (
    AugmentBounds,
    AugmentSpec,
    apply,
    residual,
    sample_spec,
    similarity,
    transform_flow,
)
from uncflow.errors import ContractViolation

H, W = 20, 24


def images(seed):
    rng = np.random.default_rng(seed)
    return rng.random((H, W, 3)), rng.random((H, W, 3))


def bilinear_at(field, x, y):
    x = min(max(x, 0), W - 1)
    y = min(max(y, 0), H - 1)
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    x1, y1 = min(x0 + 1, W - 1), min(y0 + 1, H - 1)
    ax, ay = x - x0, y - y0
    return ((1 - ax) * (1 - ay) * field[y0, x0] + ax * (1 - ay) * field[y0, x1]
            + (1 - ax) * ay * field[y1, x0] + ax * ay * field[y1, x1])


def test_same_seed_same_spec():
    b = AugmentBounds()
    s1 = sample_spec(np.random.default_rng(5), b, H, W)
    s2 = sample_spec(np.random.default_rng(5), b, H, W)
    assert np.array_equal(s1.affine, s2.affine)
    assert (s1.brightness, s1.contrast, s1.hue, s1.erase, s1.seed) == (s2.brightness, s2.contrast, s2.hue, s2.erase, s2.seed)


def test_zero_bounds_give_identity():
    b = AugmentBounds(0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0)
    s = sample_spec(np.random.default_rng(1), b, H, W)
    assert s.is_spatial_identity()
    assert (s.brightness, s.contrast, s.saturation, s.hue, s.noise_sigma, s.blur_sigma) == (0, 1, 1, 0, 0, 0)
    assert s.erase == []


def test_samples_stay_in_bounds():
    b = AugmentBounds()
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        s = sample_spec(rng, b, H, W)
        sc = np.sqrt(abs(np.linalg.det(s.A)))
        assert abs(np.log(sc)) <= b.log_scale + 1e-12
        assert abs(s.brightness) <= b.brightness and abs(s.contrast - 1) <= b.contrast
        assert abs(s.hue) <= b.hue and 0 <= s.noise_sigma <= b.noise_sigma
        assert len(s.erase) <= b.erase_max
        ang = np.degrees(np.arctan2(s.A[1, 0], s.A[0, 0]))
        assert abs(ang) <= b.rotation + 1e-9


def test_identity_spec_is_noop():
    i1, i2 = images(0)
    flow = np.random.default_rng(0).normal(size=(H, W, 2))
    out = apply(AugmentSpec(), i1, i2, flow)
    np.testing.assert_array_equal(out.flow, flow)
    np.testing.assert_allclose(out.img1, i1, atol=1e-15)
    np.testing.assert_allclose(out.img2, i2, atol=1e-15)


@pytest.mark.parametrize("seed", range(8))
def test_flow_transform_matches_point_by_point_construction(seed):
    rng = np.random.default_rng(seed)
    spec = AugmentSpec(affine=similarity(H, W, rng.uniform(-30, 30), np.exp(rng.uniform(-0.2, 0.2)),
                                         *rng.uniform(-3, 3, 2)))
    flow = rng.normal(scale=2.0, size=(H, W, 2))
    got, bad = transform_flow(spec, flow)
    Ainv = np.linalg.inv(spec.A)
    checked = 0
    for y in range(H):
        for x in range(W):
            p = Ainv @ (np.array([x, y]) - spec.t)
            if not (0 <= p[0] <= W - 1 and 0 <= p[1] <= H - 1):
                assert bad[y, x]
                continue
            corr = p + bilinear_at(flow, *p)
            want = spec.A @ corr + spec.t - np.array([x, y])
            assert np.abs(got[y, x] - want).max() < 1e-4
            checked += 1
    assert checked > H * W // 3


def test_quarter_turn_rotates_flow():
    spec = AugmentSpec(affine=similarity(16, 16, 90.0, 1.0, 0, 0))
    flow = np.random.default_rng(2).normal(size=(16, 16, 2))
    got, _ = transform_flow(spec, flow)
    # q = T(p) for integer p lands on integer q for a square quarter turn
    for y, x in [(3, 4), (10, 2), (7, 7)]:
        q = spec.A @ [x, y] + spec.t
        qx, qy = int(round(q[0])), int(round(q[1]))
        assert np.linalg.norm(got[qy, qx]) == pytest.approx(np.linalg.norm(flow[y, x]))
        np.testing.assert_allclose(got[qy, qx], [-flow[y, x, 1], flow[y, x, 0]], atol=1e-9)


def test_rescale_scales_magnitudes():
    flow = np.zeros((H, W, 2)) + [1.5, -0.5]
    got, bad = transform_flow(AugmentSpec(affine=similarity(H, W, 0.0, 1.3, 0, 0)), flow)
    np.testing.assert_allclose(got, flow * 1.3, atol=1e-12)


def test_singular_affine_rejected():
    i1, i2 = images(0)
    with pytest.raises(ContractViolation):
        apply(AugmentSpec(affine=np.zeros((2, 3))), i1, i2, np.zeros((H, W, 2)))


def test_appearance_never_changes_flow_or_mask():
    i1, i2 = images(1)
    flow = np.random.default_rng(1).normal(size=(H, W, 2))
    occ = np.random.default_rng(2).random((H, W)) < 0.2
    base = AugmentSpec(affine=similarity(H, W, 7.0, 1.1, 1.0, -2.0))
    jit = AugmentSpec(affine=base.affine, brightness=0.1, contrast=1.2, saturation=0.8, hue=0.05,
                      noise_sigma=0.05, blur_sigma=0.7, seed=3)
    a, b = apply(base, i1, i2, flow, occ), apply(jit, i1, i2, flow, occ)
    np.testing.assert_array_equal(a.flow, b.flow)
    np.testing.assert_array_equal(a.occ, b.occ)
    assert not np.allclose(a.img1, b.img1)


def test_erase_marks_occlusion():
    i1, i2 = images(2)
    spec = AugmentSpec(erase=[(3, 4, 9, 10)])
    out = apply(spec, i1, i2, np.zeros((H, W, 2)))
    assert out.occ[4:10, 3:9].all()
    assert out.occ.sum() == 36
    assert np.ptp(out.img2[4:10, 3:9], axis=(0, 1)).max() == 0


def test_occlusion_warped_and_off_canvas_flagged():
    occ = np.zeros((H, W), bool)
    occ[5, 6] = True
    spec = AugmentSpec(affine=similarity(H, W, 0.0, 1.0, 2.0, 1.0))
    i1, i2 = images(3)
    out = apply(spec, i1, i2, np.zeros((H, W, 2)), occ)
    assert out.occ[6, 8]
    assert out.occ[:, :2].all() and out.occ[0].all()


def test_residual_l1_and_symmetry():
    a = np.zeros((1, 1, 2))
    b = np.array([[[3.0, -4.0]]])
    assert residual(a, b)[0, 0] == 7.0
    assert residual(b, a)[0, 0] == 7.0
    assert not residual(b, b).any()
    with ad.precision("test"):
        t = residual(ad.parameter(b), a)
        assert t.item() == 7.0
