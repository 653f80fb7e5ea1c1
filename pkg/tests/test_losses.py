import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uncflow import autodiff as ad
from uncflow.errors import DegenerateMaskError
from uncflow.losses import (
    LossWeights,
    augmentation_reg_loss,
    census_distance,
    flow_residual,
    masked_mean,
    occlusion_mask,
    photometric_loss,
    photometric_terms,
    smoothness_loss,
    total_loss,
    uncertainty_nll,
)


@pytest.fixture(autouse=True)
def f64():
    with ad.precision("test"):
        yield


def texture(seed, h=24, w=24):
    rng = np.random.default_rng(seed)
    gy, gx = np.mgrid[0:h, 0:w] / 4.0
    base = np.sin(gx + rng.uniform(0, 6)) * np.cos(0.7 * gy) + 0.5 * np.sin(1.3 * gx * gy / 5)
    img = np.stack([base, np.roll(base, 3, 0), np.roll(base, 5, 1)], -1)
    return (img - img.min()) / (img.max() - img.min())


class TestOcclusion:
    def test_examples(self):
        z = np.zeros((6, 6, 2))
        assert not occlusion_mask(z, z).any()
        f = z + [5.0, 0.0]
        assert not occlusion_mask(f, -f).any()
        assert occlusion_mask(f, z).all()

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_direct_per_pixel_evaluation(self, seed):
        rng = np.random.default_rng(seed)
        f = rng.normal(scale=2.0, size=(16, 16, 2))
        b = -f + rng.normal(scale=0.6, size=(16, 16, 2))
        got = occlusion_mask(f, b)
        want = np.zeros((16, 16), bool)
        for y in range(16):
            for x in range(16):
                qx = min(max(x + f[y, x, 0], 0), 15)
                qy = min(max(y + f[y, x, 1], 0), 15)
                x0, y0 = int(np.floor(qx)), int(np.floor(qy))
                x1, y1 = min(x0 + 1, 15), min(y0 + 1, 15)
                ax, ay = qx - x0, qy - y0
                bw = ((1 - ax) * (1 - ay) * b[y0, x0] + ax * (1 - ay) * b[y0, x1]
                      + (1 - ax) * ay * b[y1, x0] + ax * ay * b[y1, x1])
                r = np.linalg.norm(f[y, x] + bw)
                want[y, x] = r > 0.01 * (f[y, x] @ f[y, x] + bw @ bw) + 0.5
        np.testing.assert_array_equal(got, want)
        assert 0 < want.sum() < want.size


class TestPhotometric:
    def test_identity_is_zero(self):
        img = texture(0)
        loss = photometric_loss(img, img, np.zeros((24, 24, 2)), np.zeros((24, 24), bool))
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_exact_shift_zero_on_interior(self):
        big = texture(1, 24, 28)
        img1, img2 = big[:, 1:25], big[:, :24]  # img2(x + 1) == img1(x)
        flow = np.zeros((24, 24, 2)) + [1.0, 0.0]
        occ = np.zeros((24, 24), bool)
        occ[:, -4:] = True  # clamped border samples plus census/SSIM support
        t = photometric_terms(img1, img2, flow, occ)
        assert t["l1"].item() < 1e-12
        assert t["ssim"].item() < 1e-9
        assert t["census"].item() < 1e-9

    def test_census_invariant_to_brightness_offset(self):
        a, b = texture(2), texture(3)
        d0 = census_distance(ad.constant(a[None]), ad.constant(b[None])).data
        d1 = census_distance(ad.constant(a[None]), ad.constant(b[None] + 0.2)).data
        np.testing.assert_allclose(d0, d1, atol=1e-9)

    def test_all_occluded_raises(self):
        img = texture(0)
        with pytest.raises(DegenerateMaskError):
            photometric_loss(img, img, np.zeros((24, 24, 2)), np.ones((24, 24), bool))

    def test_masked_pixels_do_not_matter(self):
        a, b = texture(4), texture(5)
        occ = np.zeros((24, 24), bool)
        occ[5:9, 5:9] = True
        b2 = b.copy()
        b2[...] = b
        flow = np.zeros((24, 24, 2))
        l_a = photometric_terms(a, b, flow, occ)["l1"].item()
        a2 = a.copy()
        a2[6, 6] = 0.123
        l_b = photometric_terms(a2, b, flow, occ)["l1"].item()
        assert l_a == pytest.approx(l_b, abs=1e-15)

    def test_flow_gradient_check(self):
        a, b = texture(6, 12, 12), texture(7, 12, 12)
        occ = np.zeros((12, 12), bool)
        flow0 = np.random.default_rng(0).uniform(-0.7, 0.7, (12, 12, 2)) + 0.31
        rep = ad.grad_check(lambda f: photometric_loss(a, b, f, occ), flow0, tol=1e-4,
                            indices=[np.unravel_index(i, (12, 12, 2)) for i in range(0, 288, 7)])
        assert rep.passed, rep


class TestSmoothness:
    def test_constant_flow_zero(self):
        assert smoothness_loss(np.ones((8, 8, 2)), texture(0, 8, 8)).item() == 0.0

    def test_linear_flow_on_flat_image(self):
        xs = np.arange(10.0)
        flow = np.zeros((10, 10, 2))
        flow[..., 0] = -0.5 * xs[None, :]
        assert smoothness_loss(flow, np.full((10, 10, 3), 0.4)).item() == pytest.approx(0.5)

    def test_edges_reduce_loss(self):
        flow = np.random.default_rng(0).normal(size=(10, 10, 2))
        flat = np.full((10, 10, 3), 0.4)
        stripes = np.zeros((10, 10, 3))
        stripes[:, ::2] = 1.0
        assert smoothness_loss(flow, stripes).item() < smoothness_loss(flow, flat).item()


class TestUncertainty:
    def test_examples(self):
        occ = np.zeros((1, 2, 2, 1))
        assert uncertainty_nll(np.zeros((1, 2, 2, 1)), np.zeros((1, 2, 2, 1)), occ).item() == 0.0
        v = uncertainty_nll(np.zeros((1, 2, 2, 1)), np.ones((1, 2, 2, 1)), occ).item()
        assert v == pytest.approx(1.41421356, abs=1e-8)

    @pytest.mark.parametrize("d", [0.15, 0.5, 1.0, 3.0])
    def test_grid_search_optimum(self, d):
        grid = np.linspace(-8, 8, 16001)
        vals = np.sqrt(2) * np.exp(-grid / 2) * d + grid / 2
        best = grid[np.argmin(vals)]
        assert abs(best - np.log(2 * d * d)) <= grid[1] - grid[0]
        lv = ad.constant(best.reshape(1, 1, 1, 1))
        got = uncertainty_nll(lv, np.full((1, 1, 1, 1), d), np.zeros((1, 1, 1, 1))).item()
        assert got == pytest.approx(vals.min())

    def test_residual_is_detached(self):
        flow = ad.parameter(np.random.default_rng(0).normal(size=(1, 4, 4, 2)))
        lv = ad.parameter(np.zeros((1, 4, 4, 1)))
        d = flow_residual(np.zeros((1, 4, 4, 2)), flow)
        g = ad.backprop(uncertainty_nll(lv, d, np.zeros((1, 4, 4))), [flow, lv])
        assert np.all(g[flow] == 0.0)
        assert np.any(g[lv] != 0.0)
        g = ad.backprop(augmentation_reg_loss(d, np.zeros((1, 4, 4))), [flow])
        assert np.any(g[flow] != 0.0)

    def test_augmentation_masked_mean(self):
        d = np.ones((1, 4, 4, 1))
        occ = np.zeros((1, 4, 4, 1), bool)
        d[:, :2] = 4.0
        occ[:, :2] = True
        assert augmentation_reg_loss(d, occ).item() == 1.0
        assert augmentation_reg_loss(np.full((1, 2, 2, 1), 2.0), np.zeros((1, 2, 2, 1))).item() == 2.0
        with pytest.raises(DegenerateMaskError):
            uncertainty_nll(np.zeros((1, 2, 2, 1)), np.ones((1, 2, 2, 1)), np.ones((1, 2, 2, 1)))

    def test_l1_residual(self):
        d = flow_residual(np.array([[[[3.0, -4.0]]]]), np.zeros((1, 1, 1, 2)))
        assert d.item() == 7.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_masked_mean_ignores_masked_values(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 5, 5, 1))
    keep = rng.random((1, 5, 5, 1)) < 0.5
    keep[0, 0, 0, 0] = True
    y = np.where(keep, x, rng.normal(size=x.shape) * 1e6)
    assert masked_mean(x, keep).item() == pytest.approx(masked_mean(y, keep).item(), rel=1e-12)


class TestTotal:
    def test_examples(self):
        w0 = LossWeights(hg=0, sm=0, ar=0, unc=0)
        c = ad.constant
        assert total_loss([{"ph": c(3.0), "sm": c(1.0)}], w0).item() == 3.0
        w = LossWeights(zeta=0.8)
        assert total_loss([{"ph": c(2.0)}, {"ph": c(5.0)}], w).item() == pytest.approx(0.8 * 2 + 5)
        assert total_loss([{}], LossWeights(hg=0.1), hg=c(10.0)).item() == pytest.approx(1.0)
