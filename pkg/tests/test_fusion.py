import numpy as np
import pytest

from uncflow import autodiff as ad
from uncflow.errors import ContractViolation
from uncflow.fusion import (
    FusionExample,
    FusionNet,
    fuse,
    fusion_loss,
    occlusion_masks,
    reliability_masks,
    train_fusion_net,
)


def test_both_confident_means_no_replacement():
    m = reliability_masks(np.full((3, 3), 1.0), np.full((3, 3), 2.0), 35.0)
    assert m.fwd.all() and m.bwd.all() and not m.fused.any()


def test_threshold_is_strict():
    m = reliability_masks(np.full((1, 2), 35.0), np.zeros((1, 2)), 35.0)
    assert not m.fwd.any() and m.fused.all()


def test_mask_algebra():
    vf = np.array([[100.0, 1.0], [100.0, 1.0]])
    vb = np.array([[1.0, 1.0], [100.0, 100.0]])
    m = reliability_masks(vf, vb, 35.0)
    np.testing.assert_array_equal(m.fused, [[True, False], [False, False]])
    np.testing.assert_array_equal(m.fused, (1 - m.fwd) * m.bwd)
    with pytest.raises(ContractViolation):
        reliability_masks(vf, vb, 0.0)


def test_occlusion_baseline_masks():
    m = occlusion_masks(np.array([[True, False]]), np.array([[False, False]]))
    np.testing.assert_array_equal(m.fused, [[True, False]])


def test_fuse_selection():
    rng = np.random.default_rng(0)
    f, g = rng.normal(size=(2, 4, 5, 2))
    np.testing.assert_array_equal(fuse(f, g, np.zeros((4, 5), bool)), f)
    np.testing.assert_array_equal(fuse(f, g, np.ones((4, 5), bool)), g)
    board = (np.add.outer(np.arange(4), np.arange(5)) % 2).astype(bool)
    out = fuse(f, g, board)
    np.testing.assert_array_equal(out[board], g[board])
    np.testing.assert_array_equal(out[~board], f[~board])
    np.testing.assert_array_equal(fuse(out, g, board), out)


def linear_examples(n, seed, h=16, w=16):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        fb = np.zeros((h, w, 2)) + rng.uniform(-4, 4, 2)
        fb[4:10, 3:9] += rng.uniform(-2, 2, 2)
        out.append(FusionExample(rng.random((h, w, 3)), -fb, fb, np.ones((h, w)), np.ones((h, w))))
    return out


def test_learns_constant_velocity_mapping():
    with ad.precision("train"):
        train = linear_examples(8, 0)
        held = linear_examples(4, 1)
        init = FusionNet(seed=3)
        before = fusion_loss(init, held, 35.0)
        hist = []
        net = train_fusion_net(train, 35.0, steps=150, lr=2e-3, seed=3, history=hist)
        assert hist[-1] < 0.05
        assert fusion_loss(net, held, 35.0) <= before


def test_tiny_theta_skips_every_batch():
    with ad.precision("train"):
        net = train_fusion_net(linear_examples(4, 0), 1e-9, steps=5)
    assert net.skipped_batches == 5


def test_checkpoint_round_trip(tmp_path):
    net = FusionNet(width=8, seed=1)
    net.save(tmp_path / "f.ckpt")
    back = FusionNet.load(tmp_path / "f.ckpt")
    for n, p in net.params.items():
        np.testing.assert_array_equal(back.params[n].data, p.data.astype(np.float32))


def _preds(var):
    from uncflow.pipeline import TriplePredictions
    z = np.zeros(var.shape + (2,))
    return [TriplePredictions(np.zeros(var.shape + (3,)), z, z, var, var, var > 0, var > 0)]


def test_resolve_theta_quantile_and_passthrough():
    from uncflow.pipeline import resolve_theta
    var = np.arange(1.0, 101.0).reshape(10, 10)
    assert resolve_theta(35.0, _preds(var)) == 35.0
    assert resolve_theta(-0.5, _preds(var)) == pytest.approx(np.quantile(var, 0.5))
    assert resolve_theta(-1.0, _preds(var)) == 100.0
    for bad in (0.0, -1.5):
        with pytest.raises(ContractViolation):
            resolve_theta(bad, _preds(var))
