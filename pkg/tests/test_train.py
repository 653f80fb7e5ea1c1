import json

import numpy as np
import pytest

from uncflow import autodiff as ad
from uncflow.errors import ContractViolation, TrainingFault
from uncflow.metrics import aggregate, evaluate_frame
from uncflow.model import FlowNet, ModelConfig
from uncflow.synth import SynthConfig, generate
from uncflow import train as T

TINY = dict(feature_dim=8, hidden_dim=8, context_dim=8, head_dim=8, unc_dim=4, motion_dim=8,
            encoder_width=8, iterations=2, corr_levels=2, corr_radius=2)


def tiny_cfg(**kw):
    cfg = T.TrainConfig(steps=3, batch_size=2, lr=1e-3, model=ModelConfig(**TINY), log_every=0)
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


@pytest.fixture(scope="module")
def small_set():
    sc = SynthConfig(height=32, width=32, bg_translation=3, obj_translation=3,
                     obj_radius_min=4, obj_radius_max=8, n_objects=1)
    return [generate(s, sc) for s in range(4)]


def test_adam_zero_gradient_is_noop():
    p = ad.Tensor(np.arange(6.0).reshape(2, 3))
    before = p.data.copy()
    opt = T.Adam([p])
    for _ in range(3):
        opt.step({p: np.zeros_like(p.data)}, lr=0.1)
    np.testing.assert_array_equal(p.data, before)


def test_adam_first_step_moves_by_lr():
    p = ad.Tensor(np.zeros(3))
    T.Adam([p]).step({p: np.array([2.0, -0.5, 1e-3])}, lr=0.01)
    np.testing.assert_allclose(p.data, [-0.01, 0.01, -0.01], rtol=1e-4)


def test_clip_grad_norm():
    a, b = ad.Tensor(np.zeros(1)), ad.Tensor(np.zeros(1))
    g = {a: np.array([3.0]), b: np.array([4.0])}
    assert T.clip_grad_norm(g, 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose([g[a][0], g[b][0]], [0.6, 0.8])


@pytest.mark.parametrize("total,pct", [(10, 0.2), (1000, 0.3), (7, 0.0), (3, 1.0)])
def test_one_cycle_single_peak_and_ends_low(total, pct):
    lrs = [T.one_cycle_lr(s, total, 1e-3, pct) for s in range(total)]
    assert sum(lr == 1e-3 for lr in lrs) == 1
    assert max(lrs) == 1e-3
    if pct < 1.0:
        assert lrs[-1] < lrs[0]


def test_run_log_is_monotone():
    log = T.RunLog()
    log.append({"step": 0})
    log.append({"step": 2})
    with pytest.raises(ContractViolation):
        log.append({"step": 2})


def test_config_validation():
    with pytest.raises(ContractViolation):
        tiny_cfg(aug_start=1.5).validate()
    with pytest.raises(ContractViolation):
        tiny_cfg(steps=0).validate()
    with pytest.raises(ContractViolation):
        T.train(tiny_cfg(), [])


def test_gating_off_keeps_aug_terms_zero(small_set):
    recs = []
    T.train(tiny_cfg(aug_start=1.0, hg_start=1.0), small_set, callback=lambda s, r: recs.append(r))
    assert len(recs) == 3
    assert all(r["ar"] == 0 and r["unc"] == 0 and r["hg"] == 0 for r in recs)


def test_gating_on_activates_aug_terms(small_set):
    recs = []
    T.train(tiny_cfg(aug_start=0.0, hg_start=1.0), small_set, callback=lambda s, r: recs.append(r))
    assert all(r["ar"] > 0 for r in recs)


def test_seed_determinism_bytes(small_set, tmp_path):
    outs = []
    for run in ("a", "b"):
        _, log = T.train(tiny_cfg(aug_start=0.0, hg_start=0.0), small_set, out_dir=tmp_path / run)
        outs.append(log.to_json())
    assert outs[0] == outs[1]
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()
    assert json.loads((tmp_path / "a" / "runlog.json").read_text())["steps"][0]["step"] == 0


def test_checkpoint_cadence(small_set, tmp_path):
    T.train(tiny_cfg(steps=4, checkpoint_every=2, aug_start=1.0), small_set, out_dir=tmp_path)
    names = sorted(p.name for p in tmp_path.glob("*.ckpt"))
    assert names == ["final.ckpt", "step_000002.ckpt", "step_000004.ckpt"]


def test_non_finite_loss_aborts_with_last_good(small_set, tmp_path, monkeypatch):
    real = T.compute_losses

    def broken(net, batch, cfg, step, rng, iterations=None):
        loss, logs = real(net, batch, cfg, step, rng, iterations)
        if step == 1:
            loss = loss * ad.Tensor(np.array(np.nan, dtype=loss.data.dtype))
        return loss, logs

    monkeypatch.setattr(T, "compute_losses", broken)
    with pytest.raises(TrainingFault):
        T.train(tiny_cfg(aug_start=1.0), small_set, out_dir=tmp_path)
    assert (tmp_path / "last_good.ckpt").exists()
    net = FlowNet.load(tmp_path / "last_good.ckpt")
    assert all(np.isfinite(p.data).all() for p in net.params.values())


def test_non_finite_gradient_aborts(small_set, tmp_path, monkeypatch):
    real = ad.backprop

    def broken(loss, params):
        grads = real(loss, params)
        first = next(iter(grads))
        grads[first] = grads[first] * np.nan
        return grads

    monkeypatch.setattr(ad, "backprop", broken)
    with pytest.raises(TrainingFault, match="gradient"):
        T.train(tiny_cfg(aug_start=1.0), small_set, out_dir=tmp_path)
    assert (tmp_path / "last_good.ckpt").exists()


def test_params_subset_freezes_the_rest(small_set):
    net = FlowNet(ModelConfig(**TINY), seed=0)
    frozen = {n: p.data.astype(np.float32).copy() for n, p in net.params.items() if n.startswith("unc.")}
    T.train(tiny_cfg(aug_start=1.0), small_set, net=net, params=net.flow_params())
    for n, v in frozen.items():
        np.testing.assert_array_equal(net.params[n].data, v)


@pytest.mark.slow
def test_translating_texture_sanity():
    # pure translation of a textured background, 500 optimizer steps
    sc = SynthConfig(n_objects=0, bg_rotation=0, bg_scale=0, bg_translation=3)
    data = [generate(s, sc) for s in range(16)]
    held = [generate(1000 + s, sc) for s in range(8)]
    cfg = tiny_cfg(steps=500, batch_size=2, lr=2e-3, aug_start=1.0, hg_start=1.0)
    cfg.weights.sm = 1.0
    init = aggregate(T.evaluate(FlowNet(cfg.model, seed=cfg.seed), held)).epe
    net, log = T.train(cfg, data)
    ph = [r["ph"] for r in log.steps]
    assert np.mean(ph[-20:]) < np.mean(ph[:20])
    # measured 2.33 -> 1.38 px; the tiny model needs far more steps to converge
    assert aggregate(T.evaluate(net, held)).epe <= 0.75 * init


def test_evaluate_oracles(small_set):
    s = small_set[0]
    r = evaluate_frame("f", s.flow_fwd, s.flow_fwd, None, s.occ_fwd, np.linalg.norm(s.flow_fwd, axis=-1) * 0)
    assert r.epe == 0 and r.fl_all == 0
    net = FlowNet(ModelConfig(**TINY), seed=0)
    reports = T.evaluate(net, small_set)
    agg = aggregate(reports)
    assert agg.epe == pytest.approx(np.mean([x.epe for x in reports]))
    bad = generate(0, SynthConfig(height=34, width=34, stride=2, bg_translation=3, obj_translation=3,
                                  obj_radius_min=4, obj_radius_max=8))
    with pytest.raises(ContractViolation):
        T.evaluate(net, [bad])
