import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grcseg import autodiff as ad
from grcseg.errors import ConfigurationError, DivergenceError, EmptyInputError
from grcseg.lidar_io import PointCloud, SensorModel, generate_scene, random_scene_spec
from grcseg.model import ABLATIONS, GRCNet, ModelConfig
from grcseg.train import (TrainSettings, TrainState, accuracy, augment, cross_entropy, evaluate,
                          load_checkpoint, miou, onecycle_lr, save_checkpoint, sgd_momentum_step, total_loss,
                          train_loop, write_metrics_csv)

SENSOR = SensorModel(beams=8, azimuth_steps=64, max_range=15.0)


def tiny_cfg(ablation="full", **kw):
    base = dict(n_classes=4, voxel_size=0.5, range_h=8, range_w=64, geo_channels=(3, 4, 8),
                geo_strides=(1, 2), ref_channels=(2, 4, 8), ref_strides=(2, 1), n_queries=2,
                heads=2, decoder_hidden=8)
    base.update(kw)
    return ModelConfig.for_ablation(ablation, **base).validate()


@pytest.fixture(scope="module")
def scenes():
    return [generate_scene(random_scene_spec(s, 4, SENSOR, extent=10.0)) for s in range(3)]


def quick(steps=3, **kw):
    return TrainSettings(steps=steps, max_lr=0.05, augment=kw.pop("augment", False), **kw)


# ------------------------------------------------------------------ model

def test_logit_shape():
    cloud = generate_scene(random_scene_spec(0, 4, SensorModel(beams=16, azimuth_steps=256))).subset(np.arange(1000))
    assert GRCNet(tiny_cfg()).forward(cloud).logits.shape == (1000, 4)


def test_geometry_only_ignores_reflectance(scenes):
    model = GRCNet(tiny_cfg("gb"), seed=1)
    cloud = scenes[0]
    other = cloud.with_reflectance(np.random.default_rng(0).uniform(0, 5, len(cloud)))
    assert np.array_equal(model.forward(cloud).logits.data, model.forward(other).logits.data)


def test_full_model_uses_reflectance(scenes):
    model = GRCNet(tiny_cfg(), seed=1)
    cloud = scenes[0]
    other = cloud.with_reflectance(np.random.default_rng(0).uniform(0, 5, len(cloud)))
    assert not np.array_equal(model.forward(cloud).logits.data, model.forward(other).logits.data)


def test_eval_forward_is_pure(scenes):
    model = GRCNet(tiny_cfg(), seed=2)
    before = {k: v.copy() for k, v in model.buffers().items()}
    a, b = model.forward(scenes[1]).logits.data, model.forward(scenes[1]).logits.data
    assert np.array_equal(a, b)
    assert all(np.array_equal(before[k], v) for k, v in model.buffers().items())


def test_out_of_fov_cloud_degrades(caplog):
    rng = np.random.default_rng(0)
    xyz = np.column_stack([rng.uniform(1, 3, (50, 2)), rng.uniform(8, 10, 50)])
    cloud = PointCloud(np.column_stack([xyz, rng.uniform(0, 1, 50)]), np.zeros(50, int))
    with caplog.at_level(logging.WARNING):
        res = GRCNet(tiny_cfg()).forward(cloud)
    assert res.diagnostics["degraded"] and "geometric path" in caplog.text
    assert np.isfinite(res.logits.data).all()


def test_empty_cloud_rejected():
    with pytest.raises(EmptyInputError):
        GRCNet(tiny_cfg()).forward(PointCloud(np.zeros((0, 4))))


@pytest.mark.parametrize("name", sorted(ABLATIONS))
def test_every_ablation_trains(name, scenes):
    cfg = tiny_cfg(name)
    assert cfg.ablation == ("full" if name == "+gf" else name)
    model, _, rows = train_loop(cfg, scenes[:2], quick(2), seed=0)
    assert len(rows) == 2 and all(np.isfinite(r["loss"]) for r in rows)


def test_invalid_flag_chains():
    with pytest.raises(ConfigurationError):
        ModelConfig(use_global_fusion=True, use_local_fusion=False, reflectance_add_only=True).validate()
    with pytest.raises(ConfigurationError):
        ModelConfig(use_cic=False, use_local_fusion=True).validate()
    with pytest.raises(ConfigurationError):
        ModelConfig(geometry_only=True).validate()
    with pytest.raises(ConfigurationError):
        ModelConfig.for_ablation("nope")
    with pytest.raises(ConfigurationError):
        ModelConfig.from_dict({"n_classes": 3, "colour": "red"})


def test_config_dict_round_trip():
    cfg = tiny_cfg(tau=math.inf)
    back = ModelConfig.from_dict(cfg.to_dict()).validate()
    assert back == cfg


# -------------------------------------------------------------------- loss

def test_uniform_logits_cross_entropy():
    ce = cross_entropy(ad.tensor(np.zeros((6, 4))), [0, 1, 2, 3, 255, 1])
    assert abs(float(ce.data) - math.log(4)) < 1e-15


def test_total_loss_combination():
    logits = ad.tensor(np.random.default_rng(0).normal(size=(5, 3)))
    labels = [0, 2, 1, 1, 0]
    total, ce = total_loss(logits, labels, ad.tensor(2.0), 0.0)
    assert float(total.data) == float(ce.data)
    ce_val = float(cross_entropy(logits, labels).data)
    total, _ = total_loss(logits, labels, ad.tensor(2.0), 0.01)
    assert abs(float(total.data) - (ce_val + 0.02)) < 1e-15


def test_cross_entropy_errors():
    with pytest.raises(EmptyInputError):
        cross_entropy(ad.tensor(np.zeros((2, 3))), [255, 255])
    with pytest.raises(ConfigurationError):
        cross_entropy(ad.tensor(np.zeros((2, 3))), [0, 3])


# --------------------------------------------------------------- optimizer

def one_param_state(value=0.0):
    p = ad.parameter(np.array([value]))
    return p, TrainState.create({"p": p})


def test_vanilla_step():
    p, state = one_param_state()
    p.grad = np.array([1.0])
    sgd_momentum_step(state, 0.1, momentum=0.0, weight_decay=0.0)
    assert p.data[0] == pytest.approx(-0.1, abs=1e-15) and p.grad is None and state.step == 1


def test_two_momentum_steps():
    p, state = one_param_state()
    seen = []
    for _ in range(2):
        p.grad = np.array([1.0])
        sgd_momentum_step(state, 0.1, momentum=0.9, weight_decay=0.0)
        seen.append((state.momentum_buffers["p"][0], p.data[0]))
    assert seen[0] == pytest.approx((1.0, -0.1), abs=1e-15)
    assert seen[1] == pytest.approx((1.9, -0.29), abs=1e-15)


def test_weight_decay_only_matches_linear_recurrence():
    lr, wd, mom, k = 0.1, 0.01, 0.9, 25
    p, state = one_param_state(2.0)
    for _ in range(k):
        p.grad = np.zeros(1)
        sgd_momentum_step(state, lr, momentum=mom, weight_decay=wd)
    # (p, v) evolves linearly: v' = mom v + wd p, p' = p - lr v'
    A = np.array([[1 - lr * wd, -lr * mom], [wd, mom]])
    expected = np.linalg.matrix_power(A, k) @ np.array([2.0, 0.0])
    assert abs(p.data[0] - expected[0]) < 1e-13 and abs(state.momentum_buffers["p"][0] - expected[1]) < 1e-13
    assert 0 < p.data[0] < 2.0


def test_non_finite_gradient_names_parameter():
    p, state = one_param_state()
    p.grad = np.array([np.nan])
    with pytest.raises(DivergenceError, match="'p'"):
        sgd_momentum_step(state, 0.1)


def test_onecycle_shape():
    assert onecycle_lr(0, 100, 0.24) == pytest.approx(0.24 / 25)
    assert onecycle_lr(30, 100, 0.24) == pytest.approx(0.24)
    end = onecycle_lr(99, 100, 0.24)
    assert abs(end - 0.24 / 1e4) <= 0.01 * 0.24 / 1e4
    lrs = [onecycle_lr(s, 100, 0.24) for s in range(100)]
    assert np.all(np.diff(lrs[:31]) > 0) and np.all(np.diff(lrs[30:]) < 0)
    with pytest.raises(ValueError):
        onecycle_lr(100, 100, 0.24)


# ----------------------------------------------------------------- metrics

def test_miou_hand_case():
    iou, m = miou([0, 0, 1, 1, 0], [0, 0, 0, 1, 1], 2)
    assert iou.tolist() == pytest.approx([0.5, 1 / 3]) and m == pytest.approx(5 / 12)


def test_miou_perfect_and_absent_classes():
    iou, m = miou([0, 2, 2], [0, 2, 2], 4)
    assert m == 1.0 and np.isnan(iou[1]) and np.isnan(iou[3])


def test_miou_ignores_ignored_points():
    true = np.array([0, 1, 255, 1, 255])
    a = miou([0, 1, 0, 1, 1], true, 2)[1]
    b = miou([0, 1, 1, 1, 0], true, 2)[1]
    assert a == b == 1.0
    with pytest.raises(EmptyInputError):
        miou([0, 1], [255, 255], 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(2, 6))
def test_miou_relabel_invariant(seed, C):
    rng = np.random.default_rng(seed)
    true, pred = rng.integers(0, C, 60), rng.integers(0, C, 60)
    perm = rng.permutation(C)
    assert miou(pred, true, C)[1] == pytest.approx(miou(perm[pred], perm[true], C)[1], abs=1e-15)


def test_accuracy():
    assert accuracy([1, 0, 1], [1, 255, 0]) == 0.5


# ------------------------------------------------------------- train loop

def test_augment_keeps_labels_aligned(scenes):
    cloud = scenes[0]
    out = augment(cloud, np.random.default_rng(1), max_drop=0.0)
    assert np.array_equal(out.labels, cloud.labels) and np.array_equal(out.reflectance, cloud.reflectance)
    # rotation and flips keep distances; the scale is one factor in [0.95, 1.05]
    ratio = out.distance / cloud.distance
    assert np.ptp(ratio) < 1e-12 and 0.95 <= ratio[0] <= 1.05
    dropped = augment(cloud, np.random.default_rng(2))
    assert 0.9 * len(cloud) - 1 <= len(dropped) <= len(cloud)


def test_same_seed_same_curve(scenes):
    _, _, a = train_loop(tiny_cfg(), scenes, quick(3, augment=True), seed=5)
    _, _, b = train_loop(tiny_cfg(), scenes, quick(3, augment=True), seed=5)
    assert [r["loss"] for r in a] == [r["loss"] for r in b]
    _, _, c = train_loop(tiny_cfg(), scenes, quick(3, augment=True), seed=6)
    assert [r["loss"] for r in a] != [r["loss"] for r in c]


@pytest.mark.parametrize("beta", [0.0, 0.001, 0.01, 0.1])
def test_beta_sweep_trains(beta, scenes):
    _, _, rows = train_loop(tiny_cfg(beta=beta), scenes[:2], quick(3), seed=0)
    assert all(np.isfinite(r["loss"]) for r in rows)
    if beta == 0:
        assert all(r["loss"] == pytest.approx(r["ce"], abs=1e-12) for r in rows)


def test_checkpoint_exact_resume(tmp_path, scenes):
    cfg = tiny_cfg()
    model, state, _ = train_loop(cfg, scenes, quick(2), seed=3)
    path = tmp_path / "m.grcw"
    save_checkpoint(path, model, state)
    model2, state2, meta = load_checkpoint(path)
    assert meta["step"] == 2 and model2.cfg == cfg

    def one_step(m, st):
        res = m.forward(scenes[0], train=True, rng=st.rng)
        loss, _ = total_loss(res.logits, scenes[0].labels, res.cic, cfg.beta)
        ad.backward(loss)
        sgd_momentum_step(st, 0.01)

    one_step(model, state)
    one_step(model2, state2)
    for k, p in model.parameters().items():
        assert np.array_equal(p.data, model2.parameters()[k].data), k
    for k, b in model.buffers().items():
        assert np.array_equal(b, model2.buffers()[k]), k


def test_epoch_checkpoints_and_divergence(tmp_path, scenes):
    cfg = tiny_cfg()
    settings_ = quick(3, checkpoint_dir=str(tmp_path))
    model, _, _ = train_loop(cfg, scenes[:1], settings_, seed=0)
    assert (tmp_path / "model.grcw").exists() and (tmp_path / "model.grcw.json").exists()
    model.dec_b2.data[:] = np.nan
    with pytest.raises(DivergenceError) as err:
        train_loop(cfg, scenes[:1], settings_, seed=0, model=model)
    assert err.value.checkpoint is None


def test_train_loop_argument_errors(scenes):
    with pytest.raises(EmptyInputError):
        train_loop(tiny_cfg(), [], quick(1))
    with pytest.raises(ConfigurationError):
        train_loop(tiny_cfg(), scenes, quick(0))
    with pytest.raises(ConfigurationError):
        train_loop(tiny_cfg(), lambda i: scenes[i], quick(1))


def test_generator_dataset_and_metrics_csv(tmp_path, scenes):
    _, _, rows = train_loop(tiny_cfg(), lambda i: scenes[i], quick(2, epoch_size=3), seed=0)
    write_metrics_csv(tmp_path / "m.csv", rows)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "step,loss,ce,cic,lr,grad_norm" and len(lines) == 3


def test_evaluate_report(scenes):
    model = GRCNet(tiny_cfg(), seed=0)
    out = evaluate(model, scenes[:2])
    assert out["confusion"].shape == (4, 4) and 0 <= out["miou"] <= 1 and 0 <= out["accuracy"] <= 1
    assert out["confusion"].sum() == sum(int((c.labels != 255).sum()) for c in scenes[:2])
