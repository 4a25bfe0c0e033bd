import dataclasses

import numpy as np
import pytest

from mt3 import autodiff as ad
from mt3 import data, nn, trainers
from mt3.autodiff import Tensor
from mt3.losses import byol_loss, cross_entropy
from mt3.nn import forward, to_nchw
from mt3.trainers import BaselineConfig, JointTrainConfig, MetaTrainConfig

MICRO = nn.ModelConfig.toy(resolution=8, widths=(4, 8), blocks_per_stage=1, hidden_dim=8,
                           proj_dim=4)


@pytest.fixture(scope="module")
def micro_ds():
    return data.synth_dataset(10, 4, 8, seed=1)


@pytest.fixture(scope="module")
def toy_ds():
    return data.synth_dataset(10, 8, 16, seed=0)


def micro_tasks(ds, cfg, step=0):
    return trainers.sample_meta_batch(ds, cfg, step)[1]


def theta64(seed=0):
    p = nn.init_params(MICRO, seed)
    return nn.ParameterSet.from_arrays({k: v.astype(np.float64) for k, v in p.arrays().items()},
                                       p.groups)


# inner adaptation


def test_alpha_zero_phi_equals_theta(micro_ds):
    cfg = MetaTrainConfig(inner_lr=0.0)
    theta = nn.init_params(MICRO, 0).leaves()
    phi, _ = trainers.inner_adapt(micro_tasks(micro_ds, cfg)[0], theta, cfg, MICRO)
    assert all(np.array_equal(phi[n].data, theta[n].data) for n in theta)


def test_alpha_zero_outer_gradient_is_joint_gradient(micro_ds):
    cfg = MetaTrainConfig(inner_lr=0.0, stop_gradient_target=True)
    with ad.precision("float64"):
        theta = theta64().leaves()
        task = micro_tasks(micro_ds, cfg)[0]
        g_meta, _ = trainers.meta_gradient([task], theta, cfg, MICRO)
        # one forward, no inner step, projections held constant
        k = len(task.labels)
        th = theta.leaves()
        z = forward(th, to_nchw(np.concatenate([task.a, task.a_tilde])), MICRO).z.detach()
        out = forward(th, to_nchw(np.concatenate([task.x, task.a, task.a_tilde])), MICRO)
        loss = ad.reduce_mean(cross_entropy(out.logits[:k], task.labels)
                              + 0.1 * byol_loss(out.r[k:2 * k], out.r[2 * k:], z[:k], z[k:]))
        g_joint = ad.grad_map(loss, th)
    for n in theta:
        np.testing.assert_allclose(g_meta[n].data, g_joint[n].data, rtol=1e-9, atol=1e-12)


def test_small_step_descends_byol(micro_ds):
    cfg = MetaTrainConfig(inner_lr=1e-3, second_order=False)
    with ad.precision("float64"):
        theta = theta64(3).leaves()
        for task in micro_tasks(micro_ds, cfg):
            z, zt = trainers.projections(theta, task, MICRO)
            phi, log = trainers.inner_adapt(task, theta, cfg, MICRO, (z, zt))
            k = len(task.labels)
            r = forward(phi, to_nchw(np.concatenate([task.a, task.a_tilde])), MICRO).r
            after = float(np.mean(byol_loss(r[:k], r[k:], z, zt).data))
            assert after <= log["byol"][0]


def test_head_passes_through_bit_identical(micro_ds):
    cfg = MetaTrainConfig(inner_steps=2)
    theta = nn.init_params(MICRO, 0).leaves()
    phi, _ = trainers.inner_adapt(micro_tasks(micro_ds, cfg)[0], theta, cfg, MICRO)
    for n in theta.names(["h"]):
        assert phi[n].data.tobytes() == theta[n].data.tobytes()
    moved = [n for n in theta.adaptable() if not np.array_equal(phi[n].data, theta[n].data)]
    assert moved


def test_meta_step_does_not_mutate_theta(micro_ds):
    cfg = MetaTrainConfig()
    theta = nn.init_params(MICRO, 0)
    snapshot = {k: v.copy() for k, v in theta.arrays().items()}
    new, rec = trainers.meta_train_step(micro_tasks(micro_ds, cfg), theta, {}, cfg, MICRO)
    assert all(np.array_equal(theta[n].data, snapshot[n]) for n in theta)
    assert any(not np.array_equal(new[n].data, snapshot[n]) for n in theta)
    assert 0 <= rec["acc_before"] <= 1 and 0 <= rec["acc_after"] <= 1


def test_meta_record_fields(micro_ds):
    cfg = MetaTrainConfig()
    _, rec = trainers.meta_train_step(micro_tasks(micro_ds, cfg), nn.init_params(MICRO, 0), {},
                                      cfg, MICRO, step=3, epoch=1)
    for key in ("epoch", "step", "loss_total", "loss_ce", "loss_byol", "acc_before", "acc_after",
                "inner_grad_norm", "meta_grad_norm"):
        assert key in rec
    assert rec["loss_total"] == pytest.approx(rec["loss_ce"] + 0.1 * rec["loss_byol"], rel=1e-5)


# meta-gradient oracle


def _meta_loss(arrays, groups, tasks, cfg):
    theta = nn.ParameterSet.from_arrays(arrays, groups).leaves()
    _, info = trainers.meta_gradient(tasks, theta, dataclasses.replace(cfg, second_order=False),
                                     MICRO)
    return info["loss"]


@pytest.mark.parametrize("seed", [0, 1])
def test_second_order_meta_gradient_directional_fd(micro_ds, seed):
    cfg = MetaTrainConfig(meta_batch=2, task_size=4)
    with ad.precision("float64"):
        theta = theta64(seed)
        tasks = micro_tasks(micro_ds, cfg, step=seed)
        grads, _ = trainers.meta_gradient(tasks, theta.leaves(), cfg, MICRO)
        rng = np.random.default_rng(seed)
        v = {n: rng.normal(size=a.shape) for n, a in theta.arrays().items()}
        h = 1e-6  # small enough that no relu changes side
        plus = _meta_loss({n: a + h * v[n] for n, a in theta.arrays().items()}, theta.groups, tasks, cfg)
        minus = _meta_loss({n: a - h * v[n] for n, a in theta.arrays().items()}, theta.groups, tasks, cfg)
    numeric = (plus - minus) / (2 * h)
    analytic = sum(float(np.sum(grads[n].data * v[n])) for n in theta)
    assert abs(analytic - numeric) / max(abs(numeric), 1e-12) < 1e-4


def test_first_and_second_order_differ(micro_ds):
    cfg = MetaTrainConfig(meta_batch=2, task_size=4)
    with ad.precision("float64"):
        theta = theta64(0)
        tasks = micro_tasks(micro_ds, cfg)
        g2, _ = trainers.meta_gradient(tasks, theta.leaves(), cfg, MICRO)
        g1, _ = trainers.meta_gradient(tasks, theta.leaves(),
                                       dataclasses.replace(cfg, second_order=False), MICRO)
    diff = np.sqrt(sum(float(np.sum((g2[n].data - g1[n].data) ** 2)) for n in theta))
    assert diff > 1e-6


def test_meta_defaults():
    c = MetaTrainConfig()
    assert (c.inner_lr, c.inner_steps, c.meta_lr, c.momentum, c.meta_batch, c.task_size) == \
        (0.1, 1, 0.01, 0.9, 4, 8)
    assert (c.gamma, c.weight_decay, c.clip_norm, c.second_order) == (0.1, 1.5e-6, 10.0, True)


# optimizer


def test_decoupled_decay_excluded_from_clipping():
    w = {"a": np.array([1.0, 1.0])}
    out = trainers.sgd_momentum_update(w, {"a": np.zeros(2)}, {}, 0.1, 0.9, 0.5)
    np.testing.assert_allclose(out["a"], [0.95, 0.95])
    # a clipped gradient is not rescaled by the decay term
    clipped, _, _ = ad.clip_by_global_norm({"a": Tensor([30.0, 40.0])}, 10.0)
    out = trainers.sgd_momentum_update(w, {"a": clipped["a"].data}, {}, 0.1, 0.9, 0.5)
    np.testing.assert_allclose(out["a"], [1 - 0.6 - 0.05, 1 - 0.8 - 0.05], rtol=1e-6)


def test_momentum_accumulates():
    w, st = {"a": np.zeros(1)}, {}
    w = trainers.sgd_momentum_update(w, {"a": np.ones(1)}, st, 1.0, 0.9, 0.0)
    w = trainers.sgd_momentum_update(w, {"a": np.ones(1)}, st, 1.0, 0.9, 0.0)
    np.testing.assert_allclose(w["a"], [-2.9])


# joint training


def test_ema_momentum_zero_copies_online(micro_ds):
    cfg = JointTrainConfig(ema=0.0, batch_size=16)
    state = trainers.init_state("jt", MICRO, 0)
    _, chunks = trainers.joint_batch(micro_ds, cfg, 0)
    online, target, _ = trainers.joint_train_step(chunks, state.params, state.target, {}, cfg, MICRO)
    assert all(np.array_equal(online[n].data, target[n].data) for n in online)


def test_ema_geometric_decay():
    rng = np.random.default_rng(0)
    online = {"w": rng.normal(size=(5, 3))}
    target = {"w": rng.normal(size=(5, 3))}
    d0 = np.linalg.norm(target["w"] - online["w"])
    for n in range(1, 501):
        target = trainers.ema_update(target, online, 0.996)
        if n in (1, 10, 100, 500):
            assert abs(np.linalg.norm(target["w"] - online["w"]) / d0 - 0.996 ** n) < 1e-6


def test_joint_target_receives_no_gradient_and_moves_slowly(micro_ds):
    cfg = JointTrainConfig(batch_size=16)
    state = trainers.init_state("jt", MICRO, 0)
    _, chunks = trainers.joint_batch(micro_ds, cfg, 0)
    online, target, rec = trainers.joint_train_step(chunks, state.params, state.target, {}, cfg, MICRO)
    for n in online:
        want = 0.996 * state.target[n].data + 0.004 * online[n].data
        np.testing.assert_allclose(target[n].data, want, rtol=1e-6, atol=1e-7)
    assert len(chunks) == 2 and rec["regime"] == "jt"


def test_joint_defaults():
    c = JointTrainConfig()
    assert (c.lr, c.momentum, c.weight_decay, c.batch_size, c.ema) == (0.1, 0.9, 1.5e-6, 128, 0.996)


# baseline


def test_baseline_zero_lr_unchanged(micro_ds):
    cfg = BaselineConfig(lr=0.0, batch_size=16)
    mc = dataclasses.replace(MICRO, ssl_heads=False)
    params = nn.init_params(mc, 0)
    _, x, y = trainers.baseline_batch(micro_ds, cfg, 0)
    new, _ = trainers.baseline_train_step(x, y, params, {}, cfg, mc)
    assert all(np.array_equal(new[n].data, params[n].data) for n in params)


def test_baseline_defaults():
    c = BaselineConfig()
    assert (c.lr, c.momentum, c.weight_decay, c.batch_size, c.pad, c.epochs) == \
        (0.1, 0.9, 5e-4, 128, 4, 200)


def test_baseline_separable_two_class_reaches_100():
    rng = np.random.default_rng(0)
    n = 64
    labels = np.repeat([0, 1], n // 2)
    imgs = np.empty((n, 8, 8, 3))
    imgs[labels == 0] = [0.8, 0.2, 0.2]
    imgs[labels == 1] = [0.2, 0.2, 0.8]
    imgs = np.clip(imgs + rng.normal(0, 0.05, imgs.shape), 0, 1)
    ds = data.Dataset(imgs.astype(np.float32), labels, "separable")
    mc = dataclasses.replace(MICRO, ssl_heads=False, num_classes=2)
    accs = []
    trainers.train("baseline", ds, mc, BaselineConfig(batch_size=32, max_steps=200),
                   on_record=lambda r: accs.append(r["acc"]))
    assert len(accs) == 200 and max(accs) == 1.0


# loops


def test_training_is_deterministic(micro_ds):
    cfg = MetaTrainConfig(max_steps=3, meta_batch=2, task_size=4)
    logs = []
    for _ in range(2):
        recs = []
        st = trainers.train("mt3", micro_ds, MICRO, cfg, on_record=recs.append)
        logs.append((recs, st.params.arrays()))
    assert logs[0][0] == logs[1][0]
    assert all(logs[0][1][n].tobytes() == logs[1][1][n].tobytes() for n in logs[0][1])


@pytest.mark.parametrize("regime", ["mt3", "jt", "baseline"])
def test_resume_matches_uninterrupted(micro_ds, regime):
    mc = MICRO if regime != "baseline" else dataclasses.replace(MICRO, ssl_heads=False)
    cfg = {"mt3": MetaTrainConfig(max_steps=4, meta_batch=2, task_size=4),
           "jt": JointTrainConfig(max_steps=4, batch_size=16),
           "baseline": BaselineConfig(max_steps=4, batch_size=16)}[regime]
    full = []
    a = trainers.train(regime, micro_ds, mc, cfg, on_record=full.append)
    part = []
    s = trainers.train(regime, micro_ds, mc, cfg, on_record=part.append, until=2)
    s = trainers.train(regime, micro_ds, mc, cfg, state=s, on_record=part.append)
    assert full == part
    assert all(a.params[n].data.tobytes() == s.params[n].data.tobytes() for n in a.params)


def test_epoch_consumes_without_replacement():
    seen = np.concatenate([trainers.batch_indices(100, 32, s, 0)[1] for s in range(3)])
    assert len(set(seen.tolist())) == 96
    epoch, last = trainers.batch_indices(100, 32, 3, 0)
    assert epoch == 0 and len(last) == 32
    assert trainers.batch_indices(100, 32, 4, 0)[0] == 1


def test_unknown_regime_and_missing_heads(micro_ds):
    with pytest.raises(ValueError):
        trainers.train("ttt", micro_ds, MICRO, MetaTrainConfig(max_steps=1))
    with pytest.raises(ValueError):
        trainers.train("mt3", micro_ds, dataclasses.replace(MICRO, ssl_heads=False),
                       MetaTrainConfig(max_steps=1))
