import dataclasses

import numpy as np
import pytest

from facetree.config import TrainConfig
from facetree.data import synthetic_dataset
from facetree.model import SHARED_PREFIXES, FaceTreeNet
from facetree.tensor import Tensor, backward
from facetree.training import (Checkpoint, OptimizerState, Trainer, batch_indices, clip_gradients, compute_losses,
                               dataset_mean_shape, init_multitask, multistep_schedule, pretrain_classification,
                               sgd_step, train_multitask)


@pytest.fixture
def toy(tiny_config):
    return synthetic_dataset(24, tiny_config, 0)


def test_sgd_zero_gradient_decays_velocity():
    p = {"a": Tensor(np.array([1.0, 2.0]))}
    st = OptimizerState(0.1, 0.9, velocity={"a": np.array([1.0, -1.0])})
    p["a"].grad = np.zeros(2)
    sgd_step(p, st)
    np.testing.assert_allclose(st.velocity["a"], [0.9, -0.9])
    np.testing.assert_allclose(p["a"].data, [1.9, 1.1])
    q = {"b": Tensor(np.array([3.0]))}
    q["b"].grad = np.zeros(1)
    sgd_step(q, OptimizerState(0.1, 0.9))
    assert q["b"].data[0] == 3.0


def test_sgd_scalar_step():
    p = {"a": Tensor(np.array(1.0))}
    sgd_step(p, OptimizerState(0.1, 0.0), grads={"a": np.array(1.0)})
    assert p["a"].data == pytest.approx(0.9)


def test_sgd_lr_zero_is_noop(rng):
    p = {"a": Tensor(rng.normal(size=(3, 3)))}
    before = p["a"].data.copy()
    sgd_step(p, OptimizerState(0.0, 0.9), grads={"a": rng.normal(size=(3, 3))})
    assert np.array_equal(p["a"].data, before)


def test_quadratic_bowl_converges(rng):
    A = np.diag([1.0, 3.0, 0.5])
    target = np.array([1.0, -2.0, 0.5])
    p = {"x": Tensor(np.zeros(3), requires_grad=True)}
    st = OptimizerState(0.1, 0.9)
    for it in range(1000):
        p["x"].grad = None
        d = p["x"] - Tensor(target)
        backward((d * Tensor(np.diag(A)) * d).sum() * 0.5)
        sgd_step(p, st, it)
    assert np.abs(p["x"].data - target).max() < 1e-6


def test_multistep_schedule():
    sched = multistep_schedule(100)
    assert sched[0] == (60, pytest.approx(0.1)) and sched[1] == (85, pytest.approx(0.01))
    st = OptimizerState(1.0, schedule=sched)
    assert st.lr_at(59) == 1.0 and st.lr_at(60) == pytest.approx(0.1) and st.lr_at(99) == pytest.approx(0.01)


def test_batch_indices_cover_each_epoch():
    seen = np.concatenate([batch_indices(20, 5, i, 0) for i in range(4)])
    assert sorted(seen) == list(range(20))
    assert np.array_equal(batch_indices(20, 5, 2, 0), batch_indices(20, 5, 2, 0))


def test_clip_gradients():
    p = {"a": Tensor(np.zeros(2)), "b": Tensor(np.zeros(1))}
    p["a"].grad, p["b"].grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_gradients(p, 1.0) == pytest.approx(5.0)
    assert np.sqrt((p["a"].grad ** 2).sum() + (p["b"].grad ** 2).sum()) == pytest.approx(1.0)


def test_pretraining_loss_decreases(tiny_config, toy):
    net = FaceTreeNet(tiny_config, seed=0, multitask=False)
    tr = Trainer(net, toy, TrainConfig(learning_rate=0.05, batch_size=8), 80)
    tr.run()
    losses = [h[0] for h in tr.history]
    assert np.mean(losses[-10:]) < 0.7 * np.mean(losses[:10])


def test_training_is_bit_reproducible(tiny_config, toy):
    tc = TrainConfig(learning_rate=0.001, batch_size=4, pretrain_iterations=5, multitask_iterations=5, seed=2)
    a = train_multitask(toy, tiny_config, tc, pretrain_classification(toy, tiny_config, tc))
    b = train_multitask(toy, tiny_config, tc, pretrain_classification(toy, tiny_config, tc))
    assert a.to_bytes() == b.to_bytes()


def test_checkpoint_load_save_is_bit_identical(tiny_config, toy, tmp_path):
    tc = TrainConfig(learning_rate=0.01, batch_size=4, multitask_iterations=3)
    ck = train_multitask(toy, tiny_config, tc, None)
    path = tmp_path / "m.ckpt"
    ck.save(path)
    again = Checkpoint.load(path)
    assert again.to_bytes() == path.read_bytes()
    assert again.kind == "multitask" and again.iteration == 3
    assert np.array_equal(again.mean_shape.coords, ck.mean_shape.coords.astype(np.float32))
    net = again.build_model()
    for k, v in ck.tensors.items():
        assert np.array_equal(net.state_dict()[k], v)
    with pytest.raises(ValueError):
        Checkpoint.from_bytes(b"garbage")


def test_handoff_keeps_shared_weights(tiny_config, toy):
    tc = TrainConfig(learning_rate=0.01, batch_size=4, pretrain_iterations=3)
    pre = pretrain_classification(toy, tiny_config, tc)
    net = init_multitask(pre, tiny_config, seed=9)
    state = net.state_dict()
    shared = [k for k in pre.tensors if k.startswith(SHARED_PREFIXES)]
    assert shared
    for k in shared:
        assert np.array_equal(state[k], pre.tensors[k])


def test_zero_auxiliary_weights_reproduce_pretraining_step(tiny_config, toy):
    tc = TrainConfig(learning_rate=0.01, batch_size=4, pretrain_iterations=2)
    pre = pretrain_classification(toy, tiny_config, tc)
    a = pre.build_model()
    b = init_multitask(pre, tiny_config, seed=5)
    ms = dataset_mean_shape(toy, tiny_config.input_size)
    Trainer(a, toy, tc, 10).step()
    Trainer(b, toy, tc, 10, ms, (1, 0, 0, 0)).step()
    sa, sb = a.state_dict(), b.state_dict()
    for k in sa:
        np.testing.assert_allclose(sb[k], sa[k], atol=1e-6, rtol=0)


def test_invisible_keypoint_gets_no_coordinate_gradient(tiny_config, toy):
    cfg = dataclasses.replace(tiny_config, loss_weights=(0, 1, 0, 0))
    net = FaceTreeNet(cfg, seed=0)
    data = toy.subset(np.arange(4))
    data.visibility[:, 1] = 0
    data.points[:, 1] = np.nan
    net.zero_grad()
    backward(compute_losses(net, data, np.arange(4), dataset_mean_shape(toy, 16), cfg.loss_weights, 0, 0).total)
    g = net.params["fid.fc.w"].grad
    assert np.all(g[2:4] == 0) and np.all(net.params["fid.fc.b"].grad[2:4] == 0)
    assert np.any(g[:2] != 0)
