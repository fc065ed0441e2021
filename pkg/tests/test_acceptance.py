"""The nine end-to-end acceptance checks.  Each prints one ACCEPTANCE line.

Criteria 6 and 9 train the desk model and take most of the suite's runtime.
"""
import math
import time

import numpy as np
import pytest

from facetree import branches
from facetree.config import ModelConfig, TrainConfig
from facetree.data import synthetic_dataset
from facetree.evaluation import afw_mask, ced_curve, nme, pose_metrics, run_protocol, yaw_bin
from facetree.gradcheck import run_gradchecks
from facetree.losses import classification_loss, coordinate_loss, pose_loss, visibility_loss
from facetree.model import SHARED_PREFIXES, FaceTreeNet
from facetree.tensor import Tensor, backward, no_grad
from facetree.training import Trainer, dataset_mean_shape, init_multitask, pretrain_classification

from test_model import brute_force_messages, random_tree


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return emit


def test_1_gradient_integrity(report):
    t0 = time.perf_counter()
    results = run_gradchecks(seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.max_rel_error)
    ok = all(r.passed for r in results) and elapsed < 60
    report(1, ok, f"{len(results)} ops, worst {worst.name} {worst.max_rel_error:.2e}, {elapsed:.1f}s")


def test_2_loss_exactness(report):
    ln2 = classification_loss(Tensor(np.zeros((2, 1, 1))), np.array([0.0, 1.0]).reshape(2, 1, 1),
                              np.ones((1, 1))).item()
    ok = abs(ln2 - math.log(2)) < 1e-9
    y = Tensor(np.array([[1.0, 2.0, 7.0, 7.0]]), requires_grad=True)
    l1 = coordinate_loss(y, np.array([[0.0, 0.0, np.nan, np.nan]]), np.array([[1, 0]]))
    backward(l1)
    ok &= l1.item() == 5.0 and np.all(y.grad[0, 2:] == 0.0)
    ok &= pose_loss(Tensor(np.array([[10.0, 0, 0]])), np.zeros((1, 3))).item() == 100.0
    ok &= visibility_loss(Tensor(np.array([[1.0, 0.0]])), np.array([[0.0, 1.0]])).item() == 2.0
    rng = np.random.default_rng(0)
    logits = Tensor(rng.normal(size=(1, 3, 5, 5)), requires_grad=True)
    lab = np.moveaxis(np.eye(3)[rng.integers(0, 3, (1, 5, 5))], -1, 1)
    mask = (rng.random((1, 5, 5)) < 0.5).astype(float)
    backward(classification_loss(logits, lab, mask))
    ok &= bool(np.all(logits.grad[np.broadcast_to(mask[:, None] == 0, logits.shape)] == 0.0))
    report(2, ok, f"ln2 error {abs(ln2 - math.log(2)):.1e}")


def test_3_shape_contract(report):
    full = ModelConfig(width_factor=0.25, branch_channels=2, branch_up_channels=2)
    net = FaceTreeNet(full, multitask=False)
    with no_grad():
        maps = net.response_maps(net.encode_image(Tensor(np.zeros((1, 3, 224, 224), np.float32)), "infer"), "infer")
        desk = FaceTreeNet(ModelConfig.desk())(np.zeros((1, 3, 64, 64), np.float32), "infer").logits
    ok = maps.shape == (1, 22, 224, 224) and desk.shape == (1, 6, 64, 64)
    report(3, ok, f"full {maps.shape[1:]}, desk {desk.shape[1:]}")


def test_4_message_passing_oracle(report):
    worst = 0.0
    for seed in range(100):
        r = np.random.default_rng(seed)
        n = int(r.integers(2, 9))
        root, edges = random_tree(r, n)
        tree = branches.KeypointTree(tuple(f"k{i}" for i in range(n)), root, edges)
        schedule = ("root_to_leaves", "bidirectional")[seed % 2]
        c, s = int(r.integers(1, 4)), int(r.integers(3, 7))
        stems = [r.normal(size=(c, s, s)) for _ in range(n + 1)]
        kernels, params = {}, {}
        for prefix, i, j in branches.message_edges(tree, schedule):
            w, b = r.normal(size=(c, c, 3, 3)) * 0.5, r.normal(size=c)
            kernels[(prefix.split(".")[0], i, j)] = (w, b)
            params[f"{prefix}.w"], params[f"{prefix}.b"] = Tensor(w), Tensor(b)
        got = branches.pass_messages([Tensor(x[None]) for x in stems], tree, params, schedule)
        ref = brute_force_messages(stems[:n], n, root, edges, kernels, schedule)
        worst = max(worst, max(np.abs(got[k].data[0] - ref[k]).max() for k in range(n)))
    tree = branches.default_tree(21)
    zero = branches.init_messages(tree, ModelConfig(branch_channels=2))
    stems = [Tensor(np.random.default_rng(1).normal(size=(1, 2, 4, 4))) for _ in range(22)]
    identity = all(np.array_equal(a.data, b.data) for a, b in zip(stems, branches.pass_messages(stems, tree, zero)))
    report(4, worst < 1e-6 and identity, f"max abs diff {worst:.1e} over 100 trees, zero-kernel identity {identity}")


def test_5_routing_switch(report):
    cfg = ModelConfig.desk()
    net = FaceTreeNet(cfg, seed=0)
    rng = np.random.default_rng(0)
    for k in net.params:
        if k.startswith("route."):
            net.params[k].data[...] = rng.normal(0, 0.5, net.params[k].shape)
    x = rng.random((1, 3, 64, 64)).astype(np.float32)
    code = net.encode_image(Tensor(x), "infer")

    def maps_for(pose_image):
        from facetree import backbone
        from facetree.blocks import subparams
        with no_grad():
            _, pose_code = net.pose_forward(Tensor(pose_image), "infer")
            routed = backbone.apply_routing(code, pose_code, subparams(net.params, "route"))
            return net.response_maps(routed, "infer").data

    p1, p2 = rng.random((2, 1, 3, 64, 64)).astype(np.float32)
    diff = float(np.linalg.norm(maps_for(p1) - maps_for(p2)))
    for k in net.params:
        if k.startswith("route."):
            net.params[k].data[...] = 0
    same = np.array_equal(maps_for(p1), maps_for(p2))
    report(5, diff > 0 and same, f"random-weight difference norm {diff:.3g}, zero-weight bit-identical {same}")


def test_7_metric_oracles(report):
    rng = np.random.default_rng(7)
    worst = 0.0
    monotone = True
    for _ in range(1000):
        n, L = int(rng.integers(1, 20)), int(rng.integers(2, 22))
        gt = rng.uniform(0, 200, (n, L, 2))
        pred = gt + rng.normal(0, rng.uniform(0.5, 10), (n, L, 2))
        vis = rng.integers(0, 2, (n, L))
        vis[:, 0] = 1
        size = rng.uniform(30, 200, n)
        errs = np.array([nme(pred[i], gt[i], vis[i], size[i]) for i in range(n)])
        ref = np.array([np.mean([np.hypot(*(pred[i, k] - gt[i, k])) for k in range(L) if vis[i, k]]) / size[i]
                        for i in range(n)])
        worst = max(worst, np.abs(errs - ref).max())
        ts = np.sort(rng.uniform(0, 0.2, 8))
        curve = [f for _, f in ced_curve(errs, ts)]
        worst = max(worst, max(abs(f - np.mean(ref <= t)) for f, t in zip(curve, ts)))
        monotone &= all(0 <= a <= b <= 1 for a, b in zip(curve, curve[1:]))
        p, g = rng.uniform(-90, 90, (n, 3)), rng.uniform(-90, 90, (n, 3))
        mae, acc = pose_metrics(p, g)
        rounded = np.array([[15 * math.floor(abs(v) / 15 + 0.5) * (1 if v >= 0 else -1) for v in row] for row in p])
        worst = max(worst, np.abs(mae - np.abs(p - g).mean(0)).max(),
                    np.abs(acc - (np.abs(rounded - g) <= 15).mean(0)).max())
    bins_ok = ([yaw_bin(v) for v in (0, 29.9, 30, 45, -45, 60, 89, 90)]
               == ["[0,30]", "[0,30]", "[30,60]", "[30,60]", "[30,60]", "[60,90]", "[60,90]", "[60,90]"])
    afw_ok = list(afw_mask([[0, 0, 140, 200], [0, 0, 200, 140], [0, 0, 151, 151], [0, 0, 150, 300]])) == \
        [False, False, True, False]
    cfg = ModelConfig(input_size=16, num_keypoints=5, branch_stages=2, stage_widths=(8, 12), branch_channels=4,
                      branch_up_channels=4, head_width=8)
    data = synthetic_dataset(6, cfg, 0)
    data.boxes[:, 2:] = [[140, 200], [200, 200], [151, 160], [300, 150], [160, 160], [10, 10]]
    net = FaceTreeNet(cfg)
    kept = run_protocol(net, data, "afw", dataset_mean_shape(data, 16)).count
    ok = worst < 1e-9 and monotone and bins_ok and afw_ok and kept == 3
    report(7, ok, f"max deviation {worst:.1e} over 1000 sets, yaw bins {bins_ok}, afw kept {kept}/6")


def test_8_handoff(report):
    cfg = ModelConfig.desk()
    data = synthetic_dataset(32, cfg, 3)
    tc = TrainConfig(learning_rate=0.01, pretrain_iterations=3)
    pre = pretrain_classification(data, cfg, tc)
    multi = init_multitask(pre, cfg, seed=11)
    state = multi.state_dict()
    shared = [k for k in pre.tensors if k.startswith(SHARED_PREFIXES) or k.startswith("stats:")]
    identical = all(np.array_equal(state[k], pre.tensors[k]) for k in shared)
    a = pre.build_model()
    Trainer(a, data, tc, 100).step()
    Trainer(multi, data, tc, 100, dataset_mean_shape(data, 64), (1, 0, 0, 0)).step()
    after = multi.state_dict()
    dev = max(float(np.abs(after[k] - v).max()) for k, v in a.state_dict().items())
    report(8, identical and dev < 1e-6, f"{len(shared)} shared tensors identical {identical}, update deviation {dev:.1e}")


def test_6_desk_end_to_end(report):
    from facetree.experiments import DeskSettings, run_desk

    result = run_desk(seed=0, settings=DeskSettings())
    ok = result.mean_nme < 0.05 and bool(np.all(result.pose_mae < 10)) and result.seconds < 30 * 60
    report(6, ok, result.line())


def test_9_message_passing_ablation(report):
    from facetree.experiments import ABLATION_SETTINGS, run_ablation

    pairs = run_ablation((0, 1, 2), ABLATION_SETTINGS)
    margins = [100 * (off.mean_nme - full.mean_nme) for full, off in pairs]
    detail = ", ".join(f"seed {full.seed}: {100 * full.mean_nme:.2f}% vs {100 * off.mean_nme:.2f}% "
                       f"(margin {m:+.2f} pp)" for (full, off), m in zip(pairs, margins))
    report(9, all(m > 0 for m in margins), detail)
