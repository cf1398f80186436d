import numpy as np
import pytest
import torch

import oracles
from adsvfd.geometry import WeightedPointCloud
from adsvfd.network import Architecture, VelocityNet, init_params, param_checksum
from adsvfd.training import (LossCache, TrainConfig, _cloud_tensors, adaptive_sample,
                             batch_partition, evaluate_shape, infer_code, total_loss, train,
                             write_history)
from builders import fibonacci_sphere

SMALL = Architecture(w_fa=8, l_fa=2, w_df=8, l_df=2, n_e=1, n_z=16, g_z=2)


# sampling

def test_adaptive_sample_examples():
    rng = np.random.default_rng(0)
    idx = adaptive_sample(4, (np.arange(4), np.array([3.0, 1.0, 2.0, 5.0])), 2, 1.0, rng)
    assert idx.tolist() == [3, 0]


def test_adaptive_sample_counts_and_uniform():
    rng = np.random.default_rng(1)
    loss = rng.random(5000)
    idx = adaptive_sample(5000, (np.arange(5000), loss), 2000, 0.15, rng)
    assert len(idx) == 2000 and len(set(idx.tolist())) == 2000
    assert set(idx[:300].tolist()) == set(oracles.top_k_oracle(loss, 300))
    a = adaptive_sample(100, (np.arange(100), np.arange(100.0)), 10, 0.0, np.random.default_rng(2))
    b = adaptive_sample(100, None, 10, 0.15, np.random.default_rng(2))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        adaptive_sample(10, None, 11, 0.1, rng)


def test_adaptive_sample_ties_go_to_lower_index():
    idx = adaptive_sample(6, (np.array([5, 1, 3, 0]), np.ones(4)), 4, 0.5,
                          np.random.default_rng(0))
    assert idx[:2].tolist() == [0, 1]


def test_batch_partition_covers_once():
    rng = np.random.default_rng(0)
    for n, B in ((1, 8), (7, 8), (17, 8), (20, 3)):
        parts = batch_partition(n, B, rng)
        flat = sorted(i for p in parts for i in p)
        assert flat == list(range(n))
        assert len(parts) == max(1, n // B)
        if n >= B:
            assert all(B <= len(p) < 2 * B for p in parts)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(a=1.0)
    with pytest.raises(ValueError):
        TrainConfig(lr_z=0.0)
    with pytest.raises(ValueError):
        TrainConfig(attachment="EMD")
    assert TrainConfig(attachment="ncd").attachment == "NCD"
    d = TrainConfig()
    assert (d.epochs, d.batch_size, d.M, d.a, d.lr_theta, d.w_z, d.w_v, d.w_theta) == \
        (500, 8, 2000, 0.15, 1e-3, 1e-3, 1e-4, 0.0)


# loss

def zero_net(arch=SMALL):
    net = VelocityNet(arch, dtype=torch.float64)
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    return net


def tensors(cloud):
    return _cloud_tensors(cloud, np.arange(cloud.size), torch.float64)


def test_total_loss_zero_case(rng):
    c = WeightedPointCloud(rng.random((30, 3)), np.full(30, 1 / 30))
    cfg = TrainConfig(w_z=0.0, w_v=0.0, dtype="float64")
    bl = total_loss(zero_net(), [torch.zeros(16, dtype=torch.float64)], [tensors(c)],
                    tensors(c), cfg)
    assert float(bl.total.detach()) == 0.0


def test_total_loss_code_penalty():
    arch = Architecture(w_fa=8, l_fa=1, w_df=8, l_df=2, n_e=0, n_z=256, g_z=2)
    c = WeightedPointCloud(np.random.default_rng(0).random((10, 3)), np.full(10, 0.1))
    cfg = TrainConfig(w_z=1e-3, dtype="float64")
    bl = total_loss(zero_net(arch), [torch.ones(256, dtype=torch.float64)], [tensors(c)],
                    tensors(c), cfg)
    assert bl.reg_z == pytest.approx(0.256, abs=1e-12)
    assert float(bl.total.detach()) == pytest.approx(0.256, abs=1e-12)


@pytest.mark.filterwarnings("ignore:Sinkhorn stopped")
def test_sd_attachment_disables_cache(rng):
    c = WeightedPointCloud(rng.random((12, 3)), np.full(12, 1 / 12))
    cfg = TrainConfig(attachment="SD", dtype="float64", sinkhorn_epsilon=1e-2)
    assert not cfg.pointwise
    bl = total_loss(zero_net(), [torch.zeros(16, dtype=torch.float64)], [tensors(c)],
                    tensors(c), cfg)
    assert bl.source_losses == [None] and bl.template_losses == [None]
    assert LossCache([None]).available


# training loop

def tiny_problem(n_shapes=2, n=80, seed=0):
    rng = np.random.default_rng(seed)
    u = fibonacci_sphere(n)
    tpl = WeightedPointCloud(0.5 + 0.3 * u, np.full(n, 1 / n))
    srcs = [WeightedPointCloud(0.5 + 0.3 * u * rng.uniform(0.8, 1.2, 3), np.full(n, 1 / n))
            for _ in range(n_shapes)]
    return srcs, tpl


def test_train_deterministic_with_a_zero():
    srcs, tpl = tiny_problem()
    cfg = TrainConfig(epochs=3, M=50, a=0.0, batch_size=1, dtype="float64")
    r1 = train(srcs, tpl, cfg, SMALL)
    r2 = train(srcs, tpl, cfg, SMALL)
    assert param_checksum(r1.net) == param_checksum(r2.net)
    assert torch.equal(r1.codes, r2.codes)
    assert [h["total"] for h in r1.history] == [h["total"] for h in r2.history]


def test_train_gradient_flow():
    srcs, tpl = tiny_problem(1)
    # w_z = 0 so any code change has to come through the interpolated grid
    cfg = TrainConfig(epochs=1, M=50, w_z=0.0, zero_head=False, dtype="float64")
    net0, codes0 = init_params(SMALL, 1, cfg.seed, torch.float64, zero_head=False)
    r = train(srcs, tpl, cfg, SMALL)
    changed = [not torch.equal(a, b) for a, b in zip(net0.parameters(), r.net.parameters())]
    assert any(changed)
    assert not torch.equal(codes0, r.codes)


def test_train_gradient_flow_from_zero_head():
    srcs, tpl = tiny_problem(1)
    cfg = TrainConfig(epochs=2, M=50, w_z=0.0, dtype="float64")
    net0, codes0 = init_params(SMALL, 1, cfg.seed, torch.float64)
    r1 = train(srcs, tpl, TrainConfig(**{**cfg.to_dict(), "epochs": 1}), SMALL)
    # the first step only moves the head; the second reaches hidden layers and codes
    assert torch.equal(codes0, r1.codes) and r1.net.head.weight.any()
    r2 = train(srcs, tpl, cfg, SMALL)
    assert not torch.equal(codes0, r2.codes)
    assert not torch.equal(net0.df[0].weight, r2.net.df[0].weight)


def test_train_history_and_checkpoint(tmp_path):
    srcs, tpl = tiny_problem()
    ck = tmp_path / "m.ckpt"
    rows = []
    r = train(srcs, tpl, TrainConfig(epochs=2, M=40, dtype="float64"), SMALL,
              checkpoint_path=ck, callback=lambda e, row: rows.append(e))
    assert ck.exists() and rows == [1, 2] and len(r.history) == 2
    write_history(tmp_path / "h.csv", r.history)
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0].startswith("epoch,total,direct,inverse") and len(lines) == 3
    with pytest.raises(ValueError):
        train([], tpl, TrainConfig(epochs=1))


@pytest.mark.slow
def test_identity_example():
    u = fibonacci_sphere(200)
    tpl = WeightedPointCloud(0.5 + 0.4 * u, np.full(200, 1 / 200))
    r = train([tpl], tpl, TrainConfig(epochs=100, dtype="float64"))
    d = evaluate_shape(r.net, r.codes[0], tpl, tpl)
    assert d["direct_fld_max"] < 1e-3 * tpl.diameter()
    assert d["inverse_fld_max"] < 1e-3 * tpl.diameter()


def ellipsoid_clouds(n_shapes, seed, n=500):
    """A spherical template followed by random ellipsoids centered in the unit cube.

    All clouds are linear images of one spiral sphere sampling, so ``M = n``
    uses every point and there is no subsampling floor.
    """
    rng = np.random.default_rng(seed)
    u = fibonacci_sphere(n)
    axes = [np.full(3, 0.35)] + [rng.uniform(0.2, 0.5, 3) for _ in range(n_shapes)]
    return [WeightedPointCloud(0.5 + u * a, np.full(n, 1 / n)) for a in axes]


@pytest.mark.slow
def test_ellipsoid_smoke():
    # reduced widths keep the run short; epochs and M follow the fixture
    arch = Architecture(w_fa=16, l_fa=2, w_df=32, l_df=3, n_e=2, n_z=64, g_z=2)
    clouds = ellipsoid_clouds(4, seed=0)
    r = train(clouds[1:], clouds[0], TrainConfig(epochs=300, M=500), arch)
    assert r.history[-1]["total"] < 0.1 * r.history[0]["total"]


# inference

def test_infer_zero_net_cannot_improve():
    srcs, tpl = tiny_problem(1)
    net = zero_net()
    before = param_checksum(net)
    cfg = TrainConfig(M=50, infer_adam_epochs=3, infer_lbfgs_epochs=1, infer_lbfgs_iters=2,
                      dtype="float64")
    res = infer_code(srcs[0], tpl, net, cfg)
    assert param_checksum(net) == before
    assert res.diagnostics == res.initial
    assert all(p.requires_grad for p in net.parameters())


def test_infer_freezes_parameters():
    srcs, tpl = tiny_problem(2)
    r = train(srcs, tpl, TrainConfig(epochs=2, M=50, dtype="float64"), SMALL)
    before = param_checksum(r.net)
    res = infer_code(srcs[1], tpl, r.net, TrainConfig(M=50, infer_adam_epochs=5,
                                                      infer_lbfgs_epochs=1,
                                                      infer_lbfgs_iters=3, dtype="float64"))
    assert param_checksum(r.net) == before
    assert res.code.shape == (16,) and len(res.losses) == 6
