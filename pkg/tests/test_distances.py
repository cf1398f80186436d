import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from adsvfd.distances import (Cloud, SinkhornConfig, SinkhornConvergenceError, attachment,
                              chamfer, chamfer_normals, chamfer_point_to_plane, chamfer_weighted,
                              local_distances, nearest_neighbors, sinkhorn_divergence, summarize)
from adsvfd.geometry import WeightedPointCloud
from conftest import random_cloud


def wpc(points, weights=None, normals=None):
    p = np.asarray(points, dtype=float)
    w = np.full(len(p), 1 / len(p)) if weights is None else weights
    return WeightedPointCloud(p, w, normals)


# hand examples

def test_nearest_examples():
    r = nearest_neighbors(wpc([[0, 0, 0]]), wpc([[1, 0, 0], [2, 0, 0]]))
    assert r.index.tolist() == [0] and r.squared_distance.tolist() == [1.0]
    Yp = np.zeros((8, 3))
    Yp[:] = [5, 5, 5]
    Yp[3] = [1, 0, 0]
    Yp[7] = [-1, 0, 0]
    assert nearest_neighbors(wpc([[0, 0, 0]]), wpc(Yp)).index.tolist() == [3]
    dup = wpc([[0, 0, 0], [0, 0, 0], [1, 1, 1]])
    r = nearest_neighbors(dup, dup)
    assert r.index.tolist() == [0, 0, 2]
    np.testing.assert_array_equal(r.squared_distance, 0)


def test_chamfer_examples():
    assert float(chamfer(wpc([[0, 0, 0]]), wpc([[1, 0, 0]]))) == 2.0
    assert float(chamfer(wpc([[0, 0, 0], [1, 0, 0]]), wpc([[0, 0, 0]]))) == 0.5
    a = wpc(np.random.default_rng(0).random((10, 3)))
    assert float(chamfer(a, a)) == 0.0


def test_weighted_chamfer_example():
    Y = wpc([[0, 0, 0]], [1.0])
    Yp = wpc([[1, 0, 0], [3, 0, 0]], [0.75, 0.25])
    assert float(chamfer_weighted(Y, Yp)) == pytest.approx(4.0, abs=1e-15)
    c = random_cloud(np.random.default_rng(1), 20)
    assert float(chamfer_weighted(c, c)) == 0.0


def test_normal_chamfer_examples():
    a = wpc([[0, 0, 0]], normals=[[0, 0, 1.0]])
    b = wpc([[0, 0, 0]], normals=[[0, 0, -1.0]])
    assert float(chamfer_normals(a, b, 1e-2)) == pytest.approx(0.04, abs=1e-15)
    c = random_cloud(np.random.default_rng(2), 15, normals=True)
    # 1 - n.n rounds to about 1e-17 for unit normals
    assert float(chamfer_normals(c, c)) < 1e-30
    d = random_cloud(np.random.default_rng(3), 15, normals=True)
    assert float(chamfer_normals(c, d, 0.0)) == pytest.approx(float(chamfer(c, d)), rel=1e-14)
    with pytest.raises(ValueError, match="normals"):
        chamfer_normals(wpc([[0, 0, 0]]), a)


def test_point_to_plane_examples():
    a = wpc([[0, 0, 0]], normals=[[0, 0, 1.0]])
    b = wpc([[1, 0, 0]], normals=[[0, 0, 1.0]])
    assert float(chamfer_point_to_plane(a, b)) == 0.0
    a = wpc([[0, 0, 0]], normals=[[1.0, 0, 0]])
    b = wpc([[1, 0, 0]], normals=[[1.0, 0, 0]])
    assert float(chamfer_point_to_plane(a, b)) == pytest.approx(2.0)
    assert float(chamfer_point_to_plane(a, a)) == 0.0


def test_local_distance_example():
    fld, bld = local_distances(wpc([[0, 0, 0]]), wpc([[0, 3, 4]]))
    assert fld.tolist() == [5.0] and bld.tolist() == [5.0]
    c = random_cloud(np.random.default_rng(4), 30)
    fld, bld = local_distances(c, c)
    assert not fld.any() and not bld.any()
    s = summarize([1.0, 3.0], [2.0])
    assert s == {"fld_mean": 2.0, "fld_max": 3.0, "bld_mean": 2.0, "bld_max": 2.0}


def test_empty_cloud_rejected():
    with pytest.raises(ValueError, match="empty"):
        chamfer(Cloud(torch.zeros(0, 3)), Cloud(torch.zeros(1, 3)))


def test_sinkhorn_examples():
    a = wpc([[0, 0, 0]])
    b = wpc([[1, 0, 0]])
    assert float(sinkhorn_divergence(a, b)) == pytest.approx(1.0, abs=1e-6)
    c = random_cloud(np.random.default_rng(5), 20)
    assert abs(float(sinkhorn_divergence(c, c))) < 1e-8


def test_sinkhorn_permutation_oracle(rng):
    for _ in range(5):
        X, Y = rng.random((4, 3)), rng.random((4, 3))
        sd = float(sinkhorn_divergence(wpc(X), wpc(Y), SinkhornConfig(epsilon=1e-4)))
        assert sd == pytest.approx(oracles.ot_permutation(X, Y), abs=1e-4)


def test_sinkhorn_non_convergence_reports_residual(rng):
    cfg = SinkhornConfig(epsilon=1e-4, max_iters=1, tolerance=1e-15)
    with pytest.raises(SinkhornConvergenceError) as exc:
        sinkhorn_divergence(wpc(rng.random((10, 3))), wpc(rng.random((12, 3))), cfg)
    assert "residual" in str(exc.value)
    with pytest.raises(ValueError):
        SinkhornConfig(scaling=1.0)
    with pytest.raises(ValueError):
        SinkhornConfig(epsilon=0.0)


def test_attachment_dispatch(rng):
    a = random_cloud(rng, 12, normals=True)
    b = random_cloud(rng, 9, normals=True)
    assert float(attachment("CD", a, b)) == float(chamfer(a, b))
    assert float(attachment("cdw", a, b)) == float(chamfer_weighted(a, b))
    assert float(attachment("ncd", a, b, 0.5)) == float(chamfer_normals(a, b, 0.5))
    assert float(attachment("pcdw", a, b)) == float(chamfer_point_to_plane(a, b, True))
    with pytest.raises(ValueError):
        attachment("emd", a, b)


# brute-force oracles and properties

def test_chamfer_family_matches_scan(rng):
    for _ in range(40):
        a = random_cloud(rng, int(rng.integers(1, 51)), normals=True)
        b = random_cloud(rng, int(rng.integers(1, 51)), normals=True)
        r = nearest_neighbors(a, b)
        scan = oracles.nn_scan(a.points, b.points)
        assert r.index.tolist() == [i for i, _ in scan]
        np.testing.assert_array_equal(r.squared_distance, [d for _, d in scan])
        np.testing.assert_allclose(float(chamfer(a, b)), oracles.cd(a.points, b.points), rtol=1e-12)
        np.testing.assert_allclose(float(chamfer_weighted(a, b)),
                                   oracles.cd(a.points, b.points, a.weights, b.weights), rtol=1e-12)
        np.testing.assert_allclose(float(chamfer_normals(a, b, 0.3)),
                                   oracles.ncd(a.points, a.normals, b.points, b.normals, 0.3),
                                   rtol=1e-12)
        np.testing.assert_allclose(float(chamfer_point_to_plane(a, b)),
                                   oracles.pcd(a.points, a.normals, b.points, b.normals),
                                   rtol=1e-12, atol=1e-300)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 200), st.integers(1, 200), st.integers(0, 2 ** 32 - 1))
def test_chamfer_symmetry_and_uniform_reduction(m, n, seed):
    r = np.random.default_rng(seed)
    a = random_cloud(r, m, weights="uniform")
    b = random_cloud(r, n, weights="uniform")
    ab, ba = float(chamfer(a, b)), float(chamfer(b, a))
    assert ab >= 0
    assert ab == pytest.approx(ba, rel=1e-14)
    assert float(chamfer_weighted(a, b)) == pytest.approx(ab, rel=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2 ** 32 - 1))
def test_sinkhorn_nonnegative_symmetric(m, n, seed):
    r = np.random.default_rng(seed)
    a = random_cloud(r, m)
    b = random_cloud(r, n)
    cfg = SinkhornConfig(epsilon=1e-2, max_iters=5000)
    ab = float(sinkhorn_divergence(a, b, cfg))
    ba = float(sinkhorn_divergence(b, a, cfg))
    assert ab >= -1e-8
    assert abs(ab - ba) < 1e-8


def test_chamfer_gradient_finite_differences(rng):
    X = torch.tensor(rng.random((15, 3)), requires_grad=True)
    Y = torch.tensor(rng.random((11, 3)))
    from adsvfd.distances import nearest_indices
    fi, _ = nearest_indices(X.detach(), Y)
    bi, _ = nearest_indices(Y, X.detach())

    def frozen(P):
        # chamfer with the argmin indices held fixed
        return ((P - Y[fi]) ** 2).sum(-1).mean() + ((Y - P[bi]) ** 2).sum(-1).mean()

    (g,) = torch.autograd.grad(chamfer(Cloud(X), Cloud(Y)), X)
    h = 1e-6
    fd = torch.zeros_like(X)
    with torch.no_grad():
        for i in range(X.shape[0]):
            for k in range(3):
                P = X.detach().clone()
                P[i, k] += h
                fp = frozen(P)
                P[i, k] -= 2 * h
                fd[i, k] = (fp - frozen(P)) / (2 * h)
    rel = (g - fd).abs().max() / fd.abs().max()
    assert rel < 1e-6


def test_sinkhorn_gradient_flows(rng):
    X = torch.tensor(rng.random((6, 3)), requires_grad=True)
    Y = torch.tensor(rng.random((5, 3)))
    (g,) = torch.autograd.grad(sinkhorn_divergence(Cloud(X), Cloud(Y), SinkhornConfig(1e-2)), X)
    assert torch.isfinite(g).all() and g.abs().sum() > 0
