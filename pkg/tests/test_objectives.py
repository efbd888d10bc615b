import math

import numpy as np
import pytest

import oracles
from conftest import make_graph
from sterling import autodiff as ad
from sterling.autodiff import Tensor
from sterling.bigraph import metapath_adjacency
from sterling.objectives import (DegenerateDistributionError, JointClusterDistribution, LossWeights,
                                 embedding_adjacency, joint_cluster_distribution,
                                 joint_node_distribution, loss_intra, loss_local, loss_total,
                                 loss_uv, loss_uv_edges, mutual_information)


def T(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def unit_rows(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def random_simplex_rows(rng, n, k):
    x = rng.random((n, k)) + 1e-3
    return x / x.sum(axis=1, keepdims=True)


def dist(joint):
    j = T(joint)
    return JointClusterDistribution(j, ad.sum_axis(j, 1), ad.sum_axis(j, 0))


class TestLocal:
    def test_perfect_alignment_is_minus_two(self):
        rng = np.random.default_rng(0)
        u, v = unit_rows(rng.normal(size=(5, 4))), unit_rows(rng.normal(size=(5, 4)))
        assert float(loss_uv(T(v), T(u), T(u), T(v)).data) == pytest.approx(-2.0)

    def test_orthogonal_is_zero(self):
        a, b = T([[1.0, 0.0]]), T([[0.0, 1.0]])
        assert float(loss_uv(a, a, b, b).data) == pytest.approx(0.0, abs=1e-15)
        assert float(loss_uv(a, b, a, b).data) == pytest.approx(0.0, abs=1e-15)
        assert float(loss_uv(a, a, a, b).data) == pytest.approx(-1.0)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            loss_uv(T(np.zeros((0, 2))), T(np.zeros((0, 2))), T(np.zeros((0, 2))), T(np.zeros((0, 2))))

    @pytest.mark.parametrize("seed", range(5))
    def test_edge_form_matches_scalar_oracle(self, seed):
        rng = np.random.default_rng(seed)
        g = make_graph(seed)
        Up, Vp = rng.normal(size=(g.n_u, 4)), rng.normal(size=(g.n_v, 4))
        Ut, Vt = rng.normal(size=(g.n_u, 4)), rng.normal(size=(g.n_v, 4))
        edges = np.asarray(g.edges)
        got = float(loss_uv_edges(T(Up), T(Vp), T(Ut), T(Vt), edges).data)
        assert got == pytest.approx(oracles.loss_uv(Up, Vp, Ut, Vt, edges.tolist()), abs=1e-12)
        rows = float(loss_uv(T(Up[edges[:, 0]]), T(Vp[edges[:, 1]]), T(Ut[edges[:, 0]]), T(Vt[edges[:, 1]])).data)
        assert got == pytest.approx(rows, abs=1e-12)

    def test_invariant_to_row_rescaling(self):
        rng = np.random.default_rng(1)
        g = make_graph(1)
        Up, Vp = rng.normal(size=(g.n_u, 4)), rng.normal(size=(g.n_v, 4))
        Ut, Vt = rng.normal(size=(g.n_u, 4)), rng.normal(size=(g.n_v, 4))
        a = float(loss_uv_edges(T(Up), T(Vp), T(Ut), T(Vt), g.edges).data)
        Up[2] *= 17.0
        Vt[0] *= 0.01
        b = float(loss_uv_edges(T(Up), T(Vp), T(Ut), T(Vt), g.edges).data)
        assert a == pytest.approx(b, abs=1e-12)

    def test_intra_equal_neighbors_is_minus_two(self):
        x = unit_rows(np.ones((3, 4)))
        knn = [[1, 2], [0, 2], [0, 1]]
        assert float(loss_intra(T(x), T(x), [0, 1, 2], knn).data) == pytest.approx(-2.0)

    def test_intra_empty_knn_contributes_zero(self):
        x = unit_rows(np.ones((2, 3)))
        assert float(loss_intra(T(x), T(x), [0, 1], [[1], []]).data) == pytest.approx(-1.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_intra_matches_double_loop(self, seed):
        rng = np.random.default_rng(seed)
        n = 10
        proj, tgt = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
        knn = [sorted(rng.choice([j for j in range(n) if j != i], size=rng.integers(0, 4), replace=False).tolist())
               for i in range(n)]
        batch = rng.integers(0, n, size=15).tolist()
        got = float(loss_intra(T(proj), T(tgt), batch, knn).data)
        assert got == pytest.approx(oracles.loss_intra(proj, tgt, batch, knn), abs=1e-12)

    def test_local_combination(self):
        a, b, c = T(-1.3), T(-0.4), T(-0.9)
        assert float(loss_local(a, b, c, LossWeights(1, 0, 0)).data) == pytest.approx(-1.3)
        assert float(loss_local(a, b, c, LossWeights(0, 0, 0)).data) == 0.0
        assert float(loss_local(a, b, c, LossWeights(0.5, 2, 5)).data) == pytest.approx(-0.65 - 0.8 - 4.5)

    def test_weights_validated(self):
        with pytest.raises(ValueError):
            LossWeights(-1, 1, 1)
        with pytest.raises(ValueError):
            LossWeights(math.inf, 1, 1)

    def test_total(self):
        assert float(loss_total(T(0.0), T(0.0)).data) == 0.0
        assert float(loss_total(T(1.25), T(-3.0)).data) == pytest.approx(-1.75)


class TestEmbeddingAdjacency:
    def test_symmetric_case_is_abs_product(self):
        rng = np.random.default_rng(0)
        U, V = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
        out = embedding_adjacency(T(U), T(V), T(U), T(V), filter_noise=False).data
        np.testing.assert_allclose(out, np.abs(U @ V.T))

    def test_minus_infinity_keeps_all(self):
        rng = np.random.default_rng(1)
        U, V = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
        out = embedding_adjacency(T(U), T(V), T(U), T(V), alpha=-math.inf).data
        np.testing.assert_allclose(out, np.abs(U @ V.T))

    @pytest.mark.parametrize("alpha", [-1.0, 0.0, 0.5])
    def test_matches_elementwise_oracle(self, alpha):
        rng = np.random.default_rng(2)
        Ut, Vt, Up, Vp = (rng.normal(size=s) for s in ((5, 3), (4, 3), (5, 3), (4, 3)))
        raw = np.array([[0.5 * (abs(sum(Ut[i] * Vp[j])) + abs(sum(Up[i] * Vt[j]))) for j in range(4)]
                        for i in range(5)])
        out = embedding_adjacency(T(Ut), T(Vt), T(Up), T(Vp), alpha=alpha).data
        np.testing.assert_allclose(out, oracles.threshold_filter(raw, alpha), atol=1e-12)

    def test_gradient_only_through_theta(self):
        rng = np.random.default_rng(3)
        Ut = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        Up = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        V = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.sum_all(embedding_adjacency(Ut, V, Up, V, alpha=-math.inf))
        g = ad.backward(tape, loss)
        assert np.any(g[Ut] != 0)
        np.testing.assert_array_equal(g[Up], 0.0)


class TestJointNode:
    def test_uniform(self):
        p = joint_node_distribution(np.ones((3, 4)), T(np.full((3, 4), 2.5)))
        np.testing.assert_allclose(p.matrix.data, np.full((3, 4), 1 / 12))

    def test_point_mass(self):
        meta = np.zeros((3, 3))
        meta[1, 2] = 4.0
        p = joint_node_distribution(meta, T(np.ones((3, 3)))).matrix.data
        assert p[1, 2] == 1.0 and p.sum() == 1.0

    @pytest.mark.parametrize("seed", range(5))
    def test_sums_to_one_within_meta_support(self, seed):
        g = make_graph(seed)
        meta = metapath_adjacency(g, 1)
        rng = np.random.default_rng(seed)
        a_emb = ad.threshold_filter(T(rng.random((g.n_u, g.n_v))), 0.0)
        p = joint_node_distribution(meta, a_emb).matrix.data
        assert p.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(p >= 0)
        assert np.all(p[meta.matrix == 0] == 0)

    def test_degenerate(self):
        with pytest.raises(DegenerateDistributionError, match="alpha"):
            joint_node_distribution(np.ones((2, 2)), T(np.zeros((2, 2))))

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            joint_node_distribution(np.ones((2, 2)), T(np.ones((2, 3))))


class TestJointCluster:
    def test_point_mass_gives_outer_product(self):
        rng = np.random.default_rng(0)
        pu, pv = random_simplex_rows(rng, 3, 2), random_simplex_rows(rng, 4, 3)
        p = np.zeros((3, 4))
        p[0, 0] = 1.0
        d = joint_cluster_distribution(T(pu), T(pv), T(p))
        np.testing.assert_allclose(d.joint.data, np.outer(pu[0], pv[0]))

    def test_uniform(self):
        d = joint_cluster_distribution(T(np.full((4, 2), 0.5)), T(np.full((3, 3), 1 / 3)), T(np.full((4, 3), 1 / 12)))
        np.testing.assert_allclose(d.joint.data, np.full((2, 3), 1 / 6))

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_triple_loop(self, seed):
        rng = np.random.default_rng(seed)
        pu, pv = random_simplex_rows(rng, 6, 3), random_simplex_rows(rng, 5, 4)
        p = rng.random((6, 5))
        p /= p.sum()
        d = joint_cluster_distribution(T(pu), T(pv), T(p))
        np.testing.assert_allclose(d.joint.data, oracles.joint_cluster(pu, pv, p), atol=1e-12)
        np.testing.assert_allclose(d.marg_k.data.ravel(), d.joint.data.sum(axis=1))
        np.testing.assert_allclose(d.marg_l.data.ravel(), d.joint.data.sum(axis=0))

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            joint_cluster_distribution(T(np.ones((3, 2))), T(np.ones((4, 2))), T(np.ones((3, 5))))


class TestMutualInformation:
    def test_independent_is_zero(self):
        joint = np.outer([0.2, 0.8], [0.5, 0.3, 0.2])
        assert float(mutual_information(dist(joint)).data) == pytest.approx(0.0, abs=1e-12)

    def test_diagonal_is_ln2(self):
        assert float(mutual_information(dist(np.diag([0.5, 0.5]))).data) == pytest.approx(math.log(2))

    @pytest.mark.parametrize("n", [2, 3, 7])
    def test_permutation_is_ln_n(self, n):
        perm = np.eye(n)[np.random.default_rng(n).permutation(n)] / n
        assert float(mutual_information(dist(perm)).data) == pytest.approx(math.log(n))

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_double_sum(self, seed):
        rng = np.random.default_rng(seed)
        joint = rng.random((int(rng.integers(2, 6)), int(rng.integers(2, 6))))
        joint[rng.random(joint.shape) < 0.2] = 0.0
        joint[0, 0] += 0.1
        joint /= joint.sum()
        assert float(mutual_information(dist(joint)).data) == pytest.approx(oracles.mutual_information(joint), abs=1e-10)
