import math

import numpy as np
import pytest

from conftest import make_graph, small_config
from sterling.autodiff import Tensor
from sterling.bigraph import BipartiteGraph
from sterling.config import ConfigError, ModelConfig
from sterling.networks import (ModelState, cluster_probs, encode, encode_params, ema_update,
                               encoder_param_names, project, tau_schedule)


def state_for(g, **model):
    return ModelState.create(small_config(**model).model, g.n_u, g.n_v, seed=0)


class TestEncode:
    def test_identity_weight_mean(self):
        g = BipartiteGraph(1, 2, [(0, 0), (0, 1)])
        params = {
            "enc.u.emb0": Tensor(np.zeros((1, 2))),
            "enc.v.emb0": Tensor(np.eye(2)),
            "enc.u.W1.1": Tensor(np.eye(2)),
            "enc.v.W1.1": Tensor(np.eye(2)),
        }
        U, _ = encode_params(params, g, layers=1, skip_connection=False)
        np.testing.assert_allclose(U.data, [[0.5, 0.5]])

    def test_isolated_node_is_zero(self):
        g = BipartiteGraph(3, 2, [(0, 0), (1, 1)])
        U, _ = encode(state_for(g), g)
        np.testing.assert_array_equal(U.data[2], 0.0)

    @pytest.mark.parametrize("layers,skip", [(1, False), (2, True), (3, False)])
    def test_shapes(self, layers, skip):
        g = make_graph(1)
        st = state_for(g, layers=layers, skip_connection=skip)
        for which in ("theta", "phi"):
            U, V = encode(st, g, which)
            assert U.shape == (g.n_u, 8) and V.shape == (g.n_v, 8)

    def test_deterministic(self):
        g = make_graph(2)
        a, b = state_for(g), state_for(g)
        for x, y in zip(encode(a, g), encode(b, g)):
            assert x.data.tobytes() == y.data.tobytes()

    def test_one_layer_sees_only_neighbors(self):
        g = make_graph(3, 8, 7, 0.3)
        st = state_for(g)
        U0, _ = encode(st, g)
        u = 0
        outsider = next(v for v in range(g.n_v) if v not in set(g.adj_u[u]))
        st.theta["enc.v.emb0"].data[outsider] += 10.0
        U1, _ = encode(st, g)
        np.testing.assert_array_equal(U0.data[u], U1.data[u])

    def test_phi_has_encoder_params_only(self):
        g = make_graph(0)
        st = state_for(g, projector_kind="mlp", skip_connection=True, layers=2)
        assert set(st.phi) == set(encoder_param_names(st.config))
        assert all(not t.requires_grad for t in st.phi.values())
        for k, t in st.phi.items():
            assert t.shape == st.theta[k].shape

    def test_init_ranges(self):
        g = make_graph(0)
        st = state_for(g)
        assert np.abs(st.theta["enc.u.emb0"].data).max() <= 1 / math.sqrt(8)
        bound = math.sqrt(6 / 16)
        assert np.abs(st.theta["enc.u.W1.1"].data).max() <= bound


class TestProject:
    def test_identity(self):
        x = Tensor(np.random.default_rng(0).normal(size=(4, 8)))
        assert project({}, "u", x, "identity") is x

    def test_mlp_zero_weights(self):
        d = 5
        params = {f"proj.u.{n}": Tensor(np.zeros(s)) for n, s in
                  (("W1", (d, d)), ("b1", (d,)), ("W2", (d, d)), ("b2", (d,)))}
        out = project(params, "u", Tensor(np.ones((3, d))), "mlp")
        np.testing.assert_array_equal(out.data, np.zeros((3, d)))

    def test_mlp_shape(self):
        g = make_graph(0)
        st = state_for(g, projector_kind="mlp")
        U, _ = encode(st, g)
        assert project(st.theta, "u", U, "mlp").shape == U.shape


class TestClusterProbs:
    def test_zero_weights_uniform(self):
        params = {"clu.v.W1": Tensor(np.zeros((4, 4))), "clu.v.b1": Tensor(np.zeros(4)),
                  "clu.v.W2": Tensor(np.zeros((4, 3))), "clu.v.b2": Tensor(np.zeros(3))}
        out = cluster_probs(params, "v", Tensor(np.random.default_rng(0).normal(size=(5, 4))))
        np.testing.assert_allclose(out.data, np.full((5, 3), 1 / 3))

    @pytest.mark.parametrize("seed", range(5))
    def test_rows_are_distributions(self, seed):
        g = make_graph(seed)
        st = ModelState.create(small_config().model, g.n_u, g.n_v, seed=seed)
        x = Tensor(np.random.default_rng(seed).normal(size=(g.n_u, 8)) * 10)
        out = cluster_probs(st.theta, "u", x).data
        assert np.all(out > 0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)

    def test_identical_inputs_identical_rows(self):
        g = make_graph(0)
        st = state_for(g)
        x = Tensor(np.tile(np.arange(8.0), (3, 1)))
        out = cluster_probs(st.theta, "u", x).data
        np.testing.assert_array_equal(out[0], out[1])


class TestEMA:
    def test_tau_one_keeps_phi(self):
        g = make_graph(0)
        st = state_for(g)
        for t in st.theta.values():
            t.data += 1.0
        before = {k: t.data.copy() for k, t in st.phi.items()}
        ema_update(st, 1.0)
        for k, t in st.phi.items():
            np.testing.assert_array_equal(t.data, before[k])

    def test_tau_zero_copies_theta(self):
        g = make_graph(0)
        st = state_for(g)
        for t in st.theta.values():
            t.data += 1.0
        ema_update(st, 0.0)
        for k, t in st.phi.items():
            np.testing.assert_array_equal(t.data, st.theta[k].data)

    def test_schedule_endpoints(self):
        assert tau_schedule(0, 10, 0.99) == pytest.approx(0.99, abs=1e-15)
        assert tau_schedule(10, 10, 0.99) == pytest.approx(1.0, abs=1e-15)
        assert tau_schedule(5, 10, 0.99) == pytest.approx(0.995, abs=1e-15)

    def test_geometric_decay(self):
        g = make_graph(0)
        st = state_for(g)
        for t in st.theta.values():
            t.data += 1.0
        gap = [np.linalg.norm(st.phi["enc.u.emb0"].data - st.theta["enc.u.emb0"].data)]
        for _ in range(5):
            ema_update(st, 0.9)
            gap.append(np.linalg.norm(st.phi["enc.u.emb0"].data - st.theta["enc.u.emb0"].data))
        np.testing.assert_allclose(np.array(gap[1:]) / np.array(gap[:-1]), 0.9, rtol=1e-9)

    def test_mismatch_is_config_error(self):
        g = make_graph(0)
        st = state_for(g)
        st.phi["enc.u.emb0"] = Tensor(np.zeros((2, 2)))
        with pytest.raises(ConfigError):
            ema_update(st, 0.5)


class TestModelConfig:
    @pytest.mark.parametrize("field,value", [("d", 0), ("layers", 0), ("n_clusters", 1),
                                             ("tau_init", 1.5), ("projector_kind", "conv")])
    def test_invariants(self, field, value):
        cfg = ModelConfig()
        setattr(cfg, field, value)
        with pytest.raises(ConfigError):
            cfg.validate()
