import json

import numpy as np
import pytest

from conftest import make_graph, small_config
from sterling.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from sterling.datasets import planted_partition
from sterling.evalkit import cocluster_score
from sterling.objectives import DegenerateDistributionError
from sterling.trainer import (TrainingError, TrainRun, compute_losses, emit_embeddings, infer,
                              read_embeddings, refresh_knn, train)


def planted_run(epochs=30, seed=0, **model):
    ds = planted_partition(seed=0)
    cfg = small_config(**{"d": 16, "n_clusters": 2, "epochs": epochs, **model})
    return TrainRun.create(cfg, ds.graph, seed=seed), ds


def mean_pairwise_cosine(X, n=100, seed=0):
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(X), min(n, len(X)), replace=False)
    Z = X[idx] / np.maximum(np.linalg.norm(X[idx], axis=1, keepdims=True), 1e-12)
    C = Z @ Z.T
    off = ~np.eye(len(idx), dtype=bool)
    return float(C[off].mean())


def next_step_losses(run):
    knn_u, knn_v = refresh_knn(run)
    out = compute_losses(run, np.asarray(run.graph.edges), knn_u, knn_v)
    return {k: float(v.data) for k, v in out.items()}


class TestTrain:
    def test_zero_epochs_keeps_initial_state(self, graph):
        run = TrainRun.create(small_config(epochs=0), graph)
        before = {k: t.data.copy() for k, t in run.model.theta.items()}
        train(run)
        assert run.history == [] and run.epoch_log == [] and run.epoch == 0
        for k, t in run.model.theta.items():
            np.testing.assert_array_equal(t.data, before[k])

    def test_history_length_is_step_count(self, graph):
        run = train(TrainRun.create(small_config(epochs=4), graph))
        assert len(run.history) == 4 and len(run.epoch_log) == 4

    def test_minibatch_history_length(self):
        g = make_graph(3, 10, 9, 0.5)
        run = train(TrainRun.create(small_config(epochs=2, batch_edges=7), g))
        steps_per_epoch = -(-g.n_edges // 7)
        assert len(run.history) == 2 * steps_per_epoch
        assert len(run.epoch_log) == 2

    def test_epoch_log_fields(self, graph):
        run = train(TrainRun.create(small_config(epochs=2), graph))
        for i, line in enumerate(run.epoch_log):
            assert set(line) == {"epoch", "L_loc", "L_glb", "I_KL", "tau", "wall_ms"}
            assert line["epoch"] == i
            json.dumps(line)

    def test_tau_follows_schedule(self, graph):
        run = train(TrainRun.create(small_config(epochs=4, tau_init=0.9), graph))
        taus = [line["tau"] for line in run.epoch_log]
        np.testing.assert_allclose(taus, [0.9, 0.9 + 0.1 * (1 - np.cos(np.pi / 4)) / 2, 0.95,
                                          0.9 + 0.1 * (1 - np.cos(3 * np.pi / 4)) / 2])

    def test_losses_finite(self, graph):
        run = train(TrainRun.create(small_config(epochs=5, layers=2, skip_connection=True,
                                                 projector_kind="mlp", n_hops=2), graph))
        for h in run.history:
            assert all(np.isfinite(v) for v in h.values())

    def test_same_seed_identical_history(self, graph):
        a = train(TrainRun.create(small_config(epochs=3), graph, seed=5))
        b = train(TrainRun.create(small_config(epochs=3), graph, seed=5))
        assert a.history == b.history
        for k in a.model.theta:
            assert a.model.theta[k].data.tobytes() == b.model.theta[k].data.tobytes()

    def test_different_seed_differs(self, graph):
        a = train(TrainRun.create(small_config(epochs=1), graph, seed=1))
        b = train(TrainRun.create(small_config(epochs=1), graph, seed=2))
        assert a.history != b.history

    def test_phi_lags_theta(self, graph):
        run = train(TrainRun.create(small_config(epochs=3), graph))
        k = "enc.u.emb0"
        assert not np.array_equal(run.model.phi[k].data, run.model.theta[k].data)

    def test_f32_runs(self, graph):
        cfg = small_config(epochs=2)
        cfg.precision = "f32"
        run = train(TrainRun.create(cfg, graph))
        assert run.model.theta["enc.u.emb0"].data.dtype == np.float32
        assert np.isfinite(run.history[-1]["L"])

    def test_nan_aborts(self, graph):
        run = TrainRun.create(small_config(epochs=2), graph)
        run.model.theta["enc.u.emb0"].data[0, 0] = np.nan
        with pytest.raises((TrainingError, FloatingPointError)):
            train(run)

    def test_degenerate_distribution_names_alpha(self, graph):
        run = TrainRun.create(small_config(epochs=1, lambda_u=0.0, lambda_v=0.0), graph)
        for t in run.model.theta.values():
            t.data[...] = 0.0
        with pytest.raises(DegenerateDistributionError, match="alpha"):
            train(run)

    def test_on_epoch_callback(self, graph):
        seen = []
        train(TrainRun.create(small_config(epochs=3), graph), on_epoch=lambda r, line: seen.append(r.epoch))
        assert seen == [1, 2, 3]


class TestPlanted:
    def test_recovers_blocks(self):
        run, ds = planted_run(epochs=200, lr=5e-3, d=32, n_knn=5)
        train(run)
        emb = infer(run.model, run.graph)
        assert cocluster_score(emb.P_u, ds.labels_u).nmi >= 0.9
        assert cocluster_score(emb.P_v, ds.labels_v).nmi >= 0.9

    def test_no_collapse_without_intra_or_global(self):
        run, _ = planted_run(epochs=100, lr=5e-3, lambda_u=0.0, lambda_v=0.0)
        run.config.ablate.no_glb = True
        train(run)
        emb = infer(run.model, run.graph)
        assert mean_pairwise_cosine(emb.U) < 0.99
        assert mean_pairwise_cosine(emb.V) < 0.99


class TestCheckpoint:
    def test_resume_matches_uninterrupted(self, graph, tmp_path):
        full = train(TrainRun.create(small_config(epochs=4), graph))
        part = train(TrainRun.create(small_config(epochs=4), graph), epochs=2)
        save_checkpoint(tmp_path / "c.ckpt", part)
        resumed = load_checkpoint(tmp_path / "c.ckpt", graph)
        assert resumed.epoch == 2 and resumed.history == part.history
        assert next_step_losses(resumed) == next_step_losses(part)
        train(resumed)
        assert resumed.history == full.history
        for k in full.model.theta:
            assert resumed.model.theta[k].data.tobytes() == full.model.theta[k].data.tobytes()
        for k in full.model.phi:
            assert resumed.model.phi[k].data.tobytes() == full.model.phi[k].data.tobytes()

    def test_round_trip_state(self, graph, tmp_path):
        run = train(TrainRun.create(small_config(epochs=2, projector_kind="mlp"), graph))
        run.id_map = "ids.tsv"
        save_checkpoint(tmp_path / "c.ckpt", run)
        back = load_checkpoint(tmp_path / "c.ckpt", graph)
        assert back.config.to_dict() == run.config.to_dict()
        assert back.id_map == "ids.tsv" and back.seed == run.seed
        assert back.optimizer.step == run.optimizer.step
        for k in run.model.phi:
            np.testing.assert_array_equal(back.model.phi[k].data, run.model.phi[k].data)
        for a, b in zip(run.optimizer.m, back.optimizer.m):
            np.testing.assert_array_equal(a, b)

    def test_wrong_graph_rejected(self, graph, tmp_path):
        run = TrainRun.create(small_config(epochs=0), graph)
        save_checkpoint(tmp_path / "c.ckpt", run)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c.ckpt", make_graph(0, 9, 7))

    def test_corrupt_file_rejected(self, tmp_path):
        (tmp_path / "bad.ckpt").write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "bad.ckpt", make_graph(0))


class TestEmit:
    def test_round_trip(self, tmp_path):
        g = make_graph(1)
        run = train(TrainRun.create(small_config(d=2, epochs=2), g))
        paths = emit_embeddings(run.model, g, tmp_path)
        emb = infer(run.model, g)
        for key, mat, ids in (("u_emb", emb.U, g.u_ids), ("v_emb", emb.V, g.v_ids),
                              ("u_clusters", emb.P_u, g.u_ids), ("v_clusters", emb.P_v, g.v_ids)):
            got_ids, got = read_embeddings(paths[key])
            assert got_ids == list(ids)
            assert got.shape == mat.shape
            np.testing.assert_allclose(got, mat, rtol=1e-8, atol=1e-300)
        for key in ("u_clusters", "v_clusters"):
            np.testing.assert_allclose(read_embeddings(paths[key])[1].sum(axis=1), 1.0, atol=1e-6)

    def test_row_counts(self, tmp_path):
        g = make_graph(2)
        run = TrainRun.create(small_config(d=2, epochs=0), g)
        paths = emit_embeddings(run.model, g, tmp_path)
        assert len(paths["u_emb"].read_text().splitlines()) == g.n_u
        assert len(paths["v_emb"].read_text().splitlines()) == g.n_v
        assert len(paths["u_emb"].read_text().splitlines()[0].split("\t")) == 3

    def test_unwritable_path_named(self, tmp_path):
        g = make_graph(2)
        run = TrainRun.create(small_config(d=2, epochs=0), g)
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError, match="file"):
            emit_embeddings(run.model, g, blocker / "sub")
