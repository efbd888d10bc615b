"""Training loop: losses, Adam on theta, EMA on phi, k-NN refresh, logging."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, Tensor
from .bigraph import (BipartiteGraph, NeighborIndex, build_neighbor_index, metapath_adjacency,
                      select_knn_all)
from .config import RunConfig
from .networks import ModelState, cluster_probs, ema_update, encode, project, tau_schedule
from .objectives import (LossWeights, embedding_adjacency, joint_cluster_distribution,
                         joint_node_distribution, loss_intra, loss_local, loss_total,
                         loss_uv_edges, mutual_information)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def dtype_for(precision: str):
    return np.float32 if precision == "f32" else np.float64


@dataclass
class Context:
    """Static structures derived once from the training graph."""

    graph: BipartiteGraph
    a_meta: np.ndarray
    index_u: NeighborIndex
    index_v: NeighborIndex
    weights: LossWeights


def build_context(cfg: RunConfig, graph: BipartiteGraph) -> Context:
    m = cfg.model
    dtype = dtype_for(cfg.precision)
    if cfg.ablate.no_meta:
        a_meta = np.ones((graph.n_u, graph.n_v), dtype=dtype)
    else:
        a_meta = metapath_adjacency(graph, m.n_hops, m.metapath_binarize).matrix.astype(dtype)
    weights = LossWeights(
        0.0 if cfg.ablate.no_uv else m.lambda_uv,
        0.0 if cfg.ablate.no_u else m.lambda_u,
        0.0 if cfg.ablate.no_v else m.lambda_v,
    )
    return Context(graph, a_meta, build_neighbor_index(graph, "u", m.n_knn),
                   build_neighbor_index(graph, "v", m.n_knn), weights)


@dataclass
class TrainRun:
    config: RunConfig
    graph: BipartiteGraph
    model: ModelState
    optimizer: AdamState
    epoch: int = 0
    seed: int = 0
    history: list = field(default_factory=list)
    epoch_log: list = field(default_factory=list)
    id_map: str = ""
    _ctx: Context | None = field(default=None, repr=False)

    @classmethod
    def create(cls, config: RunConfig, graph: BipartiteGraph, seed: int | None = None) -> "TrainRun":
        config.validate()
        seed = config.seed if seed is None else seed
        model = ModelState.create(config.model, graph.n_u, graph.n_v, seed=seed,
                                  dtype=dtype_for(config.precision))
        opt = AdamState.create(model.parameters(), lr=config.model.lr)
        return cls(config, graph, model, opt, seed=seed)

    @property
    def ctx(self) -> Context:
        if self._ctx is None:
            self._ctx = build_context(self.config, self.graph)
        return self._ctx


def _zero(dtype) -> Tensor:
    return Tensor(np.zeros((), dtype=dtype))


def compute_losses(run: TrainRun, edges: np.ndarray, knn_u: list | None, knn_v: list | None,
                   rng: np.random.Generator | None = None) -> dict[str, Tensor]:
    """Forward pass for one optimizer step; every entry is a scalar Tensor."""
    cfg, ab, ctx, state = run.config.model, run.config.ablate, run.ctx, run.model
    g = run.graph
    dtype = dtype_for(run.config.precision)
    U_t, V_t = encode(state, g, "theta")
    U_p, V_p = encode(state, g, "phi")
    Up = project(state.theta, "u", U_t, cfg.projector_kind)
    Vp = project(state.theta, "v", V_t, cfg.projector_kind)
    w = ctx.weights

    l_uv = loss_uv_edges(Up, Vp, U_p, V_p, edges) if w.lambda_uv > 0 else _zero(dtype)
    l_u = loss_intra(Up, U_p, edges[:, 0], knn_u) if w.lambda_u > 0 else _zero(dtype)
    l_v = loss_intra(Vp, V_p, edges[:, 1], knn_v) if w.lambda_v > 0 else _zero(dtype)
    l_loc = loss_local(l_uv, l_u, l_v, w)

    su = sv = None
    if cfg.global_sample and rng is not None:
        su = np.sort(rng.choice(g.n_u, min(cfg.global_sample, g.n_u), replace=False))
        sv = np.sort(rng.choice(g.n_v, min(cfg.global_sample, g.n_v), replace=False))
    p_uv, joint = global_distributions(run, (U_t, V_t, U_p, V_p, Up, Vp), su, sv)
    mi = mutual_information(joint)
    l_glb = _zero(dtype) if ab.no_glb else ad.scale(mi, -1.0)
    return {"L_uv": l_uv, "L_u": l_u, "L_v": l_v, "L_loc": l_loc, "L_glb": l_glb,
            "I_KL": mi, "L": loss_total(l_loc, l_glb)}


def global_distributions(run: TrainRun, encoded=None, su=None, sv=None):
    """p(u,v) and p(k,l) for the current parameters.

    ``encoded`` reuses (U_theta, V_theta, U_phi, V_phi, U_proj, V_proj) from
    a forward pass; ``su``/``sv`` restrict both to node subsets.
    """
    cfg, ab, state, g = run.config.model, run.config.ablate, run.model, run.graph
    if encoded is None:
        U_t, V_t = encode(state, g, "theta")
        U_p, V_p = encode(state, g, "phi")
        encoded = (U_t, V_t, U_p, V_p, project(state.theta, "u", U_t, cfg.projector_kind),
                   project(state.theta, "v", V_t, cfg.projector_kind))
    U_t, V_t, U_p, V_p, Up, Vp = encoded
    meta = run.ctx.a_meta
    if su is not None:
        U_t, V_t = ad.gather_rows(U_t, su), ad.gather_rows(V_t, sv)
        U_p, V_p = ad.gather_rows(U_p, su), ad.gather_rows(V_p, sv)
        Up, Vp = ad.gather_rows(Up, su), ad.gather_rows(Vp, sv)
        meta = meta[np.ix_(su, sv)]
    if ab.no_emb:
        a_emb = Tensor(np.ones(meta.shape, dtype=meta.dtype))
    else:
        a_emb = embedding_adjacency(U_t, V_t, U_p, V_p, cfg.alpha,
                                    "relu" if ab.relu_delta else "abs", not ab.no_filter)
    p_uv = joint_node_distribution(meta, a_emb)
    joint = joint_cluster_distribution(cluster_probs(state.theta, "u", Up),
                                       cluster_probs(state.theta, "v", Vp), p_uv)
    return p_uv, joint


def refresh_knn(run: TrainRun) -> tuple[list | None, list | None]:
    """Top-k same-side peers from the current online/target encoder outputs."""
    w, ab = run.ctx.weights, run.config.ablate
    if w.lambda_u <= 0 and w.lambda_v <= 0:
        return None, None
    U_t, V_t = encode(run.model, run.graph, "theta")
    U_p, V_p = encode(run.model, run.graph, "phi")
    kw = dict(use_aa=not ab.no_saa, use_emb=not ab.no_semb)
    knn_u = select_knn_all(run.ctx.index_u, U_t, U_p, **kw) if w.lambda_u > 0 else None
    knn_v = select_knn_all(run.ctx.index_v, V_t, V_p, **kw) if w.lambda_v > 0 else None
    return knn_u, knn_v


def edge_batches(run: TrainRun, epoch: int) -> list[np.ndarray]:
    edges = run.graph.edges
    size = run.config.model.batch_edges
    if not size or size >= len(edges):
        return [np.asarray(edges)]
    rng = np.random.default_rng([run.seed, epoch])
    perm = rng.permutation(len(edges))
    return [np.asarray(edges[perm[i:i + size]]) for i in range(0, len(edges), size)]


def train_step(run: TrainRun, edges, knn_u, knn_v, rng=None) -> dict[str, float]:
    params = run.model.parameters()
    with Tape() as tape:
        losses = compute_losses(run, edges, knn_u, knn_v, rng)
    values = {k: float(v.data) for k, v in losses.items()}
    if not all(math.isfinite(v) for v in values.values()):
        raise TrainingError(f"non-finite loss at epoch {run.epoch}: {values}")
    grads = ad.backward(tape, losses["L"])
    ad.adam_step(run.optimizer, params, grads)
    return values


def train(run: TrainRun, epochs: int | None = None,
          on_epoch: Callable[[TrainRun, dict], None] | None = None) -> TrainRun:
    """Run epochs ``run.epoch .. epochs-1`` (default: the configured count)."""
    cfg = run.config.model
    total = cfg.epochs if epochs is None else epochs
    while run.epoch < total:
        epoch = run.epoch
        t0 = time.perf_counter()
        knn_u, knn_v = refresh_knn(run)
        batches = edge_batches(run, epoch)
        rng = np.random.default_rng([run.seed, epoch, 1])
        step_values = []
        for i, batch in enumerate(batches):
            values = train_step(run, batch, knn_u, knn_v, rng)
            if cfg.ema_per_step:
                ema_update(run.model, tau_schedule(epoch + i / len(batches), cfg.epochs, cfg.tau_init))
            values["tau"] = run.model.ema_tau if cfg.ema_per_step else tau_schedule(epoch, cfg.epochs, cfg.tau_init)
            run.history.append(dict(epoch=epoch, step=i, **values))
            step_values.append(values)
        if not cfg.ema_per_step:
            ema_update(run.model, tau_schedule(epoch, cfg.epochs, cfg.tau_init))
        run.epoch += 1
        line = {
            "epoch": epoch,
            "L_loc": float(np.mean([v["L_loc"] for v in step_values])),
            "L_glb": float(np.mean([v["L_glb"] for v in step_values])),
            "I_KL": float(np.mean([v["I_KL"] for v in step_values])),
            "tau": run.model.ema_tau,
            "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3),
        }
        run.epoch_log.append(line)
        log.info(json.dumps(line))
        if on_epoch is not None:
            on_epoch(run, line)
    return run


# ------------------------------------------------------------- outputs


@dataclass
class Embeddings:
    U: np.ndarray
    V: np.ndarray
    P_u: np.ndarray
    P_v: np.ndarray


def infer(state: ModelState, g: BipartiteGraph) -> Embeddings:
    """Online (pre-projector) embeddings and cluster probabilities."""
    U, V = encode(state, g, "theta")
    kind = state.config.projector_kind
    P_u = cluster_probs(state.theta, "u", project(state.theta, "u", U, kind))
    P_v = cluster_probs(state.theta, "v", project(state.theta, "v", V, kind))
    return Embeddings(U.data, V.data, P_u.data, P_v.data)


def _write_matrix(path: Path, ids, mat: np.ndarray) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for raw, row in zip(ids, mat):
                fh.write(raw + "\t" + "\t".join(f"{x:.9g}" for x in row) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def emit_embeddings(state: ModelState, g: BipartiteGraph, out_dir) -> dict[str, Path]:
    """Write u/v embeddings and cluster probabilities as ``raw_id<TAB>values`` TSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    emb = infer(state, g)
    paths = {
        "u_emb": out_dir / "u_emb.tsv",
        "v_emb": out_dir / "v_emb.tsv",
        "u_clusters": out_dir / "u_clusters.tsv",
        "v_clusters": out_dir / "v_clusters.tsv",
    }
    _write_matrix(paths["u_emb"], g.u_ids, emb.U)
    _write_matrix(paths["v_emb"], g.v_ids, emb.V)
    _write_matrix(paths["u_clusters"], g.u_ids, emb.P_u)
    _write_matrix(paths["v_clusters"], g.v_ids, emb.P_v)
    return paths


def read_embeddings(path) -> tuple[list[str], np.ndarray]:
    ids, rows = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            ids.append(parts[0])
            rows.append([float(x) for x in parts[1:]])
    return ids, np.array(rows, dtype=np.float64)
