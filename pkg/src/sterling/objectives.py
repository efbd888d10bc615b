"""Local bootstrap losses and the co-cluster mutual-information loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor
from .bigraph import MetaAdjacency

DEGENERATE_Z = 1e-12


class DegenerateDistributionError(ValueError):
    pass


@dataclass
class LossWeights:
    lambda_uv: float = 1.0
    lambda_u: float = 1.0
    lambda_v: float = 1.0

    def __post_init__(self):
        for name in ("lambda_uv", "lambda_u", "lambda_v"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


@dataclass
class JointNodeDistribution:
    matrix: Tensor
    z: float


@dataclass
class JointClusterDistribution:
    joint: Tensor
    marg_k: Tensor
    marg_l: Tensor


# ---------------------------------------------------------------- local


def loss_uv(u_proj: Tensor, v_proj: Tensor, u_tgt, v_tgt) -> Tensor:
    """-mean[cos(u~_theta, v_phi) + cos(v~_theta, u_phi)] over aligned edge rows."""
    if u_proj.shape[0] == 0:
        raise ValueError("loss_uv: empty batch")
    u_tgt, v_tgt = ad.stop_gradient(u_tgt), ad.stop_gradient(v_tgt)
    both = ad.add(ad.cosine_rows(u_proj, v_tgt), ad.cosine_rows(v_proj, u_tgt))
    return ad.scale(ad.mean_all(both), -1.0)


def paired_cosine_sum(proj: Tensor, target, weights) -> Tensor:
    """sum_{i,j} W[i,j] * cos(proj[i], target[j]) for a constant sparse W."""
    target_unit = ad.normalize_rows(ad.stop_gradient(target))
    return ad.sum_all(ad.hadamard(ad.normalize_rows(proj), ad.spmm(weights, target_unit)))


def edge_weight_matrix(edges, n_u: int, n_v: int) -> sp.csr_matrix:
    """|U| x |V| matrix holding 1/|batch| per listed edge."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(edges) == 0:
        raise ValueError("empty edge batch")
    w = np.full(len(edges), 1.0 / len(edges))
    return sp.csr_matrix((w, (edges[:, 0], edges[:, 1])), shape=(n_u, n_v))


def loss_uv_edges(U_proj: Tensor, V_proj: Tensor, U_tgt, V_tgt, edges) -> Tensor:
    """loss_uv over an edge list without materializing per-edge rows."""
    W = edge_weight_matrix(edges, U_proj.shape[0], V_proj.shape[0])
    total = ad.add(paired_cosine_sum(U_proj, V_tgt, W), paired_cosine_sum(V_proj, U_tgt, W.T.tocsr()))
    return ad.scale(total, -1.0)


def knn_weight_matrix(batch_nodes, knn: list, n: int) -> sp.csr_matrix:
    """W[a, b] = (1/|batch|) * (1/|kNN(a)|) summed over occurrences of a in the batch."""
    batch_nodes = np.asarray(batch_nodes, dtype=np.int64)
    if len(batch_nodes) == 0:
        raise ValueError("empty node batch")
    counts = np.bincount(batch_nodes, minlength=n)
    rows, cols, vals = [], [], []
    for a in np.flatnonzero(counts):
        peers = np.asarray(knn[a], dtype=np.int64)
        if len(peers) == 0:
            continue
        rows.append(np.full(len(peers), a))
        cols.append(peers)
        vals.append(np.full(len(peers), counts[a] / (len(batch_nodes) * len(peers))))
    if not rows:
        return sp.csr_matrix((n, n))
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))


def loss_intra(proj: Tensor, target, batch_nodes, knn: list) -> Tensor:
    """Same-side bootstrap loss, averaged over ``batch_nodes``.

    Each node contributes -(1/|kNN|) sum over its neighbors of
    cos(x~_theta, x'_phi) + cos(x~'_theta, x_phi); an empty kNN list
    contributes 0 but still counts toward the batch size.
    """
    W = knn_weight_matrix(batch_nodes, knn, proj.shape[0])
    total = ad.add(paired_cosine_sum(proj, target, W), paired_cosine_sum(proj, target, W.T.tocsr()))
    return ad.scale(total, -1.0)


def loss_local(l_uv, l_u, l_v, weights: LossWeights) -> Tensor:
    out = ad.scale(l_uv, weights.lambda_uv)
    out = ad.add(out, ad.scale(l_u, weights.lambda_u))
    return ad.add(out, ad.scale(l_v, weights.lambda_v))


# --------------------------------------------------------------- global


def embedding_adjacency(U_theta: Tensor, V_theta: Tensor, U_phi, V_phi, alpha: float = 0.0,
                        delta: str = "abs", filter_noise: bool = True) -> Tensor:
    """0.5 * [delta(U_theta V_phi^T) + delta(U_phi V_theta^T)], then zero weak entries."""
    act = {"abs": ad.abs_, "relu": ad.relu}[delta]
    U_phi, V_phi = ad.stop_gradient(U_phi), ad.stop_gradient(V_phi)
    a = act(ad.matmul(U_theta, ad.transpose(V_phi)))
    b = act(ad.matmul(U_phi, ad.transpose(V_theta)))
    A = ad.scale(ad.add(a, b), 0.5)
    return ad.threshold_filter(A, alpha) if filter_noise else A


def joint_node_distribution(a_meta, a_emb) -> JointNodeDistribution:
    """p(u, v) = A_meta * A_emb / Z."""
    meta = a_meta.matrix if isinstance(a_meta, MetaAdjacency) else a_meta
    meta = Tensor(np.asarray(getattr(meta, "data", meta)))
    a_emb = a_emb if isinstance(a_emb, Tensor) else Tensor(a_emb)
    if meta.shape != a_emb.shape:
        raise ad.ShapeError(f"A_meta {meta.shape} and A_emb {a_emb.shape} differ")
    raw = ad.hadamard(meta, a_emb)
    z = ad.sum_all(raw)
    if not float(z.data) > DEGENERATE_Z:
        raise DegenerateDistributionError(
            "p(u,v) has no mass left after filtering; lower the noise threshold alpha"
        )
    return JointNodeDistribution(ad.div(raw, z), float(z.data))


def joint_cluster_distribution(p_k_given_u: Tensor, p_l_given_v: Tensor, p_uv) -> JointClusterDistribution:
    """p(k,l) = P_u^T p(U,V) P_v, with its two marginals."""
    p = p_uv.matrix if isinstance(p_uv, JointNodeDistribution) else p_uv
    if p.shape != (p_k_given_u.shape[0], p_l_given_v.shape[0]):
        raise ad.ShapeError(
            f"p(u,v) {p.shape} incompatible with {p_k_given_u.shape} and {p_l_given_v.shape}"
        )
    joint = ad.matmul(ad.matmul(ad.transpose(p_k_given_u), p), p_l_given_v)
    return JointClusterDistribution(joint, ad.sum_axis(joint, 1), ad.sum_axis(joint, 0))


def mutual_information(d: JointClusterDistribution) -> Tensor:
    """I(K;L) in nats; 0 log 0 = 0 and logs are floored at 1e-12."""
    ratio = ad.sub(ad.sub(ad.log(d.joint), ad.log(d.marg_k)), ad.log(d.marg_l))
    return ad.sum_all(ad.hadamard(d.joint, ratio))


def loss_global(d: JointClusterDistribution) -> Tensor:
    return ad.scale(mutual_information(d), -1.0)


def loss_total(local, glb) -> Tensor:
    return ad.add(local, glb)
