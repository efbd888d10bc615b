"""Downstream evaluation: top-K recommendation, link prediction, co-clustering."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from .bigraph import BipartiteGraph


# ------------------------------------------------------- recommendation


@dataclass
class RankedList:
    user: int
    items: np.ndarray
    relevant: set


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def rank_items(U: np.ndarray, V: np.ndarray, train: BipartiteGraph, test_edges,
               top: int = 100) -> list[RankedList]:
    """Cosine-ranked items per test user, training items excluded."""
    test_edges = np.asarray(test_edges, dtype=np.int64).reshape(-1, 2)
    relevant: dict[int, set] = {}
    for u, v in test_edges:
        relevant.setdefault(int(u), set()).add(int(v))
    users = sorted(relevant)
    if not users:
        return []
    scores = _unit(U[users]) @ _unit(V).T
    out = []
    for row, u in enumerate(users):
        s = scores[row]
        s[train.adj_u[u]] = -np.inf
        k = min(top, len(s))
        cand = np.argpartition(-s, k - 1)[:k]
        # stable order: score descending, then item index
        cand = cand[np.lexsort((cand, -s[cand]))]
        cand = cand[np.isfinite(s[cand])]
        out.append(RankedList(u, cand, relevant[u]))
    return out


def _metrics_at_k(items, relevant: set, k: int) -> dict[str, float]:
    hits = np.array([1.0 if x in relevant else 0.0 for x in list(items)[:k]])
    n_hit = hits.sum()
    precision = n_hit / k
    recall = n_hit / len(relevant)
    f1 = 0.0 if n_hit == 0 else 2 * precision * recall / (precision + recall)
    disc = 1.0 / np.log2(np.arange(2, len(hits) + 2))
    dcg = float((hits * disc).sum())
    idcg = float((1.0 / np.log2(np.arange(2, min(k, len(relevant)) + 2))).sum())
    ndcg = dcg / idcg
    # average precision truncated at k, normalized by min(k, |relevant|)
    prec_at_hits = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    ap = float((prec_at_hits * hits).sum()) / min(k, len(relevant))
    first = np.flatnonzero(hits)
    mrr = 1.0 / (first[0] + 1) if len(first) else 0.0
    return {"F1": f1, "NDCG": ndcg, "MAP": ap, "MRR": mrr, "P": precision, "R": recall}


def recommend_metrics(lists, k_values=(3, 5, 10), percent: bool = True) -> dict[str, float]:
    """F1/NDCG/MAP/MRR@K averaged over users with at least one relevant item."""
    scale = 100.0 if percent else 1.0
    valid = [rl for rl in lists if len(rl.relevant) > 0]
    out = {}
    for k in k_values:
        rows = [_metrics_at_k(rl.items, rl.relevant, k) for rl in valid]
        for name in ("F1", "NDCG", "MAP", "MRR", "P", "R"):
            out[f"{name}@{k}"] = scale * float(np.mean([r[name] for r in rows])) if rows else 0.0
    return out


# ------------------------------------------------------ link prediction


@dataclass
class LabeledPairs:
    u: np.ndarray
    v: np.ndarray
    label: np.ndarray

    def features(self, U: np.ndarray, V: np.ndarray) -> np.ndarray:
        return np.concatenate([U[self.u], V[self.v]], axis=1)


def sample_negatives(g: BipartiteGraph, n: int, rng: np.random.Generator, exclude=()) -> np.ndarray:
    """Uniform (u, v) pairs that are not edges of ``g`` nor in ``exclude``."""
    taken = set(map(tuple, np.asarray(g.edges).tolist())) | set(map(tuple, np.asarray(exclude).reshape(-1, 2).tolist()))
    if g.n_u * g.n_v - len(taken) < n:
        raise ValueError("not enough non-edges to sample from")
    out: list[tuple[int, int]] = []
    seen = set()
    while len(out) < n:
        u = int(rng.integers(g.n_u))
        v = int(rng.integers(g.n_v))
        if (u, v) in taken or (u, v) in seen:
            continue
        seen.add((u, v))
        out.append((u, v))
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def make_pairs(pos, neg) -> LabeledPairs:
    pos = np.asarray(pos, dtype=np.int64).reshape(-1, 2)
    neg = np.asarray(neg, dtype=np.int64).reshape(-1, 2)
    both = np.concatenate([pos, neg])
    label = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    return LabeledPairs(both[:, 0], both[:, 1], label)


class LogisticProbe:
    """L2-regularized logistic regression fit by full-batch gradient descent."""

    def __init__(self, l2: float = 1e-4, tol: float = 1e-6, max_iter: int = 10_000):
        self.l2 = l2
        self.tol = tol
        self.max_iter = max_iter
        self.w: np.ndarray | None = None
        self.b = 0.0
        self.n_iter = 0

    def fit(self, X: np.ndarray, y: np.ndarray) -> "LogisticProbe":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        n, dim = X.shape
        mu = X.mean(axis=0)
        sd = X.std(axis=0)
        sd[sd == 0] = 1.0
        self._mu, self._sd = mu, sd
        Z = (X - mu) / sd
        # 1/L step for the logistic loss on standardized features
        lip = 0.25 * (np.linalg.norm(Z, 2) ** 2 / n + 1.0) + self.l2
        step = 1.0 / lip
        w = np.zeros(dim)
        b = 0.0
        for it in range(1, self.max_iter + 1):
            p = _sigmoid(Z @ w + b)
            r = p - y
            gw = Z.T @ r / n + self.l2 * w
            gb = r.mean()
            if math.sqrt(float(gw @ gw) + gb * gb) < self.tol:
                break
            w -= step * gw
            b -= step * gb
        self.w, self.b, self.n_iter = w, b, it
        return self

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        return ((np.asarray(X, dtype=np.float64) - self._mu) / self._sd) @ self.w + self.b

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return _sigmoid(self.decision_function(X))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def auc_score(labels, scores) -> float:
    """Mann-Whitney rank statistic; tied scores count one half."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined when the test set has a single class")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def link_prediction_auc(U: np.ndarray, V: np.ndarray, train: LabeledPairs, test: LabeledPairs,
                        l2: float = 1e-4) -> float:
    probe = LogisticProbe(l2=l2).fit(train.features(U, V), train.label)
    return auc_score(test.label, probe.decision_function(test.features(U, V)))


# -------------------------------------------------------- co-clustering


@dataclass
class ClusterScore:
    nmi: float
    acc: float
    assignment: np.ndarray
    mapping: dict


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def contingency(a, b) -> np.ndarray:
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)
    return table


def nmi(a, b) -> float:
    """I(a;b) / sqrt(H(a) H(b)); 0 when either side is constant."""
    table = contingency(a, b)
    ha, hb = _entropy(table.sum(axis=1)), _entropy(table.sum(axis=0))
    if ha <= 0 or hb <= 0:
        return 0.0
    p = table / table.sum()
    pa, pb = p.sum(axis=1, keepdims=True), p.sum(axis=0, keepdims=True)
    nz = p > 0
    mi = float((p[nz] * np.log(p[nz] / (pa @ pb)[nz])).sum())
    return max(0.0, min(1.0, mi / math.sqrt(ha * hb)))


def cluster_acc(assignment, labels) -> tuple[float, dict]:
    """Accuracy under the best one-to-one cluster -> class mapping."""
    assignment = np.asarray(assignment)
    labels = np.asarray(labels)
    clusters, ci = np.unique(assignment, return_inverse=True)
    classes, li = np.unique(labels, return_inverse=True)
    table = np.zeros((len(clusters), len(classes)))
    np.add.at(table, (ci, li), 1)
    rows, cols = linear_sum_assignment(-table)
    mapping = {int(clusters[r]): int(classes[c]) for r, c in zip(rows, cols)}
    return float(table[rows, cols].sum() / len(labels)), mapping


def cocluster_score(probs: np.ndarray, labels) -> ClusterScore:
    assignment = np.asarray(probs).argmax(axis=1)
    acc, mapping = cluster_acc(assignment, labels)
    return ClusterScore(nmi(assignment, labels), acc, assignment, mapping)


# ------------------------------------------------------ MI diagnostic


def _discrete_mi(joint: np.ndarray) -> float:
    joint = joint / joint.sum()
    pa, pb = joint.sum(axis=1, keepdims=True), joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])).sum())


def _quantize(X: np.ndarray, bins: int, seed: int) -> np.ndarray:
    if bins <= 1:
        return np.zeros(len(X), dtype=np.int64)
    from sklearn.cluster import KMeans

    uniq = np.unique(X, axis=0)
    if len(uniq) <= bins:
        # few distinct rows: each distinct embedding is its own code
        _, codes = np.unique(X, axis=0, return_inverse=True)
        return codes.ravel()
    return KMeans(n_clusters=bins, n_init=10, random_state=seed).fit_predict(X)


def mi_bound_diagnostic(U: np.ndarray, V: np.ndarray, p_uv: np.ndarray, joint_kl: np.ndarray,
                        bins: int, seed: int = 0) -> dict:
    """Compare a binned plug-in estimate of I(U;V) with I(K;L).

    Embeddings are quantized by k-means into ``bins`` codes per side and
    the discrete MI of the codes is taken under p(u, v).  Advisory only.
    """
    cu, cv = _quantize(np.asarray(U), bins, seed), _quantize(np.asarray(V), bins, seed)
    q = np.zeros((cu.max() + 1, cv.max() + 1))
    P = np.asarray(p_uv, dtype=np.float64)
    np.add.at(q, (cu[:, None].repeat(P.shape[1], 1), cv[None, :].repeat(P.shape[0], 0)), P)
    i_codes = _discrete_mi(q)
    i_kl = _discrete_mi(np.asarray(joint_kl, dtype=np.float64))
    return {
        "bins": int(bins),
        "I_codes": i_codes,
        "I_KL": i_kl,
        "gap": i_codes - i_kl,
        "bound_holds": bool(i_codes >= i_kl - 1e-9),
        "note": ("plug-in MI of k-means codes under p(u,v); quantization can only lose "
                 "information, so the estimate is biased low relative to I(U;V)"),
    }
