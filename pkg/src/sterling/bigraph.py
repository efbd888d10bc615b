"""Bipartite graph model, edge-list ingestion and structural indices."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .autodiff import mean_operator

SIDES = ("u", "v")


class GraphParseError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


class EmptyGraphError(ValueError):
    pass


def _check_side(side: str) -> str:
    side = side.lower()
    if side not in SIDES:
        raise ValueError(f"side must be 'u' or 'v', got {side!r}")
    return side


class BipartiteGraph:
    """Immutable G = (U, V, E) with per-side sorted neighbor lists.

    ``edges`` is an (|E|, 2) int array of (u, v) index pairs, sorted
    lexicographically.  ``u_ids`` / ``v_ids`` hold the raw identifiers in
    index order when the graph came from a file.
    """

    def __init__(self, n_u: int, n_v: int, edges, u_ids: Sequence[str] | None = None,
                 v_ids: Sequence[str] | None = None):
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if n_u < 0 or n_v < 0:
            raise ValueError("node counts must be non-negative")
        if len(edges):
            if edges[:, 0].min() < 0 or edges[:, 0].max() >= n_u:
                raise ValueError("u index out of range")
            if edges[:, 1].min() < 0 or edges[:, 1].max() >= n_v:
                raise ValueError("v index out of range")
        order = np.lexsort((edges[:, 1], edges[:, 0]))
        edges = edges[order]
        if len(edges) > 1 and np.any(np.all(edges[1:] == edges[:-1], axis=1)):
            raise ValueError("duplicate edges")
        edges.setflags(write=False)
        self.n_u = int(n_u)
        self.n_v = int(n_v)
        self.edges = edges
        self.deg_u = np.bincount(edges[:, 0], minlength=n_u)
        self.deg_v = np.bincount(edges[:, 1], minlength=n_v)
        self.deg_u.setflags(write=False)
        self.deg_v.setflags(write=False)
        self.u_ids = list(u_ids) if u_ids is not None else [str(i) for i in range(n_u)]
        self.v_ids = list(v_ids) if v_ids is not None else [str(i) for i in range(n_v)]
        if len(self.u_ids) != n_u or len(self.v_ids) != n_v:
            raise ValueError("id lists must match node counts")

    def __repr__(self) -> str:
        return f"BipartiteGraph(n_u={self.n_u}, n_v={self.n_v}, n_edges={self.n_edges})"

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def biadjacency(self) -> sp.csr_matrix:
        """Binary |U| x |V| matrix B."""
        data = np.ones(len(self.edges))
        return sp.csr_matrix((data, (self.edges[:, 0], self.edges[:, 1])), shape=(self.n_u, self.n_v))

    def mean_operator(self, side: str) -> sp.csr_matrix:
        """Row-normalized adjacency used for neighbor-mean aggregation."""
        side = _check_side(side)
        cache = self.__dict__.setdefault("_mean_ops", {})
        if side not in cache:
            cache[side] = mean_operator(self.side_adjacency(side))
        return cache[side]

    @cached_property
    def adj_u(self) -> list[np.ndarray]:
        B = self.biadjacency
        return [B.indices[B.indptr[i]:B.indptr[i + 1]].copy() for i in range(self.n_u)]

    @cached_property
    def adj_v(self) -> list[np.ndarray]:
        Bt = self.biadjacency.T.tocsr()
        Bt.sort_indices()
        return [Bt.indices[Bt.indptr[i]:Bt.indptr[i + 1]].copy() for i in range(self.n_v)]

    def neighbors(self, side: str, node: int) -> np.ndarray:
        return self.adj_u[node] if _check_side(side) == "u" else self.adj_v[node]

    def size(self, side: str) -> int:
        return self.n_u if _check_side(side) == "u" else self.n_v

    def degrees(self, side: str) -> np.ndarray:
        return self.deg_u if _check_side(side) == "u" else self.deg_v

    def side_adjacency(self, side: str) -> sp.csr_matrix:
        """Rows are nodes of ``side``, columns the opposite side."""
        B = self.biadjacency
        return B if _check_side(side) == "u" else B.T.tocsr()

    def has_edge(self, u: int, v: int) -> bool:
        nb = self.adj_u[u]
        i = np.searchsorted(nb, v)
        return bool(i < len(nb) and nb[i] == v)

    def subgraph_edges(self, edges) -> "BipartiteGraph":
        """Same node sets and ids, different edge set."""
        return BipartiteGraph(self.n_u, self.n_v, edges, self.u_ids, self.v_ids)


def from_raw_pairs(pairs, path="<pairs>") -> BipartiteGraph:
    """Build a graph from (raw_u, raw_v) pairs, indexing ids by first appearance."""
    u_index: dict[str, int] = {}
    v_index: dict[str, int] = {}
    seen: set[tuple[int, int]] = set()
    edges = []
    for a, b in pairs:
        u = u_index.setdefault(a, len(u_index))
        v = v_index.setdefault(b, len(v_index))
        if (u, v) not in seen:
            seen.add((u, v))
            edges.append((u, v))
    if not edges:
        raise EmptyGraphError(f"{path}: no edges")
    return BipartiteGraph(len(u_index), len(v_index), edges, list(u_index), list(v_index))


def _parse_lines(path, has_weights: bool):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) < 2 or not fields[0] or not fields[1]:
                raise GraphParseError(path, lineno, f"expected 'u_id<TAB>v_id[<TAB>weight]', got {line!r}")
            if has_weights:
                if len(fields) < 3:
                    raise GraphParseError(path, lineno, "missing weight column")
                try:
                    w = float(fields[2])
                except ValueError:
                    raise GraphParseError(path, lineno, f"bad weight {fields[2]!r}") from None
                if not math.isfinite(w):
                    raise GraphParseError(path, lineno, f"non-finite weight {fields[2]!r}")
                if w <= 0:
                    continue
            yield fields[0], fields[1]


def ingest_edge_list(path, has_weights: bool = False) -> BipartiteGraph:
    """Read a ``u_id<TAB>v_id[<TAB>weight]`` file into a binary graph.

    Duplicate pairs collapse to one edge; with ``has_weights`` a line is
    kept only when its weight is positive.  Columns past the third are
    ignored, so MovieLens ``u.data`` files load directly.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return from_raw_pairs(_parse_lines(path, has_weights), path)


def align_edges(g: BipartiteGraph, pairs) -> np.ndarray:
    """Map raw (u_id, v_id) pairs onto ``g``'s indices, dropping unknown ids."""
    ui = {x: i for i, x in enumerate(g.u_ids)}
    vi = {x: i for i, x in enumerate(g.v_ids)}
    out = {(ui[a], vi[b]) for a, b in pairs if a in ui and b in vi}
    return np.array(sorted(out), dtype=np.int64).reshape(-1, 2)


def write_id_map(g: BipartiteGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for side, ids in (("u", g.u_ids), ("v", g.v_ids)):
            for i, raw in enumerate(ids):
                fh.write(f"{raw}\t{i}\t{side}\n")


def read_id_map(path) -> tuple[list[str], list[str]]:
    sides: dict[str, dict[int, str]] = {"u": {}, "v": {}}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3 or parts[2] not in sides:
                raise GraphParseError(path, lineno, "expected raw_id<TAB>index<TAB>side")
            sides[parts[2]][int(parts[1])] = parts[0]
    return ([sides["u"][i] for i in range(len(sides["u"]))],
            [sides["v"][i] for i in range(len(sides["v"]))])


# ------------------------------------------------------------ indices


def _inv_log_degree(deg: np.ndarray) -> np.ndarray:
    # degree-1 shared neighbors are clamped to degree 2 so 1/ln(d) stays finite
    return 1.0 / np.log(np.maximum(deg, 2).astype(np.float64))


def adamic_adar(g: BipartiteGraph, side: str, a: int, b: int) -> float:
    """Sum of 1/ln(d_w) over the shared neighbors w of two same-side nodes."""
    side = _check_side(side)
    if a == b:
        raise ValueError("adamic_adar needs two distinct nodes")
    other_deg = g.deg_v if side == "u" else g.deg_u
    shared = np.intersect1d(g.neighbors(side, a), g.neighbors(side, b), assume_unique=True)
    return math.fsum(_inv_log_degree(other_deg[shared]).tolist())


def adamic_adar_matrix(g: BipartiteGraph, side: str) -> sp.csr_matrix:
    """All same-side Adamic-Adar scores at once; zero diagonal."""
    side = _check_side(side)
    A = g.side_adjacency(side)
    other_deg = g.deg_v if side == "u" else g.deg_u
    S = (A @ sp.diags(_inv_log_degree(other_deg)) @ A.T).tocsr()
    S.setdiag(0)
    S.eliminate_zeros()
    S.sort_indices()
    return S


@dataclass(frozen=True)
class MetaAdjacency:
    hops: int
    matrix: np.ndarray


def metapath_adjacency(g: BipartiteGraph, n: int, binarize: bool = False) -> MetaAdjacency:
    """Counts of alternating U-V walks of length 2n-1: (B B^T)^(n-1) B."""
    if n < 1:
        raise ValueError(f"metapath hops must be >= 1, got {n}")
    B = g.biadjacency
    M = B.copy()
    BBt = (B @ B.T).tocsr()
    for _ in range(n - 1):
        M = BBt @ M
    M = M.toarray()
    if binarize:
        M = (M > 0).astype(np.float64)
    return MetaAdjacency(n, M)


@dataclass(frozen=True)
class NeighborIndex:
    """Same-side k-NN candidates: every peer with a positive Adamic-Adar score."""

    side: str
    scores: sp.csr_matrix
    n_knn: int

    def aa_pairs(self, node: int) -> list[tuple[int, float]]:
        lo, hi = self.scores.indptr[node], self.scores.indptr[node + 1]
        return list(zip(self.scores.indices[lo:hi].tolist(), self.scores.data[lo:hi].tolist()))

    def candidates(self, node: int) -> np.ndarray:
        lo, hi = self.scores.indptr[node], self.scores.indptr[node + 1]
        return self.scores.indices[lo:hi]

    @property
    def n_nodes(self) -> int:
        return self.scores.shape[0]


def build_neighbor_index(g: BipartiteGraph, side: str, n_knn: int) -> NeighborIndex:
    if n_knn < 1:
        raise ValueError(f"n_knn must be >= 1, got {n_knn}")
    side = _check_side(side)
    return NeighborIndex(side, adamic_adar_matrix(g, side), int(n_knn))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norm, 1e-12)


def _top_k(cols: np.ndarray, score: np.ndarray, k: int) -> np.ndarray:
    # highest score first, ties by ascending node index
    order = np.lexsort((cols, -score))
    return cols[order[:k]]


def select_knn(index: NeighborIndex, node: int, emb_online, emb_target, n_knn: int | None = None,
               use_aa: bool = True, use_emb: bool = True) -> list[int]:
    """Top peers of ``node`` by s_aa * cos(online[node], target[peer])."""
    return select_knn_all(index, emb_online, emb_target, n_knn, use_aa, use_emb, nodes=[node])[0].tolist()


def select_knn_all(index: NeighborIndex, emb_online, emb_target, n_knn: int | None = None,
                   use_aa: bool = True, use_emb: bool = True, nodes=None,
                   chunk: int = 1024) -> list[np.ndarray]:
    """:func:`select_knn` for many nodes; cosines are computed chunk-wise."""
    k = index.n_knn if n_knn is None else int(n_knn)
    online = np.asarray(getattr(emb_online, "data", emb_online), dtype=np.float64)
    target = np.asarray(getattr(emb_target, "data", emb_target), dtype=np.float64)
    n = index.n_nodes
    if online.shape[0] != n or target.shape[0] != n:
        raise ValueError(f"embedding rows {online.shape[0]}/{target.shape[0]} != {n} {index.side}-nodes")
    nodes = np.arange(n) if nodes is None else np.asarray(nodes, dtype=np.int64)
    S = index.scores
    out = []
    if use_emb:
        on, tg = _unit_rows(online), _unit_rows(target)
    for start in range(0, len(nodes), chunk):
        block = nodes[start:start + chunk]
        cos = on[block] @ tg.T if use_emb else None
        for j, r in enumerate(block):
            lo, hi = S.indptr[r], S.indptr[r + 1]
            cols = S.indices[lo:hi]
            if len(cols) == 0:
                out.append(np.empty(0, dtype=np.int64))
                continue
            score = S.data[lo:hi] if use_aa else np.ones(len(cols))
            if use_emb:
                score = score * cos[j, cols]
            out.append(_top_k(cols, score, k).astype(np.int64))
    return out
