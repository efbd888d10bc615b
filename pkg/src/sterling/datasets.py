"""Dataset loaders and the planted-partition generator."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bigraph import BipartiteGraph, align_edges, from_raw_pairs, ingest_edge_list
from .config import DataConfig

ML100K_U1_TEST = 20000


@dataclass
class Dataset:
    name: str
    graph: BipartiteGraph
    test_edges: np.ndarray = field(default_factory=lambda: np.empty((0, 2), dtype=np.int64))
    labels_u: np.ndarray | None = None
    labels_v: np.ndarray | None = None
    split: str = ""


def planted_partition(block_sizes_u=(40, 40), block_sizes_v=(40, 40), p_in: float = 0.5,
                      p_out: float = 0.05, seed: int = 0) -> Dataset:
    """Bipartite SBM: block i of U links to block i of V with prob p_in, else p_out."""
    rng = np.random.default_rng(seed)
    lu = np.repeat(np.arange(len(block_sizes_u)), block_sizes_u)
    lv = np.repeat(np.arange(len(block_sizes_v)), block_sizes_v)
    prob = np.where(lu[:, None] == lv[None, :], p_in, p_out)
    mask = rng.random(prob.shape) < prob
    edges = np.argwhere(mask)
    g = BipartiteGraph(len(lu), len(lv), edges, [f"u{i}" for i in range(len(lu))],
                       [f"v{j}" for j in range(len(lv))])
    return Dataset("planted", g, labels_u=lu, labels_v=lv, split="none")


def _read_pairs(path) -> list[tuple[str, str]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\r\n").split("\t")
            if len(parts) >= 2 and parts[0] and parts[1]:
                out.append((parts[0], parts[1]))
    return out


def load_ml100k(path, split: str = "u1", test_fraction: float = 0.2, seed: int = 0) -> Dataset:
    """MovieLens-100K ``u.data`` with every rating binarized to an edge.

    ``split="u1"`` holds out the first 20,000 lines, which is how the
    distribution's u1.base/u1.test files are cut.  ``split="random"``
    holds out a seeded random fraction instead.
    """
    pairs = _read_pairs(path)
    if split in ("u1", ""):
        split = "u1"
        test, train = pairs[:ML100K_U1_TEST], pairs[ML100K_U1_TEST:]
    elif split == "none":
        test, train = [], pairs
    elif split == "random":
        perm = np.random.default_rng(seed).permutation(len(pairs))
        n_test = int(round(test_fraction * len(pairs)))
        test = [pairs[i] for i in perm[:n_test]]
        train = [pairs[i] for i in perm[n_test:]]
    else:
        raise ValueError(f"unknown ML-100K split {split!r}")
    g = from_raw_pairs(train, path)
    return Dataset("ml100k", g, align_edges(g, test), split=split)


def load_mat(path) -> Dataset:
    """Document x word co-clustering matrix from a MATLAB file.

    The first 2-D numeric array found is taken as the biadjacency (rows = U);
    a 1-D or single-column array named like gnd/label/y gives U's classes.
    """
    from scipy import io

    mat = io.loadmat(path)
    X = labels = None
    for key, val in mat.items():
        if key.startswith("__"):
            continue
        if hasattr(val, "tocsr") or (isinstance(val, np.ndarray) and val.ndim == 2 and min(val.shape) > 1
                                     and np.issubdtype(val.dtype, np.number)):
            if X is None:
                X = val
        if key.lower() in ("gnd", "label", "labels", "y", "class", "classes"):
            labels = np.asarray(val).ravel()
    if X is None:
        raise ValueError(f"{path}: no 2-D matrix found")
    X = X.tocoo() if hasattr(X, "tocoo") else np.asarray(X)
    edges = np.argwhere(X.toarray() > 0) if hasattr(X, "toarray") else np.argwhere(X > 0)
    n_u, n_v = X.shape
    g = BipartiteGraph(n_u, n_v, edges)
    if labels is not None:
        _, labels = np.unique(labels, return_inverse=True)
    return Dataset(Path(path).stem, g, labels_u=labels, split="none")


def read_labels(path, ids: list[str]) -> np.ndarray:
    """``raw_id<TAB>label`` lines mapped to integer classes in id order."""
    table = dict(_read_pairs(path))
    missing = [x for x in ids if x not in table]
    if missing:
        raise ValueError(f"{path}: no label for {len(missing)} nodes (e.g. {missing[0]!r})")
    _, labels = np.unique([table[x] for x in ids], return_inverse=True)
    return labels


def split_edges(g: BipartiteGraph, test_fraction: float, seed: int = 0) -> tuple[BipartiteGraph, np.ndarray]:
    """Hold out a random fraction of edges; node sets are kept intact."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(g.n_edges)
    n_test = int(round(test_fraction * g.n_edges))
    return g.subgraph_edges(g.edges[perm[n_test:]]), np.asarray(g.edges[perm[:n_test]])


def _maybe_split(ds: Dataset, cfg: DataConfig, seed: int) -> Dataset:
    if cfg.split == "random":
        ds.graph, ds.test_edges = split_edges(ds.graph, cfg.test_fraction, seed)
        ds.split = "random"
    return ds


def load_dataset(cfg: DataConfig, seed: int = 0) -> Dataset:
    """Load the configured data; ``seed`` drives any random edge hold-out."""
    if cfg.kind == "planted":
        ds = planted_partition(cfg.block_sizes_u, cfg.block_sizes_v, cfg.p_in, cfg.p_out, cfg.graph_seed)
        return _maybe_split(ds, cfg, seed)
    if not Path(cfg.path).exists():
        raise FileNotFoundError(f"data.path: {cfg.path} does not exist")
    if cfg.kind == "ml100k":
        ds = load_ml100k(cfg.path, cfg.split, cfg.test_fraction, seed)
    elif cfg.kind == "mat":
        ds = _maybe_split(load_mat(cfg.path), cfg, seed)
    else:
        g = ingest_edge_list(cfg.path, cfg.has_weights)
        test = np.empty((0, 2), dtype=np.int64)
        if cfg.test_path:
            if not Path(cfg.test_path).exists():
                raise FileNotFoundError(f"data.test_path: {cfg.test_path} does not exist")
            test = align_edges(g, _read_pairs(cfg.test_path))
        ds = _maybe_split(Dataset(Path(cfg.path).stem, g, test, split="file" if cfg.test_path else "none"),
                          cfg, seed)
    if cfg.labels_u_path:
        ds.labels_u = read_labels(cfg.labels_u_path, ds.graph.u_ids)
    if cfg.labels_v_path:
        ds.labels_v = read_labels(cfg.labels_v_path, ds.graph.v_ids)
    if cfg.name:
        ds.name = cfg.name
    return ds
