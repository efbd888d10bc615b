"""Central finite-difference checks for every op and every composite loss."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .bigraph import BipartiteGraph, select_knn_all
from .config import RunConfig

H = 1e-5
REL_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    seed: int
    rel_error: float

    @property
    def ok(self) -> bool:
        return self.rel_error < REL_TOL


def numeric_grad(f: Callable[[], float], t: Tensor, h: float = H) -> np.ndarray:
    g = np.zeros_like(t.data)
    flat, gflat = t.data.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-7)
    return float(np.linalg.norm(a - b) / den)


def check(build: Callable[[], Tensor], params: list[Tensor], h: float = H) -> float:
    """Worst relative error between tape gradients and finite differences."""
    with Tape() as tape:
        loss = build()
    grads = ad.backward(tape, loss)

    def f():
        return float(build().data)

    return max(relative_error(grads[p], numeric_grad(f, p, h)) for p in params)


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap, x)


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """One scalar-valued probe per differentiable op; random shapes."""
    m, k, n = (int(x) for x in rng.integers(2, 6, size=3))

    def P(*shape, data=None):
        return Tensor(rng.normal(size=shape) if data is None else data, requires_grad=True)

    # fixed random weights turn a matrix output into a scalar
    def probe(shape):
        return Tensor(rng.normal(size=shape))

    a, b = P(m, k), P(k, n)
    wm = probe((m, n))
    c, e = P(m, k), P(m, k)
    wk = probe((m, k))
    row = P(1, k)
    adj = (rng.random((m, n)) < 0.5).astype(float)
    adj[0] = 0.0
    x_n = P(n, k)
    pos = P(m, k, data=np.abs(rng.normal(size=(m, k))) + 0.1)
    kinked = P(m, k, data=_away_from_zero(rng, (m, k)))
    cat = P(m, n)
    wcat = probe((m, k + n))
    wv = probe((m,))
    wt = probe((k, m))
    filt = P(m, k)
    wmk1 = probe((m, 1))
    w1k = probe((1, k))
    idx = rng.integers(0, m, size=m + 2)
    widx = probe((m + 2, k))

    S = ad.sum_all
    H_ = ad.hadamard
    return {
        "matmul": (lambda: S(H_(ad.matmul(a, b), wm)), [a, b]),
        "transpose": (lambda: S(H_(ad.transpose(c), wt)), [c]),
        "add": (lambda: S(H_(ad.add(c, row), wk)), [c, row]),
        "sub": (lambda: S(H_(ad.sub(c, e), wk)), [c, e]),
        "scale": (lambda: S(H_(ad.scale(c, -1.7), wk)), [c]),
        "hadamard": (lambda: S(H_(H_(c, e), wk)), [c, e]),
        "div": (lambda: S(H_(ad.div(c, pos), wk)), [c, pos]),
        "concat_cols": (lambda: S(H_(ad.concat_cols(c, cat), wcat)), [c, cat]),
        "gather_rows": (lambda: S(H_(ad.gather_rows(c, idx), widx)), [c]),
        "row_mean_over_neighbors": (lambda: S(H_(ad.row_mean_over_neighbors(adj, x_n), wk)), [x_n]),
        "relu": (lambda: S(H_(ad.relu(kinked), wk)), [kinked]),
        "tanh": (lambda: S(H_(ad.tanh(c), wk)), [c]),
        "abs": (lambda: S(H_(ad.abs_(kinked), wk)), [kinked]),
        "softmax_rows": (lambda: S(H_(ad.softmax_rows(c), wk)), [c]),
        "log": (lambda: S(H_(ad.log(pos), wk)), [pos]),
        "sum_all": (lambda: ad.scale(ad.sum_all(c), 0.3), [c]),
        "sum_axis": (lambda: ad.add(S(H_(ad.sum_axis(c, 1), wmk1)), S(H_(ad.sum_axis(c, 0), w1k))), [c]),
        "normalize_rows": (lambda: S(H_(ad.normalize_rows(c), wk)), [c]),
        "cosine_rows": (lambda: S(H_(ad.cosine_rows(c, e), wv)), [c, e]),
        "threshold_filter": (lambda: S(H_(ad.threshold_filter(filt, -0.3), wk)), [filt]),
    }


def random_graph(rng: np.random.Generator, n_u: int = 7, n_v: int = 6, p: float = 0.45) -> BipartiteGraph:
    mask = rng.random((n_u, n_v)) < p
    mask[np.arange(n_u), rng.integers(0, n_v, size=n_u)] = True
    return BipartiteGraph(n_u, n_v, np.argwhere(mask))


def loss_cases(seed: int) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """Composite losses end-to-end through encode -> project -> loss."""
    from .trainer import TrainRun, compute_losses

    rng = np.random.default_rng(seed)
    g = random_graph(rng)
    cfg = RunConfig()
    m = cfg.model
    m.d, m.layers, m.skip_connection, m.projector_kind = 4, 2, True, "mlp"
    m.n_clusters, m.n_hops, m.n_knn, m.alpha = 3, 2, 2, -0.5
    m.lambda_uv, m.lambda_u, m.lambda_v = 1.0, 0.7, 1.3
    cfg.data.kind = "planted"
    run = TrainRun.create(cfg, g, seed=seed)
    # move away from the init, where cluster outputs are near-uniform and
    # every global-loss gradient is O(1e-8), below finite-difference noise
    for name, t in run.model.theta.items():
        t.data += 0.5 * rng.normal(size=t.shape)
        if name.startswith("clu."):
            t.data *= 4.0
    for t in run.model.phi.values():
        t.data += 0.5 * rng.normal(size=t.shape)
    from .networks import encode

    U_t, V_t = encode(run.model, g, "theta")
    U_p, V_p = encode(run.model, g, "phi")
    knn_u = select_knn_all(run.ctx.index_u, U_t, U_p)
    knn_v = select_knn_all(run.ctx.index_v, V_t, V_p)
    edges = np.asarray(g.edges)
    params = run.model.parameters()

    def term(name):
        return lambda: compute_losses(run, edges, knn_u, knn_v)[name]

    return {f"loss:{k}": (term(k), params) for k in ("L_uv", "L_u", "L_v", "L_glb", "L")}


def run_suite(seeds=range(10), include_losses: bool = True) -> list[CheckResult]:
    results = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        cases = op_cases(rng)
        if include_losses:
            cases.update(loss_cases(seed))
        for name, (build, params) in cases.items():
            results.append(CheckResult(name, seed, check(build, params)))
    return results


def main() -> int:
    t0 = time.perf_counter()
    results = run_suite()
    worst: dict[str, CheckResult] = {}
    for r in results:
        if r.name not in worst or r.rel_error > worst[r.name].rel_error:
            worst[r.name] = r
    for name, r in worst.items():
        print(f"{'PASS' if r.ok else 'FAIL'}  {name:<28} max rel err {r.rel_error:.2e} (seed {r.seed})")
    print(f"{len(results)} checks in {time.perf_counter() - t0:.1f}s")
    return 0 if all(r.ok for r in results) else 1
