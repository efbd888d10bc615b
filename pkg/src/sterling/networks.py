"""Encoder, projector and cluster networks, online/target state and EMA."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bigraph import BipartiteGraph
from .config import ConfigError, ModelConfig


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def encoder_param_names(cfg: ModelConfig) -> list[str]:
    names = ["enc.u.emb0", "enc.v.emb0"]
    for layer in range(1, cfg.layers + 1):
        for side in "uv":
            names.append(f"enc.{side}.W1.{layer}")
            if cfg.skip_connection:
                names.append(f"enc.{side}.W2.{layer}")
    return names


def init_params(cfg: ModelConfig, n_u: int, n_v: int, rng: np.random.Generator,
                dtype=np.float64) -> dict[str, Tensor]:
    """Online parameters in a fixed, deterministic creation order.

    Weight matrices are stored input-major so a layer is ``x @ W``.
    """
    d = cfg.d
    hidden = cfg.cluster_hidden or d
    bound = cfg.emb_init_scale or 1.0 / math.sqrt(d)
    arrays: dict[str, np.ndarray] = {
        "enc.u.emb0": rng.uniform(-bound, bound, size=(n_u, d)).astype(dtype),
        "enc.v.emb0": rng.uniform(-bound, bound, size=(n_v, d)).astype(dtype),
    }
    for layer in range(1, cfg.layers + 1):
        for side in "uv":
            arrays[f"enc.{side}.W1.{layer}"] = _xavier(rng, d, d, dtype)
            if cfg.skip_connection:
                arrays[f"enc.{side}.W2.{layer}"] = _xavier(rng, 2 * d, d, dtype)
    for side in "uv":
        if cfg.projector_kind == "mlp":
            arrays[f"proj.{side}.W1"] = _xavier(rng, d, d, dtype)
            arrays[f"proj.{side}.b1"] = np.zeros(d, dtype=dtype)
            arrays[f"proj.{side}.W2"] = _xavier(rng, d, d, dtype)
            arrays[f"proj.{side}.b2"] = np.zeros(d, dtype=dtype)
        arrays[f"clu.{side}.W1"] = _xavier(rng, d, hidden, dtype)
        arrays[f"clu.{side}.b1"] = np.zeros(hidden, dtype=dtype)
        arrays[f"clu.{side}.W2"] = _xavier(rng, hidden, cfg.n_clusters, dtype)
        arrays[f"clu.{side}.b2"] = np.zeros(cfg.n_clusters, dtype=dtype)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}


@dataclass
class ModelState:
    """Online parameters theta and the EMA target phi (encoder only)."""

    config: ModelConfig
    theta: dict[str, Tensor]
    phi: dict[str, Tensor]
    ema_tau: float = 0.99

    @classmethod
    def create(cls, cfg: ModelConfig, n_u: int, n_v: int, seed: int = 0, dtype=np.float64) -> "ModelState":
        rng = np.random.default_rng(seed)
        theta = init_params(cfg, n_u, n_v, rng, dtype)
        phi = {k: Tensor(theta[k].data.copy(), name=k) for k in encoder_param_names(cfg)}
        return cls(cfg, theta, phi, cfg.tau_init)

    def parameters(self) -> list[Tensor]:
        return list(self.theta.values())

    def copy(self) -> "ModelState":
        theta = {k: Tensor(t.data.copy(), requires_grad=True, name=k) for k, t in self.theta.items()}
        phi = {k: Tensor(t.data.copy(), name=k) for k, t in self.phi.items()}
        return ModelState(self.config, theta, phi, self.ema_tau)


def encode_params(params: dict[str, Tensor], g: BipartiteGraph, layers: int,
                  skip_connection: bool) -> tuple[Tensor, Tensor]:
    """L rounds of mean-over-neighbors message passing on both sides.

    u^(l+1) = relu(mean{v^(l)} W1), then optionally
    u^(l+1) = tanh([u^(l+1) || u^(l)] W2); v symmetric with its own weights.
    """
    Mu, Mv = g.mean_operator("u"), g.mean_operator("v")
    U, V = params["enc.u.emb0"], params["enc.v.emb0"]
    for layer in range(1, layers + 1):
        U_new = ad.relu(ad.matmul(ad.spmm(Mu, V), params[f"enc.u.W1.{layer}"]))
        V_new = ad.relu(ad.matmul(ad.spmm(Mv, U), params[f"enc.v.W1.{layer}"]))
        if skip_connection:
            U_new = ad.tanh(ad.matmul(ad.concat_cols(U_new, U), params[f"enc.u.W2.{layer}"]))
            V_new = ad.tanh(ad.matmul(ad.concat_cols(V_new, V), params[f"enc.v.W2.{layer}"]))
        U, V = U_new, V_new
    return U, V


def encode(state: ModelState, g: BipartiteGraph, which: str = "theta") -> tuple[Tensor, Tensor]:
    if which not in ("theta", "phi"):
        raise ValueError("which must be 'theta' or 'phi'")
    params = state.theta if which == "theta" else state.phi
    return encode_params(params, g, state.config.layers, state.config.skip_connection)


def _affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, W), b)


def project(params: dict[str, Tensor], side: str, emb: Tensor, kind: str) -> Tensor:
    """Identity, or a two-layer tanh MLP of width d."""
    if kind == "identity":
        return emb
    h = ad.tanh(_affine(emb, params[f"proj.{side}.W1"], params[f"proj.{side}.b1"]))
    return ad.tanh(_affine(h, params[f"proj.{side}.W2"], params[f"proj.{side}.b2"]))


def cluster_probs(params: dict[str, Tensor], side: str, x: Tensor) -> Tensor:
    """Row r is p(cluster | node r): tanh layer then softmax layer."""
    h = ad.tanh(_affine(x, params[f"clu.{side}.W1"], params[f"clu.{side}.b1"]))
    return ad.softmax_rows(_affine(h, params[f"clu.{side}.W2"], params[f"clu.{side}.b2"]))


def tau_schedule(k: float, total: float, tau_init: float) -> float:
    """1 - (1 - tau_init) * (cos(pi k / K) + 1) / 2."""
    if total <= 0:
        return 1.0
    return 1.0 - (1.0 - tau_init) * (math.cos(math.pi * k / total) + 1.0) / 2.0


def ema_update(state: ModelState, tau: float | None = None) -> None:
    """phi <- tau * phi + (1 - tau) * theta for every target tensor."""
    tau = state.ema_tau if tau is None else tau
    for name, target in state.phi.items():
        online = state.theta.get(name)
        if online is None or online.shape != target.shape:
            raise ConfigError(f"EMA: target tensor {name!r} has no matching online tensor")
        target.data *= tau
        target.data += (1.0 - tau) * online.data
    state.ema_tau = tau
