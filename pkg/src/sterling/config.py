"""Run configuration: model hyper-parameters, data source, ablations."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_type_hints


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d: int = 64
    layers: int = 1
    skip_connection: bool = False
    projector_kind: str = "identity"
    n_clusters: int = 10
    n_hops: int = 1
    n_knn: int = 10
    alpha: float = 0.0
    lambda_uv: float = 1.0
    lambda_u: float = 1.0
    lambda_v: float = 1.0
    lr: float = 5e-4
    epochs: int = 10
    tau_init: float = 0.99
    metapath_binarize: bool = False
    # width of the cluster network's hidden layer; 0 means "same as d"
    cluster_hidden: int = 0
    # 0 = one full-batch step per epoch
    batch_edges: int = 0
    ema_per_step: bool = False
    # 0 = global loss over all nodes; otherwise uniform node subsets per side
    global_sample: int = 0
    # half-width of the uniform input-embedding init; 0 means 1/sqrt(d)
    emb_init_scale: float = 0.0

    def validate(self) -> None:
        if self.d < 1:
            raise ConfigError("model.d must be >= 1")
        if self.layers < 1:
            raise ConfigError("model.layers must be >= 1")
        if self.n_clusters < 2:
            raise ConfigError("model.n_clusters must be >= 2")
        if not 0.0 <= self.tau_init <= 1.0:
            raise ConfigError("model.tau_init must lie in [0, 1]")
        if self.projector_kind not in ("identity", "mlp"):
            raise ConfigError("model.projector_kind must be 'identity' or 'mlp'")
        if self.n_hops < 1:
            raise ConfigError("model.n_hops must be >= 1")
        if self.n_knn < 1:
            raise ConfigError("model.n_knn must be >= 1")
        if self.epochs < 0:
            raise ConfigError("model.epochs must be >= 0")
        if self.lr <= 0:
            raise ConfigError("model.lr must be > 0")
        for name in ("lambda_uv", "lambda_u", "lambda_v"):
            v = getattr(self, name)
            if not (v >= 0 and v != float("inf")):
                raise ConfigError(f"model.{name} must be finite and >= 0")
        if self.batch_edges < 0 or self.global_sample < 0 or self.cluster_hidden < 0:
            raise ConfigError("model.batch_edges, global_sample and cluster_hidden must be >= 0")
        if not 0.0 <= self.emb_init_scale < float("inf"):
            raise ConfigError("model.emb_init_scale must be finite and >= 0")


@dataclass
class Ablation:
    """Switches that remove one ingredient of the objective."""

    no_glb: bool = False
    no_u: bool = False
    no_v: bool = False
    no_uv: bool = False
    no_meta: bool = False
    no_emb: bool = False
    no_filter: bool = False
    relu_delta: bool = False
    no_saa: bool = False
    no_semb: bool = False

    def enable(self, names) -> None:
        for name in names:
            key = name.strip().replace("-", "_")
            if not key:
                continue
            if key not in self.__dataclass_fields__:
                raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(self.__dataclass_fields__)}")
            setattr(self, key, True)


@dataclass
class DataConfig:
    # edgelist | ml100k | planted | mat
    kind: str = "edgelist"
    path: str = ""
    test_path: str = ""
    has_weights: bool = False
    labels_u_path: str = ""
    labels_v_path: str = ""
    # "" = dataset default (u1 for ml100k, none otherwise); "u1" (ml100k
    # only: first 20000 ratings held out); "random" holds out test_fraction
    # of the edges; "none" keeps every edge for training
    split: str = ""
    test_fraction: float = 0.2
    # planted partition generator
    block_sizes_u: list = field(default_factory=lambda: [40, 40])
    block_sizes_v: list = field(default_factory=lambda: [40, 40])
    p_in: float = 0.5
    p_out: float = 0.05
    graph_seed: int = 0
    name: str = ""

    def validate(self) -> None:
        if self.kind not in ("edgelist", "ml100k", "planted", "mat"):
            raise ConfigError(f"data.kind must be edgelist|ml100k|planted|mat, got {self.kind!r}")
        if self.kind != "planted" and not self.path:
            raise ConfigError("data.path is required")
        if self.split not in ("", "u1", "random", "none"):
            raise ConfigError(f"data.split must be u1|random|none, got {self.split!r}")
        if self.split == "u1" and self.kind != "ml100k":
            raise ConfigError("data.split=u1 only applies to data.kind=ml100k")
        if self.split == "random" and self.test_path:
            raise ConfigError("data.split=random conflicts with data.test_path")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("data.test_fraction must lie in (0, 1)")


@dataclass
class EvalConfig:
    k_values: list = field(default_factory=lambda: [3, 5, 10])
    diag_bins: int = 0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    ablate: Ablation = field(default_factory=Ablation)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    out: str = "runs/default"
    precision: str = "f64"

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.data.validate()
        if self.precision not in ("f32", "f64"):
            raise ConfigError("precision must be f32 or f64")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    hints = get_type_hints(cls)
    kwargs = {}
    for key, value in raw.items():
        if key not in cls.__dataclass_fields__:
            raise ConfigError(f"unknown key {where + '.' if where else ''}{key}")
        kwargs[key] = _coerce(hints[key], value, f"{where + '.' if where else ''}{key}")
    return cls(**kwargs)


def _coerce(tp, value, where: str):
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    if tp is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{where}: expected true/false, got {value!r}")
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected string, got {value!r}")
        return value
    if tp is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected list, got {value!r}")
        return value
    return value


def from_dict(raw: dict) -> RunConfig:
    return _build(RunConfig, raw, "")


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    cfg = from_dict(raw)
    # relative data paths resolve against the config file's directory
    base = path.parent
    for attr in ("path", "test_path", "labels_u_path", "labels_v_path"):
        p = getattr(cfg.data, attr)
        if p and not Path(p).is_absolute() and not Path(p).exists() and (base / p).exists():
            setattr(cfg.data, attr, str(base / p))
    return cfg


def apply_override(cfg: RunConfig, assignment: str) -> None:
    """Apply ``dot.path=value``; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, text = assignment.split("=", 1)
    try:
        value: Any = json.loads(text)
    except json.JSONDecodeError:
        value = text
    parts = key.strip().split(".")
    target = cfg
    for part in parts[:-1]:
        if not dataclasses.is_dataclass(target) or part not in target.__dataclass_fields__:
            raise ConfigError(f"unknown config section {key!r}")
        target = getattr(target, part)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(target) or leaf not in target.__dataclass_fields__:
        raise ConfigError(f"unknown config key {key!r}")
    tp = get_type_hints(type(target))[leaf]
    if tp is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    setattr(target, leaf, _coerce(tp, value, key))
