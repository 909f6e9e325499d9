"""Model configuration, parameter tree and the end-to-end per-scene pipeline."""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass
from typing import Any, Callable, Iterator

import numpy as np

from . import numerics as nx
from .attention import (
    ATTENTIONS,
    LayerNormParams,
    MhaParams,
    MlpParams,
    PredictionSet,
    QuadLayerParams,
    forward,
)
from .errors import ConfigError, ShapeError
from .graph import Detection, ExtractionParams, build_edge_features, build_node_features
from .numerics import Tensor
from .selection import HEADS, EsmOutput, EsmParams, run_all_esms

EDGE_SOURCES = ("none", "full", "esm", "oracle")


@dataclass
class ModelConfig:
    d_v: int = 32
    d_h: int = 48
    d_g: int = 16
    d: int = 64
    heads: int = 8
    layers: int = 3
    num_predicates: int = 6
    esm_mode: str = "distinct"
    attention: tuple[str, ...] = ATTENTIONS
    mlp_ratio: int = 4
    feature_bias: bool = True
    ln_eps: float = 1e-5
    residual_init: float = 0.1  # scale on the output maps of residual branches

    def __post_init__(self):
        self.attention = tuple(a for a in ATTENTIONS if a in set(self.attention))

    def validate(self) -> None:
        for name in ("d_v", "d_h", "d_g", "d", "heads", "layers", "num_predicates", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.d % 2:
            raise ConfigError("d must be even (the ESM splits its first layer in halves)")
        if self.residual_init < 0:
            raise ConfigError("residual_init must be >= 0")
        if self.esm_mode not in ("shared", "distinct"):
            raise ConfigError(f"esm_mode must be shared or distinct, got {self.esm_mode!r}")

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["attention"] = list(self.attention)
        return out

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        kw = dict(d)
        if "attention" in kw:
            kw["attention"] = tuple(kw["attention"])
        return cls(**kw)


@dataclass
class SquatParams:
    extract: ExtractionParams
    esm: dict[str, EsmParams]
    layers: list[QuadLayerParams]
    classifier: MlpParams


# ---------------------------------------------------------------- tree helpers

def named_tensors(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Depth-first (name, tensor) pairs in a fixed order."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from named_tensors(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, dict):
        for k, v in obj.items():
            yield from named_tensors(v, f"{prefix}.{k}" if prefix else str(k))
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            yield from named_tensors(v, f"{prefix}.{i}" if prefix else str(i))


def map_tensors(obj, fn: Callable[[Tensor], Tensor]):
    if isinstance(obj, Tensor):
        return fn(obj)
    if dataclasses.is_dataclass(obj):
        return dataclasses.replace(obj, **{f.name: map_tensors(getattr(obj, f.name), fn) for f in dataclasses.fields(obj)})
    if isinstance(obj, dict):
        return {k: map_tensors(v, fn) for k, v in obj.items()}
    if isinstance(obj, list):
        return [map_tensors(v, fn) for v in obj]
    return obj


# ---------------------------------------------------------------- initialisation

class _Init:
    def __init__(self, seed: int, residual_init: float = 1.0):
        self.seed = seed
        self.residual_init = residual_init

    def weight(self, name: str, fan_in: int, fan_out: int, gain: float = 1.0) -> Tensor:
        rng = nx.make_rng(self.seed, "init", name)
        limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
        return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True)

    @staticmethod
    def zeros(n: int) -> Tensor:
        return Tensor(np.zeros(n), requires_grad=True)

    @staticmethod
    def ones(n: int) -> Tensor:
        return Tensor(np.ones(n), requires_grad=True)

    def ln(self, n: int) -> LayerNormParams:
        return LayerNormParams(self.ones(n), self.zeros(n))

    def mha(self, name: str, d: int) -> MhaParams:
        return MhaParams(
            *(self.weight(f"{name}.{w}", d, d) for w in ("W_q", "W_k", "W_v")),
            self.weight(f"{name}.W_o", d, d, self.residual_init),
        )

    def mlp(self, name: str, d_in: int, d_hidden: int, d_out: int, gain: float = 1.0) -> MlpParams:
        return MlpParams(
            self.weight(f"{name}.W1", d_in, d_hidden), self.zeros(d_hidden),
            self.weight(f"{name}.W2", d_hidden, d_out, gain), self.zeros(d_out),
        )

    def esm(self, name: str, d: int) -> EsmParams:
        m = d // 2
        return EsmParams(
            self.weight(f"{name}.l1", d, 2 * m), self.zeros(2 * m), self.ones(2 * m), self.zeros(2 * m),
            self.weight(f"{name}.l2", 2 * m, m), self.zeros(m), self.ones(m), self.zeros(m),
            self.weight(f"{name}.l3", m, m), self.zeros(m), self.ones(m), self.zeros(m),
            self.weight(f"{name}.out", m, 1), self.zeros(1),
        )


def init_params(cfg: ModelConfig, seed: int) -> SquatParams:
    cfg.validate()
    ini = _Init(seed, cfg.residual_init)
    d = cfg.d
    bias = cfg.feature_bias
    extract = ExtractionParams(
        W_v=ini.weight("extract.W_v", cfg.d_v, cfg.d_h),
        W_g=ini.weight("extract.W_g", 4, cfg.d_g),
        W_o=ini.weight("extract.W_o", cfg.d_h + cfg.d_g, d),
        W_p=ini.weight("extract.W_p", 2 * d, d),
        b_v=ini.zeros(cfg.d_h) if bias else None,
        b_g=ini.zeros(cfg.d_g) if bias else None,
        b_o=ini.zeros(d) if bias else None,
        b_p=ini.zeros(d) if bias else None,
    )
    heads = ("shared",) if cfg.esm_mode == "shared" else HEADS
    esm = {h: ini.esm(f"esm.{h}", d) for h in heads}
    layers = []
    for t in range(cfg.layers):
        pre = f"layers.{t}"
        layers.append(QuadLayerParams(
            node_self=ini.mha(f"{pre}.node_self", d),
            edge_self=ini.mha(f"{pre}.edge_self", d),
            n2n=ini.mha(f"{pre}.n2n", d),
            n2e=ini.mha(f"{pre}.n2e", d),
            e2n=ini.mha(f"{pre}.e2n", d),
            e2e=ini.mha(f"{pre}.e2e", d),
            ln_node_self=ini.ln(d), ln_edge_self=ini.ln(d),
            ln_node_cross=ini.ln(d), ln_edge_cross=ini.ln(d),
            ln_node_mlp=ini.ln(d), ln_edge_mlp=ini.ln(d),
            node_mlp=ini.mlp(f"{pre}.node_mlp", d, cfg.mlp_ratio * d, d, cfg.residual_init),
            edge_mlp=ini.mlp(f"{pre}.edge_mlp", d, cfg.mlp_ratio * d, d, cfg.residual_init),
        ))
    classifier = ini.mlp("classifier", d, d, cfg.num_predicates + 1)
    return SquatParams(extract, esm, layers, classifier)


# ---------------------------------------------------------------- model

@dataclass
class SceneOutput:
    prediction: PredictionSet
    esm: EsmOutput
    omegas: tuple[np.ndarray, np.ndarray, np.ndarray]


def all_edges(num_edges: int) -> np.ndarray:
    return np.arange(num_edges, dtype=np.intp)


class SquatModel:
    def __init__(self, config: ModelConfig, seed: int = 0, params: SquatParams | None = None):
        config.validate()
        self.config = config
        self.seed = seed
        self.params = params if params is not None else init_params(config, seed)

    # -- parameter access
    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(named_tensors(self.params))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise ShapeError(f"checkpoint lacks parameter {sorted(missing)[0]}")
        for k, t in own.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"parameter {k}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data = arr.copy()

    def clone(self) -> "SquatModel":
        return SquatModel(copy.deepcopy(self.config), self.seed, map_tensors(self.params, lambda t: Tensor(t.data.copy(), t.requires_grad)))

    def is_esm_param(self, name: str) -> bool:
        return name.startswith("esm.")

    # -- inference
    def run(
        self,
        detections: list[Detection],
        rho: float,
        edge_source: str = "esm",
        oracle_edges=None,
        keep_states: bool = False,
    ) -> SceneOutput:
        """Features, edge selection and quad attention for one scene."""
        cfg = self.config
        p = self.params
        N = build_node_features(detections, p.extract)
        bundle = build_edge_features(N, p.extract)
        esm_out = run_all_esms(bundle.E, p.esm, rho, cfg.esm_mode)
        omegas = select_edges(esm_out, len(bundle.edges), edge_source, oracle_edges)
        pred = forward(
            bundle.N, bundle.E, bundle.edges, omegas, p.layers, p.classifier,
            cfg.heads, frozenset(cfg.attention), cfg.ln_eps,
        )
        if not keep_states:
            pred.states = []
        return SceneOutput(pred, esm_out, omegas)


def select_edges(esm_out: EsmOutput, num_edges: int, edge_source: str, oracle_edges=None):
    if edge_source == "esm":
        s = esm_out.selections
        return s["q"].selected, s["n2e"].selected, s["e2e"].selected
    if edge_source == "full":
        e = all_edges(num_edges)
        return e, e, e
    if edge_source == "none":
        e = np.zeros(0, dtype=np.intp)
        return e, e, e
    if edge_source == "oracle":
        if oracle_edges is None:
            raise ConfigError("oracle edge source needs ground-truth relations")
        e = np.unique(np.asarray(oracle_edges, dtype=np.intp))
        return e, e, e
    raise ConfigError(f"unknown edge source {edge_source!r}; expected one of {EDGE_SOURCES}")
