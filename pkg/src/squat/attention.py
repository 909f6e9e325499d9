"""Multi-head attention, the quad attention layer and the predicate classifier."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ContractError
from .numerics import Tensor

ATTENTIONS = ("n2n", "n2e", "e2n", "e2e")


@dataclass
class MhaParams:
    """Per-head maps stored side by side: head i owns columns i*dk:(i+1)*dk of W_q/W_k/W_v."""

    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    W_o: Tensor


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor


@dataclass
class MlpParams:
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor


@dataclass
class QuadLayerParams:
    node_self: MhaParams
    edge_self: MhaParams
    n2n: MhaParams
    n2e: MhaParams
    e2n: MhaParams
    e2e: MhaParams
    ln_node_self: LayerNormParams
    ln_edge_self: LayerNormParams
    ln_node_cross: LayerNormParams
    ln_edge_cross: LayerNormParams
    ln_node_mlp: LayerNormParams
    ln_edge_mlp: LayerNormParams
    node_mlp: MlpParams
    edge_mlp: MlpParams


@dataclass
class LayerState:
    N: Tensor
    E: Tensor
    omega_q: np.ndarray
    omega_n2e: np.ndarray
    omega_e2e: np.ndarray


def mha(Q: Tensor, K: Tensor, V: Tensor, p: MhaParams, heads: int) -> Tensor:
    if K.shape[0] < 1:
        raise ContractError("attention needs at least one key")
    dk = p.W_q.shape[1] // heads
    q = nx.split_heads(nx.matmul(Q, p.W_q), heads)
    k = nx.split_heads(nx.matmul(K, p.W_k), heads)
    v = nx.split_heads(nx.matmul(V, p.W_v), heads)
    att = nx.softmax_rows(nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(dk)))
    return nx.matmul(nx.merge_heads(nx.matmul(att, v)), p.W_o)


def mlp(x: Tensor, p: MlpParams) -> Tensor:
    return nx.linear(nx.gelu(nx.linear(x, p.W1, p.b1)), p.W2, p.b2)


def _ln(x: Tensor, p: LayerNormParams, eps: float) -> Tensor:
    return nx.layer_norm(x, p.gain, p.bias, eps)


def _residual_sum(base: Tensor, terms: list[Tensor]) -> Tensor:
    out = base
    for t in terms:
        out = nx.add(out, t)
    return out


def quad_layer(
    state: LayerState,
    p: QuadLayerParams,
    heads: int,
    attention: frozenset[str] = frozenset(ATTENTIONS),
    eps: float = 1e-5,
) -> LayerState:
    """One quad attention layer.

    Only edges in ``omega_q`` are rewritten; every other row of ``state.E`` is
    copied through untouched. An empty ``omega_q`` runs the node stream alone,
    and an empty key pool drops the corresponding cross-attention term.
    """
    N, E = state.N, state.E
    G = _ln(nx.add(N, mha(N, N, N, p.node_self, heads)), p.ln_node_self, eps)
    has_edges = len(state.omega_q) > 0

    if has_edges:
        EQ = nx.gather_rows(E, state.omega_q)
        HQ = _ln(nx.add(EQ, mha(EQ, EQ, EQ, p.edge_self, heads)), p.ln_edge_self, eps)
        H = nx.scatter_rows(E, state.omega_q, HQ)
    else:
        H = E

    node_terms = []
    if "n2n" in attention:
        node_terms.append(mha(G, G, G, p.n2n, heads))
    if "n2e" in attention and len(state.omega_n2e) > 0:
        pool = nx.gather_rows(H, state.omega_n2e)
        node_terms.append(mha(G, pool, pool, p.n2e, heads))
    G2 = _ln(_residual_sum(G, node_terms), p.ln_node_cross, eps)
    N_next = _ln(nx.add(G2, mlp(G2, p.node_mlp)), p.ln_node_mlp, eps)

    if not has_edges:
        return LayerState(N_next, E, state.omega_q, state.omega_n2e, state.omega_e2e)

    edge_terms = []
    if "e2n" in attention:
        edge_terms.append(mha(HQ, G, G, p.e2n, heads))
    if "e2e" in attention and len(state.omega_e2e) > 0:
        pool = nx.gather_rows(H, state.omega_e2e)
        edge_terms.append(mha(HQ, pool, pool, p.e2e, heads))
    HQ2 = _ln(_residual_sum(HQ, edge_terms), p.ln_edge_cross, eps)
    EQ_next = _ln(nx.add(HQ2, mlp(HQ2, p.edge_mlp)), p.ln_edge_mlp, eps)
    E_next = nx.scatter_rows(E, state.omega_q, EQ_next)
    return LayerState(N_next, E_next, state.omega_q, state.omega_n2e, state.omega_e2e)


@dataclass
class PredictionSet:
    logits: Tensor  # [|E|, |P|+1], column 0 is background
    edges: list
    states: list[LayerState] = field(default_factory=list)

    @property
    def probs(self) -> np.ndarray:
        return nx.softmax_np(self.logits.data)


def forward(
    N: Tensor,
    E: Tensor,
    edges: list,
    omegas: tuple[np.ndarray, np.ndarray, np.ndarray],
    layers: list[QuadLayerParams],
    classifier: MlpParams,
    heads: int,
    attention: frozenset[str] = frozenset(ATTENTIONS),
    eps: float = 1e-5,
) -> PredictionSet:
    """Stack the quad layers and classify every pair, selected or not."""
    if not layers:
        raise ContractError("at least one quad attention layer is required")
    q, n2e, e2e = (np.asarray(o, dtype=np.intp) for o in omegas)
    state = LayerState(N, E, q, n2e, e2e)
    states = [state]
    for p in layers:
        state = quad_layer(state, p, heads, attention, eps)
        states.append(state)
    return PredictionSet(logits=mlp(state.E, classifier), edges=edges, states=states)
