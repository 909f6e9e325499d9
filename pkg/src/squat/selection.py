"""Edge selection modules: relatedness scoring and hard top-rho selection."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError
from .numerics import Tensor

HEADS = ("q", "n2e", "e2e")


@dataclass
class EsmParams:
    """4-layer scoring MLP. ``l1`` emits local and global halves of width m each."""

    l1_W: Tensor
    l1_b: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    l2_W: Tensor
    l2_b: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    l3_W: Tensor
    l3_b: Tensor
    ln3_gain: Tensor
    ln3_bias: Tensor
    out_W: Tensor
    out_b: Tensor


@dataclass
class SelectionResult:
    scores: np.ndarray
    selected: np.ndarray  # ascending edge positions
    rho: float

    def __len__(self) -> int:
        return len(self.selected)


def esm_score(E: Tensor, p: EsmParams, eps: float = 1e-5) -> Tensor:
    """Relatedness logit per edge; the pooled global half is shared by every edge."""
    rows = E.shape[0]
    m = p.l1_W.shape[1] // 2
    h = nx.gelu(nx.layer_norm(nx.linear(E, p.l1_W, p.l1_b), p.ln1_gain, p.ln1_bias, eps))
    local = nx.columns(h, 0, m)
    glob = nx.mean_rows(nx.columns(h, m, 2 * m))
    x = nx.concat([local, nx.repeat_rows(glob, rows)])
    x = nx.gelu(nx.layer_norm(nx.linear(x, p.l2_W, p.l2_b), p.ln2_gain, p.ln2_bias, eps))
    x = nx.gelu(nx.layer_norm(nx.linear(x, p.l3_W, p.l3_b), p.ln3_gain, p.ln3_bias, eps))
    return nx.reshape(nx.linear(x, p.out_W, p.out_b), (rows,))


def keep_count(num_edges: int, rho: float) -> int:
    # the epsilon absorbs products such as 0.29 * 100 = 28.999999999999996
    return min(num_edges, max(1, math.floor(rho * num_edges + 1e-9)))


def check_rho(rho: float) -> None:
    if not (0.0 < rho <= 1.0) or math.isnan(rho):
        raise ConfigError(f"keeping ratio must lie in (0, 1], got {rho}")


def select_top_rho(scores, rho: float) -> SelectionResult:
    """Keep the top ``floor(rho * |E|)`` edges (at least one); ties go to the earlier edge."""
    check_rho(rho)
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64).reshape(-1)
    k = keep_count(len(s), rho)
    order = np.lexsort((np.arange(len(s)), -s))
    return SelectionResult(scores=s, selected=np.sort(order[:k]), rho=rho)


@dataclass
class EsmOutput:
    scores: dict[str, Tensor]  # one logit vector per parameter set
    selections: dict[str, SelectionResult]  # keyed by head


def run_all_esms(E: Tensor, params: dict[str, EsmParams], rho: float, mode: str = "distinct") -> EsmOutput:
    """Score the initial edge features with every ESM and select Q, N2E and E2E edge sets.

    In ``shared`` mode ``params`` holds a single ``"shared"`` entry reused by all heads.
    """
    if mode == "shared":
        s = esm_score(E, params["shared"])
        sel = select_top_rho(s, rho)
        return EsmOutput({"shared": s}, {h: sel for h in HEADS})
    if mode != "distinct":
        raise ConfigError(f"unknown esm mode {mode!r}")
    scores = {h: esm_score(E, params[h]) for h in HEADS}
    return EsmOutput(scores, {h: select_top_rho(scores[h], rho) for h in HEADS})
