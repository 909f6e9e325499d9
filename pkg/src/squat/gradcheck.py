"""Finite-difference verification of every parameter group of a small model."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .attention import forward
from .errors import ConfigError
from .graph import Detection, build_edge_features, build_node_features
from .model import ModelConfig, SquatModel, select_edges
from .selection import esm_score, run_all_esms
from .training import LossConfig, esm_loss, predicate_loss, total_loss


def small_config(d: int = 16, layers: int = 2, esm_mode: str = "distinct") -> ModelConfig:
    return ModelConfig(
        d_v=6, d_h=8, d_g=4, d=d, heads=2, layers=layers, num_predicates=3,
        esm_mode=esm_mode, residual_init=1.0,
    )


def random_scene(n: int, d_v: int, num_classes: int, seed: int) -> list[Detection]:
    rng = nx.make_rng(seed, "gradcheck", "scene")
    dets = []
    for _ in range(n):
        xy = rng.uniform(0.0, 0.6, size=2)
        wh = rng.uniform(0.1, 0.4, size=2)
        dets.append(Detection(np.concatenate([xy, xy + wh]), rng.normal(size=d_v), rng.dirichlet(np.ones(num_classes))))
    return dets


def group_of(name: str) -> str:
    return name.rsplit(".", 1)[0]


@dataclass
class GradcheckReport:
    tol: float
    worst: dict[str, float]  # parameter group -> worst relative error
    pce_esm_max: float  # largest |dL_PCE/d theta| over ESM parameters; must be exactly 0
    esm_grad_norm: float  # |dL_ESM/d theta| over ESM parameters; must be > 0
    checked_entries: int = 0
    failures: list[str] = field(default_factory=list)

    @property
    def isolated(self) -> bool:
        return self.pce_esm_max == 0.0 and self.esm_grad_norm > 0.0

    @property
    def passed(self) -> bool:
        return not self.failures and self.isolated

    def to_table(self) -> str:
        width = max(len(g) for g in self.worst) if self.worst else 5
        lines = [f"{'group':<{width}}  worst_rel_err  status"]
        for g, err in self.worst.items():
            lines.append(f"{g:<{width}}  {err:13.3e}  {'ok' if err < self.tol else 'FAIL'}")
        lines.append(f"isolation: max |dL_PCE/d esm| = {self.pce_esm_max!r}, |dL_ESM/d esm| = {self.esm_grad_norm:.3e}")
        lines.append(f"checked {self.checked_entries} entries at tol {self.tol:g}: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


class _Problem:
    """A fixed scene, fixed targets and fixed edge selections.

    Selections are computed once so finite-difference probes never flip a top-k choice.
    """

    def __init__(self, model: SquatModel, n: int, rho: float, seed: int):
        cfg = model.config
        self.model = model
        self.dets = random_scene(n, cfg.d_v, 5, seed)
        rng = nx.make_rng(seed, "gradcheck", "targets")
        m = n * (n - 1)
        self.targets = np.where(rng.random(m) < 0.4, rng.integers(1, cfg.num_predicates + 1, size=m), 0)
        self.targets[0] = 1  # keep at least one positive
        self.indicator = (self.targets > 0).astype(np.float64)
        self.loss_cfg = LossConfig(0.1, cfg.num_predicates)
        p = model.params
        E = build_edge_features(build_node_features(self.dets, p.extract), p.extract).E
        esm_out = run_all_esms(E, p.esm, rho, cfg.esm_mode)
        self.omegas = select_edges(esm_out, m, "esm")

    def losses(self):
        cfg = self.model.config
        p = self.model.params
        bundle = build_edge_features(build_node_features(self.dets, p.extract), p.extract)
        pred = forward(
            bundle.N, bundle.E, bundle.edges, self.omegas, p.layers, p.classifier,
            cfg.heads, frozenset(cfg.attention), cfg.ln_eps,
        )
        l_pce = predicate_loss(pred.logits, self.targets)
        l_esm = [esm_loss(esm_score(bundle.E, prm, cfg.ln_eps), self.indicator) for prm in p.esm.values()]
        return l_pce, l_esm, total_loss(l_pce, l_esm, self.loss_cfg)

    def value(self) -> float:
        return float(self.losses()[2].data)


def gradcheck(
    model: SquatModel | None = None,
    n: int = 4,
    rho: float = 0.5,
    tol: float = 1e-4,
    h: float = 1e-6,
    entries_per_tensor: int = 10,
    seed: int = 0,
) -> GradcheckReport:
    """Compare tape gradients of the full objective to central differences.

    Up to ``entries_per_tensor`` entries of every parameter tensor are probed.
    """
    if n < 2:
        raise ConfigError("gradcheck needs at least two detections")
    model = model if model is not None else SquatModel(small_config(), seed=seed)
    prob = _Problem(model, n, rho, seed)
    named = model.named_parameters()

    with nx.Tape() as tape:
        l_pce, l_esm, loss = prob.losses()
        esm_mean = nx.mean(nx.stack_scalars(l_esm))
    grads = nx.backward(loss, tape)
    g_pce = nx.backward(l_pce, tape)
    g_esm = nx.backward(esm_mean, tape)

    esm_named = [(k, t) for k, t in named if model.is_esm_param(k)]
    pce_esm_max = max(float(np.abs(g_pce[t]).max()) for _, t in esm_named)
    esm_norm = float(np.sqrt(sum(float((g_esm[t] ** 2).sum()) for _, t in esm_named)))

    rng = nx.make_rng(seed, "gradcheck", "entries")
    worst: dict[str, float] = {}
    checked = 0
    for name, t in named:
        size = t.data.size
        idx = np.arange(size) if size <= entries_per_tensor else np.sort(rng.choice(size, entries_per_tensor, replace=False))
        analytic = grads[t].reshape(-1)[idx]
        numeric = nx.central_difference(prob.value, t.data, idx, h)
        err = float(nx.relative_error(analytic, numeric).max())
        g = group_of(name)
        worst[g] = max(worst.get(g, 0.0), err)
        checked += len(idx)
    failures = [g for g, e in worst.items() if not e < tol]
    return GradcheckReport(tol, worst, pce_esm_max, esm_norm, checked, failures)
