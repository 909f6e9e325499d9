"""Losses, SGD and the two-phase training schedule."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DataError, NumericalError
from .graph import build_edge_features, build_node_features
from .model import EDGE_SOURCES, SquatModel
from .numerics import Tensor
from .scenes import SceneView, pair_targets, task_view
from .selection import check_rho, esm_score

log = logging.getLogger(__name__)


@dataclass
class LossConfig:
    lam: float = 0.1
    predicate_count: int = 6

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")


def predicate_loss(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy over every ordered pair; target 0 is the background class."""
    targets = np.asarray(targets, dtype=np.intp)
    k = logits.shape[1]
    if targets.shape != (logits.shape[0],):
        raise DataError(f"{len(targets)} targets for {logits.shape[0]} pairs")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise DataError(f"predicate label out of range [0, {k - 1}]")
    return nx.softmax_cross_entropy(logits, targets)


def esm_loss(scores: Tensor, indicator) -> Tensor:
    """Mean BCE between sigmoid(scores) and the 0/1 relation indicator."""
    return nx.bce_with_logits(scores, indicator)


def total_loss(l_pce, l_esm: Sequence, cfg: LossConfig) -> Tensor:
    terms = [t if isinstance(t, Tensor) else Tensor(float(t)) for t in l_esm]
    l_pce = l_pce if isinstance(l_pce, Tensor) else Tensor(float(l_pce))
    return nx.add(l_pce, nx.scale(nx.mean(nx.stack_scalars(terms)), cfg.lam))


@dataclass
class TrainSchedule:
    esm_pretrain_iters: int = 600
    esm_pretrain_lr: float = 0.5
    main_iters: int = 2000
    main_lr: float = 0.05
    rho_train: float = 0.7
    seed: int = 0
    lam: float = 0.1
    momentum: float = 0.0
    resample: bool = False
    edge_source: str = "esm"

    def validate(self) -> None:
        if self.esm_pretrain_iters < 0 or self.main_iters < 0:
            raise ConfigError("iteration counts must be >= 0")
        if self.esm_pretrain_lr <= 0 or self.main_lr <= 0:
            raise ConfigError("learning rates must be > 0")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError("momentum must lie in [0, 1)")
        check_rho(self.rho_train)
        if self.edge_source not in EDGE_SOURCES:
            raise ConfigError(f"unknown edge source {self.edge_source!r}")
        LossConfig(self.lam)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass
class TraceRow:
    iteration: int
    phase: int
    l_pce: float
    l_esm: dict[str, float]
    total: float


@dataclass
class TrainResult:
    model: SquatModel
    trace: list[TraceRow] = field(default_factory=list)

    def totals(self, phase: int | None = None) -> np.ndarray:
        return np.array([r.total for r in self.trace if phase is None or r.phase == phase])


@dataclass
class PreparedScene:
    view: SceneView
    targets: np.ndarray
    indicator: np.ndarray


def prepare(scenes, task: str) -> list[PreparedScene]:
    out = []
    for scene in scenes:
        view = task_view(scene, task)
        if view.n < 2:
            continue
        targets, _ = pair_targets(view)
        out.append(PreparedScene(view, targets, (targets > 0).astype(np.float64)))
    return out


def scene_losses(model: SquatModel, item: PreparedScene, rho: float, cfg: LossConfig, edge_source: str = "esm"):
    """(L_PCE, {head: L_ESM}, L) for one scene; must run inside a tape to get gradients."""
    oracle = np.flatnonzero(item.targets) if edge_source == "oracle" else None
    out = model.run(item.view.detections, rho, edge_source, oracle)
    l_pce = predicate_loss(out.prediction.logits, item.targets)
    l_esm = {h: esm_loss(s, item.indicator) for h, s in out.esm.scores.items()}
    return l_pce, l_esm, total_loss(l_pce, list(l_esm.values()), cfg)


def _esm_only_losses(model: SquatModel, item: PreparedScene) -> dict[str, Tensor]:
    p = model.params
    N = build_node_features(item.view.detections, p.extract)
    E = build_edge_features(N, p.extract).E
    return {h: esm_loss(esm_score(E, prm, model.config.ln_eps), item.indicator) for h, prm in p.esm.items()}


class Sgd:
    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, named: list[tuple[str, Tensor]], grads: nx.Gradients) -> None:
        for name, t in named:
            g = grads[t]
            if self.momentum:
                v = self.velocity.get(name)
                v = g if v is None else self.momentum * v + g
                self.velocity[name] = v
                g = v
            t.data = t.data - self.lr * g


def _scene_weights(items: list[PreparedScene], num_predicates: int) -> np.ndarray:
    counts = np.zeros(num_predicates + 1)
    for it in items:
        for r in it.view.scene.gt_relations:
            counts[r.predicate] += 1
    inv = np.where(counts > 0, counts.max() / np.maximum(counts, 1), 0.0)
    w = np.array([max([inv[r.predicate] for r in it.view.scene.gt_relations], default=1.0) for it in items])
    return w / w.sum()


def _order(items, n_iters: int, schedule: TrainSchedule, phase: str, num_predicates: int) -> np.ndarray:
    rng = nx.make_rng(schedule.seed, "order", phase)
    if schedule.resample:
        return rng.choice(len(items), size=n_iters, p=_scene_weights(items, num_predicates))
    epochs = math.ceil(n_iters / len(items)) if n_iters else 0
    return np.concatenate([rng.permutation(len(items)) for _ in range(epochs)] or [np.zeros(0, np.intp)])[:n_iters]


def _check_finite(value: float, iteration: int, phase: int) -> None:
    if not math.isfinite(value):
        raise NumericalError(f"loss became {value} at iteration {iteration} (phase {phase})")


def train(scenes, schedule: TrainSchedule, model: SquatModel, task: str = "sgdet") -> TrainResult:
    """ESM pretraining with everything else frozen, then joint SGD on the full objective.

    The model is updated in place.
    """
    schedule.validate()
    items = prepare(scenes, task)
    if not items:
        raise DataError("training set has no scene with at least two detections")
    cfg = LossConfig(schedule.lam, model.config.num_predicates)
    named = model.named_parameters()
    esm_named = [(k, t) for k, t in named if model.is_esm_param(k)]
    result = TrainResult(model)
    it = 0

    opt = Sgd(schedule.esm_pretrain_lr, schedule.momentum)
    for idx in _order(items, schedule.esm_pretrain_iters, schedule, "pretrain", cfg.predicate_count):
        with nx.Tape() as tape:
            l_esm = _esm_only_losses(model, items[idx])
            loss = nx.mean(nx.stack_scalars(list(l_esm.values())))
        _check_finite(float(loss.data), it, 1)
        opt.step(esm_named, nx.backward(loss, tape))
        result.trace.append(TraceRow(it, 1, float("nan"), {h: float(v.data) for h, v in l_esm.items()}, float(loss.data)))
        it += 1

    opt = Sgd(schedule.main_lr, schedule.momentum)
    for idx in _order(items, schedule.main_iters, schedule, "main", cfg.predicate_count):
        with nx.Tape() as tape:
            l_pce, l_esm, loss = scene_losses(model, items[idx], schedule.rho_train, cfg, schedule.edge_source)
        _check_finite(float(loss.data), it, 2)
        opt.step(named, nx.backward(loss, tape))
        result.trace.append(
            TraceRow(it, 2, float(l_pce.data), {h: float(v.data) for h, v in l_esm.items()}, float(loss.data))
        )
        if it % 500 == 0:
            log.info("iteration %d loss %.4f", it, float(loss.data))
        it += 1
    return result


def write_trace(trace: list[TraceRow], path, comment: str | None = None) -> None:
    """CSV with one row per iteration; ``comment`` becomes a leading '# ' line."""
    heads = sorted({h for r in trace for h in r.l_esm})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if comment is not None:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "phase", "l_pce"] + [f"l_esm_{h}" for h in heads] + ["l_total"])
        for r in trace:
            w.writerow([r.iteration, r.phase, repr(r.l_pce)] + [repr(r.l_esm.get(h, float("nan"))) for h in heads] + [repr(r.total)])
