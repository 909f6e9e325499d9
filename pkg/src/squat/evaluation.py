"""Scene-graph metrics: R@K, mR@K, ng-mR@K, F@K, head/body/tail mR, wmAP and score_wtd."""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Iterable, NamedTuple, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DataError
from .graph import SceneInstance, edge_arrays
from .scenes import SceneView, iou, pair_targets, task_view, union_box

KS = (20, 50, 100)


class RankedTriplet(NamedTuple):
    subj: int
    obj: int
    predicate: int
    score: float


@dataclass
class Triplets:
    """Column-wise triplet storage; rows are ranked when produced by :func:`rank_triplets`."""

    subj: np.ndarray
    obj: np.ndarray
    predicate: np.ndarray
    score: np.ndarray
    subj_label: np.ndarray
    obj_label: np.ndarray
    subj_box: np.ndarray
    obj_box: np.ndarray

    def __len__(self) -> int:
        return len(self.predicate)

    def __getitem__(self, k: int) -> RankedTriplet:
        return RankedTriplet(int(self.subj[k]), int(self.obj[k]), int(self.predicate[k]), float(self.score[k]))

    def __iter__(self):
        return (self[k] for k in range(len(self)))

    def head(self, k: int) -> "Triplets":
        return Triplets(*(getattr(self, f)[:k] for f in self.__dataclass_fields__))

    def take(self, idx) -> "Triplets":
        return Triplets(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))

    @classmethod
    def empty(cls) -> "Triplets":
        z = np.zeros(0, dtype=np.intp)
        return cls(z, z, z, np.zeros(0), z, z, np.zeros((0, 4)), np.zeros((0, 4)))


def rank_triplets(
    probs: np.ndarray,
    labels: np.ndarray,
    confidences: np.ndarray,
    boxes: np.ndarray,
    constraint: str = "graph",
    top: int | None = None,
) -> Triplets:
    """Rank predicate predictions of every ordered pair.

    ``graph`` keeps the best non-background predicate per pair; ``no_graph``
    keeps all of them. Score = subject conf * object conf * predicate prob;
    ties go to the earlier pair, then the smaller predicate id.
    """
    probs = np.asarray(probs, dtype=np.float64)
    n = len(labels)
    ii, jj = edge_arrays(n)
    if probs.shape[0] != len(ii):
        raise DataError(f"{probs.shape[0]} probability rows for {len(ii)} pairs")
    fg = probs[:, 1:]
    pair_conf = confidences[ii] * confidences[jj]
    if constraint == "graph":
        best = np.argmax(fg, axis=1)
        rows = np.arange(len(ii))
        pred = best + 1
        score = pair_conf * fg[rows, best]
    elif constraint == "no_graph":
        P = fg.shape[1]
        rows = np.repeat(np.arange(len(ii)), P)
        pred = np.tile(np.arange(1, P + 1), len(ii))
        score = (pair_conf[:, None] * fg).reshape(-1)
    else:
        raise ConfigError(f"unknown constraint {constraint!r}")
    order = np.lexsort((pred, rows, -score))
    if top is not None:
        order = order[:top]
    r = rows[order]
    s, o = ii[r], jj[r]
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return Triplets(s, o, pred[order], score[order], labels[s], labels[o], boxes[s], boxes[o])


@dataclass
class MatchRule:
    mode: str = "gt_boxes"  # or detected_boxes
    iou_threshold: float = 0.5
    require_labels: bool = True

    def __post_init__(self):
        if self.mode not in ("gt_boxes", "detected_boxes"):
            raise ConfigError(f"unknown match mode {self.mode!r}")
        if not (0.0 < self.iou_threshold < 1.0):
            raise ConfigError("iou_threshold must lie in (0, 1)")


def gt_triplets(scene: SceneInstance) -> Triplets:
    rel = np.array([list(r) for r in scene.gt_relations], dtype=np.intp).reshape(-1, 3)
    lab = np.array([g.class_id for g in scene.gt_objects], dtype=np.intp)
    box = np.array([g.box for g in scene.gt_objects]).reshape(-1, 4)
    s, o = rel[:, 0], rel[:, 1]
    return Triplets(s, o, rel[:, 2], np.ones(len(rel)), lab[s], lab[o], box[s], box[o])


def match_matrix(pred: Triplets, gt: Triplets, rule: MatchRule, phrase: bool = False) -> np.ndarray:
    """Boolean [num_pred, num_gt] triplet matches."""
    if len(pred) == 0 or len(gt) == 0:
        return np.zeros((len(pred), len(gt)), dtype=bool)
    m = pred.predicate[:, None] == gt.predicate[None, :]
    if rule.require_labels:
        m &= pred.subj_label[:, None] == gt.subj_label[None, :]
        m &= pred.obj_label[:, None] == gt.obj_label[None, :]
    if phrase:
        m &= iou(union_box(pred.subj_box, pred.obj_box), union_box(gt.subj_box, gt.obj_box)) >= rule.iou_threshold
    elif rule.mode == "gt_boxes":
        m &= (pred.subj[:, None] == gt.subj[None, :]) & (pred.obj[:, None] == gt.obj[None, :])
    else:
        m &= iou(pred.subj_box, gt.subj_box) >= rule.iou_threshold
        m &= iou(pred.obj_box, gt.obj_box) >= rule.iou_threshold
    return m


def first_hit_rank(pred: Triplets, gt: Triplets, rule: MatchRule) -> np.ndarray:
    """Rank of the first prediction matching each GT triplet (len(pred) when none does)."""
    m = match_matrix(pred, gt, rule)
    if m.shape[0] == 0:
        return np.zeros(len(gt), dtype=np.intp)
    return np.where(m.any(axis=0), m.argmax(axis=0), len(pred)).astype(np.intp)


def recall_at_k(pred: Triplets, gt: Triplets, rule: MatchRule, k: int) -> tuple[np.ndarray, float]:
    """(per-GT hit flags, recall); a GT triplet counts once however many predictions match it."""
    if k <= 0:
        raise ConfigError("K must be positive")
    hits = first_hit_rank(pred, gt, rule) < min(k, len(pred))
    return hits, (float(hits.mean()) if len(gt) else float("nan"))


def mean_recall_at_k(gt_predicates: Sequence[np.ndarray], hits: Sequence[np.ndarray], num_predicates: int) -> tuple[float, np.ndarray]:
    """Pooled per-predicate recall over the dataset, averaged over predicates with GT."""
    total = np.zeros(num_predicates + 1)
    hit = np.zeros(num_predicates + 1)
    for p, h in zip(gt_predicates, hits):
        np.add.at(total, p, 1.0)
        np.add.at(hit, p, np.asarray(h, dtype=np.float64))
    per = np.full(num_predicates + 1, np.nan)
    present = total > 0
    per[present] = hit[present] / total[present]
    per[0] = np.nan
    vals = per[1:][~np.isnan(per[1:])]
    return (float(vals.mean()) if len(vals) else float("nan")), per


def f_at_k(recall: float, mean_recall: float) -> float:
    if recall + mean_recall == 0:
        return 0.0
    return 2.0 * recall * mean_recall / (recall + mean_recall)


def group_split(counts: dict[int, float], t_high: float = 10000, t_low: float = 500) -> dict[str, set[int]]:
    """head: count > t_high, body: t_low <= count <= t_high, tail: count < t_low."""
    if not (t_high > t_low > 0):
        raise ConfigError("thresholds need t_high > t_low > 0")
    groups: dict[str, set[int]] = {"head": set(), "body": set(), "tail": set()}
    for p, c in counts.items():
        if c > t_high:
            groups["head"].add(p)
        elif c >= t_low:
            groups["body"].add(p)
        else:
            groups["tail"].add(p)
    return groups


def average_precision(tp: np.ndarray, num_gt: int) -> float:
    """All-point interpolated area under the precision-recall curve."""
    if num_gt == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    rec = np.concatenate([[0.0], ctp / num_gt, [ctp[-1] / num_gt if len(ctp) else 0.0]])
    prec = np.concatenate([[0.0], ctp / np.arange(1, len(tp) + 1), [0.0]])
    for i in range(len(prec) - 2, -1, -1):
        prec[i] = max(prec[i], prec[i + 1])
    idx = np.flatnonzero(rec[1:] != rec[:-1])
    return float(np.sum((rec[idx + 1] - rec[idx]) * prec[idx + 1]))


def weighted_map(
    preds: Sequence[Triplets],
    gts: Sequence[Triplets],
    weights: dict[int, float],
    rule: MatchRule,
    variant: str = "rel",
) -> tuple[float, dict[int, float]]:
    """Weighted mean of per-predicate AP; ``phr`` matches the subject-object union box."""
    if variant not in ("rel", "phr"):
        raise ConfigError(f"unknown wmAP variant {variant!r}")
    w = np.array(list(weights.values()), dtype=np.float64)
    if np.any(w < 0) or (len(w) and abs(w.sum() - 1.0) > 1e-9):
        raise ConfigError("wmAP weights must be nonnegative and sum to 1")
    aps: dict[int, float] = {}
    matches = [match_matrix(p, g, rule, phrase=(variant == "phr")) for p, g in zip(preds, gts)]
    for p in weights:
        num_gt = sum(int(np.sum(g.predicate == p)) for g in gts)
        if num_gt == 0:
            aps[p] = 0.0
            continue
        cand = []  # (-score, image, rank)
        for img, pr in enumerate(preds):
            for r in np.flatnonzero(pr.predicate == p):
                cand.append((-float(pr.score[r]), img, int(r)))
        cand.sort()
        used = [np.zeros(len(g), dtype=bool) for g in gts]
        tp = np.zeros(len(cand))
        for c, (_, img, r) in enumerate(cand):
            ok = matches[img][r] & ~used[img]
            if ok.any():
                used[img][np.argmax(ok)] = True
                tp[c] = 1.0
        aps[p] = average_precision(tp, num_gt)
    return float(sum(weights[p] * aps[p] for p in weights)), aps


def score_wtd(r50: float, wmap_rel: float, wmap_phr: float) -> float:
    return 0.2 * r50 + 0.4 * wmap_rel + 0.4 * wmap_phr


def frequency_weights(scenes: Iterable[SceneInstance], num_predicates: int) -> dict[int, float]:
    counts = predicate_counts(scenes, num_predicates)
    tot = sum(counts.values())
    return {p: (c / tot if tot else 0.0) for p, c in counts.items()}


def predicate_counts(scenes: Iterable[SceneInstance], num_predicates: int) -> dict[int, int]:
    counts = {p: 0 for p in range(1, num_predicates + 1)}
    for s in scenes:
        for r in s.gt_relations:
            counts[r.predicate] = counts.get(r.predicate, 0) + 1
    return counts


# ---------------------------------------------------------------- report

@dataclass
class ImageResult:
    image_id: str
    graph: Triplets
    no_graph: Triplets


@dataclass
class MetricReport:
    recall: dict[int, float]
    mean_recall: dict[int, float]
    ng_mean_recall: dict[int, float]
    f: dict[int, float]
    per_predicate_recall: dict[int, dict[int, float]]
    group_mean_recall: dict[str, float]
    groups: dict[str, list[int]]
    wmap_rel: float
    wmap_phr: float
    score_wtd: float
    num_images: int
    config: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        def clean(v):
            if isinstance(v, float) and np.isnan(v):
                return None
            return v

        return {
            "recall": {f"R@{k}": clean(v) for k, v in self.recall.items()},
            "mean_recall": {f"mR@{k}": clean(v) for k, v in self.mean_recall.items()},
            "ng_mean_recall": {f"ng-mR@{k}": clean(v) for k, v in self.ng_mean_recall.items()},
            "f": {f"F@{k}": clean(v) for k, v in self.f.items()},
            "per_predicate_recall": {
                f"R@{k}": {str(p): clean(v) for p, v in d.items()} for k, d in self.per_predicate_recall.items()
            },
            "group_mean_recall@100": {g: clean(v) for g, v in self.group_mean_recall.items()},
            "groups": {g: sorted(v) for g, v in self.groups.items()},
            "wmap_rel": clean(self.wmap_rel),
            "wmap_phr": clean(self.wmap_phr),
            "score_wtd": clean(self.score_wtd),
            "num_images": self.num_images,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def to_table(self) -> str:
        pct = lambda v: "   -  " if v is None or (isinstance(v, float) and np.isnan(v)) else f"{100 * v:6.2f}"
        lines = [f"{'metric':<12}" + "".join(f"{'@' + str(k):>8}" for k in self.recall)]
        for name, d in (("R", self.recall), ("mR", self.mean_recall), ("ng-mR", self.ng_mean_recall), ("F", self.f)):
            lines.append(f"{name:<12}" + "".join(f"{pct(v):>8}" for v in d.values()))
        lines.append("")
        for g in ("head", "body", "tail"):
            lines.append(f"{'mR@100 ' + g:<16}{pct(self.group_mean_recall.get(g)):>8}")
        lines.append(f"{'wmAP_rel':<16}{pct(self.wmap_rel):>8}")
        lines.append(f"{'wmAP_phr':<16}{pct(self.wmap_phr):>8}")
        lines.append(f"{'score_wtd':<16}{pct(self.score_wtd):>8}")
        lines.append(f"{'images':<16}{self.num_images:>8d}")
        return "\n".join(lines) + "\n"


def compute_report(
    results: Sequence[ImageResult],
    scenes: Sequence[SceneInstance],
    rule: MatchRule,
    num_predicates: int,
    weights: dict[int, float] | None = None,
    group_counts: dict[int, float] | None = None,
    thresholds: tuple[float, float] = (10000, 500),
    ks: Sequence[int] = KS,
) -> MetricReport:
    """Aggregate per-image predictions into the full metric report.

    Scenes without GT relations are left out of every recall average.
    """
    gts = [gt_triplets(s) for s in scenes]
    keep = [k for k, g in enumerate(gts) if len(g) > 0]
    ranks_g = [first_hit_rank(results[k].graph, gts[k], rule) for k in keep]
    ranks_ng = [first_hit_rank(results[k].no_graph, gts[k], rule) for k in keep]
    preds_of = [gts[k].predicate for k in keep]

    recall, mr, ngmr, f, per_pred = {}, {}, {}, {}, {}
    for K in ks:
        hits_g = [r < min(K, len(results[k].graph)) for r, k in zip(ranks_g, keep)]
        hits_ng = [r < min(K, len(results[k].no_graph)) for r, k in zip(ranks_ng, keep)]
        recall[K] = float(np.mean([h.mean() for h in hits_g])) if keep else float("nan")
        mr[K], per = mean_recall_at_k(preds_of, hits_g, num_predicates)
        ngmr[K], _ = mean_recall_at_k(preds_of, hits_ng, num_predicates)
        f[K] = f_at_k(recall[K], mr[K]) if keep else float("nan")
        per_pred[K] = {p: float(per[p]) for p in range(1, num_predicates + 1)}

    if group_counts is None:
        group_counts = predicate_counts(scenes, num_predicates)
    groups = group_split(group_counts, *thresholds)
    kg = 100 if 100 in per_pred else max(per_pred)
    group_mr = {}
    for g, members in groups.items():
        vals = [per_pred[kg][p] for p in members if not np.isnan(per_pred[kg].get(p, np.nan))]
        group_mr[g] = float(np.mean(vals)) if vals else float("nan")

    if weights is None:
        weights = frequency_weights(scenes, num_predicates)
    if sum(weights.values()) > 0:
        graph_preds = [r.graph.head(100) for r in results]
        rel, _ = weighted_map(graph_preds, gts, weights, rule, "rel")
        phr, _ = weighted_map(graph_preds, gts, weights, rule, "phr")
    else:
        rel = phr = float("nan")
    r50 = recall.get(50, float("nan"))
    return MetricReport(
        recall, mr, ngmr, f, per_pred, group_mr, {g: sorted(v) for g, v in groups.items()},
        rel, phr, score_wtd(r50, rel, phr), len(keep),
    )


# ---------------------------------------------------------------- model evaluation

def oracle_edges(view: SceneView) -> np.ndarray:
    _, positives = pair_targets(view)
    return positives


def predict_scene(model, view: SceneView, rho: float, edge_source: str = "esm") -> ImageResult:
    orc = oracle_edges(view) if edge_source == "oracle" else None
    if edge_source == "oracle" and not view.scene.gt_relations:
        orc = np.zeros(0, dtype=np.intp)
    out = model.run(view.detections, rho, edge_source, orc)
    return image_result(view, out.prediction.probs)


_worker_model = None


def _init_worker(model) -> None:
    global _worker_model
    _worker_model = model


def _predict_job(args) -> ImageResult:
    view, rho, edge_source = args
    return predict_scene(_worker_model, view, rho, edge_source)


def predict_all(model, views: Sequence[SceneView], rho: float, edge_source: str = "esm", workers: int = 1) -> list[ImageResult]:
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    if workers == 1 or len(views) < 2:
        return [predict_scene(model, v, rho, edge_source) for v in views]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(model,)) as pool:
        return list(pool.map(_predict_job, [(v, rho, edge_source) for v in views]))


def image_result(view: SceneView, probs: np.ndarray, top: int = 100) -> ImageResult:
    boxes = np.array([d.box for d in view.detections])
    args = (probs, view.labels, view.confidences, boxes)
    return ImageResult(
        view.scene.image_id,
        rank_triplets(*args, constraint="graph", top=top),
        rank_triplets(*args, constraint="no_graph", top=top),
    )


def rule_for(task: str) -> MatchRule:
    return MatchRule("detected_boxes" if task == "sgdet" else "gt_boxes")


def evaluate(
    model,
    scenes: Sequence[SceneInstance],
    task: str = "sgdet",
    rho: float = 0.35,
    edge_source: str = "esm",
    weights: dict[int, float] | None = None,
    group_counts: dict[int, float] | None = None,
    thresholds: tuple[float, float] = (10000, 500),
    workers: int = 1,
) -> MetricReport:
    """Run inference on every scene with at least two detections and score it.

    With ``workers > 1`` scenes are scored in worker processes; results are
    collected in input order so the report does not depend on scheduling.
    """
    used, views = [], []
    for scene in scenes:
        view = task_view(scene, task)
        if view.n < 2:
            continue
        used.append(scene)
        views.append(view)
    results = predict_all(model, views, rho, edge_source, workers)
    report = compute_report(
        results, used, rule_for(task), model.config.num_predicates, weights, group_counts, thresholds
    )
    report.config = {"task": task, "rho_infer": rho, "edge_source": edge_source}
    return report


def ablation_eval(model, scenes, edge_source: str, task: str = "sgdet", rho: float = 0.35, **kw) -> MetricReport:
    """Evaluate ``model`` with message passing over the graph named by ``edge_source``."""
    if edge_source == "oracle" and not any(s.gt_relations for s in scenes):
        raise ConfigError("oracle edge source needs ground-truth relations")
    return evaluate(model, scenes, task, rho, edge_source, **kw)


def random_baseline(scenes, num_predicates: int, task: str = "sgdet", seed: int = 0, repeats: int = 5) -> MetricReport:
    """Uniformly random predicate and score for every pair, averaged over repeats (mR only)."""
    rng = nx.make_rng(seed, "random-baseline")
    reports = []
    views = [v for v in (task_view(s, task) for s in scenes) if v.n >= 2]
    for _ in range(repeats):
        results = []
        for v in views:
            m = v.n * (v.n - 1)
            probs = np.zeros((m, num_predicates + 1))
            probs[np.arange(m), rng.integers(1, num_predicates + 1, size=m)] = rng.random(m)
            results.append(image_result(v, probs))
        reports.append(compute_report(results, [v.scene for v in views], rule_for(task), num_predicates))
    out = reports[0]
    for name in ("recall", "mean_recall", "ng_mean_recall", "f"):
        setattr(out, name, {k: float(np.mean([getattr(r, name)[k] for r in reports])) for k in getattr(out, name)})
    return out


# ---------------------------------------------------------------- prediction dumps

def _triplets_json(t: Triplets) -> list[dict[str, Any]]:
    return [
        {
            "subj": int(t.subj[k]), "obj": int(t.obj[k]), "predicate": int(t.predicate[k]), "score": float(t.score[k]),
            "subj_label": int(t.subj_label[k]), "obj_label": int(t.obj_label[k]),
            "subj_box": t.subj_box[k].tolist(), "obj_box": t.obj_box[k].tolist(),
        }
        for k in range(len(t))
    ]


def _triplets_from_json(rows: list[dict[str, Any]]) -> Triplets:
    if not rows:
        return Triplets.empty()
    col = lambda key, dt: np.array([r[key] for r in rows], dtype=dt)
    return Triplets(
        col("subj", np.intp), col("obj", np.intp), col("predicate", np.intp), col("score", np.float64),
        col("subj_label", np.intp), col("obj_label", np.intp),
        col("subj_box", np.float64).reshape(-1, 4), col("obj_box", np.float64).reshape(-1, 4),
    )


def write_predictions(results: Sequence[ImageResult], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in results:
            doc = {"image_id": r.image_id, "graph": _triplets_json(r.graph), "no_graph": _triplets_json(r.no_graph)}
            fh.write(json.dumps(doc, separators=(",", ":")) + "\n")


def read_predictions(path) -> dict[str, ImageResult]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                graph = _triplets_from_json(d["graph"])
                out[str(d["image_id"])] = ImageResult(
                    str(d["image_id"]), graph, _triplets_from_json(d.get("no_graph", d["graph"]))
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DataError(f"{path}:{lineno}: malformed prediction record: {e}") from None
    return out


def evaluate_dump(predictions: dict[str, ImageResult], scenes: Sequence[SceneInstance], num_predicates: int, **kw) -> MetricReport:
    """Score external predictions; matching is by box IoU since detection indices are foreign."""
    results = [predictions.get(s.image_id, ImageResult(s.image_id, Triplets.empty(), Triplets.empty())) for s in scenes]
    for r in results:
        for t in (r.graph, r.no_graph):
            order = np.lexsort((t.predicate, np.arange(len(t)), -t.score))
            for f in t.__dataclass_fields__:
                setattr(t, f, getattr(t, f)[order])
    return compute_report(results, list(scenes), MatchRule("detected_boxes"), num_predicates, **kw)
