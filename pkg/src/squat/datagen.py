"""Synthetic scene-graph generator plus dataset and checkpoint file formats.

Relations follow a hidden rule. Every scene has a latent type that fixes which
object classes may appear; within that pool, the ordered class pairs with the
highest additive subject-role plus object-role scores are compatible. A pair
relates with a probability that grows with compatibility and proximity,
calibrated so the expected relation/pair ratio equals the configured density.
The predicate is the argmax of additive subject-class, object-class,
displacement and scene-type terms; biases are fitted so predicate frequencies
follow a power law with one rare tail predicate. Distractor features blend
noise with a random class embedding (``distractor_mimicry``).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DataError, ShapeError
from .graph import Detection, GtObject, Relation, SceneInstance
from .model import ModelConfig, SquatModel
from .scenes import iou

DATASET_FORMAT = "squat-dataset"
CHECKPOINT_FORMAT = "squat-checkpoint"
INCOMPATIBLE_WEIGHT = 0.05
CALIBRATION_SCENES = 2000
SCHEMA_VERSION = 1


@dataclass
class SynthConfig:
    num_scenes: int = 200
    object_count_range: tuple[int, int] = (4, 10)
    num_object_classes: int = 8
    num_predicate_classes: int = 6
    relation_density: float = 0.1
    distractor_rate: float = 0.3
    predicate_skew: float = 1.0
    rare_fraction: float = 0.02
    rule_noise: float = 0.05
    feature_noise: float = 0.5
    label_noise: float = 0.7
    box_jitter: float = 0.03
    num_scene_types: int = 2
    pool_fraction: float = 0.75
    context_strength: float = 8.0
    distractor_mimicry: float = 0.4
    proximity_scale: float = 0.25
    d_v: int = 32
    seed: int = 0

    def __post_init__(self):
        self.object_count_range = tuple(int(v) for v in self.object_count_range)

    def validate(self) -> None:
        lo, hi = self.object_count_range
        if self.num_scenes < 0:
            raise ConfigError("num_scenes must be >= 0")
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad object_count_range {self.object_count_range}")
        if self.num_object_classes < 1 or self.num_predicate_classes < 1 or self.d_v < 1:
            raise ConfigError("class counts and d_v must be >= 1")
        if not (0.0 < self.relation_density <= 1.0):
            raise ConfigError(
                f"relation_density {self.relation_density} must lie in (0, 1]: "
                "a scene cannot hold more than n(n-1) relations"
            )
        if not (0.0 <= self.distractor_mimicry <= 1.0):
            raise ConfigError("distractor_mimicry must lie in [0, 1]")
        for name in ("distractor_rate", "rule_noise", "rare_fraction"):
            v = getattr(self, name)
            if not (0.0 <= v < 1.0):
                raise ConfigError(f"{name} must lie in [0, 1), got {v}")
        if self.num_scene_types < 1 or not (0.0 < self.pool_fraction <= 1.0):
            raise ConfigError("num_scene_types must be >= 1 and pool_fraction in (0, 1]")
        if self.proximity_scale < 0 or self.context_strength < 0:
            raise ConfigError("proximity_scale and context_strength must be >= 0")
        if self.predicate_skew < 0:
            raise ConfigError("predicate_skew must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["object_count_range"] = list(self.object_count_range)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SynthConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


def target_frequencies(num_predicates: int, skew: float, rare_fraction: float) -> np.ndarray:
    """Power-law frequencies; the last predicate is the rare tail class when P > 1."""
    if num_predicates == 1:
        return np.ones(1)
    k = np.arange(1, num_predicates, dtype=np.float64)
    head = k ** (-skew)
    head = head / head.sum() * (1.0 - rare_fraction)
    return np.append(head, rare_fraction)


class World:
    """Hidden generative rule shared by every split drawn from one seed.

    Each scene has a latent type that restricts which object classes occur and
    shifts predicate scores, so a pair's predicate depends on its context.
    """

    def __init__(self, cfg: SynthConfig):
        C, P, d_v, T = cfg.num_object_classes, cfg.num_predicate_classes, cfg.d_v, cfg.num_scene_types
        rng = nx.make_rng(cfg.seed, "world")
        self.embeddings = rng.normal(size=(C, d_v))
        self.background = rng.normal(size=d_v) * 0.5
        size = C if T == 1 else max(1, int(math.ceil(cfg.pool_fraction * C)))
        starts = [0] * T if T == 1 else [int(round(t * (C - size) / (T - 1))) for t in range(T)]
        self.pools = [np.arange(st, st + size) for st in starts]
        # compatible pairs: the top half of each pool by additive subject/object role scores
        role_s, role_o = rng.normal(size=C), rng.normal(size=C)
        self.compatible = np.zeros((T, C, C), dtype=bool)
        for t, pool in enumerate(self.pools):
            cells = np.array([(a, b) for a in pool for b in pool])
            score = role_s[cells[:, 0]] + role_o[cells[:, 1]]
            chosen = np.argsort(-score, kind="stable")[: max(1, len(cells) // 2)]
            self.compatible[t, cells[chosen, 0], cells[chosen, 1]] = True
        self.subj_term = rng.normal(size=(C, P)) * 1.5
        self.obj_term = rng.normal(size=(C, P)) * 1.5
        self.disp_term = rng.normal(size=(2, P)) * 4.0
        self.ctx_term = rng.normal(size=(T, P)) * cfg.context_strength
        self.proximity_scale = cfg.proximity_scale
        self.bias = np.zeros(P)
        self.rate_scale = 1.0
        self._calibrate(cfg, rng)

    def scores(self, scene_type, cs, co, disp) -> np.ndarray:
        return self.subj_term[cs] + self.obj_term[co] + disp @ self.disp_term + self.ctx_term[scene_type] + self.bias

    def predicate(self, scene_type: int, cs: int, co: int, disp: np.ndarray) -> int:
        return int(np.argmax(self.scores(scene_type, cs, co, disp))) + 1

    def relation_weight(self, scene_type, cs, co, dist) -> np.ndarray:
        """Unnormalised propensity of a pair to carry a relation: compatibility times proximity."""
        w = np.where(self.compatible[scene_type, cs, co], 1.0, INCOMPATIBLE_WEIGHT)
        if self.proximity_scale > 0:
            w = w * np.exp(-0.5 * (np.asarray(dist) / self.proximity_scale) ** 2)
        return w

    def relation_probability(self, weight, density: float) -> np.ndarray:
        # 1 - (1 - density)^(s w): mean density after calibration, saturates at density 1
        return 1.0 - (1.0 - density) ** (self.rate_scale * np.asarray(weight))

    def _calibrate(self, cfg: SynthConfig, rng: np.random.Generator) -> None:
        """Fit the rate scale so the expected relation/pair ratio equals the configured
        density, then fit predicate biases so relation-weighted frequencies follow the power law."""
        lo, hi = cfg.object_count_range
        types, cs, co, disp = [], [], [], []
        for _ in range(CALIBRATION_SCENES):
            n = int(rng.integers(lo, hi + 1))
            n = max(2, n - int(round(cfg.distractor_rate * n)))  # relations live among GT objects only
            t = int(rng.integers(len(self.pools)))
            classes = rng.choice(self.pools[t], size=n)
            centres = np.array([_centre(b) for b in _place_boxes(rng, n, [], 0.3)])
            a, b = np.nonzero(~np.eye(n, dtype=bool))
            types.append(np.full(len(a), t))
            cs.append(classes[a])
            co.append(classes[b])
            disp.append(centres[b] - centres[a])
        types, cs, co, disp = (np.concatenate(x) for x in (types, cs, co, disp))
        weight = self.relation_weight(types, cs, co, np.linalg.norm(disp, axis=1))
        rho = cfg.relation_density
        if rho < 1.0:
            lo_s, hi_s = -12.0, 12.0  # bisection on log scale
            for _ in range(80):
                mid = 0.5 * (lo_s + hi_s)
                self.rate_scale = math.exp(mid)
                if self.relation_probability(weight, rho).mean() < rho:
                    lo_s = mid
                else:
                    hi_s = mid
        share = self.relation_probability(weight, rho)
        target = target_frequencies(cfg.num_predicate_classes, cfg.predicate_skew, cfg.rare_fraction)
        base = self.subj_term[cs] + self.obj_term[co] + disp @ self.disp_term + self.ctx_term[types]
        for _ in range(400):
            counts = np.bincount(np.argmax(base + self.bias, axis=1), weights=share, minlength=len(target))
            freq = (counts + 0.5) / (counts.sum() + 0.5 * len(target))
            self.bias += 0.5 * (np.log(target) - np.log(freq))


def _random_box(rng: np.random.Generator) -> np.ndarray:
    w, h = rng.uniform(0.1, 0.35, size=2)
    x1 = rng.uniform(0.0, 1.0 - w)
    y1 = rng.uniform(0.0, 1.0 - h)
    return np.array([x1, y1, x1 + w, y1 + h])


def _place_boxes(rng, count: int, avoid: list[np.ndarray], max_iou: float) -> list[np.ndarray]:
    boxes: list[np.ndarray] = []
    for _ in range(count):
        box = _random_box(rng)
        for _attempt in range(100):
            others = avoid + boxes
            if not others or iou(box, np.array(others)).max() <= max_iou:
                break
            box = _random_box(rng)
        boxes.append(box)
    return boxes


def _jitter(rng, box: np.ndarray, scale: float) -> np.ndarray:
    for _ in range(50):
        w, h = box[2] - box[0], box[3] - box[1]
        cand = box + rng.normal(size=4) * scale * np.array([w, h, w, h])
        cand = np.clip(cand, 0.0, 1.0)
        if cand[0] < cand[2] and cand[1] < cand[3] and iou(cand, box)[0, 0] >= 0.6:
            return cand
    return box.copy()


def _class_scores(rng, label: int, num_classes: int, margin: float, noise: float) -> np.ndarray:
    logits = rng.normal(size=num_classes) * noise
    logits[label] += margin
    return nx.softmax_np(logits)


def _centre(box: np.ndarray) -> np.ndarray:
    return np.array([(box[0] + box[2]) / 2, (box[1] + box[3]) / 2])


def synthesize(cfg: SynthConfig, split: str = "train") -> list[SceneInstance]:
    """Draw ``cfg.num_scenes`` scenes; every split of one seed shares the hidden rule."""
    cfg.validate()
    world = World(cfg)
    rng = nx.make_rng(cfg.seed, "scenes", split)
    C, P = cfg.num_object_classes, cfg.num_predicate_classes
    rho = cfg.relation_density
    lo, hi = cfg.object_count_range
    scenes = []
    for s in range(cfg.num_scenes):
        n = int(rng.integers(lo, hi + 1))
        n_bg = int(round(cfg.distractor_rate * n))
        n_obj = max(n - n_bg, min(n, 1))
        n_bg = n - n_obj
        scene_type = int(rng.integers(cfg.num_scene_types))
        classes = rng.choice(world.pools[scene_type], size=n_obj)
        gt_boxes = _place_boxes(rng, n_obj, [], 0.3)
        gt = [GtObject(b, int(c)) for b, c in zip(gt_boxes, classes)]
        relations = []
        for a in range(n_obj):
            for b in range(n_obj):
                if a == b:
                    continue
                disp = _centre(gt_boxes[b]) - _centre(gt_boxes[a])
                w = world.relation_weight(scene_type, classes[a], classes[b], np.linalg.norm(disp))
                if rng.random() >= world.relation_probability(w, rho):
                    continue
                pred = world.predicate(scene_type, classes[a], classes[b], disp)
                if rng.random() < cfg.rule_noise:
                    pred = int(rng.integers(1, P + 1))
                relations.append(Relation(a, b, pred))
        dets = []
        for g in gt:
            feat = world.embeddings[g.class_id] + rng.normal(size=cfg.d_v) * cfg.feature_noise
            dets.append(Detection(
                _jitter(rng, g.box, cfg.box_jitter), feat,
                _class_scores(rng, g.class_id, C, 3.0, cfg.label_noise),
            ))
        for b in _place_boxes(rng, n_bg, list(gt_boxes), 0.3):
            look = int(rng.integers(C))
            mix = cfg.distractor_mimicry
            feat = (1 - mix) * world.background + mix * world.embeddings[look] + rng.normal(size=cfg.d_v) * cfg.feature_noise
            dets.append(Detection(b, feat, _class_scores(rng, look, C, 1.5, cfg.label_noise)))
        order = rng.permutation(len(dets))
        scenes.append(SceneInstance(
            image_id=f"{split}-{cfg.seed}-{s:05d}",
            detections=[dets[k] for k in order],
            gt_objects=gt,
            gt_relations=relations,
        ))
    return scenes


# ---------------------------------------------------------------- dataset files

def _scene_to_json(scene: SceneInstance) -> dict[str, Any]:
    return {
        "image_id": scene.image_id,
        "detections": [
            {"box": d.box.tolist(), "visual_feature": d.visual_feature.tolist(), "class_scores": d.class_scores.tolist()}
            for d in scene.detections
        ],
        "gt_objects": [{"box": g.box.tolist(), "class_id": g.class_id} for g in scene.gt_objects],
        "gt_relations": [list(r) for r in scene.gt_relations],
    }


def _scene_from_json(d: dict[str, Any]) -> SceneInstance:
    scene = SceneInstance(
        image_id=str(d["image_id"]),
        detections=[Detection(x["box"], x["visual_feature"], x["class_scores"]) for x in d["detections"]],
        gt_objects=[GtObject(x["box"], x["class_id"]) for x in d["gt_objects"]],
        gt_relations=[tuple(r) for r in d["gt_relations"]],
    )
    scene.validate()
    return scene


def _dumps(obj: Any) -> str:
    # json emits repr() floats, which round-trip f64 exactly and ignore locale
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def dataset_header(d_v: int, num_object_classes: int, num_predicate_classes: int, **extra) -> dict[str, Any]:
    return {
        "format": DATASET_FORMAT,
        "version": SCHEMA_VERSION,
        "d_v": d_v,
        "num_object_classes": num_object_classes,
        "num_predicate_classes": num_predicate_classes,
        **extra,
    }


def write_dataset(scenes: list[SceneInstance], path, header: dict[str, Any]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps(header) + "\n")
        for scene in scenes:
            fh.write(_dumps(_scene_to_json(scene)) + "\n")


def read_dataset(path) -> tuple[dict[str, Any], list[SceneInstance]]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DataError(f"{path}: empty file, header line missing")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DataError(f"{path}:1: malformed header: {e.msg}") from None
    if header.get("format") != DATASET_FORMAT:
        raise DataError(f"{path}:1: not a {DATASET_FORMAT} header")
    if header.get("version") != SCHEMA_VERSION:
        raise DataError(f"{path}:1: unsupported schema version {header.get('version')}")
    scenes = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            scenes.append(_scene_from_json(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise DataError(f"{path}:{lineno}: malformed scene: {e}") from None
    return header, scenes


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: SquatModel, path, iteration: int = 0, extra: dict[str, Any] | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": SCHEMA_VERSION,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "iteration": iteration,
        "extra": extra or {},
        "params": {
            name: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
            for name, t in model.named_parameters()
        },
    }
    Path(path).write_text(_dumps(doc) + "\n", encoding="utf-8")


def load_checkpoint(path, expect: ModelConfig | None = None) -> tuple[SquatModel, dict[str, Any]]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: malformed checkpoint: {e.msg}") from None
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != SCHEMA_VERSION:
        raise DataError(f"{path}: not a {CHECKPOINT_FORMAT} v{SCHEMA_VERSION} file")
    cfg = ModelConfig.from_dict(doc["config"])
    model = SquatModel(expect if expect is not None else cfg, seed=doc.get("seed", 0))
    state = {}
    for name, entry in doc["params"].items():
        arr = np.asarray(entry["data"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if arr.size != int(np.prod(shape)):
            raise ShapeError(f"{path}: parameter {name} declares shape {shape} but holds {arr.size} values")
        state[name] = arr.reshape(shape)
    model.load_state_dict(state)
    meta = {"iteration": doc.get("iteration", 0), "extra": doc.get("extra", {})}
    return model, meta
