"""Box geometry, detection-to-ground-truth matching and task views of a scene."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .graph import Detection, SceneInstance, edge_position

TASKS = ("predcls", "sgcls", "sgdet")


def iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between box arrays [m, 4] and [k, 4]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 2], b[None, :, 2])
    y2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def union_box(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([np.minimum(a[..., :2], b[..., :2]), np.maximum(a[..., 2:], b[..., 2:])], axis=-1)


def match_detections(det_boxes: np.ndarray, gt_boxes: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """GT index matched by each detection (best IoU >= threshold), or -1."""
    det_boxes = np.asarray(det_boxes).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes).reshape(-1, 4)
    if len(det_boxes) == 0 or len(gt_boxes) == 0:
        return np.full(len(det_boxes), -1, dtype=np.intp)
    ov = iou(det_boxes, gt_boxes)
    best = ov.argmax(axis=1)
    return np.where(ov[np.arange(len(det_boxes)), best] >= threshold, best, -1).astype(np.intp)


@dataclass
class SceneView:
    """A scene as seen by the model under one task mode."""

    scene: SceneInstance
    detections: list[Detection]
    det_to_gt: np.ndarray  # GT object index per detection, -1 for background
    labels: np.ndarray  # predicted object label per detection
    confidences: np.ndarray  # 1.0 in GT-box modes
    gt_boxes_mode: bool

    @property
    def n(self) -> int:
        return len(self.detections)


def _one_hot(k: int, size: int) -> np.ndarray:
    v = np.zeros(size)
    v[k] = 1.0
    return v


def task_view(scene: SceneInstance, task: str, iou_threshold: float = 0.5) -> SceneView:
    """predcls: GT boxes and labels; sgcls: GT boxes, predicted labels; sgdet: raw detections."""
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    gt_boxes = np.array([g.box for g in scene.gt_objects]).reshape(-1, 4)
    det_boxes = np.array([d.box for d in scene.detections]).reshape(-1, 4)
    matched = match_detections(det_boxes, gt_boxes, iou_threshold)
    if task == "sgdet":
        dets = scene.detections
        return SceneView(
            scene, dets, matched,
            np.array([d.label for d in dets], dtype=np.intp),
            np.array([d.confidence for d in dets]),
            gt_boxes_mode=False,
        )
    # GT-box modes: one node per GT object, visual feature from its detection
    source = {}
    for k, g in enumerate(matched):
        if g >= 0 and g not in source:
            source[int(g)] = k
    dets = []
    for g, obj in enumerate(scene.gt_objects):
        if g not in source:
            raise DataError(f"{scene.image_id}: GT object {g} has no detection to take features from")
        det = scene.detections[source[g]]
        num_classes = len(det.class_scores)
        scores = _one_hot(obj.class_id, num_classes) if task == "predcls" else det.class_scores
        dets.append(Detection(obj.box.copy(), det.visual_feature, scores))
    labels = np.array([d.label for d in dets], dtype=np.intp)
    return SceneView(scene, dets, np.arange(len(dets), dtype=np.intp), labels, np.ones(len(dets)), gt_boxes_mode=True)


def pair_targets(view: SceneView) -> tuple[np.ndarray, np.ndarray]:
    """Predicate target per canonical edge (0 = background) and the positive edge positions."""
    n = view.n
    targets = np.zeros(n * (n - 1), dtype=np.intp)
    lookup = {(s, o): p for s, o, p in view.scene.gt_relations}
    by_gt: dict[int, list[int]] = {}
    for k, g in enumerate(view.det_to_gt):
        if g >= 0:
            by_gt.setdefault(int(g), []).append(k)
    for (s, o), p in lookup.items():
        for i in by_gt.get(s, ()):
            for j in by_gt.get(o, ()):
                if i != j:
                    targets[edge_position(n, i, j)] = p
    return targets, np.flatnonzero(targets)
