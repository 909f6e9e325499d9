"""Scene domain model plus node and edge feature construction."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import numerics as nx
from .errors import DataError, ShapeError
from .numerics import Tensor


@dataclass
class Detection:
    box: np.ndarray  # x1, y1, x2, y2 in [0, 1]
    visual_feature: np.ndarray
    class_scores: np.ndarray

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64)
        self.visual_feature = np.asarray(self.visual_feature, dtype=np.float64)
        self.class_scores = np.asarray(self.class_scores, dtype=np.float64)

    @property
    def label(self) -> int:
        return int(np.argmax(self.class_scores))

    @property
    def confidence(self) -> float:
        return float(np.max(self.class_scores))

    def validate(self) -> None:
        b = self.box
        if b.shape != (4,) or np.any(b < 0) or np.any(b > 1) or not (b[0] < b[2] and b[1] < b[3]):
            raise DataError(f"invalid box {b.tolist()}")
        s = self.class_scores
        if np.any(s < 0) or abs(s.sum() - 1.0) > 1e-6:
            raise DataError("class_scores must be nonnegative and sum to 1")


@dataclass
class GtObject:
    box: np.ndarray
    class_id: int

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64)
        self.class_id = int(self.class_id)


class Relation(NamedTuple):
    subj: int
    obj: int
    predicate: int


@dataclass
class SceneInstance:
    image_id: str
    detections: list[Detection]
    gt_objects: list[GtObject] = field(default_factory=list)
    gt_relations: list[Relation] = field(default_factory=list)

    def __post_init__(self):
        self.gt_relations = [Relation(int(s), int(o), int(p)) for s, o, p in self.gt_relations]

    @property
    def n(self) -> int:
        return len(self.detections)

    def validate(self) -> None:
        for d in self.detections:
            d.validate()
        m = len(self.gt_objects)
        seen = set()
        for s, o, p in self.gt_relations:
            if not (0 <= s < m and 0 <= o < m) or s == o:
                raise DataError(f"{self.image_id}: bad relation indices ({s}, {o})")
            if (s, o) in seen:
                raise DataError(f"{self.image_id}: pair ({s}, {o}) related twice")
            if p < 1:
                raise DataError(f"{self.image_id}: predicate ids start at 1, got {p}")
            seen.add((s, o))


class EdgeIndex(NamedTuple):
    i: int
    j: int


def edge_index(n: int) -> list[EdgeIndex]:
    """All ordered pairs i != j in lexicographic order."""
    return [EdgeIndex(i, j) for i in range(n) for j in range(n) if i != j]


def edge_position(n: int, i: int, j: int) -> int:
    """Row of pair (i, j) in the canonical edge order."""
    return i * (n - 1) + (j if j < i else j - 1)


def edge_arrays(n: int) -> tuple[np.ndarray, np.ndarray]:
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    mask = ii != jj
    return ii[mask], jj[mask]


@dataclass
class ExtractionParams:
    W_v: Tensor
    W_g: Tensor
    W_o: Tensor
    W_p: Tensor
    b_v: Tensor | None = None
    b_g: Tensor | None = None
    b_o: Tensor | None = None
    b_p: Tensor | None = None


@dataclass
class FeatureBundle:
    N: Tensor
    E: Tensor
    edges: list[EdgeIndex]

    @property
    def n(self) -> int:
        return self.N.shape[0]


def build_node_features(detections: list[Detection], params: ExtractionParams) -> Tensor:
    """f_i = W_o [W_v v_i ; W_g b_i] for every detection, stacked row-wise."""
    if not detections:
        raise ShapeError("at least one detection is required")
    d_v = params.W_v.shape[0]
    for k, det in enumerate(detections):
        if det.visual_feature.shape != (d_v,):
            raise ShapeError(f"detection {k}: visual feature has shape {det.visual_feature.shape}, expected ({d_v},)")
    v = Tensor(np.stack([d.visual_feature for d in detections]))
    b = Tensor(np.stack([d.box for d in detections]))
    hv = nx.linear(v, params.W_v, params.b_v)
    hg = nx.linear(b, params.W_g, params.b_g)
    return nx.linear(nx.concat([hv, hg]), params.W_o, params.b_o)


def build_edge_features(N: Tensor, params: ExtractionParams) -> FeatureBundle:
    """f_ij = W_p [f_i ; f_j] for every ordered pair, canonical order."""
    n = N.shape[0]
    if n < 2:
        raise ShapeError(f"a scene with {n} node(s) has no edges")
    ii, jj = edge_arrays(n)
    pair = nx.concat([nx.gather_rows(N, ii), nx.gather_rows(N, jj)])
    E = nx.linear(pair, params.W_p, params.b_p)
    return FeatureBundle(N=N, E=E, edges=edge_index(n))
