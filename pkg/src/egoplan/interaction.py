"""Ego-centric dual interaction and coarse-to-fine query selection.

Each dual-interaction layer runs ego-to-object cross attention, fuses the
attention weight of every object with its geometric and classification
scores, then lets the objects attend to each other. A top-K cut between
layers keeps only the highest fused scores. Agents and map elements are
filtered in independent branches.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bevgrid import BevGrid, polyline_geo_score, sample_geo_score
from .errors import DomainError, EmptyInputError, ShapeError
from .netlet import DenseNet, init_dense, position_embedding
from .rng import substream

DEFAULT_FRACTIONS = (0.20, 0.05, 0.02)
QUERY_KINDS = ("agent", "map", "ego")


@dataclass(frozen=True, eq=False)
class QueryEmbedding:
    feature: np.ndarray
    position: tuple
    confidence: float
    kind: str
    source_id: int
    # map queries keep their polyline so the geometric score can use every point
    points: np.ndarray | None = None

    def __post_init__(self):
        f = np.array(self.feature, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(f)):
            raise ValueError("query feature must be finite")
        if not 0.0 <= self.confidence <= 1.0:
            raise DomainError("confidence must lie in [0, 1]")
        if self.kind not in QUERY_KINDS:
            raise ValueError(f"unknown query kind {self.kind!r}")
        f.setflags(write=False)
        object.__setattr__(self, "feature", f)
        object.__setattr__(self, "position", (float(self.position[0]), float(self.position[1])))

    def with_feature(self, feature):
        return QueryEmbedding(feature, self.position, self.confidence, self.kind, self.source_id,
                              self.points)


@dataclass(frozen=True)
class ScoreBreakdown:
    source_id: int
    s_attn: float
    s_geo: float
    s_cls: float
    s_inter: float


@dataclass(frozen=True)
class SelectionSchedule:
    agent_fractions: tuple = DEFAULT_FRACTIONS
    map_fractions: tuple = DEFAULT_FRACTIONS

    def __post_init__(self):
        for fr in (self.agent_fractions, self.map_fractions):
            if len(fr) < 1:
                raise ValueError("a schedule needs at least one layer")
            if any(not 0.0 < f <= 1.0 for f in fr):
                raise ValueError("keep fractions must lie in (0, 1]")
            if any(b >= a for a, b in zip(fr, fr[1:])):
                raise ValueError("keep fractions must strictly decrease")
        if len(self.agent_fractions) != len(self.map_fractions):
            raise ValueError("agent and map branches share the layer count")
        object.__setattr__(self, "agent_fractions", tuple(self.agent_fractions))
        object.__setattr__(self, "map_fractions", tuple(self.map_fractions))

    @property
    def M(self):
        return len(self.agent_fractions)


def keep_count(fraction, initial):
    """K_i = max(1, round(fraction * initial)), rounding halves up."""
    return max(1, int(math.floor(fraction * initial + 0.5)))


@dataclass
class AttentionParams:
    """Single-head projections; keys and queries see [feature | position embedding]."""

    query: DenseNet
    key: DenseNet
    value: DenseNet

    @classmethod
    def init(cls, C, rng):
        std = 1.0 / math.sqrt(2 * C)
        return cls(init_dense([2 * C, C], ["identity"], rng, std),
                   init_dense([2 * C, C], ["identity"], rng, std),
                   init_dense([C, C], ["identity"], rng, 1.0 / math.sqrt(C)))

    @property
    def d_k(self):
        return self.key.out_dim


@dataclass
class LayerParams:
    cross: AttentionParams
    self_attn: AttentionParams

    @classmethod
    def init(cls, C, rng):
        return cls(AttentionParams.init(C, rng), AttentionParams.init(C, rng))


@dataclass
class SelectionParams:
    agent_layers: list
    map_layers: list

    @classmethod
    def init(cls, C, M, seed):
        rng = substream(seed, "init", 1)
        return cls([LayerParams.init(C, rng) for _ in range(M)],
                   [LayerParams.init(C, rng) for _ in range(M)])


def _embed_rows(objects):
    feats = np.stack([o.feature for o in objects])
    pos = np.array([o.position for o in objects], dtype=np.float64)
    return feats, np.hstack([feats, position_embedding(pos, feats.shape[1])])


def _attend(q_rows, k_rows, v_feats, params: AttentionParams):
    """Row-wise attention: weights (Nq, Nk) and the residual update of each query."""
    q = params.query.forward(q_rows)
    k = params.key.forward(k_rows)
    logits = q @ k.T / math.sqrt(params.d_k)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return w, w @ params.value.forward(v_feats)


def _check(ego, objects):
    if not objects:
        raise EmptyInputError("attention needs at least one object")
    C = ego.feature.shape[0]
    if any(o.feature.shape[0] != C for o in objects):
        raise ShapeError("ego and objects must share the feature width")


def decoupled_attention(ego: QueryEmbedding, objects, params: AttentionParams):
    """Return (updated ego feature, attention weight per object)."""
    objects = list(objects)
    _check(ego, objects)
    feats, rows = _embed_rows(objects)
    _, ego_row = _embed_rows([ego])
    w, upd = _attend(ego_row, rows, feats, params)
    return ego.feature + upd[0], w[0]


def fuse_scores(s_attn, s_geo, s_cls):
    """Interactive score: the product of attention, geometric and class scores."""
    if all(isinstance(v, float) for v in (s_attn, s_geo, s_cls)):
        # scalar fast path, called once per query per layer
        if not (0.0 <= s_attn <= 1.0 and 0.0 <= s_geo <= 1.0 and 0.0 <= s_cls <= 1.0):
            raise DomainError("score factors must lie in [0, 1]")
        return s_attn * s_geo * s_cls
    vals = [np.asarray(v, dtype=np.float64) for v in (s_attn, s_geo, s_cls)]
    for v in vals:
        if np.any(v < 0.0) or np.any(v > 1.0) or np.any(np.isnan(v)):
            raise DomainError("score factors must lie in [0, 1]")
    out = vals[0] * vals[1] * vals[2]
    return float(out) if out.ndim == 0 else out


def geo_score(m_d: BevGrid, q: QueryEmbedding):
    if q.kind == "map" and q.points is not None:
        return polyline_geo_score(m_d, q.points)
    return sample_geo_score(m_d, q.position)


def dual_interaction_layer(ego: QueryEmbedding, objects, m_d: BevGrid, params: LayerParams):
    """Cross attention ego->objects, score fusion, then object self attention.

    Returns (updated ego, updated objects, ScoreBreakdown per object).
    """
    objects = list(objects)
    _check(ego, objects)
    new_ego, s_attn = decoupled_attention(ego, objects, params.cross)
    scores = []
    for o, a in zip(objects, s_attn):
        g = geo_score(m_d, o)
        scores.append(ScoreBreakdown(o.source_id, float(a), g, o.confidence,
                                     fuse_scores(float(a), g, o.confidence)))
    feats, rows = _embed_rows(objects)
    _, upd = _attend(rows, rows, feats, params.self_attn)
    updated = [o.with_feature(f) for o, f in zip(objects, feats + upd)]
    return ego.with_feature(new_ego), updated, scores


def rank_top_k(scores, k):
    """Indices of the ``k`` largest fused scores; ties go to the lower source id."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i].s_inter, scores[i].source_id))
    return order[:k]


@dataclass(frozen=True)
class LayerTrace:
    layer: int
    scores: tuple
    kept_ids: tuple

    def to_dict(self):
        kept = set(self.kept_ids)
        return {"layer": self.layer,
                "queries": [{"id": s.source_id, "s_attn": s.s_attn, "s_geo": s.s_geo,
                             "s_cls": s.s_cls, "s_inter": s.s_inter, "kept": s.source_id in kept}
                            for s in self.scores]}


@dataclass(frozen=True)
class BranchResult:
    kept: tuple
    ego_feature: np.ndarray
    trace: tuple


@dataclass(frozen=True)
class SelectionResult:
    agents: BranchResult
    maps: BranchResult
    ego_feature: np.ndarray

    @property
    def agent_ids(self):
        return tuple(q.source_id for q in self.agents.kept)

    @property
    def map_ids(self):
        return tuple(q.source_id for q in self.maps.kept)

    def to_dict(self):
        return {"agents": [t.to_dict() for t in self.agents.trace],
                "maps": [t.to_dict() for t in self.maps.trace],
                "selected_agents": list(self.agent_ids), "selected_maps": list(self.map_ids)}


def _run_branch(ego, objects, m_d, fractions, layers):
    # canonical id order makes every float reduction independent of input order
    current = sorted(objects, key=lambda q: q.source_id)
    if len({q.source_id for q in current}) != len(current):
        raise ValueError("source ids must be unique within a branch")
    n0 = len(current)
    trace = []
    ego_q = ego
    if n0 == 0:
        return BranchResult((), ego.feature, ())
    if len(layers) < len(fractions):
        raise ShapeError("need one parameter set per selection layer")
    for i, (frac, params) in enumerate(zip(fractions, layers)):
        ego_q, updated, scores = dual_interaction_layer(ego_q, current, m_d, params)
        k = min(keep_count(frac, n0), len(current))
        idx = sorted(rank_top_k(scores, k))
        trace.append(LayerTrace(i, tuple(scores), tuple(current[j].source_id for j in idx)))
        current = [updated[j] for j in idx]
    return BranchResult(tuple(current), ego_q.feature, tuple(trace))


def coarse_to_fine_select(ego, agents, maps, m_d, schedule: SelectionSchedule,
                          params: SelectionParams) -> SelectionResult:
    """Run both branches; the final ego feature concatenates the branch outputs."""
    a = _run_branch(ego, agents, m_d, schedule.agent_fractions, params.agent_layers)
    m = _run_branch(ego, maps, m_d, schedule.map_fractions, params.map_layers)
    return SelectionResult(a, m, np.concatenate([a.ego_feature, m.ego_feature]))


# ---------------------------------------------------------------- query construction

LABELS = ("car", "truck", "cyclist", "pedestrian", "cone")


@dataclass
class QueryEncoders:
    """Stand-in for the perception decoder: maps boxes and polylines to features."""

    agent: DenseNet
    map: DenseNet

    @classmethod
    def init(cls, C, seed):
        rng = substream(seed, "init", 2)
        return cls(init_dense([11 + len(LABELS), C, C], ["relu", "identity"], rng),
                   init_dense([40 + 3, C, C], ["relu", "identity"], rng))


def _box_input(box, label):
    arr = box.to_array()
    arr[:3] /= 10.0
    arr[8:] /= 5.0
    onehot = np.zeros(len(LABELS))
    if label in LABELS:
        onehot[LABELS.index(label)] = 1.0
    return np.concatenate([arr, onehot])


def agent_query(pa, enc: QueryEncoders) -> QueryEmbedding:
    feat = enc.agent.forward(_box_input(pa.box, pa.label))
    return QueryEmbedding(feat, (pa.box.x, pa.box.y), pa.confidence, "agent", pa.id)


def map_query(pm, enc: QueryEncoders) -> QueryEmbedding:
    from .scene import MAP_KINDS

    pts = pm.polyline.points
    kind = np.zeros(3)
    kind[MAP_KINDS.index(pm.polyline.kind)] = 1.0
    feat = enc.map.forward(np.concatenate([pts.ravel() / 30.0, kind]))
    centroid = pts.mean(axis=0)
    return QueryEmbedding(feat, tuple(centroid), pm.confidence, "map", pm.id, pts)


def ego_query(feature) -> QueryEmbedding:
    return QueryEmbedding(feature, (0.0, 0.0), 1.0, "ego", 0)
