"""Domain types plus simplex and score-fusion arithmetic.

Per-session value objects (``Session``, ``Item`` ...) are what callers see;
``SessionArrays`` stores a whole dataset as stacked numpy arrays so the
training loops can fuse and rank thousands of sessions at once.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

OBJECTIVES = ("ctr", "cvr", "opm", "gpm")
NUM_OBJECTIVES = len(OBJECTIVES)
LABELS = ("click", "conversion", "order")

SIMPLEX_ATOL = 1e-9


class ContractError(ValueError):
    """An argument violates a documented precondition."""


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class WeightVector:
    """Fusion weights (ctr, cvr, opm, gpm): a point on the simplex."""

    w: np.ndarray

    def __post_init__(self):
        w = _frozen(self.w)
        if w.ndim != 1 or w.size < 1:
            raise ContractError(f"weights must be a 1-d vector, got shape {w.shape}")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ContractError(f"weights must be finite and non-negative: {w}")
        if abs(w.sum() - 1.0) > SIMPLEX_ATOL:
            raise ContractError(f"weights must sum to 1, got {w.sum()!r}")
        object.__setattr__(self, "w", w)

    @classmethod
    def uniform(cls, k: int = NUM_OBJECTIVES) -> "WeightVector":
        return cls(np.full(k, 1.0 / k))

    def __len__(self):
        return self.w.size

    def __iter__(self):
        return iter(self.w.tolist())


@dataclass(frozen=True)
class ObjectiveScores:
    """Predicted (pctr, pcvr, popm, pgpm) for one item, each in [0, 1]."""

    s: np.ndarray

    def __post_init__(self):
        s = _frozen(self.s)
        if s.ndim != 1:
            raise ContractError(f"scores must be a 1-d vector, got shape {s.shape}")
        if not np.all((s >= 0) & (s <= 1)):
            raise ContractError(f"scores must lie in [0, 1]: {s}")
        object.__setattr__(self, "s", s)


@dataclass(frozen=True)
class FeedbackLabels:
    click: int = 0
    conversion: int = 0
    order: int = 0

    def __post_init__(self):
        for name in LABELS:
            if getattr(self, name) not in (0, 1):
                raise ContractError(f"{name} label must be 0 or 1")
        if self.conversion > self.click or self.order > self.conversion:
            raise ContractError("labels violate order => conversion => click")

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.click, self.conversion, self.order)


@dataclass(frozen=True)
class Item:
    id: int
    scores: ObjectiveScores
    labels: FeedbackLabels


@dataclass(frozen=True)
class Session:
    """One query context with its candidate items.

    ``latent_type`` is simulator ground truth; the policy only ever reads
    ``context``.
    """

    id: int
    context: np.ndarray
    items: tuple[Item, ...]
    latent_type: int = -1

    def __post_init__(self):
        object.__setattr__(self, "context", _frozen(self.context))
        object.__setattr__(self, "items", tuple(self.items))
        if len(self.items) < 2:
            raise ContractError("a session needs at least 2 items")
        ids = [it.id for it in self.items]
        if len(set(ids)) != len(ids):
            raise ContractError(f"duplicate item ids in session {self.id}")

    def __len__(self):
        return len(self.items)

    @property
    def item_ids(self) -> np.ndarray:
        return np.array([it.id for it in self.items], dtype=np.int64)

    @property
    def score_matrix(self) -> np.ndarray:
        return np.stack([it.scores.s for it in self.items])

    @property
    def label_matrix(self) -> np.ndarray:
        return np.array([it.labels.as_tuple() for it in self.items], dtype=np.int8)


@dataclass(frozen=True)
class RewardBreakdown:
    post: float
    prior: float
    format: float
    total: float


def fuse_score(weights: WeightVector, scores: ObjectiveScores) -> float:
    w, s = weights.w, scores.s
    if w.shape != s.shape:
        raise ContractError(f"dimension mismatch: {w.shape} weights vs {s.shape} scores")
    return float(sum(float(w[k]) * float(s[k]) for k in range(w.size)))


def fuse_rows(weights: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Fused scores for stacked sessions.

    weights: (B, K); scores: (B, N, K) -> (B, N). The K-term sum is
    unrolled so every row is computed identically regardless of B.
    """
    if weights.shape[-1] != scores.shape[-1]:
        raise ContractError("dimension mismatch between weights and scores")
    w = weights[..., None, :]
    out = scores[..., 0] * w[..., 0]
    for k in range(1, scores.shape[-1]):
        out = out + scores[..., k] * w[..., k]
    return out


def rank_rows(fused: np.ndarray, item_ids: np.ndarray) -> np.ndarray:
    """Row-wise argsort by fused score descending, ties by ascending id."""
    item_ids = np.broadcast_to(item_ids, fused.shape)
    return np.lexsort((item_ids, -fused), axis=-1)


def rank_by_fused(weights: WeightVector, session: Session) -> np.ndarray:
    scores = session.score_matrix
    if weights.w.size != scores.shape[1]:
        raise ContractError("dimension mismatch between weights and scores")
    fused = fuse_rows(weights.w[None, :], scores[None])[0]
    return rank_rows(fused, session.item_ids)


def softmax(v: np.ndarray) -> np.ndarray:
    z = v - np.max(v, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def project_to_simplex(v) -> WeightVector:
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ContractError(f"logits must be finite: {v}")
    return WeightVector(softmax(v))


def check_permutation(ranking, n: int) -> np.ndarray:
    r = np.asarray(ranking)
    if r.shape != (n,) or not np.array_equal(np.sort(r), np.arange(n)):
        raise ContractError(f"not a permutation of {n} items: {ranking}")
    return r


@dataclass
class SessionArrays:
    """A dataset of equal-length sessions held as stacked arrays.

    contexts (S, D), scores (S, N, K), labels (S, N, 3) int8 in
    (click, conversion, order) order, item_ids (S, N), session_ids (S,),
    latent_types (S,).
    """

    contexts: np.ndarray
    scores: np.ndarray
    labels: np.ndarray
    item_ids: np.ndarray
    session_ids: np.ndarray
    latent_types: np.ndarray
    _table: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        s = self.contexts.shape[0]
        for name in ("scores", "labels", "item_ids", "session_ids", "latent_types"):
            if getattr(self, name).shape[0] != s:
                raise ContractError(f"{name} has inconsistent session count")
        if self.scores.shape[1] < 2:
            raise ContractError("sessions need at least 2 items")

    def __len__(self):
        return self.contexts.shape[0]

    @property
    def num_items(self) -> int:
        return self.scores.shape[1]

    @property
    def context_dim(self) -> int:
        return self.contexts.shape[1]

    @classmethod
    def from_sessions(cls, sessions: Sequence[Session]) -> "SessionArrays":
        if not sessions:
            raise ContractError("empty session list")
        n = len(sessions[0])
        if any(len(s) != n for s in sessions):
            raise ContractError("all sessions must have the same number of items")
        return cls(
            contexts=np.stack([s.context for s in sessions]),
            scores=np.stack([s.score_matrix for s in sessions]),
            labels=np.stack([s.label_matrix for s in sessions]),
            item_ids=np.stack([s.item_ids for s in sessions]),
            session_ids=np.array([s.id for s in sessions], dtype=np.int64),
            latent_types=np.array([s.latent_type for s in sessions], dtype=np.int64),
        )

    def session(self, i: int) -> Session:
        items = tuple(
            Item(
                id=int(self.item_ids[i, j]),
                scores=ObjectiveScores(self.scores[i, j]),
                labels=FeedbackLabels(*(int(x) for x in self.labels[i, j])),
            )
            for j in range(self.num_items)
        )
        return Session(
            id=int(self.session_ids[i]),
            context=self.contexts[i],
            items=items,
            latent_type=int(self.latent_types[i]),
        )

    def sessions(self) -> list[Session]:
        return [self.session(i) for i in range(len(self))]

    def subset(self, index) -> "SessionArrays":
        index = np.asarray(index)
        return SessionArrays(
            contexts=self.contexts[index],
            scores=self.scores[index],
            labels=self.labels[index],
            item_ids=self.item_ids[index],
            session_ids=self.session_ids[index],
            latent_types=self.latent_types[index],
        )

    def relevance_table(self):
        """Cached ranking-independent gains and ideal DCGs (see metrics)."""
        if self._table is None:
            from grade.metrics import RelevanceTable

            self._table = RelevanceTable.build(self)
        return self._table
