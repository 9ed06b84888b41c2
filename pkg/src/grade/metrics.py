"""DCG / NDCG and the relevance rules used for rewards and offline evaluation."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from grade.core import ContractError, Session, SessionArrays, check_permutation

BINARY_OBJECTIVES = {"ctr": 0, "cvr": 1, "opm": 2}

# Columns of RelevanceTable.gains.
COL_CLICK, COL_CONVERSION, COL_ORDER, COL_GPM_TOP2 = 0, 1, 2, 3
COL_GRADED = (4, 5, 6, 7)  # pctr, pcvr, popm, pgpm
NUM_COLUMNS = 8


@dataclass(frozen=True)
class RelevanceVector:
    rel: np.ndarray
    source: str = "binary"

    def __post_init__(self):
        rel = np.array(self.rel, dtype=np.float64)
        if self.source == "binary":
            if not np.all((rel == 0) | (rel == 1)):
                raise ContractError("binary relevance must be 0/1")
        elif self.source == "graded":
            if not np.all((rel >= 0) & (rel <= 1)):
                raise ContractError("graded relevance must lie in [0, 1]")
        else:
            raise ContractError(f"unknown relevance source {self.source!r}")
        rel.setflags(write=False)
        object.__setattr__(self, "rel", rel)


@lru_cache(maxsize=32)
def discounts(n: int) -> np.ndarray:
    """1 / log2(i + 1) for 1-based ranks i = 1..n."""
    d = 1.0 / np.log2(np.arange(2, n + 2, dtype=np.float64))
    d.setflags(write=False)
    return d


def gain(rel):
    return np.exp2(rel) - 1.0


def _as_array(rel) -> np.ndarray:
    if isinstance(rel, RelevanceVector):
        rel = rel.rel
    rel = np.asarray(rel, dtype=np.float64)
    if rel.ndim != 1 or rel.size == 0:
        raise ContractError("relevance must be a non-empty 1-d vector")
    return rel


def dcg(rel) -> float:
    rel = _as_array(rel)
    return float(np.sum(gain(rel) * discounts(rel.size)))


def ndcg(rel) -> float:
    rel = _as_array(rel)
    ideal = dcg(np.sort(rel)[::-1])
    if ideal == 0.0:
        return 0.0
    return min(dcg(rel) / ideal, 1.0)


def binary_relevance(session: Session, ranking, objective: str) -> RelevanceVector:
    if objective not in BINARY_OBJECTIVES:
        raise ContractError(f"binary relevance is defined for ctr/cvr/opm, not {objective!r}")
    r = check_permutation(ranking, len(session))
    col = session.label_matrix[:, BINARY_OBJECTIVES[objective]]
    return RelevanceVector(col[r], "binary")


def gpm_top2_labels(pgpm: np.ndarray, item_ids: np.ndarray, converted: np.ndarray) -> np.ndarray:
    """1 for the two highest-pgpm items (ties by ascending id) of converted
    sessions, 0 elsewhere. Inputs are stacked: (S, N), (S, N), (S,)."""
    order = np.lexsort((np.broadcast_to(item_ids, pgpm.shape), -pgpm), axis=-1)
    out = np.zeros(pgpm.shape)
    np.put_along_axis(out, order[:, :2], 1.0, axis=-1)
    return out * np.asarray(converted, dtype=bool)[:, None]


def gpm_relevance(session: Session, ranking) -> RelevanceVector:
    r = check_permutation(ranking, len(session))
    converted = np.array([session.label_matrix[:, 1].any()])
    labels = gpm_top2_labels(session.score_matrix[None, :, 3], session.item_ids[None], converted)[0]
    return RelevanceVector(labels[r], "binary")


def graded_relevance(session: Session, ranking, k: int) -> RelevanceVector:
    r = check_permutation(ranking, len(session))
    return RelevanceVector(session.score_matrix[r, k], "graded")


@dataclass
class RelevanceTable:
    """Per-item gains for every relevance flavour plus each column's IDCG.

    These do not depend on the ranking, so a dataset computes them once and
    any number of candidate rankings are scored by gathering.
    """

    gains: np.ndarray  # (S, N, NUM_COLUMNS)
    idcg: np.ndarray  # (S, NUM_COLUMNS)

    @classmethod
    def build(cls, data: SessionArrays) -> "RelevanceTable":
        labels = data.labels.astype(np.float64)
        converted = data.labels[:, :, 1].any(axis=1)
        top2 = gpm_top2_labels(data.scores[:, :, 3], data.item_ids, converted)
        rel = np.concatenate([labels, top2[:, :, None], data.scores], axis=2)
        gains = gain(rel)
        ideal = -np.sort(-gains, axis=1)
        return cls(gains=gains, idcg=_dcg_from_gains(ideal))

    def ndcg(self, session_idx: np.ndarray, order: np.ndarray) -> np.ndarray:
        """NDCG of every column for each ranked row: (B,) x (B, N) -> (B, C)."""
        g = self.gains[np.asarray(session_idx)[:, None], order]
        d = _dcg_from_gains(g)
        idcg = self.idcg[session_idx]
        safe = np.where(idcg > 0, idcg, 1.0)
        return np.where(idcg > 0, np.minimum(d / safe, 1.0), 0.0)


def _dcg_from_gains(g: np.ndarray) -> np.ndarray:
    # g: (B, N, C); accumulate rank by rank so rows never depend on batch size.
    disc = discounts(g.shape[1])
    acc = g[:, 0, :] * disc[0]
    for i in range(1, g.shape[1]):
        acc = acc + g[:, i, :] * disc[i]
    return acc
