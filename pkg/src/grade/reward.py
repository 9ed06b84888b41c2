"""Composite reward: posterior NDCG, prior NDCG and the gated weight-format term."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from grade.core import (
    ContractError,
    RewardBreakdown,
    Session,
    SessionArrays,
    WeightVector,
    fuse_rows,
    rank_by_fused,
    rank_rows,
)
from grade.metrics import (
    COL_CLICK,
    COL_CONVERSION,
    COL_GRADED,
    COL_ORDER,
    RelevanceTable,
    binary_relevance,
    graded_relevance,
    ndcg,
)

# posterior columns in (ctr, cvr, opm, gpm) order; gpm uses graded pGPM
POSTERIOR_COLUMNS = (COL_CLICK, COL_CONVERSION, COL_ORDER, COL_GRADED[3])


@dataclass(frozen=True)
class RewardConfig:
    lambda_post: float = 1.0
    lambda_prior: float = 0.3
    lambda_format: float = 0.05
    post_weights: tuple[float, float, float, float] = field(default=(0.25, 0.25, 0.25, 0.25))
    tau: float = 0.4
    alpha_pct: float = 80.0
    beta_pct: float = 60.0

    def __post_init__(self):
        object.__setattr__(self, "post_weights", tuple(float(x) for x in self.post_weights))
        if min(self.lambda_post, self.lambda_prior, self.lambda_format) < 0:
            raise ContractError("reward coefficients must be >= 0")
        if len(self.post_weights) != 4 or min(self.post_weights) < 0:
            raise ContractError("need four non-negative posterior weights")
        if not self.tau > 0:
            raise ContractError("tau must be > 0")
        for p in (self.alpha_pct, self.beta_pct):
            if not 0 < p < 200:
                raise ContractError("format proportions must lie in (0, 200)")


def gating_fn(x, tau: float = 0.4):
    """Soft band reward: positive on (0, tau), peak tau/pi at tau/2, negative elsewhere."""
    if not tau > 0:
        raise ContractError("tau must be > 0")
    arr = np.asarray(x, dtype=np.float64)
    left = np.expm1(np.minimum(arr, 0.0))
    mid = (tau / math.pi) * np.sin(math.pi * np.clip(arr, 0.0, tau) / tau)
    right = np.expm1(tau - np.maximum(arr, tau))
    out = np.where(arr < 0, left, np.where(arr > tau, right, mid))
    return float(out) if out.ndim == 0 else out


def format_reward_array(w: np.ndarray, config: RewardConfig) -> np.ndarray:
    """Format reward for stacked weights (..., 4) in (ctr, cvr, opm, gpm) order."""
    ctr, cvr, opm, gpm = w[..., 0], w[..., 1], w[..., 2], w[..., 3]
    r_opm = gating_fn(opm - config.alpha_pct / 100.0 * np.maximum(np.maximum(ctr, cvr), gpm), config.tau)
    r_cvr = gating_fn(cvr - config.beta_pct / 100.0 * np.maximum(ctr, gpm), config.tau)
    return r_opm + r_cvr


def format_reward(weights: WeightVector, config: RewardConfig = RewardConfig()) -> float:
    return float(format_reward_array(weights.w, config))


def posterior_reward(session: Session, ranking, config: RewardConfig = RewardConfig()) -> float:
    wc, wv, wo, wg = config.post_weights
    total = wc * ndcg(binary_relevance(session, ranking, "ctr"))
    total += wv * ndcg(binary_relevance(session, ranking, "cvr"))
    total += wo * ndcg(binary_relevance(session, ranking, "opm"))
    total += wg * ndcg(graded_relevance(session, ranking, 3))
    return total


def prior_reward(session: Session, ranking, config: RewardConfig = RewardConfig()) -> float:
    return sum(ndcg(graded_relevance(session, ranking, k)) for k in range(4)) / 4.0


def _combine(post, prior, fmt, config: RewardConfig):
    gated = np.where(post + prior > 0, fmt, 0.0)
    return config.lambda_post * post + config.lambda_prior * prior + config.lambda_format * gated


def total_reward(session: Session, weights: WeightVector, config: RewardConfig = RewardConfig()) -> RewardBreakdown:
    ranking = rank_by_fused(weights, session)
    post = posterior_reward(session, ranking, config)
    prior = prior_reward(session, ranking, config)
    fmt = format_reward(weights, config)
    return RewardBreakdown(post, prior, fmt, float(_combine(post, prior, fmt, config)))


@dataclass
class RewardArrays:
    """Reward components for a stack of (session, weights) rows."""

    post: np.ndarray
    prior: np.ndarray
    format: np.ndarray
    total: np.ndarray
    ndcg: np.ndarray  # (B, C) per-column NDCG of the induced ranking

    def breakdown(self, i: int) -> RewardBreakdown:
        return RewardBreakdown(float(self.post[i]), float(self.prior[i]),
                               float(self.format[i]), float(self.total[i]))


def reward_rows(data: SessionArrays, session_idx: np.ndarray, weights: np.ndarray,
                config: RewardConfig = RewardConfig(), table: RelevanceTable | None = None) -> RewardArrays:
    """Vectorized total_reward: row b scores ``weights[b]`` on session ``session_idx[b]``."""
    session_idx = np.asarray(session_idx)
    table = table if table is not None else data.relevance_table()
    fused = fuse_rows(weights, data.scores[session_idx])
    order = rank_rows(fused, data.item_ids[session_idx])
    nd = table.ndcg(session_idx, order)
    pw = config.post_weights
    post = pw[0] * nd[:, POSTERIOR_COLUMNS[0]]
    for k in range(1, 4):
        post = post + pw[k] * nd[:, POSTERIOR_COLUMNS[k]]
    prior = (nd[:, COL_GRADED[0]] + nd[:, COL_GRADED[1]] + nd[:, COL_GRADED[2]] + nd[:, COL_GRADED[3]]) / 4.0
    fmt = format_reward_array(weights, config)
    return RewardArrays(post, prior, fmt, _combine(post, prior, fmt, config), nd)
