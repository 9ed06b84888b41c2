"""Stage 1: multi-objective LambdaLoss pretraining of the policy network."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from grade.core import OBJECTIVES, ContractError, Session, SessionArrays, WeightVector, fuse_rows, rank_rows
from grade.metrics import COL_CLICK, COL_CONVERSION, COL_GPM_TOP2, COL_ORDER, RelevanceTable, discounts
from grade.policy import AdamState, PolicyParams, TrainingDivergence, adam_step, backward, forward

# relevance column used for each objective's pairs
OBJECTIVE_COLUMNS = {"ctr": COL_CLICK, "cvr": COL_CONVERSION, "opm": COL_ORDER, "gpm": COL_GPM_TOP2}


@dataclass(frozen=True)
class LtrConfig:
    loss_weights: tuple[float, float, float, float] = field(default=(1.0, 1.0, 1.0, 1.0))
    sigma: float = 10.0
    epochs: int = 5
    batch_size: int = 2048
    lr: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "loss_weights", tuple(float(x) for x in self.loss_weights))
        if len(self.loss_weights) != 4 or min(self.loss_weights) < 0 or max(self.loss_weights) == 0:
            raise ContractError("loss weights must be >= 0 and not all zero")
        if self.sigma <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ContractError("invalid LTR config")
        if not 0 <= self.lr < float("inf"):
            raise ContractError("learning rate must be finite and >= 0")


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lambda_loss_rows(gains: np.ndarray, idcg: np.ndarray, scores: np.ndarray, item_ids: np.ndarray,
                     means: np.ndarray, sigma: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Per-session LambdaLoss and its gradient w.r.t. the weight vector.

    gains (B, N) hold 2^rel - 1 for one objective; idcg (B,); scores
    (B, N, K); means (B, K). |delta NDCG| is taken from the ranking the
    current weights induce and treated as a constant.
    """
    fused = fuse_rows(means, scores)
    order = rank_rows(fused, item_ids)
    n = fused.shape[1]
    pos = np.empty_like(order)
    np.put_along_axis(pos, order, np.arange(n)[None, :].repeat(len(order), 0), axis=1)
    disc = discounts(n)[pos]  # (B, N) discount at each item's current rank

    has = idcg > 0
    safe = np.where(has, idcg, 1.0)
    pair = (gains[:, :, None] > gains[:, None, :]) & has[:, None, None]
    delta = np.abs((gains[:, :, None] - gains[:, None, :]) * (disc[:, :, None] - disc[:, None, :]))
    delta = np.where(pair, delta / safe[:, None, None], 0.0)
    diff = fused[:, :, None] - fused[:, None, :]
    loss = (delta * _softplus(-sigma * diff)).sum(axis=(1, 2))
    # d/d diff of softplus(-sigma diff) = -sigma * sigmoid(-sigma diff)
    coef = -sigma * delta * _sigmoid(-sigma * diff)
    dfused = coef.sum(axis=2) - coef.sum(axis=1)
    grad = np.einsum("bn,bnk->bk", dfused, scores)
    return loss, grad


def lambda_loss_for_objective(session: Session, mean: WeightVector, objective: str,
                              sigma: float = 1.0) -> tuple[float, np.ndarray]:
    if objective not in OBJECTIVE_COLUMNS:
        raise ContractError(f"unknown objective {objective!r}")
    data = SessionArrays.from_sessions([session])
    table = data.relevance_table()
    col = OBJECTIVE_COLUMNS[objective]
    loss, grad = lambda_loss_rows(table.gains[:, :, col], table.idcg[:, col], data.scores,
                                  data.item_ids, mean.w[None, :], sigma)
    return float(loss[0]), grad[0]


def ltr_total_rows(data: SessionArrays, session_idx: np.ndarray, means: np.ndarray,
                   config: LtrConfig, table: RelevanceTable | None = None):
    table = table if table is not None else data.relevance_table()
    session_idx = np.asarray(session_idx)
    gains, idcg = table.gains[session_idx], table.idcg[session_idx]
    scores, ids = data.scores[session_idx], data.item_ids[session_idx]
    loss = np.zeros(len(session_idx))
    grad = np.zeros_like(means)
    for name, a in zip(OBJECTIVES, config.loss_weights):
        if a == 0:
            continue
        col = OBJECTIVE_COLUMNS[name]
        l_k, g_k = lambda_loss_rows(gains[:, :, col], idcg[:, col], scores, ids, means, config.sigma)
        loss = loss + a * l_k
        grad = grad + a * g_k
    return loss, grad


def ltr_total_loss(session: Session, mean: WeightVector, config: LtrConfig = LtrConfig()):
    data = SessionArrays.from_sessions([session])
    loss, grad = ltr_total_rows(data, np.array([0]), mean.w[None, :], config)
    return float(loss[0]), grad[0]


@dataclass
class PretrainResult:
    params: PolicyParams
    epoch_losses: list[float]
    batch_losses: list[float]


def pretrain(data: SessionArrays, params: PolicyParams, config: LtrConfig, rng: np.random.Generator,
             on_batch: Callable[[int, int, float], None] | None = None) -> PretrainResult:
    """Mini-batch Adam on the weighted LambdaLoss; the input params are not modified."""
    if len(data) == 0:
        raise ContractError("empty dataset")
    table = data.relevance_table()
    params = params.copy()
    state = AdamState.for_params(params)
    epoch_losses, batch_losses = [], []
    it = 0
    for epoch in range(config.epochs):
        perm = rng.permutation(len(data))
        total, count = 0.0, 0
        for start in range(0, len(data), config.batch_size):
            idx = np.sort(perm[start : start + config.batch_size])
            _, means = forward(params, data.contexts[idx])
            loss, grad = ltr_total_rows(data, idx, means, config, table)
            batch_loss = float(loss.mean())
            if not np.isfinite(batch_loss):
                raise TrainingDivergence(f"non-finite LambdaLoss at epoch {epoch}, batch start {start}")
            g = backward(params, data.contexts[idx], grad / len(idx))
            params, state = adam_step(params, g, state, config.lr)
            batch_losses.append(batch_loss)
            total += batch_loss * len(idx)
            count += len(idx)
            if on_batch is not None:
                on_batch(epoch, it, batch_loss)
            it += 1
        epoch_losses.append(total / count)
    return PretrainResult(params, epoch_losses, batch_losses)
