"""Stage 2: group-relative policy optimization with Dirichlet exploration.

Randomness for a session's group comes from its own generator, seeded by
(master seed, epoch, iteration, session id), so results do not depend on how
sessions are split across workers.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from grade.core import ContractError, Session, SessionArrays
from grade.dirichlet import (
    AnnealSchedule,
    DegenerateParamsError,
    anneal,
    floor_simplex,
    grad_log_density_array,
    kl_array,
    kl_grad_first_array,
    log_density_array,
    sample_array,
)
from grade.metrics import COL_CLICK, COL_CONVERSION, COL_GPM_TOP2, COL_ORDER
from grade.policy import (
    AdamState,
    PolicyGradient,
    PolicyParams,
    TrainingDivergence,
    adam_step,
    backward,
    forward,
    snapshot,
)
from grade.reward import RewardConfig, reward_rows

_STREAM_TAG = 0x6B5A


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 20
    clip_eps: float = 0.2
    kl_coef: float = 0.05
    adv_eps: float = 1e-8
    schedule: AnnealSchedule = field(default_factory=AnnealSchedule)
    fixed_alpha: float | None = None  # overrides the schedule when set
    inner_steps: int = 1
    epochs: int = 3
    batch_size: int = 2048
    lr: float = 1e-3

    def __post_init__(self):
        if self.group_size < 2:
            raise ContractError("group size must be >= 2")
        if not 0 < self.clip_eps < 1:
            raise ContractError("clip epsilon must lie in (0, 1)")
        if self.kl_coef < 0 or self.adv_eps < 0:
            raise ContractError("kl coefficient and advantage epsilon must be >= 0")
        if self.inner_steps < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ContractError("invalid GRPO loop settings")
        if self.fixed_alpha is not None and not self.fixed_alpha > 0:
            raise ContractError("fixed concentration must be > 0")
        if not 0 <= self.lr < float("inf"):
            raise ContractError("learning rate must be finite and >= 0")

    def hat_alpha(self, t: int) -> float:
        return self.fixed_alpha if self.fixed_alpha is not None else anneal(self.schedule, t)


def compute_advantages(rewards: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """(r - mean) / (population std + eps) along the last axis."""
    r = np.asarray(rewards, dtype=np.float64)
    mu = r.mean(axis=-1, keepdims=True)
    # a constant row can have a mean one ulp off its entries; pin it to zero
    flat = r.max(axis=-1, keepdims=True) == r.min(axis=-1, keepdims=True)
    centered = np.where(flat, 0.0, r - mu)
    sd = np.sqrt((centered * centered).mean(axis=-1, keepdims=True))
    return centered / (sd + eps)


@dataclass
class GroupBatch:
    """G sampled actions for each of B sessions, collected under one policy."""

    session_idx: np.ndarray  # (B,) rows into the dataset
    session_ids: np.ndarray  # (B,)
    contexts: np.ndarray  # (B, D)
    hat_alpha: float
    old_mean: np.ndarray  # (B, K)
    actions: np.ndarray  # (B, G, K), floored
    old_logp: np.ndarray  # (B, G)
    rewards: np.ndarray  # (B, G) totals
    post: np.ndarray
    prior: np.ndarray
    format: np.ndarray
    advantages: np.ndarray  # (B, G)

    def __len__(self):
        return len(self.session_idx)

    def group(self, i: int) -> "GroupSample":
        return GroupSample(
            session_id=int(self.session_ids[i]),
            hat_alpha=self.hat_alpha,
            old_mean=self.old_mean[i],
            actions=self.actions[i],
            old_logp=self.old_logp[i],
            rewards=self.rewards[i],
            advantages=self.advantages[i],
        )


@dataclass(frozen=True)
class GroupSample:
    session_id: int
    hat_alpha: float
    old_mean: np.ndarray
    actions: np.ndarray
    old_logp: np.ndarray
    rewards: np.ndarray
    advantages: np.ndarray


def session_rng(seed: int, epoch: int, iteration: int, session_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, _STREAM_TAG, epoch, iteration, int(session_id)])


def _sample_groups(alpha: np.ndarray, session_ids: np.ndarray, group_size: int, seed: int,
                   epoch: int, iteration: int, workers: int) -> np.ndarray:
    def run(rows):
        return [
            sample_array(alpha[i], session_rng(seed, epoch, iteration, session_ids[i]), size=group_size)
            for i in rows
        ]

    rows = np.arange(len(alpha))
    if workers <= 1 or len(rows) < 2:
        draws = run(rows)
    else:
        chunks = np.array_split(rows, workers)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            draws = [d for part in pool.map(run, chunks) for d in part]
    return np.stack(draws)


def collect_groups(data: SessionArrays, session_idx: np.ndarray, old_params: PolicyParams,
                   hat_alpha: float, reward_config: RewardConfig, group_size: int, *,
                   seed: int = 0, epoch: int = 0, iteration: int = 0, adv_eps: float = 1e-8,
                   workers: int = 1) -> GroupBatch:
    session_idx = np.asarray(session_idx)
    contexts = data.contexts[session_idx]
    _, old_mean = forward(old_params, contexts)
    if not hat_alpha > 0:
        raise DegenerateParamsError(f"concentration must be > 0, got {hat_alpha}")
    if np.any(old_mean <= 0):
        raise DegenerateParamsError("policy mean has a zero component")
    alpha = hat_alpha * old_mean
    ids = data.session_ids[session_idx]
    raw = _sample_groups(alpha, ids, group_size, seed, epoch, iteration, workers)
    actions = floor_simplex(raw)
    old_logp = log_density_array(alpha[:, None, :], actions)
    b, g, k = actions.shape
    rr = reward_rows(data, np.repeat(session_idx, g), actions.reshape(b * g, k), reward_config)
    rewards = rr.total.reshape(b, g)
    return GroupBatch(
        session_idx=session_idx,
        session_ids=ids,
        contexts=contexts,
        hat_alpha=float(hat_alpha),
        old_mean=old_mean,
        actions=actions,
        old_logp=old_logp,
        rewards=rewards,
        post=rr.post.reshape(b, g),
        prior=rr.prior.reshape(b, g),
        format=rr.format.reshape(b, g),
        advantages=compute_advantages(rewards, adv_eps),
    )


def collect_group(session: Session, old_params: PolicyParams, hat_alpha: float,
                  reward_config: RewardConfig, rng_seed: int, group_size: int = 20,
                  adv_eps: float = 1e-8) -> GroupSample:
    data = SessionArrays.from_sessions([session])
    return collect_groups(data, np.array([0]), old_params, hat_alpha, reward_config, group_size,
                          seed=rng_seed, adv_eps=adv_eps).group(0)


@dataclass
class SurrogateStats:
    objective: float
    surrogate: float
    kl: float
    clip_fraction: float


def surrogate_and_grad(batch: GroupBatch, new_params: PolicyParams, ref_params: PolicyParams,
                       config: GrpoConfig) -> tuple[float, PolicyGradient, SurrogateStats]:
    """Batch-mean clipped surrogate minus KL penalty, and its exact gradient.

    Each group contributes mean_i min((r_i - 1) A_i, (clip(r_i) - 1) A_i);
    this equals the usual mean_i min(r_i A_i, clip(r_i) A_i) because the
    advantages of a group sum to zero, and it is exactly 0 at r_i = 1.
    """
    hat = batch.hat_alpha
    eps = config.clip_eps
    _, mean = forward(new_params, batch.contexts)
    _, ref_mean = forward(ref_params, batch.contexts)
    # an underflowed softmax component is as fatal as a NaN: the Dirichlet degenerates
    if not (np.all(np.isfinite(mean)) and np.all(mean > 0) and np.all(np.isfinite(ref_mean))):
        raise TrainingDivergence("policy output is non-finite or has a zero component")
    alpha = hat * mean
    ref_alpha = hat * ref_mean
    adv = batch.advantages
    g = adv.shape[1]
    b = len(batch)

    logp = log_density_array(alpha[:, None, :], batch.actions)
    ratio = np.exp(logp - batch.old_logp)
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps)
    unclipped_term = (ratio - 1.0) * adv
    clipped_term = (clipped - 1.0) * adv
    use_unclipped = unclipped_term <= clipped_term
    surrogate_rows = np.where(use_unclipped, unclipped_term, clipped_term).sum(axis=1) / g
    kl_rows = kl_array(alpha, ref_alpha)
    objective_rows = surrogate_rows - config.kl_coef * kl_rows
    objective = float(objective_rows.sum() / b)
    if not np.isfinite(objective):
        raise TrainingDivergence("non-finite GRPO objective")

    # d objective / d alpha
    dlogp = np.where(use_unclipped, adv * ratio, 0.0) / g  # (B, G)
    dalpha = np.einsum("bg,bgk->bk", dlogp, grad_log_density_array(alpha[:, None, :], batch.actions))
    dalpha = dalpha - config.kl_coef * kl_grad_first_array(alpha, ref_alpha)
    upstream = hat * dalpha / b
    grad = backward(new_params, batch.contexts, upstream)
    clip_fraction = float(np.mean((ratio < 1.0 - eps) | (ratio > 1.0 + eps)))
    stats = SurrogateStats(objective, float(surrogate_rows.mean()), float(kl_rows.mean()), clip_fraction)
    return objective, grad, stats


@dataclass
class IterationMetrics:
    epoch: int
    iteration: int
    hat_alpha: float
    objective: float
    mean_reward: float
    mean_post: float
    mean_prior: float
    mean_format: float
    mean_kl: float
    clip_fraction: float


@dataclass
class TrainState:
    policy: PolicyParams
    ref: PolicyParams
    opt: AdamState
    iteration: int = 0
    epoch: int = 0


def train_epoch(data: SessionArrays, state: TrainState, config: GrpoConfig, reward_config: RewardConfig,
                seed: int, workers: int = 1,
                on_iteration: Callable[[IterationMetrics], None] | None = None) -> list[IterationMetrics]:
    """One pass over ``data``; updates ``state`` in place.

    policy <- ref at the start, old <- policy for the whole epoch, and
    ref <- policy at the end.
    """
    if len(data) == 0:
        raise ContractError("empty dataset")
    policy = snapshot(state.ref)
    old = snapshot(policy)
    order_rng = np.random.default_rng([seed, _STREAM_TAG, state.epoch, 0x5EED])
    perm = order_rng.permutation(len(data))
    out = []
    for start in range(0, len(data), config.batch_size):
        idx = np.sort(perm[start : start + config.batch_size])
        t = state.iteration
        hat = config.hat_alpha(t)
        batch = collect_groups(data, idx, old, hat, reward_config, config.group_size, seed=seed,
                               epoch=state.epoch, iteration=t, adv_eps=config.adv_eps, workers=workers)
        first = None
        for _ in range(config.inner_steps):
            _, grad, stats = surrogate_and_grad(batch, policy, state.ref, config)
            first = first or stats
            policy, state.opt = adam_step(policy, grad.scale(-1.0), state.opt, config.lr)
        m = IterationMetrics(
            epoch=state.epoch, iteration=t, hat_alpha=hat, objective=first.objective,
            mean_reward=float(batch.rewards.mean()), mean_post=float(batch.post.mean()),
            mean_prior=float(batch.prior.mean()), mean_format=float(batch.format.mean()),
            mean_kl=first.kl, clip_fraction=first.clip_fraction,
        )
        out.append(m)
        if on_iteration is not None:
            on_iteration(m)
        state.iteration += 1
    if not policy.all_finite():
        raise TrainingDivergence("non-finite parameters at epoch end")
    state.policy = policy
    state.ref = snapshot(policy)
    state.epoch += 1
    return out


EVAL_COLUMNS = ("ctr", "cvr", "opm", "gpm")
_EVAL_NDCG = (COL_CLICK, COL_CONVERSION, COL_ORDER, COL_GPM_TOP2)


def evaluate_weights(data: SessionArrays, weights: np.ndarray, reward_config: RewardConfig = RewardConfig()) -> dict:
    """Mean NDCG per objective and mean reward components for per-session weights (S, K)."""
    weights = np.broadcast_to(np.asarray(weights, dtype=np.float64), (len(data), 4))
    rr = reward_rows(data, np.arange(len(data)), np.ascontiguousarray(weights), reward_config)
    table = {f"ndcg_{name}": float(rr.ndcg[:, col].mean()) for name, col in zip(EVAL_COLUMNS, _EVAL_NDCG)}
    table.update(post=float(rr.post.mean()), prior=float(rr.prior.mean()),
                 format=float(rr.format.mean()), total=float(rr.total.mean()))
    return table


def evaluate_policy(data: SessionArrays, params: PolicyParams, reward_config: RewardConfig = RewardConfig()) -> dict:
    """Rank every session by the deterministic policy mean and average the metrics."""
    _, mean = forward(params, data.contexts)
    return evaluate_weights(data, mean, reward_config)
