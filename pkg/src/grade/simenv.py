"""Synthetic search sessions with latent user types, and a grid-search oracle.

Every item carries four latent traits (click appeal, purchase intent, order
propensity, price). The upstream "MTL model" sees them through noisy sigmoid
predictions; realized labels come from a per-type logistic funnel, so the
reward-optimal fusion weights differ between types.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from math import comb

import numpy as np

from grade.core import NUM_OBJECTIVES, ContractError, SessionArrays
from grade.reward import RewardConfig, reward_rows

SCHEMA = "grade.sessions"
SCHEMA_VERSION = 1
TYPE_NAMES = ("browser", "buyer")


@dataclass(frozen=True)
class FeedbackModel:
    """Logistic funnel coefficients for one user type.

    P(click)            = sigmoid(click_bias + click_appeal * a + click_intent * v)
    P(conversion|click) = sigmoid(conv_bias + conv_intent * v)
    P(order|conversion) = sigmoid(order_bias + order_propensity * o)
    """

    click_bias: float
    click_appeal: float
    click_intent: float
    conv_bias: float
    conv_intent: float
    order_bias: float
    order_propensity: float


BROWSER = FeedbackModel(-1.0, 2.2, 0.0, -3.2, 0.6, -1.0, 0.5)
BUYER = FeedbackModel(-1.8, 0.4, 0.8, -0.3, 2.0, 0.0, 2.0)

# Row-major (score, trait) loadings: rows pctr, pcvr, popm, pgpm; columns
# appeal, intent, propensity, price.
SCORE_LOADINGS = (
    1.0, 0.0, 0.0, 0.0,
    0.0, 1.0, 0.0, 0.0,
    0.0, 0.5, 1.0, 0.0,
    0.3, 1.0, 0.3, 0.7,
)


@dataclass(frozen=True)
class EnvConfig:
    num_items: int = 10
    context_dim: int = 16
    type_probs: tuple[float, ...] = (0.5, 0.5)
    feedback: tuple[FeedbackModel, ...] = field(default=(BROWSER, BUYER))
    embed_scale: float = 1.0
    context_noise: float = 0.5  # half-width of the uniform context noise
    prediction_noise: float = 0.3
    score_loadings: tuple[float, ...] = SCORE_LOADINGS
    n_train: int = 20000
    n_test: int = 2000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "type_probs", tuple(float(p) for p in self.type_probs))
        object.__setattr__(self, "feedback", tuple(self.feedback))
        object.__setattr__(self, "score_loadings", tuple(float(x) for x in self.score_loadings))
        if len(self.score_loadings) != NUM_OBJECTIVES * 4:
            raise ContractError("score_loadings needs 16 entries (4 scores x 4 traits)")
        if len(self.type_probs) < 1 or len(self.type_probs) != len(self.feedback):
            raise ContractError("need one feedback model per latent type")
        if min(self.type_probs) < 0 or abs(sum(self.type_probs) - 1.0) > 1e-9:
            raise ContractError("type probabilities must form a distribution")
        if self.num_items < 2 or self.context_dim < 1:
            raise ContractError("need >= 2 items and a positive context dimension")
        if self.n_train < 1 or self.n_test < 0:
            raise ContractError("invalid dataset sizes")

    @property
    def num_types(self) -> int:
        return len(self.type_probs)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def type_embeddings(config: EnvConfig, rng: np.random.Generator) -> np.ndarray:
    e = rng.standard_normal((config.num_types, config.context_dim))
    return config.embed_scale * e / np.linalg.norm(e, axis=1, keepdims=True)


def _generate(config: EnvConfig, n: int, first_id: int, embeds: np.ndarray,
              rng: np.random.Generator) -> SessionArrays:
    n_items = config.num_items
    types = rng.choice(config.num_types, size=n, p=config.type_probs)
    noise = rng.uniform(-config.context_noise, config.context_noise, (n, config.context_dim))
    contexts = embeds[types] + noise

    traits = rng.standard_normal((4, n, n_items))
    appeal, intent, propensity, price = traits
    eps = config.prediction_noise * rng.standard_normal((4, n, n_items))
    loadings = np.asarray(config.score_loadings).reshape(NUM_OBJECTIVES, 4)
    scores = _sigmoid(np.einsum("st,tnj->njs", loadings, traits) + np.moveaxis(eps, 0, -1))

    coef = np.array([[getattr(fm, f) for f in FeedbackModel.__dataclass_fields__] for fm in config.feedback])
    c = coef[types][:, None, :]  # (n, 1, 7)
    p_click = _sigmoid(c[..., 0] + c[..., 1] * appeal + c[..., 2] * intent)
    p_conv = _sigmoid(c[..., 3] + c[..., 4] * intent)
    p_order = _sigmoid(c[..., 5] + c[..., 6] * propensity)
    u = rng.random((3, n, n_items))
    click = u[0] < p_click
    conversion = click & (u[1] < p_conv)
    order = conversion & (u[2] < p_order)
    labels = np.stack([click, conversion, order], axis=-1).astype(np.int8)

    ids = first_id + np.arange(n, dtype=np.int64)
    item_ids = (ids[:, None] * n_items + np.arange(n_items)[None, :]).astype(np.int64)
    return SessionArrays(contexts=contexts, scores=scores, labels=labels, item_ids=item_ids,
                         session_ids=ids, latent_types=types.astype(np.int64))


def generate_dataset(config: EnvConfig, rng: np.random.Generator | None = None):
    """Return (train, test) datasets; fully determined by ``config.seed`` when rng is None."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    embeds = type_embeddings(config, rng)
    train = _generate(config, config.n_train, 0, embeds, rng)
    test = _generate(config, config.n_test, config.n_train, embeds, rng) if config.n_test else None
    return train, test


def save_dataset(data: SessionArrays, path) -> None:
    """One JSON header line, then one session per line."""
    header = {"schema": SCHEMA, "version": SCHEMA_VERSION, "sessions": len(data),
              "num_items": data.num_items, "context_dim": data.context_dim}
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header) + "\n")
        for i in range(len(data)):
            rec = {
                "id": int(data.session_ids[i]),
                "type": int(data.latent_types[i]),
                "context": data.contexts[i].tolist(),
                "items": [
                    {"id": int(data.item_ids[i, j]), "scores": data.scores[i, j].tolist(),
                     "labels": data.labels[i, j].tolist()}
                    for j in range(data.num_items)
                ],
            }
            f.write(json.dumps(rec) + "\n")


class DatasetFormatError(ValueError):
    pass


def load_dataset(path) -> SessionArrays:
    with open(path, encoding="utf-8") as f:
        header = json.loads(f.readline())
        if header.get("schema") != SCHEMA or header.get("version") != SCHEMA_VERSION:
            raise DatasetFormatError(f"{path}: unsupported dataset header {header}")
        records = [json.loads(line) for line in f if line.strip()]
    if len(records) != header["sessions"]:
        raise DatasetFormatError(f"{path}: expected {header['sessions']} sessions, found {len(records)}")
    return SessionArrays(
        contexts=np.array([r["context"] for r in records], dtype=np.float64),
        scores=np.array([[it["scores"] for it in r["items"]] for r in records], dtype=np.float64),
        labels=np.array([[it["labels"] for it in r["items"]] for r in records], dtype=np.int8),
        item_ids=np.array([[it["id"] for it in r["items"]] for r in records], dtype=np.int64),
        session_ids=np.array([r["id"] for r in records], dtype=np.int64),
        latent_types=np.array([r["type"] for r in records], dtype=np.int64),
    )


def simplex_grid(step: float, k: int = NUM_OBJECTIVES) -> np.ndarray:
    """All points with coordinates in {0, step, ..., 1} summing to 1, lexicographic order."""
    m = round(1.0 / step)
    if m < 1 or abs(m * step - 1.0) > 1e-9:
        raise ContractError(f"grid step {step} does not divide 1")
    pts = []
    for bars in itertools.combinations(range(m + k - 1), k - 1):
        edges = (-1,) + bars + (m + k - 1,)
        pts.append([edges[i + 1] - edges[i] - 1 for i in range(k)])
    grid = np.array(pts, dtype=np.float64) / m
    assert len(grid) == comb(m + k - 1, k - 1)
    return grid


@dataclass
class OracleResult:
    grid_step: float
    weights: dict  # latent type -> best grid point (K,)
    expected_reward: dict  # latent type -> mean posterior reward of that point
    population_weight: np.ndarray
    population_reward: float


def posterior_matrix(data: SessionArrays, grid: np.ndarray, reward_config: RewardConfig = RewardConfig(),
                     chunk_rows: int = 400_000) -> np.ndarray:
    """Posterior reward of every grid point on every session: (P, S)."""
    s = len(data)
    table = data.relevance_table()
    per = max(1, chunk_rows // s)
    out = np.empty((len(grid), s))
    sidx = np.arange(s)
    for start in range(0, len(grid), per):
        pts = grid[start : start + per]
        w = np.repeat(pts, s, axis=0)
        rr = reward_rows(data, np.tile(sidx, len(pts)), w, reward_config, table)
        out[start : start + len(pts)] = rr.post.reshape(len(pts), s)
    return out


def oracle_grid_search(data: SessionArrays, grid_step: float = 0.05,
                       reward_config: RewardConfig = RewardConfig()) -> OracleResult:
    """Exhaustive per-latent-type maximization of mean posterior reward over a simplex grid."""
    grid = simplex_grid(grid_step)
    post = posterior_matrix(data, grid, reward_config)
    weights, expected = {}, {}
    for t in np.unique(data.latent_types):
        cols = data.latent_types == t
        means = post[:, cols].mean(axis=1)
        best = int(np.argmax(means))
        weights[int(t)] = grid[best]
        expected[int(t)] = float(means[best])
    pop = post.mean(axis=1)
    best = int(np.argmax(pop))
    return OracleResult(grid_step, weights, expected, grid[best], float(pop[best]))


def oracle_weights_for(data: SessionArrays, oracle: OracleResult) -> np.ndarray:
    """Per-session weights (S, K) assigning each session its type's oracle point."""
    w = np.empty((len(data), NUM_OBJECTIVES))
    for i, t in enumerate(data.latent_types):
        w[i] = oracle.weights.get(int(t), oracle.population_weight)
    return w
