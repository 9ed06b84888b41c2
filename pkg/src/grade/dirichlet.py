"""Dirichlet exploration: special functions, sampling, densities, KL, annealing.

All functions accept scalars or numpy arrays; special functions return a
python float for scalar input.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from grade.core import ContractError, WeightVector

FLOOR = 1e-6


class DomainError(ValueError):
    """Argument outside the mathematical domain of the function."""


class DegenerateParamsError(ContractError):
    """Dirichlet parameters would have a zero or non-finite concentration."""


# Lanczos approximation, g = 7, n = 9.
_LANCZOS_G = 7.0
_LANCZOS_COEF = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_ASYMPTOTIC_MIN = 6.0


def _positive(z, name):
    arr = np.asarray(z, dtype=np.float64)
    if not np.all(arr > 0) or not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} requires finite z > 0")
    return arr


def _out(arr, like):
    return float(arr) if np.ndim(like) == 0 else arr


def _lanczos(z):
    # ln Gamma(z) for z >= 0.5
    x = z - 1.0
    a = np.full_like(x, _LANCZOS_COEF[0])
    for i in range(1, len(_LANCZOS_COEF)):
        a = a + _LANCZOS_COEF[i] / (x + i)
    t = x + _LANCZOS_G + 0.5
    return _HALF_LOG_2PI + (x + 0.5) * np.log(t) - t + np.log(a)


def log_gamma(z):
    """ln Gamma(z) for z > 0."""
    arr = _positive(z, "log_gamma")
    small = arr < 0.5
    # reflection: Gamma(z) Gamma(1 - z) = pi / sin(pi z)
    reflected = np.log(np.pi / np.sin(np.pi * np.where(small, arr, 0.25))) - _lanczos(
        np.where(small, 1.0 - arr, 1.0)
    )
    out = np.where(small, reflected, _lanczos(np.where(small, 1.0, arr)))
    return _out(out, z)


def digamma(z):
    arr = _positive(z, "digamma")
    acc = np.zeros_like(arr)
    x = arr.copy()
    while np.any(x < _ASYMPTOTIC_MIN):
        low = x < _ASYMPTOTIC_MIN
        acc = acc - np.where(low, 1.0 / x, 0.0)
        x = np.where(low, x + 1.0, x)
    x2 = 1.0 / (x * x)
    series = x2 * (
        1.0 / 12 - x2 * (1.0 / 120 - x2 * (1.0 / 252 - x2 * (1.0 / 240 - x2 * (1.0 / 132))))
    )
    out = acc + np.log(x) - 0.5 / x - series
    return _out(out, z)


def trigamma(z):
    arr = _positive(z, "trigamma")
    acc = np.zeros_like(arr)
    x = arr.copy()
    while np.any(x < _ASYMPTOTIC_MIN):
        low = x < _ASYMPTOTIC_MIN
        acc = acc + np.where(low, 1.0 / (x * x), 0.0)
        x = np.where(low, x + 1.0, x)
    x2 = 1.0 / (x * x)
    # 1/x + 1/(2x^2) + sum B_2k / x^(2k+1)
    series = (
        1.0 / 6 - x2 * (1.0 / 30 - x2 * (1.0 / 42 - x2 * (1.0 / 30 - x2 * (5.0 / 66))))
    ) * x2 / x
    out = acc + 1.0 / x + 0.5 * x2 + series
    return _out(out, z)


@dataclass(frozen=True)
class DirichletParams:
    alpha: np.ndarray

    def __post_init__(self):
        a = np.array(self.alpha, dtype=np.float64)
        if a.ndim != 1 or a.size < 2:
            raise ContractError("alpha must be a vector of length >= 2")
        if not np.all(np.isfinite(a)) or not np.all(a > 0):
            raise DegenerateParamsError(f"concentrations must be finite and > 0: {a}")
        a.setflags(write=False)
        object.__setattr__(self, "alpha", a)


@dataclass(frozen=True)
class AnnealSchedule:
    alpha_min: float = 5.0
    alpha_max: float = 15.0
    period: int = 50000

    def __post_init__(self):
        if not 0 < self.alpha_min <= self.alpha_max:
            raise ContractError("need 0 < alpha_min <= alpha_max")
        if self.period < 1:
            raise ContractError("period must be >= 1")


def anneal(schedule: AnnealSchedule, t: int) -> float:
    """Cosine schedule starting at alpha_min, peaking at alpha_max mid-period."""
    if t < 0:
        raise ContractError("iteration must be >= 0")
    phase = (t % schedule.period) / schedule.period
    span = schedule.alpha_max - schedule.alpha_min
    return schedule.alpha_min + span * (1.0 - math.cos(2.0 * math.pi * phase)) / 2.0


def make_params(mean: WeightVector, hat_alpha: float) -> DirichletParams:
    if not hat_alpha > 0 or not math.isfinite(hat_alpha):
        raise DegenerateParamsError(f"concentration must be > 0, got {hat_alpha}")
    m = mean.w if isinstance(mean, WeightVector) else np.asarray(mean, dtype=np.float64)
    if np.any(m <= 0):
        raise DegenerateParamsError(f"mean has a zero component: {m}")
    return DirichletParams(hat_alpha * m)


def gamma_variates(shape: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Unit-scale gamma draws, one per entry of ``shape``.

    Marsaglia-Tsang squeeze for shape >= 1; shape < 1 is boosted through
    Gamma(shape + 1) * U^(1/shape).
    """
    a = np.asarray(shape, dtype=np.float64)
    flat = a.ravel()
    boost = flat < 1.0
    d = np.where(boost, flat + 1.0, flat) - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    out = np.empty_like(flat)
    pending = np.arange(flat.size)
    while pending.size:
        x = rng.standard_normal(pending.size)
        u = rng.random(pending.size)
        dp, cp = d[pending], c[pending]
        v = (1.0 + cp * x) ** 3
        ok = v > 0
        v_safe = np.where(ok, v, 1.0)
        accept = ok & (
            (u < 1.0 - 0.0331 * x**4)
            | (np.log(u) < 0.5 * x * x + dp * (1.0 - v_safe + np.log(v_safe)))
        )
        out[pending[accept]] = dp[accept] * v_safe[accept]
        pending = pending[~accept]
    if np.any(boost):
        idx = np.flatnonzero(boost)
        out[idx] *= rng.random(idx.size) ** (1.0 / flat[idx])
    return out.reshape(a.shape)


def floor_simplex(p: np.ndarray, floor: float = FLOOR) -> np.ndarray:
    """Clamp into [floor, 1 - floor] along the last axis and renormalize."""
    q = np.clip(p, floor, 1.0 - floor)
    return q / q.sum(axis=-1, keepdims=True)


def sample_array(alpha: np.ndarray, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw Dir(alpha) points; with ``size`` returns (size, K), else (K,).

    Rows where every gamma draw underflowed fall back to the argmax vertex.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    shape = alpha.shape if size is None else (size,) + alpha.shape
    g = gamma_variates(np.broadcast_to(alpha, shape), rng)
    total = g.sum(axis=-1, keepdims=True)
    dead = total[..., 0] <= 0
    if np.any(dead):
        g[dead] = np.eye(alpha.shape[-1])[np.argmax(np.broadcast_to(alpha, shape)[dead], axis=-1)]
        total = g.sum(axis=-1, keepdims=True)
    return g / total


def sample(params: DirichletParams, rng: np.random.Generator) -> WeightVector:
    return WeightVector(sample_array(params.alpha, rng))


def _interior(p, name="p"):
    p = np.asarray(p.w if isinstance(p, WeightVector) else p, dtype=np.float64)
    if np.any(p <= 0) or np.any(~np.isfinite(p)):
        raise DomainError(f"{name} must lie strictly inside the simplex; floor it first")
    return p


def log_density_array(alpha: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Batched log Dir(p | alpha); alpha (..., K) broadcast against p (..., K)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    lnorm = log_gamma(alpha.sum(axis=-1)) - log_gamma(alpha).sum(axis=-1)
    return lnorm + ((alpha - 1.0) * np.log(p)).sum(axis=-1)


def log_density(params: DirichletParams, p) -> float:
    p = _interior(p)
    if p.shape != params.alpha.shape:
        raise ContractError("dimension mismatch between alpha and p")
    return float(log_density_array(params.alpha, p))


def grad_log_density_array(alpha: np.ndarray, p: np.ndarray) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    total = digamma(alpha.sum(axis=-1))
    return np.expand_dims(total, -1) - digamma(alpha) + np.log(p)


def grad_log_density_wrt_alpha(params: DirichletParams, p) -> np.ndarray:
    p = _interior(p)
    if p.shape != params.alpha.shape:
        raise ContractError("dimension mismatch between alpha and p")
    return grad_log_density_array(params.alpha, p)


def kl_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """KL(Dir(a) || Dir(b)) along the last axis.

    Written as differences of like terms so that a == b gives exactly 0. Near-equal
    arguments can cancel to a few ulps below zero, which is clamped.
    """
    a0, b0 = a.sum(axis=-1), b.sum(axis=-1)
    norm = (log_gamma(a0) - log_gamma(b0)) + (log_gamma(b) - log_gamma(a)).sum(axis=-1)
    cross = ((a - b) * (digamma(a) - np.expand_dims(digamma(a0), -1))).sum(axis=-1)
    return np.maximum(norm + cross, 0.0)


def kl_grad_first_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """d KL(Dir(a) || Dir(b)) / d a."""
    a0 = a.sum(axis=-1)
    diff = a - b
    return diff * trigamma(a) - np.expand_dims(trigamma(a0) * diff.sum(axis=-1), -1)


def kl_divergence(a: DirichletParams, b: DirichletParams) -> float:
    if a.alpha.shape != b.alpha.shape:
        raise ContractError("dimension mismatch between Dirichlet parameters")
    return float(kl_array(a.alpha, b.alpha))
