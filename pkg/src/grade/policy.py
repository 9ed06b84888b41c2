"""Mixture-of-experts policy network mapping a session context to fusion weights.

E expert MLPs (D -> H -> K, tanh) share the input; a softmax gate (D -> E)
mixes their logit outputs; a final softmax gives the weight vector. Gradients
are derived by hand.
"""
from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from grade.core import NUM_OBJECTIVES, ContractError, softmax

TENSORS = ("w1", "b1", "w2", "b2", "wg", "bg")


class TrainingDivergence(RuntimeError):
    """A loss, gradient or parameter became non-finite."""


class CheckpointError(Exception):
    pass


class CheckpointNotFound(CheckpointError, FileNotFoundError):
    pass


class CheckpointSchemaError(CheckpointError):
    pass


class CheckpointCorrupt(CheckpointError):
    pass


@dataclass(eq=False)
class _Tensors:
    w1: np.ndarray  # (E, D, H)
    b1: np.ndarray  # (E, H)
    w2: np.ndarray  # (E, H, K)
    b2: np.ndarray  # (E, K)
    wg: np.ndarray  # (D, E)
    bg: np.ndarray  # (E,)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        """(D, H, E, K)."""
        e, d, h = self.w1.shape
        return d, h, e, self.w2.shape[2]

    def arrays(self):
        return [getattr(self, n) for n in TENSORS]

    def items(self):
        return [(n, getattr(self, n)) for n in TENSORS]

    def copy(self):
        return type(self)(*(a.copy() for a in self.arrays()))

    def zeros_like(self):
        return type(self)(*(np.zeros_like(a) for a in self.arrays()))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def set_flat(self, v: np.ndarray) -> None:
        i = 0
        for a in self.arrays():
            a.ravel()[:] = v[i : i + a.size]
            i += a.size

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def scale(self, c: float):
        return type(self)(*(a * c for a in self.arrays()))

    def __add__(self, other):
        return type(self)(*(a + b for a, b in zip(self.arrays(), other.arrays())))


class PolicyParams(_Tensors):
    @classmethod
    def zeros(cls, context_dim: int, hidden: int = 32, experts: int = 4, k: int = NUM_OBJECTIVES):
        d, h, e = context_dim, hidden, experts
        return cls(
            np.zeros((e, d, h)), np.zeros((e, h)), np.zeros((e, h, k)),
            np.zeros((e, k)), np.zeros((d, e)), np.zeros(e),
        )

    @classmethod
    def init(cls, rng: np.random.Generator, context_dim: int, hidden: int = 32,
             experts: int = 4, k: int = NUM_OBJECTIVES):
        """Weights ~ U(+-1/sqrt(fan_in)), biases 0."""
        p = cls.zeros(context_dim, hidden, experts, k)
        p.w1[:] = rng.uniform(-1, 1, p.w1.shape) / np.sqrt(context_dim)
        p.w2[:] = rng.uniform(-1, 1, p.w2.shape) / np.sqrt(hidden)
        p.wg[:] = rng.uniform(-1, 1, p.wg.shape) / np.sqrt(context_dim)
        return p


class PolicyGradient(_Tensors):
    pass


@dataclass
class _Cache:
    x: np.ndarray
    h: np.ndarray
    out: np.ndarray
    gate: np.ndarray
    mean: np.ndarray


def _forward(params: PolicyParams, x: np.ndarray) -> tuple[np.ndarray, _Cache]:
    d = params.dims[0]
    if x.shape[-1] != d:
        raise ContractError(f"context has dimension {x.shape[-1]}, network expects {d}")
    h = np.tanh(np.einsum("bd,edh->beh", x, params.w1) + params.b1)
    out = np.einsum("beh,ehk->bek", h, params.w2) + params.b2
    gate = softmax(x @ params.wg + params.bg)
    logits = np.einsum("be,bek->bk", gate, out)
    mean = softmax(logits)
    return logits, _Cache(x, h, out, gate, mean)


def forward(params: PolicyParams, context) -> tuple[np.ndarray, np.ndarray]:
    """Return (logits, mean) for one context (D,) or a batch (B, D)."""
    x = np.asarray(context, dtype=np.float64)
    single = x.ndim == 1
    logits, cache = _forward(params, np.atleast_2d(x))
    if single:
        return logits[0], cache.mean[0]
    return logits, cache.mean


def gate_weights(params: PolicyParams, context) -> np.ndarray:
    x = np.atleast_2d(np.asarray(context, dtype=np.float64))
    return softmax(x @ params.wg + params.bg)


def backward(params: PolicyParams, context, upstream) -> PolicyGradient:
    """Gradient of sum_b <upstream_b, mean_b> with respect to every parameter."""
    x = np.atleast_2d(np.asarray(context, dtype=np.float64))
    u = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    if u.shape != (x.shape[0], params.dims[3]):
        raise ContractError(f"upstream shape {u.shape} does not match batch")
    _, c = _forward(params, x)
    dlogits = c.mean * (u - (c.mean * u).sum(axis=1, keepdims=True))
    dout = c.gate[:, :, None] * dlogits[:, None, :]
    dgate = np.einsum("bek,bk->be", c.out, dlogits)
    dgate_logits = c.gate * (dgate - (c.gate * dgate).sum(axis=1, keepdims=True))
    dh = np.einsum("bek,ehk->beh", dout, params.w2)
    dpre = dh * (1.0 - c.h * c.h)
    return PolicyGradient(
        w1=np.einsum("bd,beh->edh", x, dpre),
        b1=dpre.sum(axis=0),
        w2=np.einsum("beh,bek->ehk", c.h, dout),
        b2=dout.sum(axis=0),
        wg=x.T @ dgate_logits,
        bg=dgate_logits.sum(axis=0),
    )


@dataclass
class AdamState:
    m: PolicyGradient
    v: PolicyGradient
    step: int = 0

    @classmethod
    def for_params(cls, params: PolicyParams) -> "AdamState":
        z = PolicyGradient(*(np.zeros_like(a) for a in params.arrays()))
        return cls(m=z, v=z.copy())


def adam_step(params: PolicyParams, grad: PolicyGradient, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One descent step on ``grad`` (pass the negated gradient to ascend).

    Returns new (params, state); inputs are left untouched.
    """
    if [a.shape for a in grad.arrays()] != [a.shape for a in params.arrays()]:
        raise ContractError("gradient shape does not match parameters")
    if not grad.all_finite():
        bad = [n for n, a in grad.items() if not np.all(np.isfinite(a))]
        raise TrainingDivergence(f"non-finite gradient in {bad} at step {state.step + 1}")
    t = state.step + 1
    m = [beta1 * a + (1 - beta1) * g for a, g in zip(state.m.arrays(), grad.arrays())]
    v = [beta2 * a + (1 - beta2) * g * g for a, g in zip(state.v.arrays(), grad.arrays())]
    c1, c2 = 1 - beta1**t, 1 - beta2**t
    new = [
        p - lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
        for p, mi, vi in zip(params.arrays(), m, v)
    ]
    return PolicyParams(*new), AdamState(PolicyGradient(*m), PolicyGradient(*v), t)


def snapshot(params: PolicyParams) -> PolicyParams:
    return params.copy()


def sync(dst: PolicyParams, src: PolicyParams) -> None:
    """Copy ``src`` into ``dst`` in place."""
    if dst.dims != src.dims:
        raise ContractError(f"cannot sync {src.dims} into {dst.dims}")
    for a, b in zip(dst.arrays(), src.arrays()):
        a[...] = b


# Checkpoint layout (all little-endian):
#   8s  magic b"GRADEPOL"
#   H   schema version
#   4I  D, H, E, K
#   Q   payload byte count
#   ... float64 payload: w1, b1, w2, b2, wg, bg in C order
#   I   CRC-32 of the payload
MAGIC = b"GRADEPOL"
SCHEMA_VERSION = 1
_HEADER = struct.Struct("<8sH4IQ")


def save_checkpoint(params: PolicyParams, path) -> None:
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.arrays())
    header = _HEADER.pack(MAGIC, SCHEMA_VERSION, *params.dims, len(payload))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(header + payload + struct.pack("<I", zlib.crc32(payload)))
    os.replace(tmp, path)


def load_checkpoint(path, expect_k: int | None = NUM_OBJECTIVES,
                    expect_context_dim: int | None = None) -> PolicyParams:
    if not os.path.exists(path):
        raise CheckpointNotFound(f"no checkpoint at {path}")
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise CheckpointCorrupt(f"{path}: truncated header")
    magic, version, d, h, e, k, nbytes = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointCorrupt(f"{path}: bad magic {magic!r}")
    if version != SCHEMA_VERSION:
        raise CheckpointSchemaError(f"{path}: schema version {version}, expected {SCHEMA_VERSION}")
    if expect_k is not None and k != expect_k:
        raise CheckpointSchemaError(f"{path}: K={k}, expected {expect_k}")
    if expect_context_dim is not None and d != expect_context_dim:
        raise CheckpointSchemaError(f"{path}: D={d}, expected {expect_context_dim}")
    template = PolicyParams.zeros(d, h, e, k)
    expected = 8 * sum(a.size for a in template.arrays())
    if nbytes != expected or len(blob) != _HEADER.size + nbytes + 4:
        raise CheckpointCorrupt(f"{path}: payload length mismatch")
    payload = blob[_HEADER.size : _HEADER.size + nbytes]
    (crc,) = struct.unpack_from("<I", blob, _HEADER.size + nbytes)
    if crc != zlib.crc32(payload):
        raise CheckpointCorrupt(f"{path}: checksum mismatch")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    template.set_flat(values)
    return template
