"""Numeric kernel shared by every other module.

Distances, a max-shifted softmax, clamped arccos, a central-difference
gradient oracle and forkable deterministic random streams.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError

ARCCOS_CLAMP = 1e-12
REL_ERR_FLOOR = 1e-8


def as_vec(x, name: str = "vector") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ContractError(f"{name} must be a non-empty 1-d vector, got shape {v.shape}")
    return v


def sq_euclidean(a, b) -> float:
    a = as_vec(a, "a")
    b = as_vec(b, "b")
    if a.shape != b.shape:
        raise ContractError(f"dimension mismatch: {a.size} vs {b.size}")
    d = a - b
    return float(d @ d)


def log_sum_exp_neg(scores):
    """log(sum(exp(-scores))) over the last axis, without overflow."""
    s = np.asarray(scores, dtype=np.float64)
    m = s.min(axis=-1, keepdims=True)
    out = -m[..., 0] + np.log(np.exp(-(s - m)).sum(axis=-1))
    return out


def softmax_of_negated(scores) -> np.ndarray:
    """Probabilities proportional to exp(-score), shifted by the minimum score.

    Works row-wise on 2-d input.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0 or s.shape[-1] == 0:
        raise ContractError("softmax needs at least one score")
    if not np.all(np.isfinite(s)):
        raise ContractError("scores must be finite")
    e = np.exp(-(s - s.min(axis=-1, keepdims=True)))
    return e / e.sum(axis=-1, keepdims=True)


def clamp_cos(u):
    return np.clip(u, -1.0 + ARCCOS_CLAMP, 1.0 - ARCCOS_CLAMP)


def safe_arccos(u):
    u = np.asarray(u, dtype=np.float64)
    if not np.all(np.isfinite(u)):
        raise ContractError("arccos input must be finite")
    out = np.arccos(clamp_cos(u))
    return float(out) if out.ndim == 0 else out


def safe_arccos_grad(u):
    """d arccos(u)/du evaluated at the clamped argument."""
    uc = clamp_cos(np.asarray(u, dtype=np.float64))
    return -1.0 / np.sqrt(1.0 - uc * uc)


def rel_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(REL_ERR_FLOOR, np.abs(a) + np.abs(b))


def central_diff(fn: Callable[[np.ndarray], float], point, h: float = 1e-5) -> np.ndarray:
    p = np.array(point, dtype=np.float64).ravel()
    g = np.empty_like(p)
    for i in range(p.size):
        old = p[i]
        p[i] = old + h
        fp = fn(p.copy())
        p[i] = old - h
        fm = fn(p.copy())
        p[i] = old
        g[i] = (fp - fm) / (2.0 * h)
    return g


def finite_diff_check(fn: Callable[[np.ndarray], float], point, analytic_grad, h: float = 1e-5) -> float:
    """Max relative error between ``analytic_grad`` and central differences of ``fn``."""
    if not h > 0:
        raise ContractError("step h must be positive")
    analytic = np.asarray(analytic_grad, dtype=np.float64).ravel()
    numeric = central_diff(fn, point, h)
    if analytic.shape != numeric.shape:
        raise ContractError(f"gradient has {analytic.size} entries, point has {numeric.size}")
    return float(rel_error(numeric, analytic).max())


class Rng:
    """Deterministic random stream identified by ``(seed, path)``.

    Draws come from a Philox counter-based generator keyed through
    ``numpy.random.SeedSequence(seed, spawn_key=path)``; both are specified
    by numpy independently of platform. ``path`` records the chain of
    stream ids used to fork this stream from the root.
    """

    def __init__(self, seed: int, path: Sequence[int] = ()):
        if seed < 0:
            raise ContractError("seed must be non-negative")
        self.seed = int(seed)
        self.path = tuple(int(s) for s in path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self.gen = np.random.Generator(np.random.Philox(ss))

    @property
    def stream_id(self) -> int:
        return self.path[-1] if self.path else 0

    def fork(self, stream_id: int) -> "Rng":
        return rng_fork(self, stream_id)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"

    # thin delegations; everything else goes through .gen
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, size=None):
        return self.gen.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def sample_without_replacement(self, population: int, k: int) -> np.ndarray:
        if k > population:
            raise ContractError(f"cannot draw {k} of {population} without replacement")
        return self.gen.choice(population, size=k, replace=False)


def rng_fork(parent: Rng, stream_id: int) -> Rng:
    """Child stream; depends only on the parent's identity, never on its draw state."""
    if stream_id < 0:
        raise ContractError("stream_id must be non-negative")
    return Rng(parent.seed, parent.path + (int(stream_id),))


# named streams used by the harness
STREAM_DATA = 1
STREAM_INIT = 2
STREAM_EPISODES = 3
STREAM_EVAL = 4


def is_finite(x) -> bool:
    return bool(np.all(np.isfinite(np.asarray(x, dtype=np.float64))))


__all__ = [
    "ARCCOS_CLAMP",
    "Rng",
    "central_diff",
    "finite_diff_check",
    "log_sum_exp_neg",
    "rng_fork",
    "safe_arccos",
    "safe_arccos_grad",
    "softmax_of_negated",
    "sq_euclidean",
]
