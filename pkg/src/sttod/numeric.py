"""Small dense-math kernel shared by every model in the package.

Vectors and matrices are plain ``float64`` numpy arrays. The finite-difference
helper at the bottom is the reference every hand-written gradient is checked
against.
"""

from __future__ import annotations

import hashlib
from typing import Callable

import numpy as np

PROB_FLOOR = 1e-12


class InvalidInputError(ValueError):
    """Raised for non-finite or out-of-range numeric input."""


class DegenerateInputError(ValueError):
    """Raised when an operation is undefined for the input (e.g. zero norm)."""


def _finite(x, name="input"):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def softmax(logits, axis=-1):
    z = _finite(logits, "logits")
    if z.size == 0:
        raise InvalidInputError("softmax of an empty vector")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(x):
    x = _finite(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def cosine(u, v):
    u = _finite(u, "u")
    v = _finite(v, "v")
    if u.shape != v.shape:
        raise InvalidInputError(f"shape mismatch {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def cosine_grad(a, b):
    """Cosine of row pairs and its gradients w.r.t. both arguments.

    ``a`` and ``b`` are broadcast-compatible arrays whose last axis is the
    vector dimension. Returns ``(c, dc/da, dc/db)``.
    """
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    an = a / na
    bn = b / nb
    c = np.sum(an * bn, axis=-1, keepdims=True)
    da = (bn - c * an) / na
    db = (an - c * bn) / nb
    return c[..., 0], da, db


def cross_entropy(probs, target_index):
    p = _finite(probs, "probs")
    if not 0 <= target_index < p.shape[-1]:
        raise IndexError(f"target {target_index} outside [0, {p.shape[-1]})")
    return float(-np.log(max(p[target_index], PROB_FLOOR)))


def binary_cross_entropy(scores, targets):
    s = _finite(scores, "scores")
    t = np.asarray(targets, dtype=np.float64)
    if s.shape != t.shape:
        raise InvalidInputError(f"length mismatch {s.shape} vs {t.shape}")
    s = np.clip(s, PROB_FLOOR, 1.0 - PROB_FLOOR)
    return float(np.mean(-(t * np.log(s) + (1.0 - t) * np.log1p(-s))))


def _key_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("rng keys must be non-negative")
        return int(key)
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def rng_for(seed: int, *keys) -> np.random.Generator:
    """Counter-based generator for the sub-stream ``(seed, *keys)``.

    Keys may be ints or strings (hashed stably), so per-example streams such
    as ``rng_for(seed, "ex-17", replicate)`` are reproducible regardless of
    execution order.
    """
    ss = np.random.SeedSequence(entropy=_key_int(seed), spawn_key=tuple(_key_int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def gaussian_sample(rng: np.random.Generator, dim, variance: float) -> np.ndarray:
    if variance < 0:
        raise InvalidInputError(f"negative variance {variance}")
    if variance == 0:
        return np.zeros(dim)
    return rng.normal(0.0, np.sqrt(variance), size=dim)


def finite_difference_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (any shape)."""
    if not 1e-7 <= eps <= 1e-3:
        raise InvalidInputError(f"eps {eps} outside [1e-7, 1e-3]")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise InvalidInputError(f"non-finite evaluation at coordinate {i}")
        g[i] = (hi - lo) / (2.0 * eps)
    return grad


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)
