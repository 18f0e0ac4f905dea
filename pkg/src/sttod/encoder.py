"""Shallow differentiable text encoder.

A token sequence is embedded (``X``, one row per token), pooled to a single
vector ``s`` and passed through one ``tanh`` layer::

    alpha = softmax(X @ u)          # "attention" pooling; "mean" uses 1/n
    s     = alpha @ X
    h     = tanh(W_h @ s + b_h)

With ``u = 0`` (the initial value) attention pooling is exactly mean pooling.
Pooling is permutation invariant either way. Everything is batched over a
leading axis with a padding mask so saliency replicates and minibatches share
one code path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .numeric import InvalidInputError, rng_for

POOLINGS = ("attention", "mean")


class TrainingDivergence(RuntimeError):
    """Non-finite loss or gradient; the offending step is not applied."""


@dataclass
class EncoderCache:
    ids: np.ndarray | None
    X: np.ndarray
    mask: np.ndarray
    alpha: np.ndarray
    s: np.ndarray
    h: np.ndarray
    drop: np.ndarray | None


def init(seed: int, V: int, d: int = 32, l: int = 32, embed_scale: float = 0.3) -> dict[str, np.ndarray]:
    if d < 2 or l < 2:
        raise ValueError("d and l must be at least 2")
    rng = rng_for(seed, "encoder-init")
    E = rng.normal(0.0, embed_scale, size=(V, d))
    E[0] = 0.0  # [PAD]
    return {
        "E": E,
        "W_h": rng.normal(0.0, 1.0 / np.sqrt(d), size=(l, d)),
        "b_h": np.zeros(l),
        "u": np.zeros(d),
    }


def pad_batch(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    n = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), n), dtype=np.int64)
    mask = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def embed(params, tokens: Sequence[int]) -> np.ndarray:
    """Copy of the embedding rows for ``tokens`` (an ``n x d`` matrix)."""
    E = params["E"]
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size == 0:
        raise InvalidInputError("cannot embed an empty sequence")
    if ids.min() < 0 or ids.max() >= E.shape[0]:
        raise InvalidInputError(f"token id outside [0, {E.shape[0]})")
    return E[ids].copy()


def forward(params, X: np.ndarray, mask: np.ndarray, pooling: str = "attention",
            dropout_mask: np.ndarray | None = None, ids: np.ndarray | None = None):
    """Batched encoder pass. Returns ``(h, cache)`` with ``h`` of shape ``(B, l)``.

    ``dropout_mask`` is a 0/1 array over hidden units; kept units are rescaled
    by ``l / kept`` so an all-ones mask is the identity.
    """
    if pooling == "attention":
        e = np.where(mask, X @ params["u"], -np.inf)
        e = e - e.max(axis=1, keepdims=True)
        a = np.where(mask, np.exp(e), 0.0)
        alpha = a / a.sum(axis=1, keepdims=True)
    elif pooling == "mean":
        alpha = mask / mask.sum(axis=1, keepdims=True)
    else:
        raise ValueError(f"unknown pooling {pooling!r}")
    s = np.einsum("bn,bnd->bd", alpha, X)
    h = np.tanh(s @ params["W_h"].T + params["b_h"])
    drop = None
    if dropout_mask is not None:
        dm = np.asarray(dropout_mask, dtype=np.float64)
        kept = dm.sum(axis=-1, keepdims=True)
        drop = np.where(kept > 0, dm * dm.shape[-1] / np.maximum(kept, 1.0), 0.0)
        out = h * drop
    else:
        out = h
    return out, EncoderCache(ids, X, mask, alpha, s, h, drop)


def backward(params, cache: EncoderCache, g_h: np.ndarray, pooling: str = "attention",
             grads: dict | None = None) -> np.ndarray:
    """Backpropagate ``g_h`` (gradient w.r.t. the encoder output).

    Parameter gradients are accumulated into ``grads`` when given (``E`` via
    the cached token ids). Returns the gradient w.r.t. ``X``.
    """
    if cache.drop is not None:
        g_h = g_h * cache.drop
    g_z = g_h * (1.0 - cache.h ** 2)
    g_s = g_z @ params["W_h"]
    gX = cache.alpha[:, :, None] * g_s[:, None, :]
    g_e = None
    if pooling == "attention":
        proj = np.einsum("bnd,bd->bn", cache.X, g_s) - np.einsum("bd,bd->b", cache.s, g_s)[:, None]
        g_e = np.where(cache.mask, cache.alpha * proj, 0.0)
        gX = gX + g_e[:, :, None] * params["u"]
    if grads is not None:
        grads["W_h"] += g_z.T @ cache.s
        grads["b_h"] += g_z.sum(axis=0)
        if g_e is not None:
            grads["u"] += np.einsum("bn,bnd->d", g_e, cache.X)
        if cache.ids is not None:
            np.add.at(grads["E"], cache.ids[cache.mask], gX[cache.mask])
    return gX


def encode_tokens(params, seqs: Sequence[Sequence[int]], pooling: str = "attention",
                  dropout_mask=None):
    ids, mask = pad_batch(seqs)
    return forward(params, params["E"][ids], mask, pooling, dropout_mask, ids=ids)


def encode(params, X: np.ndarray, dropout_mask=None, pooling: str = "attention") -> np.ndarray:
    """Hidden representation ``h`` of one input embedding matrix ``X``."""
    X = np.asarray(X, dtype=np.float64)
    mask = np.ones((1, X.shape[0]), dtype=bool)
    dm = None if dropout_mask is None else np.asarray(dropout_mask)[None, :]
    h, _ = forward(params, X[None], mask, pooling, dm)
    return h[0]


def dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray | None:
    if rate <= 0:
        return None
    return (rng.random(shape) >= rate).astype(np.float64)


def grad_wrt_token_embeddings(model, X: np.ndarray, y, pool=None) -> np.ndarray:
    """``d F_y(X) / d X`` for a task model's scalar label score."""
    return model.score_and_grad(X, y, pool)[1]


def zeros_like(params) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def sgd_update(params, grads, learning_rate: float) -> None:
    for k, g in grads.items():
        params[k] -= learning_rate * g


def train_step(model, batch, learning_rate: float, rng: np.random.Generator | None = None) -> float:
    """One plain SGD step on ``batch``; returns the loss before the update."""
    if learning_rate < 0:
        raise ValueError("learning rate must be non-negative")
    try:
        loss, grads = model.loss_and_grads(batch, rng)
    except (InvalidInputError, FloatingPointError) as exc:
        raise TrainingDivergence(f"forward pass failed on a batch of {len(batch)}: {exc}") from exc
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        bad = sorted(k for k, g in grads.items() if not np.all(np.isfinite(g)))
        raise TrainingDivergence(f"non-finite loss {loss} (non-finite grads: {bad}) "
                                 f"on a batch of {len(batch)}")
    if learning_rate:
        sgd_update(model.params, grads, learning_rate)
    return loss


# Checkpoints: JSON with shapes, flat arrays and free-form metadata. Python's
# float repr round-trips float64 exactly.

def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    doc = {
        "meta": meta,
        "arrays": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()} for k, v in arrays.items()},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text())
    arrays = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["arrays"].items()}
    return arrays, doc["meta"]
