"""Window-based masked-token model used to reconstruct masked inputs.

Each masked position is predicted from the mean embedding of the tokens
within ``radius`` positions of it (other ``[MASK]`` tokens included, padding
excluded), followed by a linear softmax over the vocabulary. Left and right
neighbours are looked up in separate tables so the window knows which side a
token sits on.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import encoder as enc
from .corpus import MASK, PAD, RESERVED
from .numeric import PROB_FLOOR, InvalidInputError, rng_for, softmax

PAD_ID = RESERVED.index(PAD)
MASK_ID = RESERVED.index(MASK)


@dataclass
class MlmModel:
    params: dict[str, np.ndarray]
    radius: int = 3
    reserved: tuple[int, ...] = tuple(range(len(RESERVED)))
    history: list[float] = field(default_factory=list)

    @property
    def vocab_size(self) -> int:
        return self.params["E_left"].shape[0]

    def save(self, path) -> None:
        enc.save_checkpoint(path, self.params, {"kind": "mlm", "radius": self.radius,
                                                "reserved": list(self.reserved), "history": self.history})

    @classmethod
    def load(cls, path) -> "MlmModel":
        params, meta = enc.load_checkpoint(path)
        return cls(params, meta["radius"], tuple(meta["reserved"]), list(meta["history"]))


def mlm_init(vocab_size: int, dim: int = 32, radius: int = 3, seed: int = 0) -> MlmModel:
    if vocab_size <= len(RESERVED):
        raise InvalidInputError("vocabulary has no content tokens")
    rng = rng_for(seed, "mlm-init")
    params = {
        "E_left": rng.normal(0.0, 0.1, size=(vocab_size, dim)),
        "E_right": rng.normal(0.0, 0.1, size=(vocab_size, dim)),
        "W_o": rng.normal(0.0, 0.01, size=(vocab_size, dim)),
        "b_o": np.zeros(vocab_size),
    }
    params["E_left"][PAD_ID] = 0.0
    params["E_right"][PAD_ID] = 0.0
    return MlmModel(params, radius)


def _contexts(tokens: Sequence[int], positions: Sequence[int], radius: int) -> np.ndarray:
    offsets = [o for o in range(-radius, radius + 1) if o]
    ctx = np.full((len(positions), len(offsets)), PAD_ID, dtype=np.int64)
    n = len(tokens)
    for r, p in enumerate(positions):
        for c, o in enumerate(offsets):
            if 0 <= p + o < n:
                ctx[r, c] = tokens[p + o]
    return ctx


def _forward(params, ctx: np.ndarray):
    # ctx columns: offsets -radius..-1 then 1..radius
    valid = ctx != PAD_ID
    count = np.maximum(valid.sum(axis=1, keepdims=True), 1)
    r = ctx.shape[1] // 2
    h = (params["E_left"][ctx[:, :r]].sum(axis=1) + params["E_right"][ctx[:, r:]].sum(axis=1)) / count
    logits = h @ params["W_o"].T + params["b_o"]
    return h, logits, valid, count


def mask_count(n: int, ratio: float) -> int:
    return max(1, int(np.floor(ratio * n + 0.5)))


def _masked_instances(seqs, ratio, radius, rng):
    ctxs, targets = [], []
    for seq in seqs:
        k = mask_count(len(seq), ratio)
        positions = np.sort(rng.choice(len(seq), size=k, replace=False))
        corrupted = list(seq)
        for p in positions:
            corrupted[p] = MASK_ID
        ctxs.append(_contexts(corrupted, positions, radius))
        targets.extend(seq[p] for p in positions)
    return np.concatenate(ctxs), np.asarray(targets, dtype=np.int64)


def loss_and_grads(params, ctx: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy of predicting ``targets`` from context windows ``ctx``."""
    B = len(targets)
    h, logits, valid, count = _forward(params, ctx)
    P = softmax(logits)
    loss = float(np.mean(-np.log(np.maximum(P[np.arange(B), targets], PROB_FLOOR))))
    g = P
    g[np.arange(B), targets] -= 1.0
    g /= B
    g_h = g @ params["W_o"]
    grads = {"W_o": g.T @ h, "b_o": g.sum(axis=0)}
    g_rows = (g_h / count)[:, None, :] * valid[:, :, None]
    r = ctx.shape[1] // 2
    for name, cols in (("E_left", slice(0, r)), ("E_right", slice(r, None))):
        gE = np.zeros_like(params[name])
        np.add.at(gE, ctx[:, cols], g_rows[:, cols])
        gE[PAD_ID] = 0.0
        grads[name] = gE
    return loss, grads


def mlm_train(corpus: Sequence[Sequence[int]], vocab_size: int, *, mask_ratio: float = 0.15,
              epochs: int = 10, seed: int = 0, dim: int = 32, radius: int = 3,
              learning_rate: float = 1.0, batch_size: int = 64, heldout_fraction: float = 0.1) -> MlmModel:
    """Train on token sequences by masking ``mask_ratio`` of each sequence per epoch.

    Held-out loss per epoch (on a fixed masking of a ``heldout_fraction``
    slice) is recorded in ``model.history``.
    """
    seqs = [tuple(s) for s in corpus if len(s)]
    if not seqs:
        raise InvalidInputError("empty corpus")
    model = mlm_init(vocab_size, dim, radius, seed)
    params = model.params
    rng = rng_for(seed, "mlm-train")
    order = rng.permutation(len(seqs))
    n_held = int(len(seqs) * heldout_fraction) if len(seqs) >= 10 else 0
    held = [seqs[i] for i in order[:n_held]]
    train = [seqs[i] for i in order[n_held:]]
    if held:
        held_ctx, held_y = _masked_instances(held, mask_ratio, radius, rng_for(seed, "mlm-heldout"))

    for _ in range(epochs):
        ctx, y = _masked_instances(train, mask_ratio, radius, rng)
        perm = rng.permutation(len(y))
        for start in range(0, len(y), batch_size):
            idx = perm[start:start + batch_size]
            _, grads = loss_and_grads(params, ctx[idx], y[idx])
            for name, g in grads.items():
                params[name] -= learning_rate * g
        if held:
            model.history.append(loss_and_grads(params, held_ctx, held_y)[0])
    return model


def mlm_predict(model: MlmModel, tokens: Sequence[int], positions: Sequence[int]) -> np.ndarray:
    """Distribution over the vocabulary for each masked position (reserved ids get 0)."""
    positions = list(positions)
    if not positions:
        raise InvalidInputError("no masked positions")
    for p in positions:
        if tokens[p] != MASK_ID:
            raise InvalidInputError(f"position {p} does not hold [MASK]")
    _, logits, _, _ = _forward(model.params, _contexts(tokens, positions, model.radius))
    logits[:, list(model.reserved)] = -np.inf
    logits -= logits.max(axis=1, keepdims=True)
    P = np.exp(logits)
    return P / P.sum(axis=1, keepdims=True)


def top_k_distribution(probs: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the ``k`` most likely tokens (ties to lower id) and renormalized weights."""
    idx = np.argsort(-probs, kind="stable")[:k]
    w = probs[idx]
    return idx, w / w.sum()


def mlm_sample_reconstruction(model: MlmModel, tokens: Sequence[int], positions: Sequence[int],
                              k: int = 10, rng: np.random.Generator | None = None) -> tuple[int, ...]:
    """Replace each masked position with a draw from its top-``k`` tokens."""
    available = model.vocab_size - len(model.reserved)
    if k > available:
        warnings.warn(f"top-k {k} exceeds {available} predictable tokens; clipping", stacklevel=2)
        k = available
    if rng is None:
        rng = np.random.default_rng(0)
    P = mlm_predict(model, tokens, positions)
    out = list(tokens)
    for row, p in zip(P, positions):
        idx, w = top_k_distribution(row, k)
        out[p] = int(idx[0]) if k == 1 else int(idx[rng.choice(k, p=w)])
    return tuple(out)
