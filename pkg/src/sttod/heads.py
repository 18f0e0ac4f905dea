"""Task output networks on top of the shared encoder.

One :class:`TaskModel` wraps the encoder parameters and the head for one of
the four task kinds:

* intent: ``softmax(W1 h)``
* dialog act: ``sigmoid(W2 h)`` thresholded at 0.5
* state tracking: per (domain, slot) pair, cosine of ``G_j h`` against the
  encoded ontology values, softmax-normalized
* response selection: cosine between the encoded context and candidates

Besides training losses, every head exposes a scalar label score ``F_y(X)``
with its exact gradient w.r.t. the input embedding matrix. Saliency is built
on that score.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import encoder as enc
from .corpus import Dataset, Example, MultiLabel, ResponseRef, SingleClass, SlotAssignment, TaskKind
from .numeric import PROB_FLOOR, InvalidInputError, cosine, cosine_grad, rng_for, sigmoid, softmax

DA_THRESHOLD = 0.5


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    l: int = 32
    pooling: str = "attention"
    dropout_rate: float = 0.1
    train_negatives: int = 20
    eval_negatives: int = 100
    head_scale: float = 0.1


@dataclass
class Prediction:
    label: object
    confidence: float
    scores: np.ndarray


# Stateless head functions.

def intent_forward(W1, h):
    return softmax(np.asarray(h) @ np.asarray(W1).T)


def da_forward(W2, h):
    return sigmoid(np.asarray(h) @ np.asarray(W2).T)


def da_label(a) -> MultiLabel:
    return MultiLabel(tuple(int(i) for i in np.flatnonzero(np.asarray(a) >= DA_THRESHOLD)))


def da_confidence(a) -> float:
    """Mean score of the predicted-positive acts; mean of ``1 - a`` if none fire."""
    a = np.asarray(a, dtype=np.float64)
    pos = a >= DA_THRESHOLD
    if pos.any():
        return float(a[pos].mean())
    return float((1.0 - a).mean())


def dst_score(G_j, h, value_encodings):
    """Cosine of the projected input against each value encoding of one pair."""
    q = np.asarray(G_j) @ np.asarray(h)
    return np.array([cosine(q, v) for v in value_encodings])


def rs_score(model: "TaskModel", h_context, candidate_tokens) -> float:
    h_c, _ = enc.encode_tokens(model.params, [candidate_tokens], model.config.pooling)
    return cosine(h_context, h_c[0])


def eval_pool(example: Example, n_responses: int, negatives: int, seed: int) -> tuple[int, ...]:
    """True response plus ``negatives`` distinct others, in a seeded order."""
    if n_responses <= negatives:
        raise InvalidInputError(f"response pool of {n_responses} cannot supply {negatives} negatives")
    truth = example.label.index
    rng = rng_for(seed, "eval-pool", example.id)
    neg = _sample_excluding(rng, n_responses, truth, negatives)
    pool = np.concatenate([[truth], neg])
    return tuple(int(i) for i in pool[rng.permutation(len(pool))])


def _sample_excluding(rng, n, excluded, k):
    draw = rng.choice(n - 1, size=k, replace=False)
    return draw + (draw >= excluded)


class TaskModel:
    """Encoder plus one task head; parameters live in ``self.params``."""

    def __init__(self, kind: TaskKind, params: dict, config: ModelConfig, *, n_outputs: int,
                 value_tokens=(), response_tokens=(), seed: int = 0):
        self.kind = TaskKind(kind)
        self.params = params
        self.config = config
        self.n_outputs = n_outputs
        self.value_tokens = tuple(tuple(tuple(v) for v in pair) for pair in value_tokens)
        self.response_tokens = tuple(tuple(r) for r in response_tokens)
        self.seed = seed

    @classmethod
    def initialize(cls, dataset: Dataset, config: ModelConfig = ModelConfig(), seed: int = 0) -> "TaskModel":
        return cls.fresh(dataset.task_kind, len(dataset.vocab), dataset.n_outputs(), config, seed,
                         value_tokens=dataset.value_tokens if dataset.task_kind is TaskKind.DST else (),
                         response_tokens=(dataset.response_tokens
                                          if dataset.task_kind is TaskKind.RESPONSE_SELECTION else ()))

    @classmethod
    def fresh(cls, kind, vocab_size, n_outputs, config=ModelConfig(), seed=0, *, value_tokens=(),
              response_tokens=()) -> "TaskModel":
        kind = TaskKind(kind)
        if kind is TaskKind.INTENT and n_outputs < 2:
            raise ValueError("intent head needs at least two classes")
        if kind is TaskKind.RESPONSE_SELECTION and len(response_tokens) <= config.train_negatives:
            raise ValueError("response pool must be larger than the training negatives")
        params = enc.init(seed, vocab_size, config.d, config.l)
        rng = rng_for(seed, "head-init")
        l, s = config.l, config.head_scale
        if kind is TaskKind.INTENT:
            params["W1"] = rng.normal(0.0, s, size=(n_outputs, l))
        elif kind is TaskKind.DIALOG_ACT:
            params["W2"] = rng.normal(0.0, s, size=(n_outputs, l))
        elif kind is TaskKind.DST:
            params["G"] = np.eye(l)[None] + rng.normal(0.0, s, size=(n_outputs, l, l))
        return cls(kind, params, config, n_outputs=n_outputs, value_tokens=value_tokens,
                   response_tokens=response_tokens, seed=seed)

    def copy(self) -> "TaskModel":
        other = copy.copy(self)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    # -- encoder plumbing

    def embed(self, tokens) -> np.ndarray:
        return enc.embed(self.params, tokens)

    def _encode(self, seqs, dropout_mask=None):
        return enc.encode_tokens(self.params, seqs, self.config.pooling, dropout_mask)

    def _value_flat(self):
        flat = [v for pair in self.value_tokens for v in pair]
        offsets = np.cumsum([0] + [len(pair) for pair in self.value_tokens])
        return flat, offsets

    # -- training

    def loss_and_grads(self, batch: Sequence[Example], rng: np.random.Generator | None = None):
        """Mean loss over ``batch`` and its gradient for every parameter.

        Dropout is applied to the input representation only when ``rng`` is
        given and the rate is positive.
        """
        grads = enc.zeros_like(self.params)
        B = len(batch)
        dm = None
        if rng is not None:
            dm = enc.dropout_mask(rng, (B, self.config.l), self.config.dropout_rate)
        h, cache = self._encode([e.tokens for e in batch], dm)
        labels = [e.label for e in batch]
        kind = self.kind
        p = self.params
        if kind is TaskKind.INTENT:
            y = np.array([lab.index for lab in labels])
            P = softmax(h @ p["W1"].T)
            loss = float(np.mean(-np.log(np.maximum(P[np.arange(B), y], PROB_FLOOR))))
            g_logits = P.copy()
            g_logits[np.arange(B), y] -= 1.0
            g_logits /= B
            grads["W1"] += g_logits.T @ h
            g_h = g_logits @ p["W1"]
        elif kind is TaskKind.DIALOG_ACT:
            T = np.zeros((B, self.n_outputs))
            for b, lab in enumerate(labels):
                T[b, list(lab.active)] = 1.0
            a = sigmoid(h @ p["W2"].T)
            ac = np.clip(a, PROB_FLOOR, 1.0 - PROB_FLOOR)
            loss = float(np.mean(-(T * np.log(ac) + (1.0 - T) * np.log1p(-ac))))
            g_logits = (a - T) / (B * self.n_outputs)
            grads["W2"] += g_logits.T @ h
            g_h = g_logits @ p["W2"]
        elif kind is TaskKind.DST:
            loss, g_h = self._dst_loss(h, labels, grads)
        else:
            loss, g_h = self._rs_loss(h, batch, grads, rng)
        enc.backward(p, cache, g_h, self.config.pooling, grads)
        return loss, grads

    def _dst_loss(self, h, labels, grads):
        B = h.shape[0]
        flat, offsets = self._value_flat()
        Vh, vcache = self._encode(flat)
        g_V = np.zeros_like(Vh)
        g_h = np.zeros_like(h)
        loss = 0.0
        for j in range(self.n_outputs):
            G = self.params["G"][j]
            q = h @ G.T
            Vj = Vh[offsets[j]:offsets[j + 1]]
            c, dq, dv = cosine_grad(q[:, None, :], Vj[None, :, :])
            P = softmax(c)
            y = np.array([lab.values[j] for lab in labels])
            loss += float(np.mean(-np.log(np.maximum(P[np.arange(B), y], PROB_FLOOR))))
            g_c = P.copy()
            g_c[np.arange(B), y] -= 1.0
            g_c /= B
            g_q = np.einsum("bk,bkl->bl", g_c, dq)
            grads["G"][j] += g_q.T @ h
            g_h += g_q @ G
            g_V[offsets[j]:offsets[j + 1]] += np.einsum("bk,bkl->kl", g_c, dv)
        enc.backward(self.params, vcache, g_V, self.config.pooling, grads)
        return loss, g_h

    def training_pool(self, example: Example, rng: np.random.Generator | None = None) -> np.ndarray:
        """True response first, then ``train_negatives`` sampled negatives."""
        if rng is None:
            rng = rng_for(self.seed, "rs-train-pool", example.id)
        truth = example.label.index
        neg = _sample_excluding(rng, len(self.response_tokens), truth, self.config.train_negatives)
        return np.concatenate([[truth], neg]).astype(np.int64)

    def _rs_loss(self, h, batch, grads, rng):
        B = h.shape[0]
        pools = np.stack([self.training_pool(e, rng) for e in batch])
        uniq, inv = np.unique(pools, return_inverse=True)
        inv = inv.reshape(pools.shape)
        Ch, ccache = self._encode([self.response_tokens[i] for i in uniq])
        c, dh, dc = cosine_grad(h[:, None, :], Ch[inv])
        P = softmax(c)
        loss = float(np.mean(-np.log(np.maximum(P[:, 0], PROB_FLOOR))))
        g_c = P.copy()
        g_c[:, 0] -= 1.0
        g_c /= B
        g_h = np.einsum("bk,bkl->bl", g_c, dh)
        g_C = np.zeros_like(Ch)
        np.add.at(g_C, inv, g_c[:, :, None] * dc)
        enc.backward(self.params, ccache, g_C, self.config.pooling, grads)
        return loss, g_h

    # -- label scores for saliency

    def scoring_pool(self, example: Example):
        """Candidate pool the response-selection label score is normalized over."""
        if self.kind is not TaskKind.RESPONSE_SELECTION:
            return None
        return self.training_pool(example)

    def score_and_grad_batch(self, X: np.ndarray, mask: np.ndarray, labels, pools=None):
        """Label scores ``F_y`` for a padded batch and ``dF_y/dX`` per row."""
        h, cache = enc.forward(self.params, X, mask, self.config.pooling)
        F, g_h = self._score_from_hidden(h, labels, pools)
        gX = enc.backward(self.params, cache, g_h, self.config.pooling)
        return F, gX

    def score_and_grad(self, X, y, pool=None):
        X = np.asarray(X, dtype=np.float64)
        F, gX = self.score_and_grad_batch(X[None], np.ones((1, X.shape[0]), dtype=bool), [y],
                                          None if pool is None else [pool])
        return float(F[0]), gX[0]

    def _score_from_hidden(self, h, labels, pools):
        B = h.shape[0]
        p = self.params
        kind = self.kind
        if kind is TaskKind.INTENT:
            y = np.array([lab.index for lab in labels])
            P = softmax(h @ p["W1"].T)
            F = P[np.arange(B), y]
            onehot = np.zeros_like(P)
            onehot[np.arange(B), y] = 1.0
            g_h = (F[:, None] * (onehot - P)) @ p["W1"]
            return F, g_h
        if kind is TaskKind.DIALOG_ACT:
            a = sigmoid(h @ p["W2"].T)
            N = self.n_outputs
            W = np.zeros((B, N))
            for b, lab in enumerate(labels):
                if lab.active:
                    W[b, list(lab.active)] = 1.0 / len(lab.active)
                else:
                    W[b] = -1.0 / N
            empty = np.array([not lab.active for lab in labels])
            F = np.sum(W * a, axis=1) + empty
            g_h = (W * a * (1.0 - a)) @ p["W2"]
            return F, g_h
        if kind is TaskKind.DST:
            flat, offsets = self._value_flat()
            Vh, _ = self._encode(flat)
            F = np.zeros(B)
            g_h = np.zeros_like(h)
            P_pairs = self.n_outputs
            for j in range(P_pairs):
                G = p["G"][j]
                q = h @ G.T
                c, dq, _ = cosine_grad(q[:, None, :], Vh[None, offsets[j]:offsets[j + 1]])
                P = softmax(c)
                y = np.array([lab.values[j] for lab in labels])
                Fj = P[np.arange(B), y]
                onehot = np.zeros_like(P)
                onehot[np.arange(B), y] = 1.0
                g_c = Fj[:, None] * (onehot - P)
                g_h += np.einsum("bk,bkl->bl", g_c, dq) @ G
                F += Fj
            return F / P_pairs, g_h / P_pairs
        # response selection
        if pools is None:
            pools = [None] * B
        F = np.zeros(B)
        g_h = np.zeros_like(h)
        cache: dict[tuple, np.ndarray] = {}
        for b, (lab, pool) in enumerate(zip(labels, pools)):
            pool = tuple(range(len(self.response_tokens))) if pool is None else tuple(int(i) for i in pool)
            if lab.index not in pool:
                raise InvalidInputError(f"true response {lab.index} not in the scoring pool")
            if pool not in cache:
                cache[pool] = self._encode([self.response_tokens[i] for i in pool])[0]
            c, dh, _ = cosine_grad(h[b][None, :], cache[pool])
            P = softmax(c)
            t = pool.index(lab.index)
            F[b] = P[t]
            onehot = np.zeros_like(P)
            onehot[t] = 1.0
            g_h[b] = (F[b] * (onehot - P)) @ dh
        return F, g_h

    # -- inference

    def hidden(self, examples: Sequence[Example]) -> np.ndarray:
        return self._encode([e.tokens for e in examples])[0]

    def predict(self, examples: Sequence[Example], batch_size: int = 512) -> list[Prediction]:
        out: list[Prediction] = []
        for start in range(0, len(examples), batch_size):
            out.extend(self._predict_batch(examples[start:start + batch_size]))
        return out

    def _predict_batch(self, examples):
        if not examples:
            return []
        h = self.hidden(examples)
        p = self.params
        kind = self.kind
        if kind is TaskKind.INTENT:
            P = softmax(h @ p["W1"].T)
            best = P.argmax(axis=1)
            return [Prediction(SingleClass(int(k)), float(P[b, k]), P[b]) for b, k in enumerate(best)]
        if kind is TaskKind.DIALOG_ACT:
            a = sigmoid(h @ p["W2"].T)
            return [Prediction(da_label(row), da_confidence(row), row) for row in a]
        if kind is TaskKind.DST:
            flat, offsets = self._value_flat()
            Vh, _ = self._encode(flat)
            probs = []
            for j in range(self.n_outputs):
                c, _, _ = cosine_grad((h @ p["G"][j].T)[:, None, :], Vh[None, offsets[j]:offsets[j + 1]])
                probs.append(softmax(c))
            preds = []
            for b in range(h.shape[0]):
                rows = [P[b] for P in probs]
                values = tuple(int(r.argmax()) for r in rows)
                conf = float(np.mean([r.max() for r in rows]))
                preds.append(Prediction(SlotAssignment(values), conf, np.concatenate(rows)))
            return preds
        R = self._encode(self.response_tokens)[0]
        preds = []
        for b, e in enumerate(examples):
            pool = np.arange(len(R)) if e.candidate_pool is None else np.asarray(e.candidate_pool)
            c, _, _ = cosine_grad(h[b][None, :], R[pool])
            P = softmax(c)
            k = int(P.argmax())
            preds.append(Prediction(ResponseRef(int(pool[k])), float(P[k]), c))
        return preds

    def rank_of_truth(self, examples: Sequence[Example]) -> list[int]:
        """1-based rank of the true response inside each example's candidate pool."""
        ranks = []
        for e, pred in zip(examples, self.predict(examples)):
            pool = list(e.candidate_pool) if e.candidate_pool is not None else list(range(len(self.response_tokens)))
            if e.label.index not in pool:
                raise InvalidInputError(f"{e.id}: true response absent from its pool")
            t = pool.index(e.label.index)
            s = pred.scores
            ranks.append(1 + int(np.sum(s > s[t])) + int(np.sum(s[:t] == s[t])))
        return ranks

    # -- persistence

    def save(self, path) -> None:
        meta = {
            "kind": self.kind.value,
            "config": asdict(self.config),
            "n_outputs": self.n_outputs,
            "value_tokens": [[list(v) for v in pair] for pair in self.value_tokens],
            "response_tokens": [list(r) for r in self.response_tokens],
            "seed": self.seed,
        }
        enc.save_checkpoint(path, self.params, meta)

    @classmethod
    def load(cls, path) -> "TaskModel":
        params, meta = enc.load_checkpoint(path)
        return cls(meta["kind"], params, ModelConfig(**meta["config"]), n_outputs=meta["n_outputs"],
                   value_tokens=meta["value_tokens"], response_tokens=meta["response_tokens"],
                   seed=meta["seed"])


def predict(model: TaskModel, x: Example) -> Prediction:
    return model.predict([x])[0]


def scalar_score_for_label(model: TaskModel, X, y, pool=None) -> float:
    """``F_y(X)``: the model's prediction score for label ``y`` given embeddings ``X``."""
    return model.score_and_grad(X, y, pool)[0]
