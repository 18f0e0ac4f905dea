"""Constructed corpora and test doubles shared by several test modules."""

import numpy as np

from sttod.numeric import rng_for

FIRST_CONTENT_ID = 4


def chain_corpus(n_seqs=1000, cycle=30, seed=0, lengths=(8, 12)):
    """Sequences that count upward modulo ``cycle``: every token is its left neighbour plus one."""
    rng = rng_for(seed, "chain")
    out = []
    for _ in range(n_seqs):
        n = int(rng.integers(lengths[0], lengths[1] + 1))
        start = int(rng.integers(cycle))
        out.append(tuple(FIRST_CONTENT_ID + (start + i) % cycle for i in range(n)))
    return out


def chain_rule(seq, pos, cycle=30):
    """The generating-rule token at ``pos`` recovered from a neighbour."""
    if pos > 0:
        return FIRST_CONTENT_ID + (seq[pos - 1] - FIRST_CONTENT_ID + 1) % cycle
    return FIRST_CONTENT_ID + (seq[pos + 1] - FIRST_CONTENT_ID - 1) % cycle


class LinearTeacher:
    """Label score ``w . mean_rows(X)``; its gradient is ``w / n`` on every row."""

    def __init__(self, w, vocab_size=40, seed=0):
        self.w = np.asarray(w, dtype=np.float64)
        self.E = rng_for(seed, "linear-teacher").normal(size=(vocab_size, self.w.size))

    def embed(self, tokens):
        return self.E[list(tokens)].copy()

    def scoring_pool(self, example):
        return None

    def score_and_grad_batch(self, X, mask, labels, pools=None):
        n = mask.sum(axis=1)
        F = np.einsum("bnd,d->b", X * mask[:, :, None], self.w) / n
        gX = mask[:, :, None] * self.w[None, None, :] / n[:, None, None]
        return F, gX
