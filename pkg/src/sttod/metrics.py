"""Evaluation metrics for the four task kinds."""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np

from .corpus import Example, TaskKind
from .heads import TaskModel, eval_pool


class MetricError(ValueError):
    pass


def _check_aligned(preds, gold):
    if len(preds) != len(gold):
        raise MetricError(f"{len(preds)} predictions for {len(gold)} gold labels")
    if not gold:
        raise MetricError("no examples to score")


def metric_intent(preds: Sequence[int], gold: Sequence[int], out_of_scope: int | None = None) -> dict:
    """Overall, in-domain and out-of-scope accuracy plus out-of-scope recall.

    Without an out-of-scope class (or without out-of-scope gold examples) the
    corresponding entries are ``None``.
    """
    _check_aligned(preds, gold)
    p = np.asarray(preds)
    g = np.asarray(gold)
    out = {"acc_all": float(np.mean(p == g)), "acc_in": None, "acc_out": None, "recall_out": None}
    in_domain = g != out_of_scope if out_of_scope is not None else np.ones_like(g, dtype=bool)
    if in_domain.any():
        out["acc_in"] = float(np.mean(p[in_domain] == g[in_domain]))
    if out_of_scope is not None:
        out["acc_out"] = float(np.mean((p == out_of_scope) == (g == out_of_scope)))
        if (~in_domain).any():
            out["recall_out"] = float(np.mean(p[~in_domain] == out_of_scope))
    return out


def metric_dst(preds: Sequence[Sequence[int]], gold: Sequence[Sequence[int]]) -> dict:
    _check_aligned(preds, gold)
    p = np.asarray(preds)
    g = np.asarray(gold)
    if p.shape != g.shape:
        raise MetricError(f"pair sets differ: {p.shape} vs {g.shape}")
    hit = p == g
    return {"joint_acc": float(hit.all(axis=1).mean()), "slot_acc": float(hit.mean())}


def metric_f1(preds: Sequence[Sequence[int]], gold: Sequence[Sequence[int]], n_labels: int) -> dict:
    """Micro and macro F1 over label sets.

    A class with no predicted and no gold positives has F1 0, and so does
    the micro average when nothing is positive anywhere.
    """
    if n_labels <= 0:
        raise MetricError("n_labels must be positive")
    _check_aligned(preds, gold)
    P = np.zeros((len(preds), n_labels), dtype=bool)
    G = np.zeros_like(P)
    for i, (ps, gs) in enumerate(zip(preds, gold)):
        P[i, list(ps)] = True
        G[i, list(gs)] = True
    tp = (P & G).sum(axis=0)
    fp = (P & ~G).sum(axis=0)
    fn = (~P & G).sum(axis=0)
    denom = 2 * tp + fp + fn
    per_class = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    micro_denom = denom.sum()
    micro = 2 * tp.sum() / micro_denom if micro_denom else 0.0
    return {"micro_f1": float(micro), "macro_f1": float(per_class.mean())}


def metric_recall_at_k(ranks: Sequence[int | None], k: int) -> float:
    """Fraction of examples whose true response has 1-based rank ``<= k``."""
    if not ranks:
        raise MetricError("no rankings")
    if any(r is None for r in ranks):
        raise MetricError("true response absent from a ranking")
    return float(np.mean(np.asarray(ranks) <= k))


PRIMARY_METRIC = {
    TaskKind.INTENT: "acc_all",
    TaskKind.DST: "joint_acc",
    TaskKind.DIALOG_ACT: "micro_f1",
    TaskKind.RESPONSE_SELECTION: "recall_at_1",
}


def with_eval_pools(examples: Sequence[Example], n_responses: int, negatives: int, seed: int) -> list[Example]:
    """Attach a fixed evaluation pool (truth plus ``negatives``) to each example."""
    return [e if e.candidate_pool is not None else replace(e, candidate_pool=eval_pool(e, n_responses, negatives, seed))
            for e in examples]


def evaluate(model: TaskModel, examples: Sequence[Example], *, out_of_scope: int | None = None) -> dict:
    """Full metric set for ``examples`` (response-selection examples need pools)."""
    kind = model.kind
    if kind is TaskKind.RESPONSE_SELECTION:
        ranks = model.rank_of_truth(examples)
        return {"recall_at_1": metric_recall_at_k(ranks, 1), "recall_at_3": metric_recall_at_k(ranks, 3)}
    preds = [p.label for p in model.predict(examples)]
    if kind is TaskKind.INTENT:
        return metric_intent([p.index for p in preds], [e.label.index for e in examples], out_of_scope)
    if kind is TaskKind.DST:
        return metric_dst([p.values for p in preds], [e.label.values for e in examples])
    return metric_f1([p.active for p in preds], [e.label.active for e in examples], model.n_outputs)
