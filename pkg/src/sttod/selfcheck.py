"""Quick numerical self-tests behind ``sttod check``."""

from __future__ import annotations

import itertools
from typing import Callable

import numpy as np

from .corpus import Example, MultiLabel, ResponseRef, SingleClass, SlotAssignment, TaskKind
from .gradaug import GradAugConfig, masking_probability, sample_without_replacement, saliency, smooth_saliency
from .heads import ModelConfig, TaskModel, scalar_score_for_label
from .numeric import finite_difference_grad, relative_error, rng_for


def small_model(kind: TaskKind, seed: int, d: int = 8, V: int = 30) -> TaskModel:
    cfg = ModelConfig(d=d, l=d, train_negatives=3, eval_negatives=5)
    values = tuple(tuple((4 + 3 * j + i,) for i in range(3)) for j in range(2))
    responses = tuple((4 + i, 10 + i) for i in range(8))
    n_out = {TaskKind.INTENT: 5, TaskKind.DIALOG_ACT: 4, TaskKind.DST: 2, TaskKind.RESPONSE_SELECTION: 8}[kind]
    model = TaskModel.fresh(kind, V, n_out, cfg, seed, value_tokens=values if kind is TaskKind.DST else (),
                            response_tokens=responses if kind is TaskKind.RESPONSE_SELECTION else ())
    rng = rng_for(seed, "selfcheck-perturb")
    # move u off zero so attention weights differ between tokens
    model.params["u"] = rng.normal(0.0, 0.5, size=d)
    return model


def random_label(kind: TaskKind, rng):
    if kind is TaskKind.INTENT:
        return SingleClass(int(rng.integers(5)))
    if kind is TaskKind.DIALOG_ACT:
        return MultiLabel(tuple(sorted(int(a) for a in rng.choice(4, size=int(rng.integers(0, 3)), replace=False))))
    if kind is TaskKind.DST:
        return SlotAssignment(tuple(int(v) for v in rng.integers(0, 3, size=2)))
    return ResponseRef(int(rng.integers(8)))


def gradient_case(kind: TaskKind, seed: int) -> float:
    """Relative error between analytic and finite-difference d score / d X."""
    model = small_model(kind, seed)
    rng = rng_for(seed, "selfcheck-case")
    n = int(rng.integers(1, 7))
    X = rng.normal(0.0, 1.0, size=(n, model.config.d))
    y = random_label(kind, rng)
    pool = None
    if kind is TaskKind.RESPONSE_SELECTION:
        others = [i for i in range(8) if i != y.index]
        pool = np.array([y.index] + list(rng.choice(others, size=3, replace=False)))
    _, g = model.score_and_grad(X, y, pool)
    fd = finite_difference_grad(lambda Z: scalar_score_for_label(model, Z, y, pool), X)
    return relative_error(g, fd)


def inclusion_oracle(p, k: int) -> np.ndarray:
    """Exact inclusion probabilities of successive weighted draws without replacement."""
    p = np.asarray(p, dtype=np.float64)
    incl = np.zeros(p.size)
    for seq in itertools.permutations(range(p.size), k):
        prob, left = 1.0, 1.0
        for i in seq:
            prob *= p[i] / left
            left -= p[i]
        for i in seq:
            incl[i] += prob
    return incl


def _check_gradients() -> str:
    worst = max(gradient_case(kind, s) for kind in TaskKind for s in range(25))
    assert worst < 1e-4, worst
    return f"max relative error {worst:.2e}"


def _check_smooth_zero_variance() -> str:
    model = small_model(TaskKind.INTENT, 0)
    x = Example("c", (5, 6, 7, 5), SingleClass(1))
    diff = np.max(np.abs(smooth_saliency(model, x, GradAugConfig(noise_variance=0.0)) - saliency(model, x)))
    assert diff < 1e-12, diff
    return f"max abs diff {diff:.1e}"


def _check_masking_probability() -> str:
    p = masking_probability([1.0, 2.0, 4.0], 1.0)
    assert np.array_equal(p, np.array([4 / 7, 2 / 7, 1 / 7])), p
    rng = rng_for(0, "selfcheck-p")
    for _ in range(1000):
        q = masking_probability(rng.normal(size=int(rng.integers(1, 12))), float(rng.uniform(0, 3)))
        assert abs(q.sum() - 1.0) < 1e-12
    return "hand case exact, sums to 1"


def _check_sampler() -> str:
    rng = rng_for(0, "selfcheck-sampler")
    p = masking_probability(rng.uniform(0.1, 1.0, size=6))
    draws = 20000
    counts = np.zeros(6)
    for _ in range(draws):
        counts[sample_without_replacement(p, 2, rng)] += 1
    gap = np.max(np.abs(counts / draws - inclusion_oracle(p, 2)))
    assert gap < 0.02, gap
    return f"max inclusion gap {gap:.4f} over {draws} draws"


CHECKS: dict[str, Callable[[], str]] = {
    "head gradients vs finite differences": _check_gradients,
    "smooth saliency at zero variance": _check_smooth_zero_variance,
    "masking distribution": _check_masking_probability,
    "weighted sampler vs enumeration": _check_sampler,
}


def run_checks(echo=print) -> bool:
    ok = True
    for name, fn in CHECKS.items():
        try:
            echo(f"PASS  {name}: {fn()}")
        except AssertionError as exc:
            ok = False
            echo(f"FAIL  {name}: {exc}")
    return ok
