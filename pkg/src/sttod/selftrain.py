"""Teacher/student self-training over a labeled and an unlabeled pool.

The teacher is warmed up on the labeled pool, then each iteration:

1. the teacher predicts every unlabeled example and its confidence;
2. a selector moves some of them, with their predicted labels, to the
   labeled pool;
3. the whole labeled pool is augmented with GradAug under the current
   teacher;
4. a freshly initialized student is trained on the augmented pool (with
   dropout and early stopping on validation) and becomes the next teacher.

The run returns the student with the best validation score, which may be
the warm-up teacher itself.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .corpus import Dataset, Example, LabelValue, Split, TaskKind
from .encoder import TrainingDivergence, train_step
from .gradaug import GradAugConfig, gradaug
from .heads import ModelConfig, TaskModel
from .metrics import PRIMARY_METRIC, evaluate, with_eval_pools
from .mlm import MlmModel, mlm_train
from .numeric import DegenerateInputError, rng_for

log = logging.getLogger(__name__)

SELECTORS = ("topk", "randomk", "leastk", "selectall")


@dataclass(frozen=True)
class STConfig:
    k: int = 100
    selector: str = "topk"
    warmup_patience: int = 20
    inner_patience: int = 10
    outer_patience: int = 3
    max_iterations: int = 10
    max_epochs: int = 300
    batch_size: int = 32
    learning_rate: float = 1.0
    seed: int = 0
    augment: bool = True
    pseudo_label: bool = True
    mlm_epochs: int = 20
    model: ModelConfig = field(default_factory=ModelConfig)
    gradaug: GradAugConfig = field(default_factory=GradAugConfig)

    def __post_init__(self):
        if self.selector not in SELECTORS:
            raise ValueError(f"selector must be one of {SELECTORS}")
        if self.k < 1 and self.selector != "selectall":
            raise ValueError("k must be at least 1")

    @property
    def q(self) -> int:
        return self.gradaug.q if self.augment else 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: Mapping) -> "STConfig":
        obj = dict(obj)
        model = ModelConfig(**obj.pop("model", {}))
        aug = GradAugConfig(**obj.pop("gradaug", {}))
        return cls(model=model, gradaug=aug, **obj)


@dataclass(frozen=True)
class PseudoLabeled:
    example: Example
    label: LabelValue
    confidence: float
    iteration: int


@dataclass
class Pools:
    """Labeled pool, unlabeled pool, and (select-all only) the relabelable set."""
    labeled: list[Example]
    unlabeled: list[Example]
    relabel: list[Example] = field(default_factory=list)
    provenance: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_split(cls, split: Split) -> "Pools":
        return cls(list(split.labeled), list(split.unlabeled), [],
                   {e.id: "gold" for e in split.labeled})

    def ids(self) -> dict[str, list[str]]:
        return {"labeled": [e.id for e in self.labeled], "unlabeled": [e.id for e in self.unlabeled],
                "relabel": [e.id for e in self.relabel]}

    def candidates(self) -> list[Example]:
        """Examples the teacher labels this iteration."""
        return self.unlabeled + [e.with_label(None) for e in self.relabel]

    def training_set(self) -> list[Example]:
        return self.labeled + self.relabel


@dataclass
class RunResult:
    best_model: TaskModel
    warmup_model: TaskModel
    report: dict
    timing: dict


def _seed(seed: int, *keys) -> int:
    return int(rng_for(seed, *keys).integers(2 ** 62))


def validation_score(model: TaskModel, validation: Sequence[Example], out_of_scope=None) -> float:
    return evaluate(model, validation, out_of_scope=out_of_scope)[PRIMARY_METRIC[model.kind]]


def train_model(model: TaskModel, train: Sequence[Example], validation: Sequence[Example], config: STConfig,
                *, patience: int, rng: np.random.Generator, dropout: bool = True,
                out_of_scope=None) -> tuple[TaskModel, dict]:
    """Minibatch SGD with early stopping; returns the best-validation checkpoint."""
    if not validation:
        raise ValueError("early stopping needs a non-empty validation split")
    if not train:
        raise ValueError("nothing to train on")
    best, best_score, best_epoch = model.copy(), -math.inf, 0
    losses = []
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        perm = rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(train), config.batch_size):
            batch = [train[i] for i in perm[start:start + config.batch_size]]
            total += train_step(model, batch, config.learning_rate, rng if dropout else None) * len(batch)
        losses.append(total / len(train))
        score = validation_score(model, validation, out_of_scope)
        if score > best_score:
            best, best_score, best_epoch = model.copy(), score, epoch
        elif epoch - best_epoch >= patience:
            break
    return best, {"epochs": epoch, "best_epoch": best_epoch, "val_metric": best_score,
                  "final_train_loss": losses[-1]}


def prepare_eval(dataset: Dataset, examples: Sequence[Example], config: STConfig) -> list[Example]:
    if dataset.task_kind is TaskKind.RESPONSE_SELECTION:
        return with_eval_pools(examples, len(dataset.ontology.responses), config.model.eval_negatives,
                               config.seed)
    return list(examples)


def warmup_teacher(dataset: Dataset, labeled: Sequence[Example], config: STConfig,
                   validation: Sequence[Example] | None = None) -> tuple[TaskModel, dict]:
    """Train the initial teacher on the labeled pool (patience ``warmup_patience``)."""
    if not labeled:
        raise ValueError("labeled pool is empty")
    if validation is None:
        validation = prepare_eval(dataset, dataset.validation, config)
    teacher = TaskModel.initialize(dataset, config.model, _seed(config.seed, "warmup"))
    return train_model(teacher, list(labeled), validation, config, patience=config.warmup_patience,
                       rng=rng_for(config.seed, "warmup-train"), out_of_scope=dataset.ontology.oos_index)


def pseudo_label(teacher: TaskModel, unlabeled: Sequence[Example], iteration: int = 0) -> list[PseudoLabeled]:
    """Teacher predictions for ``unlabeled``, most confident first (ties by id)."""
    preds = teacher.predict(list(unlabeled))
    items = [PseudoLabeled(e, p.label, p.confidence, iteration) for e, p in zip(unlabeled, preds)]
    items.sort(key=lambda it: (-it.confidence, it.example.id))
    return items


def select(priority: Sequence[PseudoLabeled], config: STConfig,
           rng: np.random.Generator | None = None) -> list[PseudoLabeled]:
    k = min(config.k, len(priority))
    if config.selector == "topk":
        return list(priority[:k])
    if config.selector == "leastk":
        return list(priority[len(priority) - k:])
    if config.selector == "randomk":
        if rng is None:
            rng = rng_for(config.seed, "randomk")
        idx = np.sort(rng.choice(len(priority), size=k, replace=False))
        return [priority[i] for i in idx]
    return list(priority)


def label_precision(selected: Sequence[PseudoLabeled], hidden: Mapping | None) -> float | None:
    if not hidden:
        return None
    known = [s for s in selected if s.example.id in hidden]
    if not known:
        return None
    return float(np.mean([s.label == hidden[s.example.id] for s in known]))


def st_iteration(dataset: Dataset, pools: Pools, teacher: TaskModel, mlm: MlmModel | None, config: STConfig,
                 iteration: int, validation: Sequence[Example], hidden: Mapping | None = None):
    """One self-training iteration. Returns ``(teacher, pools, report)``.

    If student training diverges the previous teacher is kept and the report
    is marked failed.
    """
    pools = Pools(list(pools.labeled), list(pools.unlabeled), list(pools.relabel), dict(pools.provenance))
    report: dict = {"iteration": iteration}
    if config.pseudo_label:
        priority = pseudo_label(teacher, pools.candidates(), iteration)
        chosen = select(priority, config, rng_for(config.seed, "select", iteration))
        report["pseudo_label_precision"] = label_precision(chosen, hidden)
        report["selected"] = len(chosen)
        report["selected_mean_confidence"] = (float(np.mean([c.confidence for c in chosen]))
                                              if chosen else None)
        labeled_now = [c.example.with_label(c.label) for c in chosen]
        if config.selector == "selectall":
            pools.unlabeled = []
            pools.relabel = labeled_now
        else:
            taken = {e.id for e in labeled_now}
            pools.unlabeled = [e for e in pools.unlabeled if e.id not in taken]
            pools.labeled.extend(labeled_now)
        for e in labeled_now:
            pools.provenance[e.id] = f"pseudo@{iteration}"
    else:
        report.update(pseudo_label_precision=None, selected=0, selected_mean_confidence=None)

    train_set = pools.training_set()
    if config.augment:
        train_set = gradaug(train_set, teacher, mlm, replace(config.gradaug, seed=config.seed),
                            iteration=iteration)
    report.update(labeled=len(pools.labeled), unlabeled=len(pools.unlabeled), relabel=len(pools.relabel),
                  augmented=len(train_set))

    student = TaskModel.initialize(dataset, config.model, _seed(config.seed, "student", iteration))
    try:
        student, info = train_model(student, train_set, validation, config, patience=config.inner_patience,
                                    rng=rng_for(config.seed, "student-train", iteration),
                                    out_of_scope=dataset.ontology.oos_index)
    except (TrainingDivergence, DegenerateInputError) as exc:
        log.warning("iteration %d failed: %s", iteration, exc)
        report.update(status=f"failed: {exc}", val_metric=None)
        return teacher, pools, report
    report.update(status="ok", **info)
    return student, pools, report


def train_mlm_for(dataset: Dataset, examples: Sequence[Example], config: STConfig) -> MlmModel:
    return mlm_train([e.tokens for e in examples], len(dataset.vocab), mask_ratio=config.gradaug.mask_ratio,
                     epochs=config.mlm_epochs, seed=_seed(config.seed, "mlm"))


def run(dataset: Dataset, split: Split, config: STConfig, *, mlm: MlmModel | None = None,
        warmup: tuple[TaskModel, dict] | None = None, hidden: Mapping | None = None,
        observer: Callable[[int, Pools], None] | None = None) -> RunResult:
    """Warm up, iterate, and keep the best validation checkpoint.

    ``hidden`` (the unlabeled pool's sealed ground truth) is used only to
    report pseudo-label precision. A precomputed ``warmup`` pair may be
    passed to share the warm-up teacher between runs. ``observer`` is called
    with the pools after the warm-up (iteration 0) and after every iteration.
    """
    t0 = time.perf_counter()
    validation = prepare_eval(dataset, dataset.validation, config)
    test = prepare_eval(dataset, dataset.test, config)
    oos = dataset.ontology.oos_index
    pools = Pools.from_split(split)
    if config.augment and mlm is None:
        mlm = train_mlm_for(dataset, list(split.labeled) + list(split.unlabeled), config)
    if warmup is None:
        warmup = warmup_teacher(dataset, split.labeled, config, validation)
    teacher, winfo = warmup
    timing = {"warmup_and_mlm_s": time.perf_counter() - t0, "iterations_s": []}
    if observer is not None:
        observer(0, pools)

    best_model, best_score, best_iter = teacher, winfo["val_metric"], 0
    iterations = []
    no_improve = 0
    it = 0
    while it < config.max_iterations and no_improve < config.outer_patience:
        if config.pseudo_label and not pools.candidates():
            break
        it += 1
        t_it = time.perf_counter()
        teacher, pools, rep = st_iteration(dataset, pools, teacher, mlm, config, it, validation, hidden)
        timing["iterations_s"].append(time.perf_counter() - t_it)
        if observer is not None:
            observer(it, pools)
        iterations.append(rep)
        score = rep.get("val_metric")
        if score is not None and score > best_score:
            best_model, best_score, best_iter = teacher, score, it
            no_improve = 0
        else:
            no_improve += 1

    report = {
        "task": dataset.task_kind.value,
        "config": config.to_dict(),
        "warmup": {"labeled": len(split.labeled), "unlabeled": len(split.unlabeled), **winfo},
        "iterations": iterations,
        "best_iteration": best_iter,
        "best_val_metric": best_score,
    }
    if test:
        report["warmup_test"] = evaluate(warmup[0], test, out_of_scope=oos)
        report["test"] = evaluate(best_model, test, out_of_scope=oos)
    timing["total_s"] = time.perf_counter() - t0
    return RunResult(best_model, warmup[0], report, timing)
