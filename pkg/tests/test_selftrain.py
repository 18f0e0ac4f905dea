import math
from dataclasses import replace

import numpy as np
import pytest

from sttod import selftrain
from sttod.corpus import Example, SingleClass, few_shot_split
from sttod.encoder import TrainingDivergence
from sttod.heads import ModelConfig, TaskModel
from sttod.selftrain import (
    Pools,
    PseudoLabeled,
    STConfig,
    pseudo_label,
    run,
    select,
    st_iteration,
    train_mlm_for,
    validation_score,
    warmup_teacher,
)
from sttod.synth import synth_generate
from sttod.numeric import rng_for

FAST = STConfig(k=20, max_epochs=15, warmup_patience=5, inner_patience=3, outer_patience=2, max_iterations=4,
                mlm_epochs=3, model=ModelConfig(d=16, l=16))


@pytest.fixture(scope="module")
def setup(intent_small, intent_split):
    mlm = train_mlm_for(intent_small, list(intent_split.labeled) + list(intent_split.unlabeled), FAST)
    warm = warmup_teacher(intent_small, intent_split.labeled, FAST)
    return intent_small, intent_split, mlm, warm


def pl(i, conf):
    return PseudoLabeled(Example(f"u{i}", (4,)), SingleClass(0), conf, 1)


class TestWarmup:
    def test_beats_majority_class(self, setup):
        ds, _, _, (teacher, info) = setup
        majority = max(np.bincount([e.label.index for e in ds.validation])) / len(ds.validation)
        assert info["val_metric"] > majority
        assert validation_score(teacher, ds.validation) == info["val_metric"]

    def test_patience_honored(self, setup):
        info = setup[3][1]
        assert info["epochs"] <= info["best_epoch"] + FAST.warmup_patience

    def test_same_seed_same_teacher(self, setup):
        ds, sp, _, (teacher, _) = setup
        again, _ = warmup_teacher(ds, sp.labeled, FAST)
        assert all(np.array_equal(again.params[k], teacher.params[k]) for k in teacher.params)

    def test_errors(self, setup):
        ds, sp, _, _ = setup
        with pytest.raises(ValueError):
            warmup_teacher(ds, [], FAST)
        with pytest.raises(ValueError, match="validation"):
            warmup_teacher(ds, sp.labeled, FAST, validation=[])


class TestPseudoLabel:
    def test_empty_pool(self, setup):
        assert pseudo_label(setup[3][0], []) == []

    def test_total_order(self, setup):
        _, sp, _, (teacher, _) = setup
        items = pseudo_label(teacher, sp.unlabeled, iteration=2)
        assert len(items) == len(sp.unlabeled)
        keys = [(-p.confidence, p.example.id) for p in items]
        assert keys == sorted(keys)
        assert all(0.0 <= p.confidence <= 1.0 and p.iteration == 2 for p in items)

    def test_ties_break_by_id(self):
        teacher = type("T", (), {"predict": lambda self, xs: [
            type("P", (), {"label": SingleClass(0), "confidence": 0.5})() for _ in xs]})()
        items = pseudo_label(teacher, [Example("b", (4,)), Example("a", (4,)), Example("c", (4,))])
        assert [p.example.id for p in items] == ["a", "b", "c"]

    @pytest.mark.slow
    def test_confident_decile_is_more_precise(self):
        gaps = []
        for seed in range(5):
            ds = synth_generate(seed=seed)
            sp = few_shot_split(ds, 0.01, seed)
            teacher, _ = warmup_teacher(ds, sp.labeled, replace(STConfig(), seed=seed))
            items = pseudo_label(teacher, sp.unlabeled)
            tenth = len(items) // 10

            def precision(chunk):
                return np.mean([p.label == sp.hidden[p.example.id] for p in chunk])
            gaps.append(precision(items[:tenth]) - precision(items[-tenth:]))
        assert np.mean(gaps) >= 0


class TestSelect:
    def test_top_k(self):
        items = sorted([pl(0, 0.9), pl(1, 0.5), pl(2, 0.8)], key=lambda p: -p.confidence)
        assert [p.example.id for p in select(items, STConfig(k=2))] == ["u0", "u2"]

    def test_least_k(self):
        items = [pl(i, c) for i, c in enumerate([0.9, 0.8, 0.5])]
        assert [p.example.id for p in select(items, STConfig(k=2, selector="leastk"))] == ["u1", "u2"]

    def test_k_beyond_pool_takes_everything(self):
        items = [pl(i, 0.5) for i in range(3)]
        for kind in ("topk", "leastk", "randomk"):
            assert len(select(items, STConfig(k=10, selector=kind))) == 3

    def test_random_k_is_a_uniform_subset(self):
        items = [pl(i, 1 - i / 10) for i in range(10)]
        counts = np.zeros(10)
        for s in range(2000):
            chosen = select(items, STConfig(k=3, selector="randomk"), rng_for(s))
            assert len({p.example.id for p in chosen}) == 3
            counts[[int(p.example.id[1:]) for p in chosen]] += 1
        np.testing.assert_allclose(counts / 2000, 0.3, atol=0.04)

    def test_select_all(self):
        items = [pl(i, 0.5) for i in range(7)]
        assert select(items, STConfig(selector="selectall")) == items

    def test_config_validation(self):
        with pytest.raises(ValueError):
            STConfig(selector="best")
        with pytest.raises(ValueError):
            STConfig(k=0)
        STConfig(k=0, selector="selectall")


class TestIteration:
    def test_bookkeeping_and_fresh_student(self, setup):
        ds, sp, mlm, (teacher, _) = setup
        pools = Pools.from_split(sp)
        student, after, rep = st_iteration(ds, pools, teacher, mlm, FAST, 1, ds.validation, sp.hidden)
        k = min(FAST.k, len(sp.unlabeled))
        assert len(after.labeled) == len(pools.labeled) + k
        assert len(after.unlabeled) == len(pools.unlabeled) - k
        assert rep["augmented"] == (1 + FAST.q) * len(after.labeled)
        assert rep["selected"] == k and rep["status"] == "ok"
        assert 0.0 <= rep["pseudo_label_precision"] <= 1.0
        assert len(pools.labeled) == len(sp.labeled)  # inputs are not mutated
        init = TaskModel.initialize(ds, FAST.model, selftrain._seed(FAST.seed, "student", 1))
        assert not np.array_equal(init.params["E"], teacher.params["E"])
        assert student is not teacher

    def test_divergence_keeps_the_teacher(self, setup, monkeypatch):
        ds, sp, mlm, (teacher, _) = setup

        def boom(*args, **kwargs):
            raise TrainingDivergence("non-finite loss")
        monkeypatch.setattr(selftrain, "train_model", boom)
        model, _, rep = st_iteration(ds, Pools.from_split(sp), teacher, mlm, FAST, 1, ds.validation)
        assert model is teacher
        assert rep["status"].startswith("failed") and rep["val_metric"] is None

    def test_without_pseudo_labels_the_pools_stay(self, setup):
        ds, sp, mlm, (teacher, _) = setup
        cfg = replace(FAST, pseudo_label=False)
        _, after, rep = st_iteration(ds, Pools.from_split(sp), teacher, mlm, cfg, 1, ds.validation)
        assert len(after.labeled) == len(sp.labeled) and rep["selected"] == 0
        assert rep["augmented"] == 4 * len(sp.labeled)


def conserved(split):
    original = sorted(e.id for e in split.labeled + split.unlabeled)
    log = []

    def observe(it, pools):
        ids = [e.id for e in pools.labeled + pools.unlabeled + pools.relabel]
        assert sorted(ids) == original
        assert all(e.label is not None for e in pools.labeled + pools.relabel)
        assert all(e.label is None for e in pools.unlabeled)
        log.append((it, {e.id: e.label for e in pools.labeled}, len(pools.unlabeled), len(pools.relabel)))
    return observe, log


class TestRun:
    def test_full_run(self, setup):
        ds, sp, mlm, warm = setup
        observe, log = conserved(sp)
        res = run(ds, sp, FAST, mlm=mlm, warmup=warm, hidden=sp.hidden, observer=observe)
        rep = res.report
        n_it = len(rep["iterations"])
        assert 1 <= n_it <= math.ceil(len(sp.unlabeled) / FAST.k) + 1
        for (_, before, u_before, _), (_, after, _, _) in zip(log, log[1:]):
            assert len(after) == len(before) + min(FAST.k, u_before)
            assert all(after[i] == lab for i, lab in before.items())  # pseudo-labels never change
        scores = [rep["warmup"]["val_metric"]] + [i["val_metric"] for i in rep["iterations"] if i["val_metric"]]
        assert rep["best_val_metric"] == max(scores)
        assert validation_score(res.best_model, ds.validation) == rep["best_val_metric"]
        assert set(rep["test"]) == {"acc_all", "acc_in", "acc_out", "recall_out"}

    def test_report_is_deterministic(self, setup):
        ds, sp, mlm, _ = setup
        a = run(ds, sp, FAST, mlm=mlm).report
        b = run(ds, sp, FAST, mlm=mlm).report
        assert a == b

    def test_empty_unlabeled_pool_returns_warmup(self, setup):
        ds, _, mlm, _ = setup
        sp = few_shot_split(ds, 1.0, 0)
        res = run(ds, sp, FAST, mlm=mlm)
        assert res.report["iterations"] == [] and res.best_model is res.warmup_model

    def test_select_all_relabels(self, setup):
        ds, sp, mlm, warm = setup
        observe, log = conserved(sp)
        cfg = replace(FAST, selector="selectall", max_iterations=2, outer_patience=5)
        rep = run(ds, sp, cfg, mlm=mlm, warmup=warm, observer=observe).report
        assert len(rep["iterations"]) == 2
        for it, labeled, n_unlabeled, n_relabel in log[1:]:
            assert n_unlabeled == 0 and n_relabel == len(sp.unlabeled)
            assert len(labeled) == len(sp.labeled)

    def test_max_iterations_without_pseudo_labels(self, setup):
        ds, sp, mlm, warm = setup
        cfg = replace(FAST, pseudo_label=False, outer_patience=10, max_iterations=2)
        rep = run(ds, sp, cfg, mlm=mlm, warmup=warm).report
        assert [i["labeled"] for i in rep["iterations"]] == [len(sp.labeled)] * 2

    def test_no_augmentation_needs_no_mlm(self, setup):
        ds, sp, _, warm = setup
        rep = run(ds, sp, replace(FAST, augment=False, max_iterations=1), warmup=warm).report
        assert rep["iterations"][0]["augmented"] == rep["iterations"][0]["labeled"]


@pytest.mark.parametrize("task", ["dialog_act", "dst", "response_selection"])
def test_other_tasks_run_end_to_end(task_datasets, task):
    ds = task_datasets[task]
    sp = few_shot_split(ds, 0.2, 0)
    cfg = replace(FAST, k=10, max_iterations=1, max_epochs=3, model=ModelConfig(d=8, l=8, eval_negatives=20,
                                                                                 train_negatives=5))
    res = run(ds, sp, cfg, hidden=sp.hidden)
    assert len(res.report["iterations"]) == 1
    assert res.report["iterations"][0]["status"] == "ok"
    assert all(0.0 <= v <= 1.0 for v in res.report["test"].values() if v is not None)
