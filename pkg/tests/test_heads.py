import math

import numpy as np
import pytest

from sttod import encoder as enc
from sttod.corpus import Example, MultiLabel, ResponseRef, SingleClass, SlotAssignment, TaskKind
from sttod.heads import (
    ModelConfig,
    TaskModel,
    da_confidence,
    da_forward,
    da_label,
    dst_score,
    eval_pool,
    intent_forward,
    predict,
    rs_score,
    scalar_score_for_label,
)
from sttod.numeric import DegenerateInputError, cosine, finite_difference_grad, relative_error, rng_for, sigmoid
from sttod.selfcheck import gradient_case, random_label, small_model


def pinned_hidden(model, h):
    """Make ``model.hidden`` return ``h`` for every example."""
    model.hidden = lambda examples: np.tile(h, (len(examples), 1))
    return model


def unit(l, i=0):
    h = np.zeros(l)
    h[i] = 1.0
    return h


class TestIntentHead:
    def test_zero_weights_uniform(self):
        np.testing.assert_allclose(intent_forward(np.zeros((4, 3)), np.ones(3)), 0.25)

    def test_two_class_is_a_sigmoid(self):
        rng = rng_for(0)
        w, h = rng.normal(size=5), rng.normal(size=5)
        p = intent_forward(np.stack([w, -w]), h)
        assert p[0] == pytest.approx(sigmoid(2 * w @ h), abs=1e-15)
        assert p[1] == pytest.approx(1 - sigmoid(2 * w @ h), abs=1e-15)

    def test_predict_hand_case(self):
        model = TaskModel.fresh(TaskKind.INTENT, 10, 3, ModelConfig(d=4, l=4))
        model.params["W1"] = np.zeros((3, 4))
        model.params["W1"][:, 0] = np.log([0.1, 0.7, 0.2])
        pinned_hidden(model, unit(4))
        pred = predict(model, Example("x", (4,)))
        assert pred.label == SingleClass(1)
        assert pred.confidence == pytest.approx(0.7, abs=1e-12)
        assert len(pred.scores) == 3


class TestDialogActHead:
    def test_zero_weights_predict_everything(self):
        a = da_forward(np.zeros((3, 4)), np.ones(4))
        np.testing.assert_array_equal(a, 0.5)
        assert da_label(a) == MultiLabel((0, 1, 2))

    def test_single_act_hand_case(self):
        w = np.array([math.log(3), 0.0])
        a = da_forward(w[None], np.array([1.0, 5.0]))
        assert a[0] == pytest.approx(0.75, abs=1e-15)
        assert da_label(a) == MultiLabel((0,))

    def test_confidence_rules(self):
        assert da_confidence([0.9, 0.7, 0.2]) == pytest.approx(0.8)
        assert da_label([0.9, 0.7, 0.2]) == MultiLabel((0, 1))
        assert da_confidence([0.2, 0.3]) == pytest.approx(0.75)
        assert da_label([0.2, 0.3]) == MultiLabel(())

    @pytest.mark.parametrize("a, label, conf", [([0.9, 0.7, 0.2], (0, 1), 0.8), ([0.2, 0.3, 0.1], (), 0.8)])
    def test_predict_and_label_score_agree(self, a, label, conf):
        model = small_model(TaskKind.DIALOG_ACT, 0)
        model.params["W2"] = np.zeros((4, 8))
        a4 = np.array(a + [0.4][: 4 - len(a)])
        model.params["W2"][:, 0] = np.log(a4 / (1 - a4))
        pinned_hidden(model, unit(8))
        pred = predict(model, Example("x", (4,)))
        assert pred.label == MultiLabel(label)
        np.testing.assert_allclose(pred.scores, a4, atol=1e-12)

    def test_label_score_is_mean_over_positive_acts(self):
        model = small_model(TaskKind.DIALOG_ACT, 1)
        X = model.embed((4, 5, 6))
        a = da_forward(model.params["W2"], enc.encode(model.params, X))
        assert scalar_score_for_label(model, X, MultiLabel((0, 2))) == pytest.approx((a[0] + a[2]) / 2, abs=1e-14)
        assert scalar_score_for_label(model, X, MultiLabel(())) == pytest.approx(np.mean(1 - a), abs=1e-14)


class TestStateTrackingHead:
    def test_value_equal_to_projection_scores_one(self):
        rng = rng_for(0)
        G, h = rng.normal(size=(4, 4)), rng.normal(size=4)
        values = [rng.normal(size=4), G @ h * 3.0, rng.normal(size=4)]
        s = dst_score(G, h, values)
        assert s[1] == pytest.approx(1.0, abs=1e-12)
        assert np.all(np.abs(s) <= 1.0)

    def test_zero_projection_is_degenerate(self):
        with pytest.raises(DegenerateInputError):
            dst_score(np.zeros((3, 3)), np.ones(3), [np.ones(3)])

    @pytest.mark.parametrize("seed", range(5))
    def test_prediction_matches_brute_force_scan(self, seed):
        model = small_model(TaskKind.DST, seed)
        x = Example("x", tuple(int(t) for t in rng_for(seed, "toks").integers(4, 30, size=4)))
        pred = predict(model, x)
        h = model.hidden([x])[0]
        values = []
        for j, pair in enumerate(model.value_tokens):
            enc_values = [model.hidden([Example("v", v)])[0] for v in pair]
            scores = [cosine(model.params["G"][j] @ h, v) for v in enc_values]
            values.append(max(range(len(scores)), key=lambda i: (scores[i], -i)))
        assert pred.label == SlotAssignment(tuple(values))
        assert 0.0 <= pred.confidence <= 1.0


class TestResponseSelectionHead:
    def test_identical_candidate_scores_one(self):
        model = small_model(TaskKind.RESPONSE_SELECTION, 0)
        h = model.hidden([Example("x", (4, 10))])[0]
        assert rs_score(model, h, (4, 10)) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_ranking_matches_sorted_cosines(self, seed):
        model = small_model(TaskKind.RESPONSE_SELECTION, seed)
        x = Example("x", (5, 12, 7), ResponseRef(2), candidate_pool=(6, 2, 0))
        h = model.hidden([x])[0]
        scores = {c: rs_score(model, h, model.response_tokens[c]) for c in x.candidate_pool}
        best = max(scores, key=scores.get)
        assert predict(model, x).label == ResponseRef(best)
        rank = 1 + sum(s > scores[2] for s in scores.values())
        assert model.rank_of_truth([x]) == [rank]

    def test_pools(self):
        ds_model = TaskModel.fresh(TaskKind.RESPONSE_SELECTION, 60, 150, ModelConfig(),
                                   response_tokens=[(4 + i % 50,) for i in range(150)])
        x = Example("ctx-1", (5, 6), ResponseRef(17))
        tp = ds_model.training_pool(x)
        assert len(tp) == 21 and tp[0] == 17 and len(set(tp.tolist())) == 21
        ep = eval_pool(x, 150, 100, seed=0)
        assert len(ep) == 101 and 17 in ep and len(set(ep)) == 101
        assert eval_pool(x, 150, 100, seed=0) == ep

    def test_pool_must_exceed_negatives(self):
        with pytest.raises(ValueError):
            TaskModel.fresh(TaskKind.RESPONSE_SELECTION, 30, 10, ModelConfig(), response_tokens=[(4,)] * 10)


class TestLabelScoreGradients:
    @pytest.mark.parametrize("kind", list(TaskKind))
    def test_input_gradient_matches_finite_differences(self, kind):
        errors = [gradient_case(kind, seed) for seed in range(25)]
        assert max(errors) < 1e-4

    @pytest.mark.parametrize("kind", list(TaskKind))
    def test_batched_scores_match_single(self, kind):
        model = small_model(kind, 3)
        rng = rng_for(3, "batch")
        seqs = [tuple(int(t) for t in rng.integers(4, 30, size=n)) for n in (2, 5, 3)]
        labels = [random_label(kind, rng) for _ in seqs]
        pools = [model.scoring_pool(Example(f"e{i}", s, y)) for i, (s, y) in enumerate(zip(seqs, labels))]
        ids, mask = enc.pad_batch(seqs)
        F, gX = model.score_and_grad_batch(model.params["E"][ids], mask, labels, pools)
        for b, s in enumerate(seqs):
            f1, g1 = model.score_and_grad(model.embed(s), labels[b], pools[b])
            assert F[b] == pytest.approx(f1, abs=1e-13)
            np.testing.assert_allclose(gX[b, : len(s)], g1, atol=1e-13)
            assert not gX[b, len(s):].any()

    def test_intent_label_score_is_the_predicted_probability(self):
        model = small_model(TaskKind.INTENT, 4)
        x = Example("x", (4, 9, 13))
        pred = predict(model, x)
        assert scalar_score_for_label(model, model.embed(x.tokens), pred.label) == pytest.approx(pred.confidence)


def training_batch(kind, rng, model):
    batch = []
    for i in range(4):
        toks = tuple(int(t) for t in rng.integers(4, 30, size=int(rng.integers(1, 6))))
        batch.append(Example(f"b{i}", toks, random_label(kind, rng)))
    return batch


class TestTrainingGradients:
    @pytest.mark.parametrize("kind", list(TaskKind))
    def test_parameter_gradients_match_finite_differences(self, kind):
        model = small_model(kind, 5)
        batch = training_batch(kind, rng_for(5, "tb"), model)
        _, grads = model.loss_and_grads(batch)
        for name, value in model.params.items():
            def f(v, name=name):
                saved = model.params[name]
                model.params[name] = v
                try:
                    return model.loss_and_grads(batch)[0]
                finally:
                    model.params[name] = saved
            assert relative_error(grads[name], finite_difference_grad(f, value)) < 1e-4, name


class TestPredictions:
    @pytest.mark.parametrize("kind", list(TaskKind))
    def test_confidence_in_unit_interval(self, kind):
        model = small_model(kind, 6)
        rng = rng_for(6, "pred")
        xs = [Example(f"p{i}", tuple(int(t) for t in rng.integers(4, 30, size=3))) for i in range(30)]
        for p in model.predict(xs):
            assert 0.0 <= p.confidence <= 1.0

    def test_argmax_invariant_to_logit_shift(self):
        model = small_model(TaskKind.INTENT, 0)
        pinned_hidden(model, np.r_[1.0, np.zeros(7)])
        x = Example("x", (4,))
        before = predict(model, x).label
        model.params["W1"][:, 0] += 5.0  # adds 5 to every logit
        assert predict(model, x).label == before


def test_intent_head_fits_a_separable_toy_set():
    model = TaskModel.fresh(TaskKind.INTENT, 20, 3, ModelConfig(d=8, l=8, dropout_rate=0.0), 0)
    data = [Example(f"t{i}", (4 + c, 10 + (i % 4)), SingleClass(c)) for i in range(24) for c in [i % 3]]
    for _ in range(200):
        enc.train_step(model, data, 1.0)
    assert [p.label for p in model.predict(data)] == [e.label for e in data]


def test_two_act_head_fits_a_separable_toy_set():
    model = TaskModel.fresh(TaskKind.DIALOG_ACT, 20, 2, ModelConfig(d=8, l=8, dropout_rate=0.0), 0)
    acts = [(), (0,), (1,), (0, 1)]
    data = [Example(f"t{i}", (4 + (0 in acts[i % 4]), 6 + (1 in acts[i % 4]), 10 + i % 3),
                    MultiLabel(acts[i % 4])) for i in range(24)]
    for _ in range(400):
        enc.train_step(model, data, 2.0)
    assert [p.label for p in model.predict(data)] == [e.label for e in data]
