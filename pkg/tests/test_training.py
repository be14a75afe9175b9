"""Loss, optimiser, metrics, training loop and cross-validation protocol."""
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from absolutenet import autodiff as ad
from absolutenet.autodiff import Tape, Tensor
from absolutenet.model import AbsoluteNet
from absolutenet.training import (Adam, CVResult, Metrics, TrainConfig, cross_entropy, cross_entropy_probs,
                                  cross_validate, evaluate, predict_labels, stratified_folds, train)


class TestCrossEntropy:
    def test_perfect_prediction(self):
        assert cross_entropy_probs(np.array([[0.0, 1.0]]), [1]) == 0.0

    def test_uniform(self):
        assert cross_entropy(np.zeros((4, 2)), [0, 1, 1, 0]).item() == pytest.approx(np.log(2))
        assert cross_entropy_probs(np.full((2, 2), 0.5), [0, 1]) == pytest.approx(0.693147, abs=1e-6)

    def test_large_logits_stay_finite(self):
        assert np.isfinite(cross_entropy(np.array([[1000.0, -1000.0]]), [1]).item())

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            cross_entropy(np.zeros((2, 2)), [0, 2])

    def test_gradient_is_softmax_minus_onehot(self, rng):
        z = rng.standard_normal((5, 2))
        y = np.array([0, 1, 1, 0, 1])
        tape = Tape()
        zt = tape.variable(z)
        (g,) = tape.gradient(cross_entropy(zt, y), [zt])
        p = np.exp(z) / np.exp(z).sum(1, keepdims=True)
        np.testing.assert_allclose(g, (p - np.eye(2)[y]) / 5, rtol=1e-10)


class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        p = {"w": np.array([1.0])}
        Adam(lr=9e-4).step(p, {"w": np.array([1.0])})
        assert p["w"][0] == pytest.approx(1.0 - 9e-4, abs=1e-9)

    def test_zero_gradient(self):
        p = {"w": np.array([0.5, -2.0])}
        Adam().step(p, {"w": np.zeros(2)})
        np.testing.assert_array_equal(p["w"], [0.5, -2.0])

    def test_identical_tensors_update_identically(self, rng):
        g = rng.standard_normal(4)
        p = {"a": np.ones(4), "b": np.ones(4)}
        opt = Adam()
        for _ in range(3):
            opt.step(p, {"a": g, "b": g})
        np.testing.assert_array_equal(p["a"], p["b"])

    def test_bias_corrected_second_step(self):
        p = {"w": np.array([0.0])}
        opt = Adam(lr=0.1)
        opt.step(p, {"w": np.array([1.0])})
        opt.step(p, {"w": np.array([3.0])})
        m = (0.9 * 0.1 + 0.1 * 3.0) / (1 - 0.9 ** 2)
        v = (0.999 * 0.001 + 0.001 * 9.0) / (1 - 0.999 ** 2)
        assert p["w"][0] == pytest.approx(-0.1 - 0.1 * m / (np.sqrt(v) + 1e-8), rel=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            Adam().step({"w": np.zeros(3)}, {"w": np.zeros(2)})


class TestMetrics:
    def test_formula(self):
        m = Metrics(tp=9, fn=1, tn=8, fp=2)
        assert (m.sensitivity, m.specificity, m.accuracy) == (pytest.approx(0.9), pytest.approx(0.8),
                                                              pytest.approx(0.85))

    def test_all_correct(self):
        m = Metrics.from_predictions([0, 1, 1, 0], [0, 1, 1, 0])
        assert m.accuracy == m.sensitivity == m.specificity == 1.0

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=60))
    def test_double_entry(self, pairs):
        y, p = map(np.array, zip(*pairs))
        m = Metrics.from_predictions(y, p)
        confusion = np.zeros((2, 2), int)
        for t, q in pairs:
            confusion[t, q] += 1
        assert (m.tn, m.fp, m.fn, m.tp) == tuple(confusion.ravel())
        assert m.accuracy * m.total == pytest.approx(m.tp + m.tn)
        assert m.tp + m.tn == int(np.sum(y == p))

    def test_ties_go_to_standard(self):
        assert predict_labels(np.array([[0.5, 0.5], [0.4, 0.6]])).tolist() == [0, 1]

    def test_evaluate_matches_recount(self, tiny_config, tiny_data):
        X, y = tiny_data
        model = AbsoluteNet(tiny_config, seed=2)
        pred = predict_labels(model.forward(X))
        m = evaluate(model, X, y)
        assert m == Metrics(int(np.sum((y == 1) & (pred == 1))), int(np.sum((y == 0) & (pred == 1))),
                            int(np.sum((y == 0) & (pred == 0))), int(np.sum((y == 1) & (pred == 0))))

    def test_evaluate_empty(self, tiny_config):
        with pytest.raises(ValueError):
            evaluate(AbsoluteNet(tiny_config), np.zeros((0, 4, 30)), np.zeros(0))


class TestTrain:
    cfg = TrainConfig(learning_rate=3e-3, batch_size=8)

    def test_one_epoch(self, tiny_config, tiny_data):
        X, y = tiny_data
        rep, _ = train(AbsoluteNet(tiny_config), X[:16], y[:16], X[16:], y[16:], self.cfg, epochs=1)
        assert len(rep.history) == 1 and rep.selected_epoch == 1

    def test_deterministic(self, tiny_config, tiny_data):
        X, y = tiny_data
        runs = [train(AbsoluteNet(tiny_config, seed=1), X[:16], y[:16], X[16:], y[16:], self.cfg, epochs=4)[0]
                for _ in range(2)]
        assert runs[0].train_losses == runs[1].train_losses
        assert runs[0].val_losses == runs[1].val_losses

    def test_selected_epoch_minimises_validation_loss(self, tiny_config, tiny_data):
        X, y = tiny_data
        model = AbsoluteNet(tiny_config)
        rep, best = train(model, X[:16], y[:16], X[16:], y[16:], self.cfg, epochs=8)
        assert rep.selected_epoch == int(np.argmin(rep.val_losses)) + 1
        # the restored checkpoint reproduces the best validation loss
        assert cross_entropy_probs(model.forward(X[16:]), y[16:]) == pytest.approx(min(rep.val_losses))
        assert all(np.array_equal(best[k], model.params[k]) for k in best)

    def test_without_validation_keeps_final_weights(self, tiny_config, tiny_data):
        X, y = tiny_data
        rep, _ = train(AbsoluteNet(tiny_config), X, y, config=self.cfg, epochs=2)
        assert rep.selected_epoch == 2 and np.isnan(rep.val_losses).all()

    def test_empty_sets(self, tiny_config, tiny_data):
        X, y = tiny_data
        with pytest.raises(ValueError):
            train(AbsoluteNet(tiny_config), X[:1], y[:1], config=self.cfg, epochs=1)
        with pytest.raises(ValueError):
            train(AbsoluteNet(tiny_config), X, y, X[:0], y[:0], self.cfg, epochs=1)

    def test_no_single_sample_batches(self, tiny_config, tiny_data):
        X, y = tiny_data
        sizes = []
        train(AbsoluteNet(tiny_config), X[:17], y[:17], config=self.cfg, epochs=1,
              batch_hook=lambda ids: sizes.append(len(ids)))
        assert sum(sizes) == 17 and min(sizes) >= 2

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0)
        with pytest.raises(ValueError):
            TrainConfig(epochs_select=0)


class TestFolds:
    @settings(max_examples=30, deadline=None)
    @given(n0=st.integers(5, 60), n1=st.integers(5, 60), seed=st.integers(0, 1000))
    def test_partition_and_stratification(self, n0, n1, seed):
        labels = np.array([0] * n0 + [1] * n1)
        rng = ad.make_rng(seed)
        labels = labels[rng.permutation(len(labels))]
        splits = stratified_folds(labels, 5, seed)
        tests = np.concatenate([s.test for s in splits])
        assert sorted(tests.tolist()) == list(range(len(labels)))
        n = len(labels)
        for s in splits:
            parts = [set(s.train), set(s.val), set(s.test)]
            assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
            assert len(s.train) + len(s.val) + len(s.test) == n
            assert abs(len(s.test) - 0.2 * n) <= 1
            rest = len(s.train) + len(s.val)
            assert abs(len(s.val) - rest / 4) <= 1
            for c, nc in ((0, n0), (1, n1)):
                assert abs(np.sum(labels[s.test] == c) - nc / 5) <= 1
                assert abs(np.sum(labels[s.val] == c) - nc / 5) <= 1.25 + 1e-9

    def test_too_few_trials(self):
        with pytest.raises(ValueError, match="fewer"):
            stratified_folds(np.array([0] * 4 + [1] * 10), 5)

    def test_missing_class(self):
        with pytest.raises(ValueError):
            stratified_folds(np.zeros(20, int), 5)


class TestCrossValidate:
    cfg = TrainConfig(learning_rate=3e-3, epochs_select=2, epochs_retrain=1, batch_size=8, seed=4)

    def test_no_test_index_reaches_an_update(self, tiny_config, tiny_data):
        X, y = tiny_data
        seen: dict[int, set] = {}
        res = cross_validate(X, y, tiny_config, self.cfg,
                             batch_hook=lambda fold, ids: seen.setdefault(fold, set()).update(ids.tolist()))
        for f in res.folds:
            assert not seen[f.fold] & set(f.split.test.tolist())
            assert seen[f.fold] == set(f.split.train) | set(f.split.val)

    def test_reproducible(self, tiny_config, tiny_data):
        X, y = tiny_data
        a = cross_validate(X, y, tiny_config, self.cfg)
        b = cross_validate(X, y, tiny_config, self.cfg)
        assert a.summary() == b.summary()

    def test_fold_subset_matches_full_run(self, tiny_config, tiny_data):
        X, y = tiny_data
        full = cross_validate(X, y, tiny_config, self.cfg)
        part = cross_validate(X, y, tiny_config, self.cfg, folds=[2])
        assert part.folds[0].metrics == full.folds[2].metrics
        with pytest.raises(ValueError):
            cross_validate(X, y, tiny_config, self.cfg, folds=[5])

    def test_threaded_folds_match_sequential(self, tiny_config, tiny_data):
        X, y = tiny_data
        a = cross_validate(X, y, tiny_config, self.cfg, folds=[0, 1])
        b = cross_validate(X, y, tiny_config, self.cfg, folds=[0, 1], n_jobs=2)
        assert [f.metrics for f in a.folds] == [f.metrics for f in b.folds]

    def test_report_row_format(self):
        folds = [type("F", (), {"metrics": Metrics(tp, 10 - tn, tn, 10 - tp)})()
                 for tp, tn in ((9, 8), (7, 10))]
        row = CVResult(folds).format_row("HbO2+HbR")
        assert row.split()[0] == "HbO2+HbR"
        assert "80.00 ± 10.00" in row and "90.00 ± 10.00" in row and "85.00 ± 0.00" in row
