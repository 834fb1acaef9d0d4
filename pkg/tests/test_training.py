from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eegattn.dataio import SynthSpec, TrialSet, generate_synthetic
from eegattn.layers import ModelConfig, init_params
from eegattn.tensor import Tensor
from eegattn.training import (
    Adam,
    NumericError,
    TrainConfig,
    _run_fold,
    cross_validate,
    evaluate,
    fit_normalization,
    score_predictions,
    squared_hinge_loss,
    stratified_kfold,
    train_one_fold,
)

SMALL_SPEC = SynthSpec(n_channels=4, n_samples=128, trials_per_class=5, snr_db=10, seed=0)
SMALL_MODEL = ModelConfig(n_channels=4, n_samples=128, temporal_kernel_len=31, d_model=8, ffn_dim=16)


@pytest.fixture(scope="module")
def small_set():
    return generate_synthetic(SMALL_SPEC)


class TestLoss:
    def test_satisfied_margins(self):
        scores = np.full((1, 13), -2.0)
        scores[0, 0] = 2.0
        assert squared_hinge_loss(Tensor(scores), [0]).item() == 0.0

    def test_all_zero_scores(self):
        assert squared_hinge_loss(Tensor(np.zeros((3, 13))), [0, 5, 12]).item() == 1.0

    def test_hand_value(self):
        # targets [+1, -1]: (1 - 0.5)^2 and (1 + 0.5)^2, averaged over two entries
        assert squared_hinge_loss(Tensor([[0.5, 0.5]]), [0]).item() == pytest.approx(1.25, abs=1e-15)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            squared_hinge_loss(Tensor(np.zeros((2, 3))), [0, 3])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_nonnegative_and_zero_iff_margins(self, seed):
        rng = np.random.default_rng(seed)
        scores = rng.normal(0, 2, (4, 5))
        labels = rng.integers(0, 5, 4)
        loss = squared_hinge_loss(Tensor(scores), labels).item()
        targets = -np.ones((4, 5))
        targets[np.arange(4), labels] = 1
        assert loss >= 0
        assert (loss == 0) == bool(np.all(targets * scores >= 1))


class TestKFold:
    def test_default_fold_sizes(self):
        labels = np.repeat(np.arange(13), 23)
        folds = stratified_kfold(labels, 5, seed=0)
        assert sorted(len(te) for _, te in folds) == [59, 60, 60, 60, 60]
        for _, te in folds:
            counts = np.bincount(labels[te], minlength=13)
            assert set(counts) <= {4, 5}
        for c in range(13):
            per_fold = sorted(int(np.sum(labels[te] == c)) for _, te in folds)
            assert per_fold == [4, 4, 5, 5, 5]

    def test_k_one_rejected(self):
        with pytest.raises(ValueError):
            stratified_kfold(np.arange(10) % 2, 1)

    def test_class_too_small(self):
        with pytest.raises(ValueError, match=r"\[2\]"):
            stratified_kfold(np.array([0] * 5 + [1] * 5 + [2] * 3), 5)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 6), st.lists(st.integers(6, 15), min_size=2, max_size=5), st.integers(0, 1000))
    def test_partition_law(self, k, sizes, seed):
        labels = np.repeat(np.arange(len(sizes)), sizes)
        folds = stratified_kfold(labels, k, seed)
        tests = np.concatenate([te for _, te in folds])
        np.testing.assert_array_equal(np.sort(tests), np.arange(labels.size))
        for tr, te in folds:
            assert not set(tr) & set(te)
            assert len(tr) + len(te) == labels.size
        for c in range(len(sizes)):
            counts = [int(np.sum(labels[te] == c)) for _, te in folds]
            assert max(counts) - min(counts) <= 1

    def test_deterministic(self):
        labels = np.repeat(np.arange(4), 7)
        a, b = stratified_kfold(labels, 3, 11), stratified_kfold(labels, 3, 11)
        for (tra, tea), (trb, teb) in zip(a, b):
            np.testing.assert_array_equal(tea, teb)


class TestScoring:
    def test_perfect_scores(self):
        labels = np.array([0, 1, 2, 1])
        acc, conf = score_predictions(np.eye(3)[labels], labels, 3)
        assert acc == 1.0
        np.testing.assert_array_equal(conf, np.diag([1, 2, 1]))

    def test_constant_scores_pick_class_zero(self):
        labels = np.array([0, 1, 2, 0, 2])
        acc, conf = score_predictions(np.ones((5, 3)), labels, 3)
        assert acc == pytest.approx(2 / 5)
        np.testing.assert_array_equal(conf[:, 0], [2, 1, 2])

    def test_confusion_rows_are_class_counts(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 4, 50)
        acc, conf = score_predictions(rng.standard_normal((50, 4)), labels, 4)
        np.testing.assert_array_equal(conf.sum(axis=1), np.bincount(labels, minlength=4))
        assert acc == np.trace(conf) / 50

    def test_evaluate_needs_normalization(self, small_set):
        params = init_params(SMALL_MODEL, 0)
        del params.buffers["input.mean"]
        with pytest.raises(ValueError):
            evaluate(params, small_set)


class TestTraining:
    def test_normalization_uses_training_data_only(self, small_set):
        params = init_params(SMALL_MODEL, 0)
        train = small_set.subset(np.arange(30))
        train_one_fold(params, train, TrainConfig(epochs=1, seed=0))
        mean, std = fit_normalization(train.data)
        np.testing.assert_array_equal(params.buffers["input.mean"], mean)
        np.testing.assert_array_equal(params.buffers["input.std"], std)

    def test_identical_seeds_identical_histories(self, small_set):
        cfg = TrainConfig(epochs=3, seed=4)
        a = train_one_fold(init_params(SMALL_MODEL, 1), small_set, cfg)
        b = train_one_fold(init_params(SMALL_MODEL, 1), small_set, cfg)
        assert a[1] == b[1]
        for name in a[0].tensors:
            assert a[0][name].data.tobytes() == b[0][name].data.tobytes()

    def test_zero_learning_rate(self, small_set):
        model = replace(SMALL_MODEL, dropout_p=0.0, encoder_dropout_p=0.0)
        params = init_params(model, 2)
        before = {k: v.data.copy() for k, v in params.tensors.items()}
        # one full-batch step per epoch: batch statistics never change either
        _, history = train_one_fold(params, small_set, TrainConfig(epochs=4, learning_rate=0.0,
                                                                    batch_size=small_set.n_trials))
        for name, value in before.items():
            np.testing.assert_array_equal(params[name].data, value)
        np.testing.assert_allclose(history, history[0], rtol=1e-12)

    def test_step_size_is_first_order_in_lr(self):
        start = np.random.default_rng(0).standard_normal(20)
        grad = np.linspace(-1, 1, 20) + 0.05
        deltas = []
        for lr in (1e-6, 2e-6):
            p = Tensor(start.copy(), requires_grad=True)
            p.grad = grad
            Adam([p], lr=lr).step()
            deltas.append(p.data - start)
        assert np.abs(deltas[0]).max() <= 1e-6 * (1 + 1e-6)
        np.testing.assert_allclose(deltas[1], 2 * deltas[0], rtol=1e-6)

    def test_non_finite_loss_diagnostic(self, small_set):
        bad = TrialSet(small_set.data.copy(), small_set.labels, small_set.channel_names,
                       small_set.sampling_rate, small_set.n_classes)
        bad.data[3, 0, 0] = np.nan
        with pytest.raises(NumericError, match=r"epoch 0, batch \d+"):
            train_one_fold(init_params(SMALL_MODEL, 0), bad, TrainConfig(epochs=1))

    def test_dimension_mismatch(self, small_set):
        with pytest.raises(ValueError, match="model expects"):
            train_one_fold(init_params(ModelConfig(), 0), small_set, TrainConfig(epochs=1))

    def test_test_fold_does_not_influence_training(self, small_set):
        cfg = TrainConfig(epochs=2, seed=3)
        tr, te = stratified_kfold(small_set.labels, 5, cfg.seed)[0]
        swapped = small_set.data.copy()
        swapped[te] = np.random.default_rng(9).standard_normal(swapped[te].shape) * 50
        other = TrialSet(swapped, small_set.labels, small_set.channel_names, small_set.sampling_rate, 13)
        _, params_a = _run_fold((small_set, SMALL_MODEL, cfg, 0, tr, te))
        _, params_b = _run_fold((other, SMALL_MODEL, cfg, 0, tr, te))
        for name, value in params_a.state().items():
            assert value.tobytes() == params_b.state()[name].tobytes()


class TestCrossValidation:
    def test_partition_and_summary(self, small_set):
        result = cross_validate(small_set, SMALL_MODEL, TrainConfig(epochs=1, seed=0))
        assert len(result.folds) == 5
        tested = sorted(i for f in result.folds for i in f.test_indices)
        assert tested == list(range(small_set.n_trials))
        accs = [f.test_accuracy for f in result.folds]
        assert result.mean == pytest.approx(np.mean(accs), abs=1e-15)
        assert result.std == pytest.approx(np.std(accs, ddof=1), abs=1e-15)
        assert result.chance == 1 / 13
        for f in result.folds:
            assert f.confusion.sum() == len(f.test_indices)
            assert len(f.train_loss_history) == 1

    def test_summary_arithmetic(self, small_set, monkeypatch):
        from eegattn import training

        accs = iter([0.4, 0.5, 0.6, 0.5, 0.5])

        def fake_fold(args):
            fold = args[3]
            return training.FoldReport(fold, [], next(accs), np.zeros((13, 13))), None

        monkeypatch.setattr(training, "_run_fold", fake_fold)
        result = cross_validate(small_set, SMALL_MODEL, TrainConfig())
        assert result.mean == pytest.approx(0.5, abs=1e-15)
        assert result.summary()["fold_accuracies"] == [0.4, 0.5, 0.6, 0.5, 0.5]

    def test_deterministic_reports(self, small_set):
        cfg = TrainConfig(epochs=1, seed=5, folds=3)
        a = cross_validate(small_set, SMALL_MODEL, cfg)
        b = cross_validate(small_set, SMALL_MODEL, cfg)
        assert [f.to_dict() for f in a.folds] == [f.to_dict() for f in b.folds]

    def test_parallel_matches_serial(self, small_set):
        cfg = TrainConfig(epochs=1, seed=6, folds=3)
        serial = cross_validate(small_set, SMALL_MODEL, cfg)
        parallel = cross_validate(small_set, SMALL_MODEL, cfg, parallel_folds=2)
        assert [f.to_dict() for f in serial.folds] == [f.to_dict() for f in parallel.folds]

    def test_shuffled_labels_give_chance(self):
        accs = []
        spec = replace(SMALL_SPEC, trials_per_class=10, snr_db=20)
        for seed in range(20):
            data = generate_synthetic(replace(spec, seed=seed))
            shuffled = np.random.default_rng(100 + seed).permutation(data.labels)
            data = TrialSet(data.data, shuffled, data.channel_names, data.sampling_rate, 13)
            accs.append(cross_validate(data, SMALL_MODEL, TrainConfig(epochs=1, seed=seed)).mean)
        assert abs(np.mean(accs) - 1 / 13) < 0.03


def test_on_epoch_can_stop_early(small_set):
    seen = []

    def stop_after_two(epoch, params):
        seen.append(epoch)
        return epoch == 1

    _, history = train_one_fold(init_params(SMALL_MODEL, 0), small_set, TrainConfig(epochs=10), on_epoch=stop_after_two)
    assert seen == [0, 1] and len(history) == 2
