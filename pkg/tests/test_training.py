import math
import re
from types import SimpleNamespace

import numpy as np
import pytest

import training
from data import SphericalDataset
from layers import KernelMask
from network import build_model, preset_spec
from training import (
    SYNTH_SEGMENTATION_CONFIG, TRAIN_PRESETS, AdamState, ClassWeights, TrainConfig, Trainer, TrainingReport,
    ablation_run, adam_step, benchmark_inference, class_weights_from_frequencies, confusion_matrix, cross_entropy,
    evaluate, format_metrics, lr_schedule, metrics_from_confusion, resolve_class_weights, width_sweep,
)
from utils import NumericalError, RngStreams


def _classification_set(count=8, seed=0):
    features = np.random.default_rng(seed).standard_normal((count, 1, 162))
    return SphericalDataset(features, np.arange(count) % 2, 2)


def _small_classifier(seed=0, dropout=0.0):
    spec = preset_spec('mnist', input_level=2, width_multiplier=0.25, num_classes=2, dropout=dropout)
    return build_model(spec, RngStreams(seed).stream('init'))


def test_cross_entropy_uniform_logits():
    loss, grad = cross_entropy(np.zeros((4, 5)), np.array([0, 1, 2, 3]))
    assert loss == pytest.approx(math.log(5))
    expected = np.full((4, 5), 0.2)
    expected[np.arange(4), [0, 1, 2, 3]] -= 1.0
    np.testing.assert_allclose(grad, expected / 4)


def test_cross_entropy_per_vertex_shapes():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((2, 3, 12))
    labels = rng.integers(0, 3, size=(2, 12))
    loss, grad = cross_entropy(logits, labels)
    assert grad.shape == logits.shape
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-15)
    flat_loss, _ = cross_entropy(np.moveaxis(logits, 1, -1).reshape(-1, 3), labels.reshape(-1))
    assert loss == pytest.approx(flat_loss)


def test_cross_entropy_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((3, 4))
    labels = np.array([2, 0, 3])
    weights = ClassWeights(np.array([0.5, 1.0, 2.0, 3.0]))
    _, grad = cross_entropy(logits, labels, weights)
    step = 1e-6
    for idx in np.ndindex(logits.shape):
        bumped = logits.copy()
        bumped[idx] += step
        plus = cross_entropy(bumped, labels, weights)[0]
        bumped[idx] -= 2 * step
        minus = cross_entropy(bumped, labels, weights)[0]
        assert grad[idx] == pytest.approx((plus - minus) / (2 * step), abs=1e-8)


def test_cross_entropy_is_weighted_mean():
    logits = np.array([[2.0, 0.0], [0.0, 2.0]])
    labels = np.array([0, 0])
    weights = ClassWeights(np.array([3.0, 1.0]))
    loss, _ = cross_entropy(logits, labels, weights)
    unweighted, _ = cross_entropy(logits, labels)
    assert loss == pytest.approx(unweighted)


def test_cross_entropy_ignore_index():
    logits = np.array([[5.0, 0.0], [0.0, 5.0]])
    loss, grad = cross_entropy(logits, np.array([0, -1]), ignore_index=-1)
    assert loss == pytest.approx(-np.log(np.exp(5) / (np.exp(5) + 1)))
    assert not grad[1].any()
    loss, grad = cross_entropy(logits, np.array([-1, -1]), ignore_index=-1)
    assert loss == 0.0 and not grad.any()


def test_cross_entropy_is_stable_for_large_logits():
    loss, grad = cross_entropy(np.array([[1000.0, 0.0]]), np.array([1]))
    assert loss == pytest.approx(1000.0)
    assert np.isfinite(grad).all()


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, 3)), np.array([0, 1, 2]))


def test_log_frequency_weights():
    weights = class_weights_from_frequencies([1.0], mode='log-frequency').weights
    assert weights[0] == pytest.approx(1 / 1.02)
    weights = class_weights_from_frequencies([math.exp(-1), 1 - math.exp(-1)], mode='log-frequency').weights
    assert weights[0] == pytest.approx(50.0)
    assert weights[0] > weights[1]


def test_weights_decrease_with_frequency():
    for mode, frequencies in (('log-frequency', [0.6, 0.4]), ('inverse-log', [0.4, 0.05, 0.25, 0.3])):
        f = np.array(frequencies)
        weights = class_weights_from_frequencies(f, mode=mode).weights
        assert np.all(np.diff(weights[np.argsort(f)]) < 0)


def test_inverse_log_weights():
    weights = class_weights_from_frequencies([0.5, 0.3, 0.2], mode='inverse-log').weights
    np.testing.assert_allclose(weights, 1.0 / np.log(1.02 + np.array([0.5, 0.3, 0.2])))


def test_segmentation_presets_weight_rare_classes():
    rare = [0.05, 0.15, 0.8]
    with pytest.raises(ValueError):
        class_weights_from_frequencies(rare, mode='log-frequency')
    for task in ('2d3ds', 'climate'):
        weights = class_weights_from_frequencies(rare, mode=TRAIN_PRESETS[task].class_weight_mode).weights
        assert np.all(weights > 0) and weights[0] > weights[1] > weights[2]


def test_dropped_classes_get_zero_weight():
    result = class_weights_from_frequencies([0.7, 0.0, 0.3], dropped=(1,), mode='inverse-log')
    assert result.weights[1] == 0.0
    assert result.weights[0] > 0 and result.weights[2] > 0


@pytest.mark.parametrize("frequencies,mode", [
    ([0.2, 0.8], 'log-frequency'),
    ([0.0, 1.0], 'inverse-log'),
    ([0.7, 0.7], 'inverse-log'),
    ([0.5, 0.5], 'median'),
])
def test_class_weight_errors(frequencies, mode):
    with pytest.raises(ValueError):
        class_weights_from_frequencies(frequencies, mode=mode)


def test_resolve_class_weights_from_dataset():
    labels = np.array([[0] * 6 + [1] * 3 + [2] * 3] * 2)
    dataset = SphericalDataset(np.zeros((2, 1, 12)), labels, 0)
    weights = resolve_class_weights(TrainConfig(class_weight_mode='inverse-log'), dataset, 4)
    np.testing.assert_allclose(weights.frequencies, [0.5, 0.25, 0.25, 0.0])
    assert weights.weights[3] == 0.0
    assert weights.weights[1] > weights.weights[0]
    uniform = resolve_class_weights(TrainConfig(), dataset, 4)
    np.testing.assert_array_equal(uniform.weights, np.ones(4))


def test_adam_leaves_parameters_alone_for_zero_gradient():
    params = {'w': np.array([1.0, -2.0])}
    adam_step(params, {'w': np.zeros(2)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(params['w'], [1.0, -2.0])


def test_adam_first_step_moves_by_learning_rate():
    params = {'w': np.array([1.0, -2.0, 0.5])}
    state = adam_step(params, {'w': np.array([0.3, -4.0, 1e-3])}, AdamState(), lr=0.01)
    np.testing.assert_allclose(params['w'], [0.99, -1.99, 0.49], rtol=1e-4)
    assert state.step == 1


def test_adam_converges_on_quadratic():
    params = {'x': np.zeros(1)}
    state = AdamState()
    for _ in range(500):
        adam_step(params, {'x': 2.0 * (params['x'] - 3.0)}, state, lr=0.05)
    assert abs(params['x'][0] - 3.0) < 1e-2


def test_step_decay_schedule():
    config = TRAIN_PRESETS['modelnet40-full']
    assert lr_schedule(0, config) == pytest.approx(5e-3)
    assert lr_schedule(24, config) == pytest.approx(5e-3)
    assert lr_schedule(25, config) == pytest.approx(3.5e-3)
    assert lr_schedule(50, config) == pytest.approx(2.45e-3)
    with pytest.raises(ValueError):
        lr_schedule(-1, config)


@pytest.mark.parametrize("overrides", [
    {'batch_size': 0}, {'lr': 0.0}, {'decay': 1.5}, {'epochs': 0}, {'class_weight_mode': 'median'}, {'beta1': 1.0},
])
def test_train_config_validation(overrides):
    with pytest.raises(ValueError):
        TrainConfig(**overrides)


def test_perfect_predictions():
    labels = np.array([0, 1, 2, 2, 1])
    metrics = metrics_from_confusion(confusion_matrix(labels, labels, 3))
    assert metrics['accuracy'] == 1.0
    assert metrics['miou'] == 1.0
    assert metrics['per_class_accuracy'] == [1.0, 1.0, 1.0]


def test_never_predicted_class_scores_zero_iou_and_absent_class_is_skipped():
    labels = np.array([0, 0, 1, 1])
    pred = np.array([0, 0, 0, 0])
    metrics = metrics_from_confusion(confusion_matrix(pred, labels, 3))
    assert metrics['iou'][1] == 0.0
    assert metrics['iou'][0] == pytest.approx(0.5)
    assert metrics['miou'] == pytest.approx(0.25)
    assert np.isnan(metrics['per_class_accuracy'][2])


def test_zero_weight_classes_leave_miou():
    labels = np.array([0, 0, 1, 1])
    metrics = metrics_from_confusion(confusion_matrix(labels, labels, 2), ClassWeights(np.array([1.0, 0.0])))
    assert metrics['miou'] == 1.0
    with pytest.raises(ValueError):
        metrics_from_confusion(np.zeros((2, 2), dtype=np.int64))


def test_random_binary_predictions_give_one_third_iou():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 2, size=200000)
    pred = rng.integers(0, 2, size=200000)
    metrics = metrics_from_confusion(confusion_matrix(pred, labels, 2))
    assert metrics['miou'] == pytest.approx(1 / 3, abs=0.01)
    assert metrics['accuracy'] == pytest.approx(0.5, abs=0.01)


class _RandomGuesser:
    def __init__(self, num_classes, seed=0):
        self.spec = SimpleNamespace(num_classes=num_classes)
        self.rng = np.random.default_rng(seed)

    def forward(self, x, training=False):
        return self.rng.standard_normal((x.data.shape[0], self.spec.num_classes))


def test_evaluate_random_guesses_on_balanced_classes():
    count = 100000
    dataset = SphericalDataset(np.zeros((count, 1, 12)), np.arange(count) % 3, 0)
    metrics = evaluate(_RandomGuesser(3), dataset, batch_size=4096)
    assert metrics['accuracy'] == pytest.approx(1 / 3, abs=0.01)
    for accuracy in metrics['per_class_accuracy']:
        assert accuracy == pytest.approx(1 / 3, abs=0.02)


def test_confusion_matrix_ignores_index():
    confusion = confusion_matrix(np.array([0, 1, 1]), np.array([0, -1, 1]), 2, ignore_index=-1)
    np.testing.assert_array_equal(confusion, [[1, 0], [0, 1]])


def test_format_metrics():
    text = format_metrics({'accuracy': 0.5, 'miou': 0.25, 'per_class_accuracy': [1.0, 0.0], 'iou': [0.5, 0.0]})
    assert text.splitlines() == ['accuracy\t0.500000', 'miou\t0.250000', 'class_0_accuracy\t1.000000',
                                 'class_1_accuracy\t0.000000']


def test_training_overfits_a_tiny_set():
    dataset = _classification_set()
    model = _small_classifier()
    config = TrainConfig(batch_size=8, lr=1e-2, decay=1.0, epochs=150, seed=0)
    report = Trainer(config, verbose=False).train(model, dataset)
    assert len(report.records) == 150
    assert report.final.train_loss < 0.25 * report.records[0].train_loss
    assert report.final.train_acc == 1.0
    assert set(evaluate(model, dataset)) == {'accuracy', 'per_class_accuracy', 'iou', 'miou'}


def test_training_is_deterministic(tmp_path):
    dataset = _classification_set()
    config = TrainConfig(batch_size=4, lr=1e-2, decay=0.5, decay_period=1, epochs=2, seed=3)
    blobs, losses = [], []
    for run in ('a', 'b'):
        model = _small_classifier(seed=3, dropout=0.5)
        report = Trainer(config, checkpoint_dir=tmp_path / run, verbose=False).train(model, dataset)
        losses.append([r.train_loss for r in report.records])
        blobs.append((tmp_path / run / 'epoch_001.ugsc').read_bytes())
    assert losses[0] == losses[1]
    assert blobs[0] == blobs[1]


def test_training_writes_checkpoint_per_epoch(tmp_path):
    config = TrainConfig(batch_size=8, epochs=3, seed=0)
    report = Trainer(config, checkpoint_dir=tmp_path, verbose=False).train(_small_classifier(), _classification_set())
    assert [p.split('/')[-1] for p in map(str, report.checkpoints)] == [
        'epoch_000.ugsc', 'epoch_001.ugsc', 'epoch_002.ugsc']
    assert report.to_tsv().splitlines()[0] == TrainingReport.HEADER
    assert len(report.to_tsv().splitlines()) == 4


def test_nan_loss_stops_training(monkeypatch):
    def poisoned(logits, labels, weights=None, ignore_index=None):
        return float('nan'), np.zeros_like(logits)

    monkeypatch.setattr(training, 'cross_entropy', poisoned)
    with pytest.raises(NumericalError):
        Trainer(TrainConfig(batch_size=4, epochs=1), verbose=False).train(_small_classifier(), _classification_set())


def test_training_rejects_level_mismatch():
    model = _small_classifier()
    other = SphericalDataset(np.zeros((2, 1, 642)), np.array([0, 1]), 3)
    with pytest.raises(ValueError):
        Trainer(TrainConfig(), verbose=False).train(model, other)


def test_ablation_reports_one_row_per_mask():
    dataset = _classification_set()
    base = preset_spec('mnist', input_level=2, width_multiplier=0.25, num_classes=2, dropout=0.0)
    masks = [KernelMask.parse('Ilap'), KernelMask.parse('Ixylap')]
    report = ablation_run(base, masks, dataset, dataset, TrainConfig(batch_size=8, epochs=1))
    assert [row.mask for row in report.rows] == masks
    assert report.rows[0].num_parameters < report.rows[1].num_parameters
    lines = report.to_table().splitlines()
    assert lines[0] == "Convolution kernel\tParameters\tAccuracy"
    assert lines[1].startswith("I + lap\t")
    assert lines[2].startswith("I + d/dx + d/dy + lap\t")
    with pytest.raises(ValueError):
        ablation_run(base, [], dataset, dataset, TrainConfig())


def test_benchmark_line():
    report = benchmark_inference(_small_classifier(), batch_size=2, iterations=3)
    assert report.iterations == 3
    assert report.mean_ms > 0
    assert re.fullmatch(r"batch 2: mean \d+\.\d{3} ms per batch over 3 batches \(first batch excluded\)",
                        report.line())


def test_width_sweep_rows_grow_with_width():
    dataset = _classification_set()
    base = preset_spec('mnist', input_level=2, num_classes=2, dropout=0.0, mask=KernelMask.parse('Ilap'))
    report = width_sweep(base, [0.5, 0.25], dataset, dataset, TrainConfig(batch_size=8, epochs=1))
    assert [row.width for row in report.rows] == [0.25, 0.5]
    assert report.rows[0].num_parameters < report.rows[1].num_parameters
    lines = report.to_table().splitlines()
    assert lines[0] == "Width (I + lap)\tParameters\tAccuracy"
    assert lines[1].startswith("0.25\t")
    with pytest.raises(ValueError):
        width_sweep(base, [], dataset, dataset, TrainConfig())


def test_synthetic_segmentation_recipe():
    config = SYNTH_SEGMENTATION_CONFIG
    assert (config.batch_size, config.lr, config.epochs) == (4, 1e-3, 50)
    assert config.class_weight_mode == TRAIN_PRESETS['2d3ds'].class_weight_mode
    assert lr_schedule(49, config) == pytest.approx(1e-3 * 0.7 ** 2)


def test_validation_accuracy_respects_ignore_index():
    features = np.random.default_rng(1).standard_normal((4, 1, 162))
    labels = np.array([0, 1, 0, 1])
    val_set = SphericalDataset(features, np.array([0, 1, -1, -1]), 2)
    config = TrainConfig(batch_size=4, epochs=1, ignore_index=-1)
    model = _small_classifier()
    report = Trainer(config, verbose=False).train(model, SphericalDataset(features, labels, 2), val_set)
    expected = evaluate(model, val_set, ignore_index=-1)['accuracy']
    assert report.final.val_acc == expected
