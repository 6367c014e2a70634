"""Losses, Adam, step-decay schedule and the train / evaluate / ablate / bench drivers."""
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from checkpoint import save_checkpoint
from layers import KernelMask, MeshTensor
from mesh import level_stats
from network import build_model
from utils import NumericalError, RngStreams

LOSS_WEIGHT_MODES = ('uniform', 'log-frequency', 'inverse-log')

# Rows of the kernel-choice ablation table, full kernel last.
DEFAULT_ABLATION_MASKS = tuple(KernelMask.parse(t) for t in ('Iylap', 'Ixlap', 'Ilap', 'Ixy', 'Ixylap'))


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-2
    decay: float = 0.5
    decay_period: int = 10
    epochs: int = 30
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    class_weight_mode: str = 'uniform'
    ignore_index: int = None

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.decay_period < 1:
            raise ValueError("batch_size, epochs and decay_period must be positive")
        if self.lr <= 0:
            raise ValueError(f"Learning rate must be positive, got {self.lr}")
        if not 0 < self.decay <= 1:
            raise ValueError(f"Decay factor must be in (0, 1], got {self.decay}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("Adam hyperparameters out of range")
        if self.class_weight_mode not in LOSS_WEIGHT_MODES:
            raise ValueError(f"Unknown class-weight mode {self.class_weight_mode!r}")


TRAIN_PRESETS = {
    'mnist': TrainConfig(batch_size=16, lr=1e-2, decay=0.5, decay_period=10, epochs=30),
    'modelnet40-full': TrainConfig(batch_size=16, lr=5e-3, decay=0.7, decay_period=25, epochs=250),
    'modelnet40-lean': TrainConfig(batch_size=16, lr=5e-3, decay=0.7, decay_period=25, epochs=250),
    '2d3ds': TrainConfig(batch_size=16, lr=1e-2, decay=0.7, decay_period=20, epochs=200,
                         class_weight_mode='inverse-log'),
    'climate': TrainConfig(batch_size=256, lr=1e-2, decay=0.4, decay_period=20, epochs=100,
                           class_weight_mode='inverse-log'),
}

# Short run on the synthetic harmonic set: 64 samples give 16 Adam steps per epoch.
SYNTH_SEGMENTATION_CONFIG = replace(TRAIN_PRESETS['2d3ds'], batch_size=4, lr=1e-3, epochs=50)


@dataclass(frozen=True, eq=False)
class ClassWeights:
    weights: np.ndarray
    frequencies: np.ndarray = None

    @classmethod
    def uniform(cls, num_classes):
        return cls(np.ones(num_classes))


def class_weights_from_frequencies(frequencies, dropped=(), mode='log-frequency'):
    """Per-class loss weights from label frequencies; dropped classes get 0.

    ``log-frequency`` is 1/(1.02 + ln f), which turns negative below f = exp(-1.02)
    and is rejected there. ``inverse-log`` is 1/ln(1.02 + f), the usual rare-class
    boost that stays positive for every f in (0, 1]. The segmentation presets use
    ``inverse-log`` since their label sets hold classes rarer than exp(-1.02).
    """
    f = np.asarray(frequencies, dtype=np.float64)
    active = np.ones(f.shape[0], dtype=bool)
    active[list(dropped)] = False
    if np.any(f[active] <= 0) or np.any(f[active] > 1):
        bad = int(np.flatnonzero(active & ((f <= 0) | (f > 1)))[0])
        raise ValueError(f"Class {bad} frequency {f[bad]} outside (0, 1]")
    if f[active].sum() > 1 + 1e-9:
        raise ValueError(f"Active class frequencies sum to {f[active].sum()} > 1")
    weights = np.zeros_like(f)
    if mode == 'log-frequency':
        denom = 1.02 + np.log(f[active])
        if np.any(denom <= 0):
            raise ValueError("1/(1.02 + ln f) is undefined for f <= exp(-1.02); use mode 'inverse-log'")
        weights[active] = 1.0 / denom
    elif mode == 'inverse-log':
        weights[active] = 1.0 / np.log(1.02 + f[active])
    else:
        raise ValueError(f"Unknown class-weight mode {mode!r}")
    return ClassWeights(weights, f)


def cross_entropy(logits, labels, weights=None, ignore_index=None):
    """Weighted mean of -w_y log softmax(logits)_y over valid samples.

    ``logits`` is (B, K) or (B, K, V); returns (loss, grad_logits).
    """
    logits = np.asarray(logits, dtype=np.float64)
    num_classes = logits.shape[1]
    flat = np.moveaxis(logits, 1, -1).reshape(-1, num_classes)
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != flat.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for {flat.shape[0]} predictions")
    valid = np.ones(labels.shape[0], dtype=bool) if ignore_index is None else labels != ignore_index
    if np.any((labels[valid] < 0) | (labels[valid] >= num_classes)):
        raise ValueError(f"Label outside [0, {num_classes})")
    safe_labels = np.where(valid, labels, 0)

    w = np.ones(num_classes) if weights is None else weights.weights
    sample_w = np.where(valid, w[safe_labels], 0.0)
    total = sample_w.sum()

    shifted = flat - flat.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted[np.arange(flat.shape[0]), safe_labels] - log_norm
    grad = np.exp(shifted - log_norm[:, None])
    grad[np.arange(flat.shape[0]), safe_labels] -= 1.0
    if total == 0:
        return 0.0, np.zeros_like(logits)
    loss = float(-(sample_w * log_p).sum() / total)
    grad *= (sample_w / total)[:, None]
    grad = np.moveaxis(grad.reshape(np.moveaxis(logits, 1, -1).shape), -1, 1)
    return loss, np.ascontiguousarray(grad)


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place bias-corrected Adam update of every array in ``params``."""
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, value in params.items():
        grad = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        value -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
    return state


class AdamOptimizer:
    def __init__(self, model, beta1=0.9, beta2=0.999, eps=1e-8, state=None):
        self.model = model
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = state if state is not None else AdamState()

    def step(self, lr):
        params, grads = {}, {}
        for name, value, grad in self.model.parameters():
            params[name] = value
            grads[name] = grad
        adam_step(params, grads, self.state, lr, self.beta1, self.beta2, self.eps)


def lr_schedule(epoch, config):
    if epoch < 0:
        raise ValueError(f"Epoch must be non-negative, got {epoch}")
    return config.lr * config.decay ** (epoch // config.decay_period)


def predictions(logits):
    return np.argmax(logits, axis=1)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_acc: float
    seconds: float

    def to_tsv(self):
        val = 'nan' if np.isnan(self.val_acc) else f"{self.val_acc:.6f}"
        return f"{self.epoch}\t{self.lr:.6g}\t{self.train_loss:.6f}\t{self.train_acc:.6f}\t{val}\t{self.seconds:.3f}"


@dataclass
class TrainingReport:
    records: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)

    HEADER = "epoch\tlr\ttrain_loss\ttrain_acc\tval_acc\tseconds"

    def to_tsv(self):
        return '\n'.join([self.HEADER] + [r.to_tsv() for r in self.records]) + '\n'

    def write(self, path):
        with open(path, 'w', encoding='utf-8', newline='\n') as handle:
            handle.write(self.to_tsv())

    @property
    def final(self):
        return self.records[-1]


def resolve_class_weights(config, dataset, num_classes):
    if config.class_weight_mode == 'uniform':
        return ClassWeights.uniform(num_classes)
    frequencies = dataset.label_frequencies(num_classes, config.ignore_index)
    dropped = tuple(np.flatnonzero(frequencies == 0))
    return class_weights_from_frequencies(frequencies, dropped, config.class_weight_mode)


class Trainer:
    """Seeded mini-batch Adam training with per-epoch checkpoints."""

    def __init__(self, config, checkpoint_dir=None, verbose=True):
        self.config = config
        self.checkpoint_dir = checkpoint_dir
        self.verbose = verbose
        self.streams = RngStreams(config.seed)
        self._say(f"🔧 Initializing trainer (seed {config.seed}, batch {config.batch_size}, lr {config.lr})...")

    def _say(self, message):
        if self.verbose:
            print(message)

    def train(self, model, train_set, val_set=None, class_weights=None, start_epoch=0, optimizer_state=None):
        config = self.config
        spec = model.spec
        if train_set.level != spec.input_level:
            raise ValueError(f"Dataset level {train_set.level} does not match model input level {spec.input_level}")
        if len(train_set) == 0:
            raise ValueError("Training set is empty")
        weights = class_weights
        if weights is None:
            weights = resolve_class_weights(config, train_set, spec.num_classes)
        optimizer = AdamOptimizer(model, config.beta1, config.beta2, config.eps, optimizer_state)
        model.bind_rng(self.streams.stream('dropout'))
        shuffle = self.streams.stream('shuffle')
        report = TrainingReport()

        for epoch in range(start_epoch, config.epochs):
            started = time.perf_counter()
            lr = lr_schedule(epoch, config)
            loss_sum, correct, counted = 0.0, 0, 0
            order = shuffle.permutation(len(train_set))
            for batch_no, start in enumerate(range(0, len(order), config.batch_size)):
                features, labels = train_set.batch(order[start:start + config.batch_size])
                logits = model.forward(MeshTensor(features, train_set.level), training=True)
                logits = logits.data if isinstance(logits, MeshTensor) else logits
                loss, grad = cross_entropy(logits, labels, weights, config.ignore_index)
                if not np.isfinite(loss):
                    raise NumericalError(f"Loss became {loss} at epoch {epoch}, batch {batch_no} (lr {lr})")
                model.backward(grad)
                optimizer.step(lr)
                valid = np.ones(labels.shape, bool) if config.ignore_index is None else labels != config.ignore_index
                loss_sum += loss * len(labels)
                correct += int(np.sum((predictions(logits) == labels) & valid))
                counted += int(valid.sum())

            val_acc = float('nan')
            if val_set:
                val_acc = evaluate(model, val_set, config.batch_size, weights, config.ignore_index)['accuracy']
            record = EpochRecord(epoch, lr, loss_sum / len(train_set), correct / max(counted, 1), val_acc,
                                 time.perf_counter() - started)
            report.records.append(record)
            self._say(f"📊 Epoch {epoch}: loss {record.train_loss:.4f}, train acc {record.train_acc:.4f}, "
                      f"val acc {record.val_acc:.4f}, {record.seconds:.1f}s")
            if self.checkpoint_dir:
                os.makedirs(self.checkpoint_dir, exist_ok=True)
                path = os.path.join(self.checkpoint_dir, f"epoch_{epoch:03d}.ugsc")
                save_checkpoint(path, model, optimizer.state, epoch + 1, self.streams.get_state())
                report.checkpoints.append(path)

        self.optimizer_state = optimizer.state
        self._say(f"✅ Training finished after {config.epochs} epochs")
        return report


def confusion_matrix(pred, labels, num_classes, ignore_index=None):
    pred = np.asarray(pred).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if ignore_index is not None:
        keep = labels != ignore_index
        pred, labels = pred[keep], labels[keep]
    counts = np.bincount(labels * num_classes + pred, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def metrics_from_confusion(confusion, class_weights=None):
    """Accuracy, per-class accuracy and mIoU (absent and zero-weight classes skipped)."""
    total = confusion.sum()
    if total == 0:
        raise ValueError("No labelled samples to evaluate")
    tp = np.diag(confusion).astype(np.float64)
    support = confusion.sum(axis=1)
    predicted = confusion.sum(axis=0)
    union = support + predicted - tp
    counted = union > 0
    if class_weights is not None:
        counted &= class_weights.weights > 0
    iou = np.divide(tp, union, out=np.zeros_like(tp), where=union > 0)
    per_class = np.divide(tp, support, out=np.full_like(tp, np.nan), where=support > 0)
    return {
        'accuracy': float(tp.sum() / total),
        'per_class_accuracy': per_class.tolist(),
        'iou': iou.tolist(),
        'miou': float(iou[counted].mean()) if counted.any() else float('nan'),
    }


def evaluate(model, dataset, batch_size=16, class_weights=None, ignore_index=None):
    if dataset is None or len(dataset) == 0:
        raise ValueError("Cannot evaluate on an empty dataset")
    num_classes = model.spec.num_classes
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    for start in range(0, len(dataset), batch_size):
        features, labels = dataset.batch(np.arange(start, min(start + batch_size, len(dataset))))
        logits = model.forward(MeshTensor(features, dataset.level), training=False)
        logits = logits.data if isinstance(logits, MeshTensor) else logits
        confusion += confusion_matrix(predictions(logits), labels, num_classes, ignore_index)
    return metrics_from_confusion(confusion, class_weights)


def format_metrics(metrics):
    lines = [f"accuracy\t{metrics['accuracy']:.6f}", f"miou\t{metrics['miou']:.6f}"]
    lines += [f"class_{c}_accuracy\t{a:.6f}" for c, a in enumerate(metrics['per_class_accuracy'])]
    return '\n'.join(lines) + '\n'


@dataclass(frozen=True)
class AblationRow:
    mask: KernelMask
    num_parameters: int
    accuracy: float


@dataclass
class AblationReport:
    rows: list

    def to_table(self):
        lines = ["Convolution kernel\tParameters\tAccuracy"]
        lines += [f"{r.mask.label()}\t{r.num_parameters}\t{r.accuracy:.4f}" for r in self.rows]
        return '\n'.join(lines) + '\n'


def _train_and_score(spec, train_set, test_set, config, verbose):
    model = build_model(spec, RngStreams(config.seed).stream('init'))
    Trainer(config, verbose=verbose).train(model, train_set)
    return model, evaluate(model, test_set, batch_size=config.batch_size)['accuracy']


def ablation_run(base_spec, masks, train_set, test_set, config, verbose=False):
    if not masks:
        raise ValueError("Ablation needs at least one kernel mask")
    rows = []
    for mask in masks:
        model, accuracy = _train_and_score(replace(base_spec, mask=mask), train_set, test_set, config, verbose)
        if verbose:
            print(f"📊 {mask.label()}: accuracy {accuracy:.4f}")
        rows.append(AblationRow(mask, model.num_parameters(), accuracy))
    return AblationReport(rows)


@dataclass(frozen=True)
class SweepRow:
    width: float
    num_parameters: int
    accuracy: float


@dataclass
class SweepReport:
    mask: KernelMask
    rows: list

    def to_table(self):
        lines = [f"Width ({self.mask.label()})\tParameters\tAccuracy"]
        lines += [f"{r.width:g}\t{r.num_parameters}\t{r.accuracy:.4f}" for r in self.rows]
        return '\n'.join(lines) + '\n'


def width_sweep(base_spec, widths, train_set, test_set, config, verbose=False):
    """Accuracy against parameter count: retrain ``base_spec`` at each width multiplier."""
    if not widths:
        raise ValueError("Width sweep needs at least one width multiplier")
    rows = []
    for width in sorted(widths):
        spec = replace(base_spec, width_multiplier=width)
        model, accuracy = _train_and_score(spec, train_set, test_set, config, verbose)
        if verbose:
            print(f"📊 width {width:g}: {model.num_parameters()} parameters, accuracy {accuracy:.4f}")
        rows.append(SweepRow(width, model.num_parameters(), accuracy))
    return SweepReport(base_spec.mask, rows)


@dataclass(frozen=True)
class BenchmarkReport:
    batch_size: int
    iterations: int
    mean_ms: float
    std_ms: float

    def line(self):
        return (f"batch {self.batch_size}: mean {self.mean_ms:.3f} ms per batch over "
                f"{self.iterations} batches (first batch excluded)")


def benchmark_inference(model, batch_size=8, iterations=64, seed=0):
    spec = model.spec
    rng = RngStreams(seed).stream('bench')
    n_v = level_stats(spec.input_level).n_v
    x = MeshTensor(rng.standard_normal((batch_size, spec.in_channels, n_v)), spec.input_level)
    model.forward(x, training=False)
    timings = []
    for _ in range(iterations):
        started = time.perf_counter()
        model.forward(x, training=False)
        timings.append((time.perf_counter() - started) * 1000.0)
    return BenchmarkReport(batch_size, iterations, float(np.mean(timings)), float(np.std(timings)))
