"""Central finite-difference checks of every layer's backward pass."""
from dataclasses import dataclass

import numpy as np

from layers import (
    BatchNorm, Conv1x1, DownSamp, Dropout, FullyConnected, GlobalAvgPool, MeshConv,
    MeshConvTranspose, MeshTensor, ReLU,
)
from mesh import level_stats
from network import build_model, preset_spec
from training import cross_entropy
from utils import RngStreams

FD_STEP = 1e-5
LAYER_TOLERANCE = 1e-4
STATISTICS_TOLERANCE = 1e-3


def relative_error(analytic, numerical):
    analytic = np.ravel(analytic)
    numerical = np.ravel(numerical)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numerical), 1e-12)
    return float(np.linalg.norm(analytic - numerical) / scale)


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_relative_error: float
    tolerance: float

    @property
    def passed(self):
        return self.max_relative_error <= self.tolerance

    def line(self):
        status = 'PASS' if self.passed else 'FAIL'
        return f"{self.name:<22} max rel error {self.max_relative_error:.3e}  (tol {self.tolerance:.0e})  {status}"


class _SignFlip:
    """Mixin negating every gradient a layer produces, to prove the checker bites."""

    def backward(self, grad):
        grad_in = super().backward(grad)
        for value in self.tape.grads.values():
            value *= -1.0
        return -grad_in


class _FlippedMeshConv(_SignFlip, MeshConv):
    pass


class _FlippedMeshConvTranspose(_SignFlip, MeshConvTranspose):
    pass


class GradientChecker:
    """Runs the finite-difference suite on level-``level`` fixtures."""

    def __init__(self, level=2, width=3, batch=2, seed=0, inject_sign_flip=False, verbose=True):
        if level < 1:
            raise ValueError(f"Gradient checks need level >= 1 (for DownSamp), got {level}")
        self.level = level
        self.width = width
        self.batch = batch
        self.seed = seed
        self.inject_sign_flip = inject_sign_flip
        self.verbose = verbose
        self.rng = RngStreams(seed).stream('gradcheck')
        if verbose:
            print(f"🔧 Initializing gradient checker (level {level}, width {width}, seed {seed})...")

    def _mesh_input(self, channels, level=None, away_from_zero=False):
        level = self.level if level is None else level
        data = self.rng.standard_normal((self.batch, channels, level_stats(level).n_v))
        if away_from_zero:
            data = np.sign(data) * (0.1 + np.abs(data))
        return MeshTensor(data, level)

    def check_layer(self, name, layer, x, training=False, tolerance=LAYER_TOLERANCE,
                    input_entries=10, before_forward=None):
        """Compare backward against central differences of sum(out * R)."""

        def loss():
            if before_forward:
                before_forward()
            out = layer.forward(x, training)
            return float(np.sum((out.data if isinstance(out, MeshTensor) else out) * probe))

        if before_forward:
            before_forward()
        out = layer.forward(x, training)
        probe = self.rng.standard_normal((out.data if isinstance(out, MeshTensor) else out).shape)
        grad_input = layer.backward(probe)
        errors = []

        for _, value, grad in list(layer.parameters()):
            analytic = grad.copy()
            numerical = np.zeros_like(value)
            for idx in np.ndindex(value.shape):
                saved = value[idx]
                value[idx] = saved + FD_STEP
                plus = loss()
                value[idx] = saved - FD_STEP
                minus = loss()
                value[idx] = saved
                numerical[idx] = (plus - minus) / (2 * FD_STEP)
            errors.append(relative_error(analytic, numerical))

        data = x.data if isinstance(x, MeshTensor) else x
        flat = data.reshape(-1)
        picks = self.rng.choice(flat.size, size=min(input_entries, flat.size), replace=False)
        numerical = np.zeros(len(picks))
        for n, i in enumerate(picks):
            saved = flat[i]
            flat[i] = saved + FD_STEP
            plus = loss()
            flat[i] = saved - FD_STEP
            minus = loss()
            flat[i] = saved
            numerical[n] = (plus - minus) / (2 * FD_STEP)
        errors.append(relative_error(grad_input.reshape(-1)[picks], numerical))
        return self._record(name, max(errors), tolerance)

    def check_network(self, name, model, x, labels, parameters=20, tolerance=STATISTICS_TOLERANCE):
        """End-to-end check of the loss on randomly chosen scalar parameters."""

        def loss():
            logits = model.forward(x, training=True)
            return cross_entropy(logits.data if isinstance(logits, MeshTensor) else logits, labels)[0]

        model.zero_grad()
        logits = model.forward(x, training=True)
        logits = logits.data if isinstance(logits, MeshTensor) else logits
        _, grad = cross_entropy(logits, labels)
        model.backward(grad)

        entries = [(value, grad, idx) for _, value, grad in model.parameters() for idx in np.ndindex(value.shape)]
        picks = self.rng.choice(len(entries), size=min(parameters, len(entries)), replace=False)
        analytic, numerical = [], []
        for i in picks:
            value, grad, idx = entries[i]
            analytic.append(grad[idx])
            saved = value[idx]
            value[idx] = saved + FD_STEP
            plus = loss()
            value[idx] = saved - FD_STEP
            minus = loss()
            value[idx] = saved
            numerical.append((plus - minus) / (2 * FD_STEP))
        return self._record(name, relative_error(analytic, numerical), tolerance)

    def _record(self, name, error, tolerance):
        result = CheckResult(name, error, tolerance)
        if self.verbose:
            print(f"   {'✅' if result.passed else '❌'} {result.line()}")
        return result

    def run(self):
        level, width = self.level, self.width
        if level < 2:
            raise ValueError(f"The network checks downsample twice and need level >= 2, got {level}")
        conv_class = _FlippedMeshConv if self.inject_sign_flip else MeshConv
        transpose_class = _FlippedMeshConvTranspose if self.inject_sign_flip else MeshConvTranspose
        rng = self.rng
        results = []

        results.append(self.check_layer('MeshConv', conv_class(width, width, level, rng=rng), self._mesh_input(width)))
        transpose = transpose_class(width, width, level, rng=rng)
        results.append(self.check_layer('MeshConvTranspose', transpose, self._mesh_input(width, level - 1)))
        results.append(self.check_layer('DownSamp', DownSamp(), self._mesh_input(width)))
        results.append(self.check_layer('Conv1x1', Conv1x1(width, width + 1, rng), self._mesh_input(width)))
        results.append(self.check_layer('BatchNorm(train)', BatchNorm(width), self._mesh_input(width),
                                        training=True, tolerance=STATISTICS_TOLERANCE))
        results.append(self.check_layer('BatchNorm(eval)', BatchNorm(width), self._mesh_input(width),
                                        tolerance=STATISTICS_TOLERANCE))
        results.append(self.check_layer('ReLU', ReLU(), self._mesh_input(width, away_from_zero=True)))

        dropout = Dropout(0.5)

        def reseed():
            dropout.rng = np.random.default_rng(self.seed)

        results.append(self.check_layer('Dropout', dropout, self._mesh_input(width), training=True,
                                        before_forward=reseed))
        results.append(self.check_layer('GlobalAvgPool', GlobalAvgPool(), self._mesh_input(width)))
        results.append(self.check_layer('FullyConnected', FullyConnected(width, 5, rng),
                                        rng.standard_normal((self.batch, width))))

        classifier = build_model(preset_spec('mnist', input_level=level, width_multiplier=0.25, dropout=0.0), rng)
        labels = rng.integers(0, 10, size=self.batch)
        results.append(self.check_network('Classifier', classifier, self._mesh_input(1), labels))

        segmenter = build_model(preset_spec('2d3ds', input_level=level, width_multiplier=1 / 16), rng)
        labels = rng.integers(0, 15, size=(self.batch, level_stats(level).n_v))
        results.append(self.check_network('Segmenter', segmenter, self._mesh_input(4), labels))

        if self.verbose:
            failed = [r.name for r in results if not r.passed]
            print("ALL PASS" if not failed else f"❌ FAILED: {', '.join(failed)}")
        return results
