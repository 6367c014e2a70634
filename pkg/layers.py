"""Differentiable layers with explicit forward and reverse-mode backward passes.

Spatial layers consume and produce ``MeshTensor`` (batch, channels, vertices);
``backward`` takes and returns plain gradient arrays shaped like the data.
Every parameter has a gradient buffer of the same shape in ``layer.tape.grads``.
"""
import logging
import re
from dataclasses import dataclass, field

import numpy as np

from mesh import level_stats
from operators import operator_set_at_level
from utils import NumericalError

logger = logging.getLogger(__name__)

KERNEL_TOKENS = ('I', 'x', 'y', 'lap')
KERNEL_LABELS = ('I', 'd/dx', 'd/dy', 'lap')


@dataclass(frozen=True)
class MeshTensor:
    data: np.ndarray
    level: int

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"MeshTensor expects (batch, channels, vertices), got shape {self.data.shape}")
        expected = level_stats(self.level).n_v
        if self.data.shape[2] != expected:
            raise ValueError(f"Level {self.level} has {expected} vertices, tensor has {self.data.shape[2]}")
        if not np.isfinite(self.data).all():
            raise NumericalError(f"Non-finite values in level-{self.level} tensor")

    @property
    def batch(self):
        return self.data.shape[0]

    @property
    def channels(self):
        return self.data.shape[1]

    @property
    def n_v(self):
        return self.data.shape[2]

    def with_data(self, data, level=None):
        return MeshTensor(data, self.level if level is None else level)


@dataclass(frozen=True)
class KernelMask:
    """Which of (I, grad_x, grad_y, laplacian) take part in a MeshConv."""

    identity: bool = True
    grad_x: bool = True
    grad_y: bool = True
    laplacian: bool = True

    def __post_init__(self):
        if not any(self.flags()):
            raise ValueError("KernelMask needs at least one active operator")

    def flags(self):
        return (self.identity, self.grad_x, self.grad_y, self.laplacian)

    def active_indices(self):
        return tuple(k for k, on in enumerate(self.flags()) if on)

    @classmethod
    def parse(cls, text):
        """Parse a token string such as ``Ixylap`` or ``Ilap``."""
        tokens = re.findall(r'lap|I|x|y', text)
        if not tokens or ''.join(tokens) != text.strip():
            raise ValueError(f"Cannot parse kernel mask {text!r}; use tokens I, x, y, lap")
        return cls(*(token in tokens for token in KERNEL_TOKENS))

    def token(self):
        return ''.join(t for t, on in zip(KERNEL_TOKENS, self.flags()) if on)

    def label(self):
        return ' + '.join(t for t, on in zip(KERNEL_LABELS, self.flags()) if on)


FULL_MASK = KernelMask()


@dataclass
class GradTape:
    cache: dict = field(default_factory=dict)
    grads: dict = field(default_factory=dict)


def _data(x):
    return x.data if isinstance(x, MeshTensor) else x


def _like(x, data):
    return x.with_data(data) if isinstance(x, MeshTensor) else data


class Layer:
    """Base layer: named parameters, aligned gradient buffers, child layers."""

    def __init__(self):
        self.params = {}
        self.tape = GradTape()

    def _register(self, name, value):
        self.params[name] = value
        self.tape.grads[name] = np.zeros_like(value)

    def children(self):
        return []

    def buffers(self):
        return {}

    def parameters(self, prefix=''):
        for name, value in self.params.items():
            yield prefix + name, value, self.tape.grads[name]
        for i, child in enumerate(self.children()):
            yield from child.parameters(f"{prefix}{i}.")

    def named_buffers(self, prefix=''):
        for name, value in self.buffers().items():
            yield prefix + name, value
        for i, child in enumerate(self.children()):
            yield from child.named_buffers(f"{prefix}{i}.")

    def num_parameters(self):
        return sum(value.size for _, value, _ in self.parameters())

    def walk(self):
        yield self
        for child in self.children():
            yield from child.walk()

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


class MeshConv(Layer):
    """out[b,o] = bias[o] + sum_i sum_k theta[o,i,k] * (L_k x[b,i])."""

    def __init__(self, in_channels, out_channels, level, mask=FULL_MASK, rng=None):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.level = level
        self.mask = mask
        self.active = mask.active_indices()
        self.ops = operator_set_at_level(level)
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = np.sqrt(6.0 / (in_channels * 4))
        self._register('weight', rng.uniform(-bound, bound, (out_channels, in_channels, len(self.active))))
        self._register('bias', np.zeros(out_channels))

    def _check(self, x):
        if x.level != self.level:
            raise ValueError(f"MeshConv at level {self.level} got a level-{x.level} tensor")
        if x.channels != self.in_channels:
            raise ValueError(f"MeshConv expects {self.in_channels} channels, got {x.channels}")

    def _convolve(self, data):
        batch, channels, n_v = data.shape
        flat = data.transpose(2, 0, 1).reshape(n_v, batch * channels)
        weight = self.params['weight']
        out = np.broadcast_to(self.params['bias'][None, :, None], (batch, self.out_channels, n_v)).copy()
        responses = []
        matrices = self.ops.matrices()
        # one sparse product per active operator, reused for every output channel
        for slot, k in enumerate(self.active):
            response = flat if k == 0 else matrices[k] @ flat
            response = response.reshape(n_v, batch, channels)
            out += np.einsum('vbi,oi->bov', response, weight[:, :, slot], optimize=True)
            responses.append(response)
        self.tape.cache['responses'] = responses
        self.tape.cache['shape'] = data.shape
        return out

    def _convolve_backward(self, grad):
        batch, channels, n_v = self.tape.cache['shape']
        responses = self.tape.cache['responses']
        weight = self.params['weight']
        grad_weight = self.tape.grads['weight']
        grad_flat = np.zeros((n_v, batch * channels))
        transposes = self.ops.transposes
        for slot, k in enumerate(self.active):
            grad_weight[:, :, slot] = np.einsum('bov,vbi->oi', grad, responses[slot], optimize=True)
            pulled = np.einsum('bov,oi->vbi', grad, weight[:, :, slot], optimize=True).reshape(n_v, -1)
            grad_flat += pulled if k == 0 else transposes[k] @ pulled
        self.tape.grads['bias'][...] = grad.sum(axis=(0, 2))
        return np.ascontiguousarray(grad_flat.reshape(n_v, batch, channels).transpose(1, 2, 0))

    def forward(self, x, training=False):
        self._check(x)
        return MeshTensor(self._convolve(x.data), self.level)

    def backward(self, grad):
        return self._convolve_backward(grad)


class MeshConvTranspose(MeshConv):
    """Zero-pad a level-(l-1) signal to level l, then MeshConv at level l."""

    def forward(self, x, training=False):
        if x.level != self.level - 1:
            raise ValueError(f"MeshConvTranspose to level {self.level} "
                             f"needs a level-{self.level - 1} input, got {x.level}")
        if x.channels != self.in_channels:
            raise ValueError(f"MeshConvTranspose expects {self.in_channels} channels, got {x.channels}")
        padded = np.zeros((x.batch, x.channels, self.ops.n_v))
        padded[:, :, :x.n_v] = x.data
        self.tape.cache['coarse_n_v'] = x.n_v
        return MeshTensor(self._convolve(padded), self.level)

    def backward(self, grad):
        grad_padded = self._convolve_backward(grad)
        return np.ascontiguousarray(grad_padded[:, :, :self.tape.cache['coarse_n_v']])


class DownSamp(Layer):
    """Restrict a level-l signal to the nested level-(l-1) vertex prefix."""

    def forward(self, x, training=False):
        if x.level < 1:
            raise ValueError("Cannot downsample a level-0 tensor")
        coarse = level_stats(x.level - 1).n_v
        self.tape.cache['fine_shape'] = x.data.shape
        return MeshTensor(x.data[:, :, :coarse].copy(), x.level - 1)

    def backward(self, grad):
        out = np.zeros(self.tape.cache['fine_shape'])
        out[:, :, :grad.shape[2]] = grad
        return out


class Conv1x1(Layer):
    def __init__(self, in_channels, out_channels, rng=None):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = np.sqrt(6.0 / in_channels)
        self._register('weight', rng.uniform(-bound, bound, (out_channels, in_channels)))
        self._register('bias', np.zeros(out_channels))

    def forward(self, x, training=False):
        if x.channels != self.in_channels:
            raise ValueError(f"Conv1x1 expects {self.in_channels} channels, got {x.channels}")
        self.tape.cache['input'] = x.data
        out = np.matmul(self.params['weight'], x.data) + self.params['bias'][None, :, None]
        return x.with_data(out)

    def backward(self, grad):
        x = self.tape.cache['input']
        self.tape.grads['weight'][...] = np.einsum('bov,biv->oi', grad, x, optimize=True)
        self.tape.grads['bias'][...] = grad.sum(axis=(0, 2))
        return np.matmul(self.params['weight'].T, grad)


class BatchNorm(Layer):
    """Per-channel normalisation over (batch, vertices)."""

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self._register('gamma', np.ones(channels))
        self._register('beta', np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def buffers(self):
        return {'running_mean': self.running_mean, 'running_var': self.running_var}

    def forward(self, x, training=False):
        data = _data(x)
        if data.shape[1] != self.channels:
            raise ValueError(f"BatchNorm expects {self.channels} channels, got {data.shape[1]}")
        arr = data.reshape(data.shape[0], self.channels, -1)
        count = arr.shape[0] * arr.shape[2]
        if training:
            if count < 2:
                raise ValueError("BatchNorm in training mode needs batch * vertices >= 2")
            mean = arr.mean(axis=(0, 2))
            var = arr.var(axis=(0, 2))
            self.running_mean[...] = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var[...] = (1 - self.momentum) * self.running_var + self.momentum * var * count / (count - 1)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        normalized = (arr - mean[None, :, None]) * inv_std[None, :, None]
        self.tape.cache.update(normalized=normalized, inv_std=inv_std, training=training, shape=data.shape)
        out = self.params['gamma'][None, :, None] * normalized + self.params['beta'][None, :, None]
        return _like(x, out.reshape(data.shape))

    def backward(self, grad):
        cache = self.tape.cache
        normalized, inv_std = cache['normalized'], cache['inv_std']
        g = grad.reshape(normalized.shape)
        self.tape.grads['gamma'][...] = np.sum(g * normalized, axis=(0, 2))
        self.tape.grads['beta'][...] = np.sum(g, axis=(0, 2))
        g_norm = g * self.params['gamma'][None, :, None]
        if cache['training']:
            count = normalized.shape[0] * normalized.shape[2]
            dx = (inv_std[None, :, None] / count) * (
                count * g_norm
                - g_norm.sum(axis=(0, 2))[None, :, None]
                - normalized * np.sum(g_norm * normalized, axis=(0, 2))[None, :, None]
            )
        else:
            dx = g_norm * inv_std[None, :, None]
        return dx.reshape(cache['shape'])


class ReLU(Layer):
    def forward(self, x, training=False):
        data = _data(x)
        mask = data > 0
        self.tape.cache['mask'] = mask
        return _like(x, np.where(mask, data, 0.0))

    def backward(self, grad):
        return np.where(self.tape.cache['mask'], grad, 0.0)


class Dropout(Layer):
    """Inverted dropout; identity outside training."""

    def __init__(self, rate=0.5, rng=None):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"Dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng

    def forward(self, x, training=False):
        data = _data(x)
        if not training or self.rate == 0.0:
            self.tape.cache['scale'] = None
            return x
        if self.rng is None:
            raise ValueError("Dropout needs a random stream in training mode; call bind_rng first")
        keep = self.rng.random(data.shape) >= self.rate
        scale = keep / (1.0 - self.rate)
        self.tape.cache['scale'] = scale
        return _like(x, data * scale)

    def backward(self, grad):
        scale = self.tape.cache['scale']
        return grad if scale is None else grad * scale


class GlobalAvgPool(Layer):
    """(B, C, V) mesh tensor -> (B, C) array."""

    def forward(self, x, training=False):
        self.tape.cache['n_v'] = x.n_v
        return x.data.mean(axis=2)

    def backward(self, grad):
        n_v = self.tape.cache['n_v']
        return np.repeat(grad[:, :, None] / n_v, n_v, axis=2)


class FullyConnected(Layer):
    def __init__(self, in_features, out_features, rng=None):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = np.sqrt(6.0 / in_features)
        self._register('weight', rng.uniform(-bound, bound, (out_features, in_features)))
        self._register('bias', np.zeros(out_features))

    def forward(self, x, training=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(f"FullyConnected expects (batch, {self.in_features}), got {x.shape}")
        self.tape.cache['input'] = x
        return x @ self.params['weight'].T + self.params['bias']

    def backward(self, grad):
        x = self.tape.cache['input']
        self.tape.grads['weight'][...] = grad.T @ x
        self.tape.grads['bias'][...] = grad.sum(axis=0)
        return grad @ self.params['weight']


class Concat(Layer):
    """Channel concatenation of mesh tensors at one level."""

    def forward(self, inputs, training=False):
        levels = {t.level for t in inputs}
        if len(levels) != 1:
            raise ValueError(f"Concat needs tensors at one level, got levels {sorted(levels)}")
        self.tape.cache['splits'] = np.cumsum([t.channels for t in inputs])[:-1]
        return MeshTensor(np.concatenate([t.data for t in inputs], axis=1), inputs[0].level)

    def backward(self, grad):
        return np.split(grad, self.tape.cache['splits'], axis=1)
