"""Classifier and encoder-decoder segmenter assembled from mesh layers."""
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from layers import (
    FULL_MASK, BatchNorm, Concat, Conv1x1, DownSamp, Dropout, FullyConnected,
    GlobalAvgPool, KernelMask, Layer, MeshConv, MeshConvTranspose, MeshTensor, ReLU,
)
from mesh import MAX_LEVEL

logger = logging.getLogger(__name__)

TASKS = ('classification', 'segmentation')


@dataclass(frozen=True)
class ResBlockSpec:
    a: int
    b: int
    c: int
    downsample_first: bool = False

    def __post_init__(self):
        if min(self.a, self.b, self.c) < 1:
            raise ValueError(f"ResBlock channel counts must be positive, got ({self.a}, {self.b}, {self.c})")

    @property
    def has_projection(self):
        return self.a != self.c or self.downsample_first


@dataclass(frozen=True)
class ArchitectureSpec:
    """Network description; ``blocks`` holds (bottleneck, out) widths per stage."""

    task: str
    input_level: int
    in_channels: int
    num_classes: int
    stem: int
    blocks: tuple
    width_multiplier: float = 1.0
    mask: KernelMask = field(default=FULL_MASK)
    dropout: float = 0.5

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"Unknown task {self.task!r}; expected one of {TASKS}")
        if not 0 <= self.input_level <= MAX_LEVEL:
            raise ValueError(f"Input level {self.input_level} out of range [0, {MAX_LEVEL}]")
        if self.width_multiplier <= 0:
            raise ValueError(f"Width multiplier must be positive, got {self.width_multiplier}")
        if min(self.in_channels, self.num_classes, self.stem) < 1:
            raise ValueError("Channel and class counts must be positive")
        if self.task == 'classification' and len(self.blocks) > self.input_level:
            raise ValueError(f"{len(self.blocks)} downsampling stages need input level >= {len(self.blocks)}")

    def width(self, channels):
        return max(1, math.ceil(channels * self.width_multiplier))

    def depth(self):
        """Downsampling stages actually built; a segmenter stops at level 0."""
        if self.task == 'segmentation':
            return min(len(self.blocks), self.input_level)
        return len(self.blocks)

    def to_text(self):
        lines = [
            f"task={self.task}",
            f"input_level={self.input_level}",
            f"in_channels={self.in_channels}",
            f"num_classes={self.num_classes}",
            f"stem={self.stem}",
            "blocks=" + ','.join(f"{b}x{c}" for b, c in self.blocks),
            f"width_multiplier={self.width_multiplier!r}",
            f"mask={self.mask.token()}",
            f"dropout={self.dropout!r}",
        ]
        return '\n'.join(lines) + '\n'

    @classmethod
    def from_text(cls, text):
        values = {}
        for line in text.strip().splitlines():
            key, sep, value = line.partition('=')
            if not sep:
                raise ValueError(f"Malformed architecture line {line!r}")
            values[key.strip()] = value.strip()
        try:
            blocks = tuple(
                tuple(int(n) for n in pair.split('x')) for pair in values['blocks'].split(',') if pair
            )
            return cls(
                task=values['task'],
                input_level=int(values['input_level']),
                in_channels=int(values['in_channels']),
                num_classes=int(values['num_classes']),
                stem=int(values['stem']),
                blocks=blocks,
                width_multiplier=float(values['width_multiplier']),
                mask=KernelMask.parse(values['mask']),
                dropout=float(values['dropout']),
            )
        except KeyError as exc:
            raise ValueError(f"Architecture text is missing key {exc}") from exc


_SEGMENTER_BLOCKS = ((32, 64), (64, 128), (128, 256), (256, 512), (512, 512))

PRESETS = {
    'mnist': ArchitectureSpec('classification', 4, 1, 10, 16, ((16, 64), (64, 256))),
    'modelnet40-full': ArchitectureSpec('classification', 5, 6, 40, 32, ((32, 128), (128, 512), (512, 2048))),
    'modelnet40-lean': ArchitectureSpec('classification', 5, 6, 40, 8, ((8, 16), (16, 64), (64, 256))),
    '2d3ds': ArchitectureSpec('segmentation', 5, 4, 15, 32, _SEGMENTER_BLOCKS),
    'climate': ArchitectureSpec('segmentation', 5, 16, 3, 32, _SEGMENTER_BLOCKS, width_multiplier=0.25),
}


def preset_spec(name, **overrides):
    if name not in PRESETS:
        raise ValueError(f"Unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


class ResBlock(Layer):
    """Bottleneck block: 1x1 -> MeshConv -> 1x1, plus shortcut, then ReLU."""

    def __init__(self, spec, level, mask=FULL_MASK, rng=None):
        super().__init__()
        self.spec = spec
        self.level = level
        a, b, c = spec.a, spec.b, spec.c
        self.down = DownSamp() if spec.downsample_first else None
        self.main = [
            Conv1x1(a, b, rng), BatchNorm(b), ReLU(),
            MeshConv(b, b, level, mask, rng), BatchNorm(b), ReLU(),
            Conv1x1(b, c, rng), BatchNorm(c),
        ]
        self.shortcut = [Conv1x1(a, c, rng), BatchNorm(c)] if spec.has_projection else []
        self.out_relu = ReLU()

    def children(self):
        head = [self.down] if self.down is not None else []
        return head + self.main + self.shortcut + [self.out_relu]

    def forward(self, x, training=False):
        if self.down is not None:
            x = self.down.forward(x, training)
        h = x
        for layer in self.main:
            h = layer.forward(h, training)
        s = x
        for layer in self.shortcut:
            s = layer.forward(s, training)
        return self.out_relu.forward(h.with_data(h.data + s.data), training)

    def backward(self, grad):
        grad = self.out_relu.backward(grad)
        g_main = grad
        for layer in reversed(self.main):
            g_main = layer.backward(g_main)
        g_short = grad
        for layer in reversed(self.shortcut):
            g_short = layer.backward(g_short)
        grad = g_main + g_short
        if self.down is not None:
            grad = self.down.backward(grad)
        return grad


def build_resblock(spec, level, mask=FULL_MASK, rng=None):
    """``level`` is where the block's MeshConv runs (after any downsampling)."""
    return ResBlock(spec, level, mask, rng)


class LayerGraph(Layer):
    """Sequential model with a state dict (parameters then BatchNorm buffers)."""

    def __init__(self, layers, spec=None):
        super().__init__()
        self.layers = list(layers)
        self.spec = spec

    def children(self):
        return self.layers

    def forward(self, x, training=False):
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def bind_rng(self, rng):
        for layer in self.walk():
            if isinstance(layer, Dropout):
                layer.rng = rng

    def zero_grad(self):
        for _, _, grad in self.parameters():
            grad[...] = 0.0

    def state_dict(self):
        state = {f"param:{name}": value for name, value, _ in self.parameters()}
        state.update((f"buffer:{name}", value) for name, value in self.named_buffers())
        return state

    def load_state_dict(self, state):
        own = self.state_dict()
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            raise ValueError(f"State mismatch: missing {missing[:3]}, unexpected {unexpected[:3]}")
        for name, target in own.items():
            if target.shape != state[name].shape:
                raise ValueError(f"{name}: expected shape {target.shape}, got {state[name].shape}")
            target[...] = state[name]


class SegmenterGraph(LayerGraph):
    """Encoder-decoder with channel concatenation of same-level skips."""

    def __init__(self, in_conv, encoder, decoder, out_conv, spec=None):
        super().__init__([], spec)
        self.in_conv = in_conv
        self.encoder = list(encoder)
        self.decoder = list(decoder)
        self.out_conv = out_conv

    def children(self):
        stages = [layer for stage in self.decoder for layer in stage]
        return [self.in_conv] + self.encoder + stages + [self.out_conv]

    def forward(self, x, training=False):
        x = self.in_conv.forward(x, training)
        skips = [x]
        for block in self.encoder:
            x = block.forward(x, training)
            skips.append(x)
        skips.pop()
        for upsample, concat, block in self.decoder:
            x = upsample.forward(x, training)
            x = concat.forward([x, skips.pop()], training)
            x = block.forward(x, training)
        return self.out_conv.forward(x, training)

    def backward(self, grad):
        grad = self.out_conv.backward(grad)
        skip_grads = []
        for upsample, concat, block in reversed(self.decoder):
            grad = block.backward(grad)
            grad, skip_grad = concat.backward(grad)
            grad = upsample.backward(grad)
            skip_grads.append(skip_grad)
        # skip_grads[i] now belongs to encoder output i (0 = in_conv output)
        for i in range(len(self.encoder), 0, -1):
            grad = self.encoder[i - 1].backward(grad) + skip_grads[i - 1]
        return self.in_conv.backward(grad)


def build_classifier(spec, rng=None):
    if spec.task != 'classification':
        raise ValueError(f"build_classifier needs a classification spec, got {spec.task!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    level = spec.input_level
    channels = spec.width(spec.stem)
    layers = [MeshConv(spec.in_channels, channels, level, spec.mask, rng), BatchNorm(channels), ReLU()]
    for bottleneck, out in spec.blocks:
        level -= 1
        block = ResBlockSpec(channels, spec.width(bottleneck), spec.width(out), downsample_first=True)
        layers.append(build_resblock(block, level, spec.mask, rng))
        channels = block.c
    layers += [GlobalAvgPool(), Dropout(spec.dropout), FullyConnected(channels, spec.num_classes, rng)]
    graph = LayerGraph(layers, spec)
    logger.info("Built classifier with %d parameters", graph.num_parameters())
    return graph


def build_segmenter(spec, rng=None):
    if spec.task != 'segmentation':
        raise ValueError(f"build_segmenter needs a segmentation spec, got {spec.task!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    top = spec.input_level
    depth = spec.depth()
    widths = [spec.width(spec.stem)] + [spec.width(out) for _, out in spec.blocks[:depth]]

    in_conv = MeshConv(spec.in_channels, widths[0], top, spec.mask, rng)
    encoder = []
    for i in range(1, depth + 1):
        block = ResBlockSpec(widths[i - 1], widths[i - 1], widths[i], downsample_first=True)
        encoder.append(build_resblock(block, top - i, spec.mask, rng))

    decoder = []
    channels = widths[depth]
    for i in range(depth - 1, -1, -1):
        level = top - i
        out = widths[max(i - 1, 0)]
        decoder.append((
            MeshConvTranspose(channels, channels, level, spec.mask, rng),
            Concat(),
            build_resblock(ResBlockSpec(channels + widths[i], out, out), level, spec.mask, rng),
        ))
        channels = out
    out_conv = MeshConv(channels, spec.num_classes, top, spec.mask, rng)
    graph = SegmenterGraph(in_conv, encoder, decoder, out_conv, spec)
    logger.info("Built segmenter (depth %d) with %d parameters", depth, graph.num_parameters())
    return graph


def build_model(spec, rng=None):
    if spec.task == 'classification':
        return build_classifier(spec, rng)
    return build_segmenter(spec, rng)


def input_tensor(model, features):
    """Wrap a (B, C, V) feature array at the model's input level."""
    return MeshTensor(np.asarray(features, dtype=np.float64), model.spec.input_level)
