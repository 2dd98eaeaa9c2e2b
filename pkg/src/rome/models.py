"""Semantic encoder and classifier heads: residual CNNs with widths divided by a scale factor."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import channel as ch
from .nn import tensor as T
from .nn.graph import ComputationGraph
from .nn.layers import conv, dense, res_block
from .nn.optim import Adam
from .nn.tensor import Tensor

# Kernel counts of the reference encoder: ConvLayer, ResBlock, 2x ResBlock, 2x ResBlock, ResBlock.
ENCODER_WIDTHS = (64, 64, 128, 128, 256, 256, 24)
CLASSIFIER_WIDTH = 256
TERMINAL_SIDE = 4


@dataclass
class ModelConfig:
    input_shape: tuple = (1, 8, 8)
    scale: int = 8
    P: float = 1.0
    classes: int = 10

    def widths(self):
        for w in ENCODER_WIDTHS + (CLASSIFIER_WIDTH,):
            if w % self.scale:
                raise ValueError(f"scale {self.scale} does not divide kernel count {w}")
        return [w // self.scale for w in ENCODER_WIDTHS]


@dataclass
class SemanticEncoder:
    graph: ComputationGraph
    k: int
    P: float
    feature_shape: tuple


@dataclass
class Classifier:
    graph: ComputationGraph
    classes: int
    feature_shape: tuple


def _conv_out(side, stride):
    return (side + 2 - 3) // stride + 1


def encoder_strides(side: int):
    """Stride-2 downsampling at the 128-, 256- and terminal blocks until 4x4."""
    strides = []
    for _ in range(3):
        s = 2 if side > TERMINAL_SIDE else 1
        strides.append(s)
        side = _conv_out(side, s)
    return strides, side


def build_encoder(config: ModelConfig, rng) -> SemanticEncoder:
    w = config.widths()
    c_in, h, wd = config.input_shape
    if h != wd:
        raise ValueError("square inputs only")
    (s128, s256, s24), side = encoder_strides(h)
    g = ComputationGraph({"s": tuple(config.input_shape)}, name="encoder")
    x = conv(g, "s", c_in, w[0], rng, name="stem")
    x = g.add("relu", x, id="stem.relu")
    x = res_block(g, x, w[0], w[1], rng, prefix="r64")
    x = res_block(g, x, w[1], w[2], rng, stride=s128, prefix="r128a")
    x = res_block(g, x, w[2], w[3], rng, prefix="r128b")
    x = res_block(g, x, w[3], w[4], rng, stride=s256, prefix="r256a")
    x = res_block(g, x, w[4], w[5], rng, prefix="r256b")
    x = res_block(g, x, w[5], w[6], rng, stride=s24, final_relu=False, prefix="r24")
    g.add("flatten", x, id="symbols")
    feature_shape = (w[6], side, side)
    n = int(np.prod(feature_shape))
    if n % 2:
        raise ValueError(f"terminal feature size {n} is odd; cannot form complex symbols")
    return SemanticEncoder(g, n // 2, config.P, feature_shape)


def build_classifier(config: ModelConfig, feature_shape, rng, zero_head=False) -> Classifier:
    width = CLASSIFIER_WIDTH // config.scale
    c, h, w = feature_shape
    g = ComputationGraph({"y": (c * h * w,)}, name="classifier")
    x = g.add("reshape", "y", attrs={"shape": tuple(feature_shape)}, id="features")
    x = res_block(g, x, c, width, rng, prefix="c1")
    x = res_block(g, x, width, width, rng, prefix="c2")
    x = g.add("avgpool", x, attrs={"kernel": h}, id="pool")
    x = g.add("flatten", x, id="flat")
    dense(g, x, width, config.classes, rng, name="head", zero=zero_head)
    return Classifier(g, config.classes, tuple(feature_shape))


def encode(enc: SemanticEncoder, s) -> np.ndarray:
    """Channel-input symbols ``P(F(s))``; accepts one image or a batch."""
    s = np.asarray(s, dtype=np.float64)
    single = s.shape == enc.graph.input_shapes["s"]
    if single:
        s = s[None]
    if s.shape[1:] != enc.graph.input_shapes["s"]:
        raise ValueError(f"image shape {s.shape[1:]} != {enc.graph.input_shapes['s']}")
    x = ch.power_normalize(enc.graph.run(s), enc.k, enc.P)
    return x[0] if single else x


def encode_tensor(enc: SemanticEncoder, s: Tensor) -> Tensor:
    return T.scale_to_norm(enc.graph(s), np.sqrt(enc.k * enc.P))


def logits(cls: Classifier, y) -> np.ndarray:
    return cls.graph.run(np.atleast_2d(y))


def classify(cls: Classifier, y):
    """Class probabilities and argmax class for one equalised symbol vector or a batch."""
    y = np.asarray(y, dtype=np.float64)
    d = cls.graph.input_shapes["y"]
    single = y.shape == d
    if y.shape[-1:] != d:
        raise ValueError(f"received vector length {y.shape[-1]} != {d[0]}")
    z = cls.graph.run(np.atleast_2d(y))
    e = np.exp(z - z.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    c = p.argmax(axis=1)
    return (p[0], int(c[0])) if single else (p, c)


def accuracy(cls: Classifier, y, labels) -> float:
    return float((classify(cls, y)[1] == np.asarray(labels)).mean())


def minibatches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def received_clean(x, channel: ch.ChannelModel, rng):
    """Equalised received symbols without jamming, plus the per-row channel draws."""
    h, h_a, var = ch.draw_channels(channel, rng, len(x))
    y = ch.equalize(ch.transmit(x, None, (h, h_a, var), rng), h)
    return y, h, h_a


def train_end_to_end(enc: SemanticEncoder, cls: Classifier, images, labels, channel, rng,
                     epochs=10, batch_size=128, lr=1e-3, log=None):
    """Jointly train encoder and standard classifier through the noisy channel."""
    n = len(images)
    steps = epochs * int(np.ceil(n / batch_size))
    opt = Adam([enc.graph, cls.graph], lr0=lr, total_steps=steps)
    enc.graph.unfreeze()
    cls.graph.unfreeze()
    for epoch in range(epochs):
        total = 0.0
        for idx in minibatches(n, batch_size, rng):
            opt.zero_grad()
            x = encode_tensor(enc, Tensor(images[idx]))
            h, _, var = ch.draw_channels(channel, rng, len(idx))
            noise = ch.equalize(ch.transmit(np.zeros(x.shape), None, (h, h, var), rng), h)
            # equalised channel is x + n/h
            y = x + Tensor(noise)
            loss = T.softmax_cross_entropy(cls.graph(y), labels[idx])
            loss.backward()
            opt.step()
            total += float(loss.data) * len(idx)
        if log:
            log(f"e2e epoch {epoch}: loss {total / n:.4f}")
    return enc, cls
