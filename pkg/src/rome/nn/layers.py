"""Graph-building helpers with He-style uniform fan-in initialisation."""
from __future__ import annotations

import numpy as np

from .graph import ComputationGraph


# damps the residual branch at init so deep stacks without normalisation train
RESIDUAL_GAIN = 0.1


def he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def dense(g: ComputationGraph, x, d_in, d_out, rng, name=None, zero=False):
    W = np.zeros((d_out, d_in)) if zero else he_uniform(rng, (d_out, d_in), d_in)
    return g.add("linear", x, {"W": W, "b": np.zeros(d_out)}, id=name)


def conv(g: ComputationGraph, x, c_in, c_out, rng, stride=1, kernel=3, name=None, gain=1.0):
    W = gain * he_uniform(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel)
    return g.add("conv2d", x, {"W": W, "b": np.zeros(c_out)},
                 {"stride": stride, "padding": kernel // 2}, id=name)


def pam_params(rng, channels, hidden=None):
    hidden = hidden or max(channels, 4)
    return {
        "W1": he_uniform(rng, (hidden, channels + 1), channels + 1),
        "b1": np.zeros(hidden),
        "W2": he_uniform(rng, (channels, hidden), hidden),
        "b2": np.zeros(channels),
    }


def res_block(g: ComputationGraph, x, c_in, c_out, rng, stride=1, final_relu=True,
              eps=None, prefix=None):
    """conv-ReLU-conv residual block with a 1x1 projection when shapes change.

    When ``eps`` names an input node, a power-anticipation unit calibrates the
    residual branch before the skip addition.
    """
    p = prefix or f"b{len(g.nodes)}"
    h = conv(g, x, c_in, c_out, rng, stride=stride, name=f"{p}.conv1")
    h = g.add("relu", h, id=f"{p}.relu1")
    h = conv(g, h, c_out, c_out, rng, name=f"{p}.conv2", gain=RESIDUAL_GAIN)
    if eps is not None:
        h = g.add("pam", [h, eps], pam_params(rng, c_out), id=f"{p}.pam")
    skip = x
    if stride != 1 or c_in != c_out:
        skip = conv(g, x, c_in, c_out, rng, stride=stride, kernel=1, name=f"{p}.proj")
    out = g.add("add", [h, skip], id=f"{p}.add")
    if final_relu:
        out = g.add("relu", out, id=f"{p}.relu2")
    return out
