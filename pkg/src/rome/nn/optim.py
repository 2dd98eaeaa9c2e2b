"""Adam with cosine learning-rate annealing."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr0: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float | None = None):
    """Apply one Adam update in place to the arrays in ``params``.

    Parameters without an entry in ``grads`` are left untouched.
    """
    lr = state.lr0 if lr is None else lr
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


class Adam:
    """Adam over the parameters of one or more graphs, with cosine decay."""

    def __init__(self, graphs, lr0=1e-4, total_steps=None):
        if not isinstance(graphs, (list, tuple)):
            graphs = [graphs]
        self.tensors = {}
        for i, g in enumerate(graphs):
            for k, t in g.parameters().items():
                self.tensors[f"{i}:{k}"] = t
        self.state = AdamState(lr0=lr0)
        self.total_steps = total_steps

    def current_lr(self):
        if self.total_steps is None:
            return self.state.lr0
        return cosine_lr(min(self.state.step, self.total_steps), self.total_steps, self.state.lr0)

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def step(self):
        params = {k: t.data for k, t in self.tensors.items() if t.grad is not None}
        grads = {k: self.tensors[k].grad for k in params}
        # cosine schedule hits exactly zero at the last step; keep a tiny floor
        lr = max(self.current_lr(), 1e-3 * self.state.lr0)
        adam_step(params, grads, self.state, lr=lr)
