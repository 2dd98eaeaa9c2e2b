"""Jamming generators: Gaussian baseline, FGSM/PGD agents and the adjustable generator.

Every generator returns real perturbation vectors of length ``2k`` whose l2
norm never exceeds the requested radius.  Attacks act on the *equalised*
receiver input, where a jamming vector ``dx`` arrives as ``(h_a / h) dx``.

A uniform attack interface is used by training and evaluation code::

    attack(victim, received, labels, eps, gain, rng) -> dx

``received`` is the equalised clean signal (batch, 2k), ``eps`` a per-row
radius and ``gain`` the per-row complex factor ``h_a / h``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import channel as ch
from .models import Classifier, minibatches
from .nn import tensor as T
from .nn.graph import ComputationGraph
from .nn.layers import dense, res_block
from .nn.optim import Adam
from .nn.tensor import NonFiniteError, Tensor


class ZeroGradientWarning(RuntimeWarning):
    pass


class AttackTrainingError(RuntimeError):
    pass


def _check_eps(eps):
    eps = np.asarray(eps, dtype=np.float64)
    if np.any(eps < 0):
        raise ValueError("jamming radius must be non-negative")
    return eps


def project_l2(dx, eps) -> np.ndarray:
    """Project each row of ``dx`` onto the l2 ball of radius ``eps``."""
    eps = _check_eps(eps)
    dx = np.asarray(dx, dtype=np.float64)
    norm = np.linalg.norm(dx, axis=-1, keepdims=True)
    radius = eps[..., None] if eps.ndim and dx.ndim > 1 else eps
    scale = np.where(norm > radius, radius / np.where(norm > 0, norm, 1.0), 1.0)
    return dx * scale


def gaussian_jamming(eps, k: int, rng, n=None) -> np.ndarray:
    """Complex Gaussian noise rescaled to norm exactly ``eps``."""
    eps = _check_eps(eps)
    shape = (2 * k,) if n is None else (n, 2 * k)
    g = rng.standard_normal(shape)
    norm = np.linalg.norm(g, axis=-1, keepdims=True)
    radius = eps if n is None else np.broadcast_to(eps, (n,))[:, None]
    return g * (radius / norm)


def sample_eps_db(lo, hi, rng, n):
    """Radii drawn uniformly in PSR (dB) between ``lo`` and ``hi``; zero bounds give zeros."""
    if hi < lo:
        raise ValueError("eps range reversed")
    if hi == 0:
        return np.zeros(n)
    if lo <= 0:
        return rng.uniform(0, hi, n)
    return 10.0 ** (rng.uniform(np.log10(lo), np.log10(hi), n))


# ---------------------------------------------------------------- PAM

@dataclass
class PAMUnit:
    W1: np.ndarray  # (hidden, C + 1)
    b1: np.ndarray
    W2: np.ndarray  # (C, hidden)
    b2: np.ndarray

    @property
    def channels(self):
        return self.W2.shape[0]


def pam_calibrate(f, eps: float, unit: PAMUnit, return_degenerate=False):
    """Channel-wise rescaling of features ``f`` (C, H, W) by the power-aware calibration.

    A constant calibration vector maps to all ones, which leaves ``f`` untouched.
    """
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 3 or f.shape[0] != unit.channels:
        raise ValueError(f"features {f.shape} do not match a {unit.channels}-channel unit")
    a = f.reshape(f.shape[0], -1).mean(axis=1)
    hidden = np.maximum(unit.W1 @ np.concatenate([[eps], a]) + unit.b1, 0.0)
    cal = unit.W2 @ hidden + unit.b2
    lo, hi = cal.min(), cal.max()
    degenerate = hi - lo <= 1e-12
    cal = np.ones_like(cal) if degenerate else (cal - lo) / (hi - lo)
    out = f * cal[:, None, None]
    return (out, degenerate) if return_degenerate else out


# ---------------------------------------------------------------- generator

@dataclass
class APG:
    graph: ComputationGraph
    trigger_dim: int
    k: int
    pam: bool = True


def build_apg(feature_shape, rng, trigger_dim=128, width=16, pam=True) -> APG:
    """Residual generator from a Gaussian trigger to a jamming vector of radius <= eps.

    With ``pam=False`` the radius only enters the final projection, giving a
    plain fixed-power generator.
    """
    c, h, w = feature_shape
    g = ComputationGraph({"z": (trigger_dim,), "eps": (1,)}, name="apg" if pam else "pg")
    x = dense(g, "z", trigger_dim, width * h * w, rng, name="seed")
    x = g.add("reshape", x, attrs={"shape": (width, h, w)}, id="seed.map")
    x = g.add("relu", x, id="seed.relu")
    eps = "eps" if pam else None
    x = res_block(g, x, width, width, rng, eps=eps, prefix="g1")
    x = res_block(g, x, width, width, rng, eps=eps, prefix="g2")
    x = res_block(g, x, width, c, rng, eps=eps, final_relu=False, prefix="g3")
    x = g.add("flatten", x, id="raw")
    g.add("project_l2", [x, "eps"], id="jam")
    n = c * h * w
    return APG(g, trigger_dim, n // 2, pam)


def apg_forward(apg: APG, z, eps) -> np.ndarray:
    """Jamming vector(s) for trigger(s) ``z`` at radius ``eps``; never sees the victim signal."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    eps = np.broadcast_to(_check_eps(eps), (len(z),)).reshape(-1, 1)
    out = apg.graph.run(z, eps)
    return out[0] if single else out


def apg_tensor(apg: APG, z, eps) -> Tensor:
    return apg.graph(Tensor(z), Tensor(np.reshape(eps, (-1, 1))))


def jam(received, dx, gain):
    """Equalised received signal with jamming ``dx`` arriving through ``gain``."""
    if isinstance(dx, Tensor):
        return T.add(T.as_tensor(received), T.complex_scale(dx, gain))
    return np.asarray(received) + ch.to_real(np.asarray(gain)[..., None] * ch.to_complex(dx))


def _loss_and_update(loss, opt, what):
    if not np.isfinite(loss.data):
        raise AttackTrainingError(f"{what}: non-finite loss")
    loss.backward()
    opt.step()
    return float(loss.data)


def _train_generator(apg: APG, objective, features, labels, channel, eps_range, rng,
                     epochs, batch_size, lr, log, fixed_eps=None, tag="apg"):
    """Shared loop: sample triggers, radii and channels, then descend ``objective``."""
    n = len(features)
    steps = epochs * int(np.ceil(n / batch_size))
    opt = Adam([apg.graph], lr0=lr, total_steps=steps)
    apg.graph.unfreeze()
    history = []
    try:
        for epoch in range(epochs):
            total = 0.0
            for idx in minibatches(n, batch_size, rng):
                b = len(idx)
                opt.zero_grad()
                eps = (np.full(b, fixed_eps) if fixed_eps is not None
                       else sample_eps_db(*eps_range, rng, b))
                h, h_a, var = ch.draw_channels(channel, rng, b)
                received = ch.equalize(ch.transmit(features[idx], None, (h, h_a, var), rng), h)
                z = rng.standard_normal((b, apg.trigger_dim))
                dx = apg_tensor(apg, z, eps)
                loss = objective(jam(received, dx, h_a / h), labels[idx], eps)
                total += _loss_and_update(loss, opt, tag) * b
            history.append(total / n)
            if log:
                log(f"{tag} epoch {epoch}: loss {history[-1]:.4f}")
    except NonFiniteError as exc:
        raise AttackTrainingError(f"{tag}: {exc}") from None
    finally:
        apg.graph.freeze()
    return history


def train_apg(apg: APG, victim: Classifier, features, labels, channel, eps_range, rng,
              epochs=5, batch_size=128, lr=1e-3, log=None, fixed_eps=None):
    """Maximise the victim's cross-entropy over triggers, radii, signals and channels.

    ``features`` are the attacker's surrogate clean symbols (encoder outputs).
    ``fixed_eps`` trains at a single radius, as for a plain generator.
    """
    victim.graph.freeze()

    def objective(y, c, eps):
        return T.neg(T.softmax_cross_entropy(victim.graph(y), c))

    tag = "apg" if apg.pam else "pg"
    hist = _train_generator(apg, objective, features, labels, channel, eps_range, rng,
                            epochs, batch_size, lr, log, fixed_eps=fixed_eps, tag=tag)
    return apg, hist


def train_apg_worst_case(apg: APG, classifiers, mpd, levels, features, labels, channel, rng,
                         epochs=5, batch_size=128, lr=1e-3, log=None):
    """White-box generator against the whole defender stack.

    Minimises ``-CE(sum_i w_i p_i, c) - CE(p_d, level)`` with ``w`` the detector's
    softmax output, so both the inner ensemble and the detector are attacked.
    """
    from .defense import mpd_logits_tensor  # defense imports this module

    for cls in classifiers:
        cls.graph.freeze()
    mpd.graph.freeze()

    def objective(y, c, eps):
        probs = [T.softmax(cls.graph(y)) for cls in classifiers]
        stack = T.concat([T.reshape(p, (p.shape[0], 1, p.shape[1])) for p in probs], axis=1)
        d_logits = mpd_logits_tensor(mpd, y, stack)
        w = T.softmax(d_logits)
        n, rows = w.shape
        mixed = T.tsum(T.mul(stack, T.reshape(w, (n, rows, 1))), axis=1)
        lvl = levels.level_of(eps)
        return T.neg(T.add(T.nll(mixed, c), T.softmax_cross_entropy(d_logits, lvl)))

    eps_range = (levels.boundaries[0], levels.boundaries[-1])
    hist = _train_generator(apg, objective, features, labels, channel, eps_range, rng,
                            epochs, batch_size, lr, log, tag="apg-worst")
    return apg, hist


# ---------------------------------------------------------------- gradient agents

def _input_grad(loss_fn, y, gain, dx):
    d = Tensor(dx, requires_grad=True)
    per_sample = loss_fn(jam(y, d, gain))
    T.tsum(per_sample).backward()
    return per_sample.data.copy(), d.grad if d.grad is not None else np.zeros_like(dx)


def _unit_rows(g):
    norm = np.linalg.norm(g, axis=1, keepdims=True)
    zero = norm[:, 0] <= 1e-300
    return np.where(norm > 1e-300, g / np.where(norm > 1e-300, norm, 1.0), 0.0), zero


def victim_loss(victim: Classifier):
    """Per-sample cross-entropy of ``victim`` as a function of its input tensor."""
    victim.graph.freeze()
    return lambda labels: (lambda y: T.softmax_cross_entropy(victim.graph(y), labels, reduce=None))


def fgsm(victim, received, labels, eps, gain=1.0, rng=None, loss=None) -> np.ndarray:
    """Single l2 step: the loss gradient rescaled to norm ``eps``."""
    y = np.atleast_2d(np.asarray(received, dtype=np.float64))
    eps = np.broadcast_to(_check_eps(eps), (len(y),))
    gain = np.broadcast_to(np.asarray(gain, dtype=complex), (len(y),))
    loss_fn = (loss or victim_loss(victim))(np.asarray(labels).reshape(-1))
    _, g = _input_grad(loss_fn, y, gain, np.zeros_like(y))
    u, zero = _unit_rows(g)
    if zero.any() and (eps[zero] > 0).any():
        warnings.warn(f"{int(zero.sum())} rows with zero gradient; returning zero jamming",
                      ZeroGradientWarning, stacklevel=2)
    return u * eps[:, None]


def pgd(victim, received, labels, eps, gain=1.0, rng=None, steps=10, step_size=None,
        loss=None, return_history=False):
    """l2 projected gradient ascent from zero; returns the best iterate per row.

    ``step_size`` defaults to ``eps / 4``.  With ``return_history`` the per-row
    loss at every iterate (index 0 is the unperturbed input) is also returned.
    """
    y = np.atleast_2d(np.asarray(received, dtype=np.float64))
    n = len(y)
    eps = np.broadcast_to(_check_eps(eps), (n,)).astype(np.float64)
    gain = np.broadcast_to(np.asarray(gain, dtype=complex), (n,))
    alpha = eps / 4.0 if step_size is None else np.broadcast_to(step_size, (n,))
    loss_fn = (loss or victim_loss(victim))(np.asarray(labels).reshape(-1))
    dx = np.zeros_like(y)
    best = dx.copy()
    history = []
    best_loss = None
    for it in range(steps + 1):
        cur, g = _input_grad(loss_fn, y, gain, dx)
        history.append(cur)
        if best_loss is None:
            best_loss = cur.copy()
        else:
            better = cur > best_loss
            best[better] = dx[better]
            best_loss = np.where(better, cur, best_loss)
        if it == steps:
            break
        u, zero = _unit_rows(g)
        if it == 0 and zero.any() and (eps[zero] > 0).any():
            warnings.warn(f"{int(zero.sum())} rows with zero gradient; returning zero jamming",
                          ZeroGradientWarning, stacklevel=2)
        dx = project_l2(dx + alpha[:, None] * u, eps)
    if return_history:
        return best, np.array(history).T
    return best


# ---------------------------------------------------------------- uniform adapters

def gaussian_attack(victim, received, labels, eps, gain, rng):
    return gaussian_jamming(np.asarray(eps), received.shape[-1] // 2, rng, n=len(received))


def apg_attack(apg: APG):
    def attack(victim, received, labels, eps, gain, rng):
        z = rng.standard_normal((len(received), apg.trigger_dim))
        return apg_forward(apg, z, eps)
    return attack


def pgd_attack(steps=10):
    def attack(victim, received, labels, eps, gain, rng):
        return pgd(victim, received, labels, eps, gain, steps=steps)
    return attack


def fgsm_attack(victim, received, labels, eps, gain, rng):
    return fgsm(victim, received, labels, eps, gain)


def no_attack(victim, received, labels, eps, gain, rng):
    return np.zeros_like(received)


def save_apg(apg: APG, path):
    from .nn.graph import save_graph
    return save_graph(apg.graph, path)


def load_apg(path) -> APG:
    from .nn.graph import load_graph
    g = load_graph(path)
    trigger_dim = g.input_shapes["z"][0]
    out = g.node_shapes()[g.output_id][0]
    return APG(g, trigger_dim, out // 2, any(n.op == "pam" for n in g.nodes))
