"""Defender stack: adversarial training, the classifier ladder, the level detector, ensembling."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import channel as ch
from .attacks import jam, pgd, sample_eps_db
from .models import Classifier, SemanticEncoder, minibatches
from .nn import losses
from .nn import tensor as T
from .nn.graph import ComputationGraph, load_graph, save_graph
from .nn.layers import dense, res_block
from .nn.optim import Adam
from .nn.tensor import NonFiniteError, Tensor

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 3


class TrainingDivergedError(RuntimeError):
    pass


# ---------------------------------------------------------------- power levels

@dataclass(frozen=True)
class PowerLevelSet:
    """Level 0 is "no attack"; level i >= 1 covers radii in [eps_{i-1}, eps_i]."""

    boundaries: tuple

    def __post_init__(self):
        b = np.asarray(self.boundaries, dtype=np.float64)
        if b.ndim != 1 or len(b) < 2:
            raise ValueError("need at least two boundaries")
        if np.any(np.diff(b) <= 0) or b[0] <= 0:
            raise ValueError(f"boundaries must be positive and strictly increasing: {b}")
        object.__setattr__(self, "boundaries", tuple(float(v) for v in b))

    @classmethod
    def from_psr(cls, psr_db, P=1.0):
        return cls(tuple(ch.psr_to_epsilon(psr_db, P)))

    @property
    def N(self):
        return len(self.boundaries)

    def psr_db(self, P=1.0):
        return [float(v) for v in ch.epsilon_to_psr(self.boundaries, P)]

    def interval(self, level):
        if not 0 <= level < self.N:
            raise IndexError(f"level {level} outside 0..{self.N - 1}")
        if level == 0:
            return 0.0, 0.0
        return self.boundaries[level - 1], self.boundaries[level]

    def level_of(self, eps):
        """Level index for each radius; shared boundaries go to the lower level."""
        eps = np.asarray(eps, dtype=np.float64)
        idx = np.searchsorted(np.asarray(self.boundaries), eps, side="left")
        return np.where(eps <= 0, 0, np.clip(idx, 1, self.N - 1)).astype(np.int64)

    def sample(self, level, rng, n):
        return sample_eps_db(*self.interval(level), rng, n)


# ---------------------------------------------------------------- prediction map

@dataclass
class PredictionMap:
    """Stacked class-probability rows of the base classifiers, one row per classifier."""

    P: np.ndarray  # (N, C) or (batch, N, C)

    def __post_init__(self):
        P = np.asarray(self.P, dtype=np.float64)
        if P.ndim not in (2, 3):
            raise ValueError("prediction map must be (N, C) or (batch, N, C)")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=-1) - 1.0)) > 1e-9:
            raise ValueError("prediction map rows must be probability vectors")
        self.P = P

    @classmethod
    def from_logits(cls, logits):
        return cls(losses.softmax(np.asarray(logits, dtype=np.float64), axis=-1))

    @property
    def N(self):
        return self.P.shape[-2]


def prediction_map(classifiers, received) -> PredictionMap:
    """Batched prediction map (batch, N, C) for equalised signals."""
    logits = np.stack([c.graph.run(np.atleast_2d(received)) for c in classifiers], axis=1)
    return PredictionMap.from_logits(logits)


def lppg(P) -> np.ndarray:
    """Per row: sum, l2 norm, max and min, concatenated over rows."""
    P = P.P if isinstance(P, PredictionMap) else np.asarray(P, dtype=np.float64)
    feats = np.stack([P.sum(-1), np.sqrt((P ** 2).sum(-1)), P.max(-1), P.min(-1)], axis=-1)
    return feats.reshape(*P.shape[:-2], -1)


# ---------------------------------------------------------------- adversarial training

def _check_divergence(history, tag):
    if len(history) <= DIVERGENCE_PATIENCE:
        return
    ref = history[0]
    recent = history[-DIVERGENCE_PATIENCE:]
    if ref > 0 and all(v > DIVERGENCE_FACTOR * ref for v in recent):
        raise TrainingDivergedError(
            f"{tag}: loss above {DIVERGENCE_FACTOR:g}x initial ({ref:.4g}) for "
            f"{DIVERGENCE_PATIENCE} epochs: {recent}")


def adversarial_train(cls: Classifier, attack, eps_interval, features, labels, channel, rng,
                      epochs=5, batch_size=128, lr=1e-3, log=None, tag="at"):
    """Min-max training of ``cls`` on frozen-encoder symbols.

    Each batch draws radii in ``eps_interval`` (uniform in dB), crafts jamming
    with ``attack`` against the current classifier and descends cross-entropy.
    """
    lo, hi = eps_interval
    n = len(features)
    steps = epochs * int(np.ceil(n / batch_size))
    opt = Adam([cls.graph], lr0=lr, total_steps=steps)
    history = []
    try:
        for epoch in range(epochs):
            total = 0.0
            for idx in minibatches(n, batch_size, rng):
                b = len(idx)
                h, h_a, var = ch.draw_channels(channel, rng, b)
                y = ch.equalize(ch.transmit(features[idx], None, (h, h_a, var), rng), h)
                gain = h_a / h
                if hi > 0:
                    eps = sample_eps_db(lo, hi, rng, b)
                    y = jam(y, attack(cls, y, labels[idx], eps, gain, rng), gain)
                cls.graph.unfreeze()
                opt.zero_grad()
                loss = T.softmax_cross_entropy(cls.graph(Tensor(y)), labels[idx])
                loss.backward()
                opt.step()
                total += float(loss.data) * b
            history.append(total / n)
            if log:
                log(f"{tag} epoch {epoch}: loss {history[-1]:.4f}")
            _check_divergence(history, tag)
    except NonFiniteError as exc:
        raise TrainingDivergedError(f"{tag}: {exc}") from None
    finally:
        cls.graph.freeze()
    return cls


def clone_classifier(cls: Classifier) -> Classifier:
    g = cls.graph
    copy = ComputationGraph(g.input_shapes, name=g.name)
    for node in g.nodes:
        if node.op != "input":
            copy.add(node.op, node.parents, {k: t.data.copy() for k, t in node.params.items()},
                     node.attrs, id=node.id)
    copy.set_output(g.output_id)
    return Classifier(copy, cls.classes, cls.feature_shape)


def acquire_base_classifiers(g0: Classifier, attack, levels: PowerLevelSet, features, labels,
                             channel, rng, epochs=5, chain=True, log=None, **train_kw):
    """Ladder ``[G_0, ..., G_{N-1}]``; G_i is trained on radii in level i's interval.

    With ``chain`` each G_i starts from G_{i-1}, otherwise from G_0.
    """
    ladder = [g0]
    for i in range(1, levels.N):
        start = ladder[-1] if chain else g0
        gi = clone_classifier(start)
        gi.graph.name = f"G{i}"
        adversarial_train(gi, attack, levels.interval(i), features, labels, channel, rng,
                          epochs=epochs, log=log, tag=f"G{i}", **train_kw)
        ladder.append(gi)
    return ladder


# ---------------------------------------------------------------- detector

@dataclass
class MPD:
    graph: ComputationGraph
    N: int
    classes: int


def build_mpd(feature_shape, N, classes, rng, width=16, hidden=64, zero_head=False) -> MPD:
    """Two-branch level detector: a residual stack on the signal, pooled statistics on P."""
    c, h, w = feature_shape
    g = ComputationGraph({"y": (c * h * w,), "pmap": (N, classes)}, name="mpd")
    x = g.add("reshape", "y", attrs={"shape": tuple(feature_shape)}, id="sig.map")
    x = res_block(g, x, c, width, rng, prefix="s1")
    for i in range(2, 5):
        x = res_block(g, x, width, width, rng, prefix=f"s{i}")
    pool = 2 if h % 2 == 0 else 1
    x = g.add("avgpool", x, attrs={"kernel": pool}, id="sig.pool")
    x = g.add("flatten", x, id="sig.flat")
    sig_dim = width * (h // pool) * (w // pool)
    stats = g.add("lppg", "pmap", id="map.lppg")
    raw = g.add("flatten", "pmap", id="map.flat")
    m = g.add("concat", [stats, raw], id="map.cat")
    m = dense(g, m, 4 * N + N * classes, hidden, rng, name="map.fc")
    m = g.add("relu", m, id="map.relu")
    f = g.add("concat", [x, m], id="fuse.cat")
    f = dense(g, f, sig_dim + hidden, hidden, rng, name="fuse.fc")
    f = g.add("relu", f, id="fuse.relu")
    dense(g, f, hidden, N, rng, name="head", zero=zero_head)
    return MPD(g, N, classes)


def mpd_logits_tensor(mpd: MPD, y, stack) -> Tensor:
    return mpd.graph(T.as_tensor(y), T.as_tensor(stack))


def mpd_logits(mpd: MPD, y, P) -> np.ndarray:
    P = P.P if isinstance(P, PredictionMap) else np.asarray(P)
    return mpd.graph.run(np.atleast_2d(y), P.reshape(-1, mpd.N, mpd.classes))


def mpd_forward(mpd: MPD, y, P) -> np.ndarray:
    """Level probabilities ``p_d`` for one signal or a batch."""
    single = np.ndim(y) == 1
    p = losses.softmax(mpd_logits(mpd, y, P), axis=-1)
    return p[0] if single else p


@dataclass
class LevelLog:
    """Per-batch record of the sampled level and the radii actually used."""

    entries: list = field(default_factory=list)

    def add(self, level, eps):
        self.entries.append((int(level), float(np.min(eps)), float(np.max(eps))))

    def consistent(self, levels: PowerLevelSet) -> bool:
        for lvl, lo, hi in self.entries:
            a, b = levels.interval(lvl)
            if lo < a - 1e-12 or hi > b + 1e-12:
                return False
        return True


def _mpd_attack_loss(mpd, classifiers, lv):
    """Per-sample detector loss as a function of the received tensor, for PGD on the MPD."""
    def make(labels):
        def fn(y):
            probs = [T.softmax(c.graph(y)) for c in classifiers]
            stack = T.concat([T.reshape(p, (p.shape[0], 1, p.shape[1])) for p in probs], axis=1)
            return T.softmax_cross_entropy(mpd.graph(y, stack), lv, reduce=None)
        return fn
    return make


def train_mpd(mpd: MPD, classifiers, attack, levels: PowerLevelSet, features, labels, channel,
              rng, epochs=5, batch_size=128, lr=1e-3, adversarial=0.0, per_sample=False,
              log=None):
    """Detector training with one sampled level per mini-batch.

    ``attack`` crafts the level's jamming against ``classifiers[0]``.  With
    ``adversarial`` > 0 that fraction of attacked batches instead uses PGD
    against the detector itself at the same radii.  ``per_sample`` draws a
    level for every sample instead of every batch.  Returns the MPD and the
    level log.
    """
    if levels.N != mpd.N or len(classifiers) != mpd.N:
        raise ValueError("detector, ladder and level set disagree on N")
    for c in classifiers:
        c.graph.freeze()
    n = len(features)
    steps = epochs * int(np.ceil(n / batch_size))
    opt = Adam([mpd.graph], lr0=lr, total_steps=steps)
    record = LevelLog()
    history = []
    try:
        for epoch in range(epochs):
            total = 0.0
            for idx in minibatches(n, batch_size, rng):
                b = len(idx)
                lv = (rng.integers(levels.N, size=b) if per_sample
                      else np.full(b, rng.integers(levels.N)))
                h, h_a, var = ch.draw_channels(channel, rng, b)
                y = ch.equalize(ch.transmit(features[idx], None, (h, h_a, var), rng), h)
                gain = h_a / h
                eps = np.zeros(b)
                for level in np.unique(lv):
                    rows = lv == level
                    eps[rows] = levels.sample(int(level), rng, int(rows.sum()))
                    record.add(level, eps[rows])
                if eps.any():
                    if adversarial and rng.random() < adversarial:
                        mpd.graph.freeze()
                        dx = pgd(None, y, labels[idx], eps, gain, steps=5,
                                 loss=_mpd_attack_loss(mpd, classifiers, lv))
                    else:
                        dx = attack(classifiers[0], y, labels[idx], eps, gain, rng)
                    y = jam(y, dx, gain)
                P = prediction_map(classifiers, y).P
                mpd.graph.unfreeze()
                opt.zero_grad()
                loss = T.softmax_cross_entropy(mpd.graph(Tensor(y), Tensor(P)), lv)
                loss.backward()
                opt.step()
                total += float(loss.data) * b
            history.append(total / n)
            if log:
                log(f"mpd epoch {epoch}: loss {history[-1]:.4f}")
            _check_divergence(history, "mpd")
    except NonFiniteError as exc:
        raise TrainingDivergedError(f"mpd: {exc}") from None
    finally:
        mpd.graph.freeze()
    return mpd, record


# ---------------------------------------------------------------- ensembling

def ensemble(P, detector_scores):
    """Weights ``softmax(detector_scores)`` applied to the rows of ``P``.

    Works on a single (N, C) map with a length-N score vector, or batched.
    Returns ``(p_E, argmax)``.
    """
    P = P.P if isinstance(P, PredictionMap) else np.asarray(P, dtype=np.float64)
    s = np.asarray(detector_scores, dtype=np.float64)
    if s.shape[-1] != P.shape[-2] or s.shape[:-1] != P.shape[:-2]:
        raise ValueError(f"detector output {s.shape} does not match prediction map {P.shape}")
    w = losses.softmax(s, axis=-1)
    p_e = np.einsum("...n,...nc->...c", w, P)
    return p_e, np.argmax(p_e, axis=-1)


@dataclass
class RomeStack:
    encoder: SemanticEncoder
    classifiers: list
    mpd: MPD
    levels: PowerLevelSet

    def predict(self, received):
        """Ensemble probabilities, decisions, level probabilities and the prediction map.

        The detector's logits go into :func:`ensemble`, so its softmax weights
        equal the detector's level probabilities.
        """
        P = prediction_map(self.classifiers, received)
        d_logits = mpd_logits(self.mpd, received, P)
        p_e, c = ensemble(P, d_logits)
        return p_e, c, losses.softmax(d_logits, axis=-1), P


def evaluate_accuracy(cls_or_stack, attack, eps, features, labels, channel, rng, victim=None,
                      batch_size=500):
    """Accuracy under ``attack`` at a single radius (0 means clean)."""
    correct = 0
    for i in range(0, len(features), batch_size):
        x, c = features[i:i + batch_size], labels[i:i + batch_size]
        b = len(x)
        h, h_a, var = ch.draw_channels(channel, rng, b)
        y = ch.equalize(ch.transmit(x, None, (h, h_a, var), rng), h)
        if eps > 0:
            gain = h_a / h
            v = victim if victim is not None else cls_or_stack
            y = jam(y, attack(v, y, c, np.full(b, float(eps)), gain, rng), gain)
        if isinstance(cls_or_stack, RomeStack):
            pred = cls_or_stack.predict(y)[1]
        else:
            pred = np.argmax(cls_or_stack.graph.run(y), axis=1)
        correct += int((pred == c).sum())
    return correct / len(features)


def tailor_levels(classifiers, attack, eps_grid, features, labels, channel, rng, fallback):
    """Level boundaries placed where the best-performing classifier changes.

    Returns ``(levels, accuracy_matrix, used_fallback)``; falls back to
    ``fallback`` whenever the winners do not form an increasing ladder.
    """
    eps_grid = np.asarray(eps_grid, dtype=np.float64)
    acc = np.array([[evaluate_accuracy(c, attack, e, features, labels, channel, rng)
                     for e in eps_grid] for c in classifiers])
    N = len(classifiers)
    best = np.maximum.accumulate(acc.argmax(axis=0))
    bounds = []
    for i in range(N - 1):
        # crossover from "best <= i" to "best > i", placed at the geometric midpoint
        above = np.nonzero(best > i)[0]
        if len(above) == 0 or above[0] == 0:
            return fallback, acc, True
        j = above[0]
        bounds.append(float(np.sqrt(eps_grid[j - 1] * eps_grid[j])))
    bounds.append(float(eps_grid[-1]))
    if np.any(np.diff(bounds) <= 0):
        return fallback, acc, True
    return PowerLevelSet(tuple(bounds)), acc, False


# ---------------------------------------------------------------- bundle checkpoint
#
# A bundle directory holds manifest.json plus one graph checkpoint per network:
#   {"encoder": {"file", "k", "P", "feature_shape"},
#    "classifiers": [{"file", "classes"}, ...],
#    "mpd": {"file", "N", "classes"},
#    "levels": {"boundaries": [...]}}

def save_bundle(stack: RomeStack, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_graph(stack.encoder.graph, d / "encoder.npz")
    for i, c in enumerate(stack.classifiers):
        save_graph(c.graph, d / f"classifier_{i}.npz")
    save_graph(stack.mpd.graph, d / "mpd.npz")
    manifest = {
        "encoder": {"file": "encoder.npz", "k": stack.encoder.k, "P": stack.encoder.P,
                    "feature_shape": list(stack.encoder.feature_shape)},
        "classifiers": [{"file": f"classifier_{i}.npz", "classes": c.classes}
                        for i, c in enumerate(stack.classifiers)],
        "mpd": {"file": "mpd.npz", "N": stack.mpd.N, "classes": stack.mpd.classes},
        "levels": {"boundaries": list(stack.levels.boundaries)},
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return d


def load_bundle(directory) -> RomeStack:
    d = Path(directory)
    m = json.loads((d / "manifest.json").read_text())
    e = m["encoder"]
    fs = tuple(e["feature_shape"])
    enc = SemanticEncoder(load_graph(d / e["file"]), e["k"], e["P"], fs)
    classifiers = [Classifier(load_graph(d / c["file"]), c["classes"], fs) for c in m["classifiers"]]
    mpd = MPD(load_graph(d / m["mpd"]["file"]), m["mpd"]["N"], m["mpd"]["classes"])
    return RomeStack(enc, classifiers, mpd, PowerLevelSet(tuple(m["levels"]["boundaries"])))
