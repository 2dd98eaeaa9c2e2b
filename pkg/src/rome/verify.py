"""Linear-relaxation bound propagation and the distortion/robustness certificates built on it.

Bounds are carried forward through a :class:`ComputationGraph` as affine
functions of the flattened graph input ``F``::

    W_lo F + b_lo  <=  node(F)  <=  W_up F + b_up

Affine nodes (dense, conv, pooling, reshapes) are materialised as explicit
matrices; ReLU nodes use a triangle relaxation whose pre-activation interval
comes from concretising the parent's running bounds over the input region.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import tensor as T
from .nn.graph import OPS, ComputationGraph
from .nn.tensor import Tensor

AFFINE_OPS = {"linear", "conv2d", "avgpool", "flatten", "reshape"}
SUPPORTED_OPS = AFFINE_OPS | {"input", "relu", "add", "concat"}
CASE_TOL = 0.05


class UnsupportedOpError(ValueError):
    pass


class CaseMismatchError(ValueError):
    pass


def dual_exponent(p):
    """Hölder conjugate for p in {1, 2, inf}."""
    if p == 1:
        return np.inf
    if p == 2:
        return 2
    if p == np.inf:
        return 1
    raise ValueError(f"unsupported norm order {p!r}; use 1, 2 or inf")


def row_norms(W, q):
    return np.linalg.norm(W, ord=q, axis=-1) if W.shape[-1] else np.zeros(W.shape[:-1])


@dataclass(frozen=True)
class InputRegion:
    """The set ``{F + v + d : ||v||_2 <= center_radius, ||d||_p <= rho}``.

    With the default ``center_radius=0`` this is the l_p ball of radius ``rho``
    around ``center``; a positive value adds every centre in an l2 ball, which
    is how bounds valid for all transmit signals of a given power are obtained.
    """

    center: np.ndarray
    rho: float
    p: float = 2
    center_radius: float = 0.0

    def __post_init__(self):
        if self.rho < 0 or self.center_radius < 0:
            raise ValueError("region radii must be non-negative")
        dual_exponent(self.p)
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(-1))

    @property
    def dim(self):
        return self.center.size


@dataclass
class LinearBoundMap:
    W_up: np.ndarray
    b_up: np.ndarray
    W_lo: np.ndarray
    b_lo: np.ndarray

    @property
    def exact(self):
        return np.array_equal(self.W_up, self.W_lo) and np.array_equal(self.b_up, self.b_lo)

    def evaluate(self, F):
        """Linear upper and lower bounds at concrete input(s) ``F`` (flattened)."""
        F = np.asarray(F, dtype=np.float64)
        return F @ self.W_up.T + self.b_up, F @ self.W_lo.T + self.b_lo

    def combine(self, weights, others):
        maps = [self] + list(others)
        w = np.asarray(weights, dtype=np.float64)
        return LinearBoundMap(*(sum(wi * getattr(m, a) for wi, m in zip(w, maps))
                                for a in ("W_up", "b_up", "W_lo", "b_lo")))


@dataclass
class ReluRelaxation:
    """Per-neuron lines ``lower_slope*x + lower_icpt <= relu(x) <= upper_slope*x + upper_icpt``."""

    upper_slope: np.ndarray
    upper_icpt: np.ndarray
    lower_slope: np.ndarray
    lower_icpt: np.ndarray


@dataclass
class AffineRelaxation:
    A: np.ndarray
    c: np.ndarray


def relax_relu(lower, upper) -> ReluRelaxation:
    l = np.asarray(lower, dtype=np.float64)
    u = np.asarray(upper, dtype=np.float64)
    if np.any(l > u):
        raise ValueError("pre-activation lower bound exceeds upper bound")
    active = l >= 0
    crossing = (l < 0) & (u > 0)
    width = np.where(crossing, u - l, 1.0)
    s = np.where(crossing, u / width, 0.0)
    up_slope = np.where(active, 1.0, s)
    up_icpt = np.where(crossing, -s * l, 0.0)
    lo_slope = np.where(active, 1.0, np.where(crossing & (np.abs(u) >= np.abs(l)), 1.0, 0.0))
    return ReluRelaxation(up_slope, up_icpt, lo_slope, np.zeros_like(l))


def materialize_affine(node, in_shape):
    """Matrix ``A`` and offset ``c`` with ``node(x) = A x + c`` on flattened values."""
    d = int(np.prod(in_shape))
    probes = np.concatenate([np.zeros((1, d)), np.eye(d)]).reshape(d + 1, *in_shape)
    saved = {k: t.requires_grad for k, t in node.params.items()}
    for t in node.params.values():
        t.requires_grad = False
    try:
        out = OPS[node.op](node, [Tensor(probes)]).data.reshape(d + 1, -1)
    finally:
        for k, t in node.params.items():
            t.requires_grad = saved[k]
    c = out[0]
    return AffineRelaxation((out[1:] - c).T, c)


def relax_node(node, in_shape=None, lower=None, upper=None):
    """Linear relaxation of one node: exact for affine ops, triangle lines for ReLU."""
    if node.op == "relu":
        if lower is None or upper is None:
            raise ValueError("ReLU relaxation needs pre-activation bounds")
        return relax_relu(lower, upper)
    if node.op in AFFINE_OPS:
        return materialize_affine(node, in_shape)
    raise UnsupportedOpError(f"no linear relaxation for op {node.op!r} (node {node.id!r})")


def concretize(bmap: LinearBoundMap, region: InputRegion):
    """Largest value of the upper line and smallest of the lower line over ``region``."""
    q = dual_exponent(region.p)
    up = region.rho * row_norms(bmap.W_up, q) + bmap.W_up @ region.center + bmap.b_up
    lo = -region.rho * row_norms(bmap.W_lo, q) + bmap.W_lo @ region.center + bmap.b_lo
    if region.center_radius:
        up = up + region.center_radius * row_norms(bmap.W_up, 2)
        lo = lo - region.center_radius * row_norms(bmap.W_lo, 2)
    return up, lo


def _compose(A, c, m: LinearBoundMap) -> LinearBoundMap:
    Ap, An = np.maximum(A, 0.0), np.minimum(A, 0.0)
    return LinearBoundMap(Ap @ m.W_up + An @ m.W_lo, Ap @ m.b_up + An @ m.b_lo + c,
                          Ap @ m.W_lo + An @ m.W_up, Ap @ m.b_lo + An @ m.b_up + c)


def propagate(graph: ComputationGraph, region: InputRegion, return_all=False):
    """Forward linear bounds for every node; returns the output node's map."""
    if len(graph.input_ids) != 1:
        raise UnsupportedOpError("bound propagation needs a single-input graph")
    for n in graph.nodes:
        if n.op not in SUPPORTED_OPS:
            raise UnsupportedOpError(f"unsupported op kind {n.op!r} at node {n.id!r}")
    shapes = graph.node_shapes()
    d_in = region.dim
    if d_in != int(np.prod(graph.input_shapes[graph.input_ids[0]])):
        raise ValueError(f"region dimension {d_in} does not match graph input")
    eye = np.eye(d_in)
    maps = {graph.input_ids[0]: LinearBoundMap(eye, np.zeros(d_in), eye.copy(), np.zeros(d_in))}
    for node in graph.nodes:
        if node.op == "input":
            continue
        parents = [maps[p] for p in node.parents]
        if node.op == "add":
            m = parents[0]
            for o in parents[1:]:
                m = LinearBoundMap(m.W_up + o.W_up, m.b_up + o.b_up, m.W_lo + o.W_lo, m.b_lo + o.b_lo)
        elif node.op == "concat":
            m = LinearBoundMap(*(np.concatenate([getattr(p, a) for p in parents])
                                 for a in ("W_up", "b_up", "W_lo", "b_lo")))
        elif node.op == "relu":
            up, lo = concretize(parents[0], region)
            r = relax_relu(lo, up)
            pm = parents[0]
            m = LinearBoundMap(r.upper_slope[:, None] * pm.W_up, r.upper_slope * pm.b_up + r.upper_icpt,
                               r.lower_slope[:, None] * pm.W_lo, r.lower_slope * pm.b_lo + r.lower_icpt)
        else:
            aff = relax_node(node, shapes[node.parents[0]])
            m = _compose(aff.A, aff.c, parents[0])
        maps[node.id] = m
    return maps if return_all else maps[graph.output_id]


# ---------------------------------------------------------------- certificates

@dataclass
class DistortionReport:
    B: np.ndarray
    r: float | None
    dual_term: np.ndarray  # rho * (||W_up||_q + ||W_lo||_q), plus the centre-ball part when present
    weight_gap_term: np.ndarray
    bias_gap: np.ndarray


def distortion_from_map(bmap: LinearBoundMap, region: InputRegion) -> DistortionReport:
    q = dual_exponent(region.p)
    dual = region.rho * (row_norms(bmap.W_up, q) + row_norms(bmap.W_lo, q))
    gap = bmap.W_up - bmap.W_lo
    weight_gap = gap @ region.center
    if region.center_radius:
        weight_gap = weight_gap + region.center_radius * row_norms(gap, 2)
    bias = bmap.b_up - bmap.b_lo
    return DistortionReport(dual + weight_gap + bias, None, dual, weight_gap, bias)


def distortion_bound(graph, F, rho, p=2) -> DistortionReport:
    """Per-output gap between the certified maximum and minimum over the ball around ``F``."""
    region = InputRegion(F, rho, p)
    rep = distortion_from_map(propagate(graph, region), region)
    return rep


def distortion_bound_max_over_F(graph, kP, rho, p=2) -> np.ndarray:
    """Distortion bound valid for every transmit signal with ``||F||_2^2 <= kP``.

    Bounds are propagated over the union of all such balls, then the centre
    dependence is replaced by its worst case ``sqrt(kP) ||W_up - W_lo||_2``.
    """
    if kP < 0:
        raise ValueError("kP must be non-negative")
    d = int(np.prod(graph.input_shapes[graph.input_ids[0]]))
    region = InputRegion(np.zeros(d), rho, p, center_radius=float(np.sqrt(kP)))
    return distortion_from_map(propagate(graph, region), region).B


def robustness_from_map(bmap: LinearBoundMap, p=2) -> float:
    q = dual_exponent(p)
    a = row_norms(bmap.W_up, q) + row_norms(bmap.W_lo, q)
    g = row_norms(bmap.W_up - bmap.W_lo, 2)
    bias = bmap.b_up - bmap.b_lo
    return -float(np.linalg.norm(a, ord=p) + np.linalg.norm(g, ord=p) + np.linalg.norm(bias, ord=p))


def reference_region(graph, rho, p=2) -> InputRegion:
    d = int(np.prod(graph.input_shapes[graph.input_ids[0]]))
    return InputRegion(np.zeros(d), rho, p)


def robustness(graph, p=2, rho=1.0, region=None) -> float:
    """Negated size of the certified bounds; closer to zero is more robust.

    The relaxation depends on a region, by default the ``rho`` ball around the
    zero signal.
    """
    region = region or reference_region(graph, rho, p)
    return robustness_from_map(propagate(graph, region), p)


def ensemble_bounds(maps, p_d, region: InputRegion):
    """Detector-weighted sums of each classifier's concretised upper and lower bounds."""
    p_d = np.asarray(p_d, dtype=np.float64)
    if len(maps) != len(p_d):
        raise ValueError(f"{len(maps)} bound maps but {len(p_d)} detector weights")
    dims = {m.W_up.shape for m in maps}
    if len(dims) != 1:
        raise ValueError(f"bound maps disagree on shape: {dims}")
    bounds = [concretize(m, region) for m in maps]
    upper = sum(w * b[0] for w, b in zip(p_d, bounds))
    lower = sum(w * b[1] for w, b in zip(p_d, bounds))
    return upper, lower


def ensemble_direct(maps, p_d, region: InputRegion):
    """Distortion and robustness of the single map ``sum_i p_d[i] W_i`` (ensemble output)."""
    m = maps[0].combine(p_d, maps[1:])
    return distortion_from_map(m, region).B, robustness_from_map(m, region.p)


def _adjacent_pair(p_d):
    sums = p_d[:-1] + p_d[1:]
    k = int(np.argmax(sums))
    return k, sums[k]


def ensemble_distortion(B_list, r_list, p_d, case):
    """Upper bound on the ensemble distortion and lower bound on its robustness.

    ``confident``: one level carries (almost) all mass, so its classifier's
    values are returned.  ``confused``: two adjacent levels share the mass
    equally, giving the averages.  ``general``: two adjacent levels carry the
    mass, giving the weighted sums over those two.
    """
    p_d = np.asarray(p_d, dtype=np.float64)
    B = np.asarray(B_list, dtype=np.float64)
    r = np.asarray(r_list, dtype=np.float64)
    if not (len(B) == len(r) == len(p_d)):
        raise ValueError("B, r and p_d must have the same length")
    if case == "confident":
        k = int(np.argmax(p_d))
        if p_d[k] < 1 - CASE_TOL:
            raise CaseMismatchError(f"no dominant level in {p_d}")
        return B[k], float(r[k])
    if len(p_d) < 2:
        raise CaseMismatchError(f"case {case!r} needs at least two levels")
    k, mass = _adjacent_pair(p_d)
    if mass < 1 - CASE_TOL:
        raise CaseMismatchError(f"mass {mass:.3f} is not concentrated on two adjacent levels")
    if case == "confused":
        if abs(p_d[k] - p_d[k + 1]) > CASE_TOL:
            raise CaseMismatchError(f"levels {k},{k + 1} are not equally weighted: {p_d}")
        return (B[k] + B[k + 1]) / 2, float((r[k] + r[k + 1]) / 2)
    if case == "general":
        w = p_d[k:k + 2]
        return w[0] * B[k] + w[1] * B[k + 1], float(w[0] * r[k] + w[1] * r[k + 1])
    raise ValueError(f"unknown case {case!r}")


# ---------------------------------------------------------------- Monte Carlo checks

def sample_ball(center, rho, p, n, rng, boundary_fraction=0.5):
    """Points in the l_p ball (a share of them on its surface)."""
    center = np.asarray(center, dtype=np.float64).reshape(-1)
    d = center.size
    if p == 2:
        v = rng.standard_normal((n, d))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
    elif p == 1:
        v = rng.exponential(size=(n, d)) * rng.choice([-1.0, 1.0], size=(n, d))
        v /= np.abs(v).sum(axis=1, keepdims=True)
    elif p == np.inf:
        v = rng.uniform(-1, 1, (n, d))
        face = rng.integers(d, size=n)
        v[np.arange(n), face] = rng.choice([-1.0, 1.0], size=n)
    else:
        raise ValueError(f"unsupported norm order {p!r}")
    radius = np.where(rng.random(n) < boundary_fraction, 1.0, rng.random(n) ** (1.0 / d))
    return center + rho * radius[:, None] * v


def count_violations(graph, region: InputRegion, n=10_000, rng=None, bmap=None, atol=1e-9):
    """Output coordinates of sampled inputs that escape the linear or concretised bounds."""
    rng = np.random.default_rng(0) if rng is None else rng
    bmap = bmap or propagate(graph, region)
    F = sample_ball(region.center, region.rho, region.p, n, rng)
    shape = graph.input_shapes[graph.input_ids[0]]
    out = graph.run(F.reshape(n, *shape)).reshape(n, -1)
    lin_up, lin_lo = bmap.evaluate(F)
    up, lo = concretize(bmap, region)
    bad = (out > lin_up + atol) | (out < lin_lo - atol) | (out > up + atol) | (out < lo - atol)
    return int(bad.sum())
