"""Wireless channel: power normalisation, block fading, jamming, equalisation.

Complex symbol vectors are stored as real arrays whose last axis has length
``2k``: the first ``k`` entries are real parts and the last ``k`` imaginary
parts.  Leading axes are batch axes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEGENERATE_GAIN = 1e-12


@dataclass(frozen=True)
class ChannelModel:
    kind: str = "awgn"
    snr_db: float = 13.0
    rician_k: float | None = None

    def __post_init__(self):
        if self.kind not in ("awgn", "rayleigh", "rician"):
            raise ValueError(f"unknown channel kind {self.kind!r}")
        if (self.kind == "rician") != (self.rician_k is not None):
            raise ValueError("rician_k must be given exactly for Rician channels")
        if self.rician_k is not None and self.rician_k <= 0:
            raise ValueError("rician_k must be positive")

    @property
    def noise_var(self) -> float:
        """Complex noise variance for unit per-symbol signal power."""
        return 10.0 ** (-self.snr_db / 10.0)


@dataclass(frozen=True)
class ChannelDraw:
    h: complex
    h_a: complex
    noise_var: float

    def __post_init__(self):
        if self.noise_var < 0:
            raise ValueError("noise variance must be non-negative")


def to_complex(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    k = x.shape[-1] // 2
    if x.shape[-1] != 2 * k:
        raise ValueError("symbol vectors need an even number of reals")
    return x[..., :k] + 1j * x[..., k:]


def to_real(c) -> np.ndarray:
    c = np.asarray(c)
    return np.concatenate([c.real, c.imag], axis=-1)


def power_normalize(x, k: int, P: float) -> np.ndarray:
    """Scale ``x`` so that ``||x||^2 == k P`` (row-wise for batches)."""
    if k <= 0 or P <= 0:
        raise ValueError("k and P must be positive")
    x = np.asarray(x, dtype=np.float64)
    # divide by the peak first so tiny (or huge) vectors do not under/overflow the norm
    peak = np.max(np.abs(x), axis=-1, keepdims=True)
    if np.any(peak == 0):
        raise ValueError("cannot power-normalise a zero vector")
    unit = x / peak
    return unit * (np.sqrt(k * P) / np.linalg.norm(unit, axis=-1, keepdims=True))


def _cn(rng, size):
    return (rng.standard_normal(size) + 1j * rng.standard_normal(size)) / np.sqrt(2.0)


def fading_gain(model: ChannelModel, rng, size=None):
    """Fading coefficient(s) with unit mean power."""
    if model.kind == "awgn":
        return np.ones(size, dtype=complex) if size is not None else 1.0 + 0j
    g = _cn(rng, size if size is not None else ())
    if model.kind == "rician":
        K = model.rician_k
        g = np.sqrt(K / (K + 1.0)) + np.sqrt(1.0 / (K + 1.0)) * g
    return g if size is not None else complex(g)


def draw_channel(model: ChannelModel, rng) -> ChannelDraw:
    """One block-fading realisation: legitimate gain, jamming gain, noise variance."""
    h = fading_gain(model, rng)
    h_a = fading_gain(model, rng)
    return ChannelDraw(complex(h), complex(h_a), model.noise_var)


def draw_channels(model: ChannelModel, rng, n: int):
    """Vectorised draws for ``n`` images: arrays (h, h_a) and the noise variance."""
    return fading_gain(model, rng, n), fading_gain(model, rng, n), model.noise_var


def transmit(x, dx, draw, rng) -> np.ndarray:
    """``h x + h_a dx + n`` with ``n ~ CN(0, sigma^2 I)``; ``dx=None`` means no jamming.

    ``draw`` is a :class:`ChannelDraw` or a tuple ``(h, h_a, noise_var)`` with
    per-row gains.
    """
    x = np.asarray(x, dtype=np.float64)
    if isinstance(draw, ChannelDraw):
        h, h_a, var = draw.h, draw.h_a, draw.noise_var
    else:
        h, h_a, var = draw
    h = np.asarray(h, dtype=complex)[..., None] if np.ndim(h) else h
    h_a = np.asarray(h_a, dtype=complex)[..., None] if np.ndim(h_a) else h_a
    y = h * to_complex(x)
    if dx is not None:
        dx = np.asarray(dx, dtype=np.float64)
        if dx.shape[-1] != x.shape[-1]:
            raise ValueError(f"jamming length {dx.shape[-1]} != signal length {x.shape[-1]}")
        y = y + h_a * to_complex(dx)
    if var > 0:
        y = y + np.sqrt(var) * _cn(rng, y.shape)
    return to_real(y)


def equalize(y, h) -> np.ndarray:
    """Undo the legitimate channel gain: ``y / h`` per complex symbol."""
    h_arr = np.asarray(h, dtype=complex)
    if np.any(np.abs(h_arr) < DEGENERATE_GAIN):
        raise ZeroDivisionError("degenerate channel: |h| below 1e-12")
    if h_arr.ndim:
        h_arr = h_arr[..., None]
    return to_real(to_complex(y) / h_arr)


def psr_to_epsilon(psr_db, P: float = 1.0):
    """Jamming l2 radius for a perturbation-to-signal ratio in dB."""
    if P <= 0:
        raise ValueError("P must be positive")
    return np.sqrt(P * 10.0 ** (np.asarray(psr_db, dtype=np.float64) / 10.0))


def epsilon_to_psr(eps, P: float = 1.0):
    return 10.0 * np.log10(np.asarray(eps, dtype=np.float64) ** 2 / P)


def noise_radius(noise_var: float, k: int, delta: float = 1e-3, rng=None, draws: int = 100_000) -> float:
    """Empirical (1 - delta) quantile of ``||N||_2`` for ``N ~ CN(0, noise_var I_k)``."""
    if noise_var < 0:
        raise ValueError("noise variance must be non-negative")
    if not 0 < delta <= 0.5:
        raise ValueError("delta must lie in (0, 0.5]")
    if noise_var == 0:
        return 0.0
    rng = np.random.default_rng(0) if rng is None else rng
    # |CN(0, s)|^2 summed over k symbols is (s/2) * chi^2 with 2k dof
    sq = rng.chisquare(2 * k, size=draws) * (noise_var / 2.0)
    return float(np.quantile(np.sqrt(sq), 1.0 - delta))
