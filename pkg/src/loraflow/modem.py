"""LoRa chirp spread spectrum baseband.

Signals are critically sampled (fs = bw), so one symbol spans exactly
``N = 2**sf`` complex samples. Symbol ``m`` is the base chirp delayed by
``m`` samples with wrap-around. All functions accept either a single
buffer of shape ``(N,)`` or a batch of shape ``(..., N)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Literal

import numpy as np

from .exceptions import ParameterError, ShapeError

Direction = Literal["up", "down"]

SF_MIN, SF_MAX = 5, 12


@dataclass(frozen=True)
class LoRaParams:
    sf: int = 7
    bw: float = 125_000.0
    direction: Direction = "up"

    def __post_init__(self):
        if not isinstance(self.sf, (int, np.integer)) or not SF_MIN <= self.sf <= SF_MAX:
            raise ParameterError(f"sf must be an integer in [{SF_MIN}, {SF_MAX}], got {self.sf!r}")
        if not np.isfinite(self.bw) or self.bw <= 0:
            raise ParameterError(f"bw must be positive, got {self.bw!r}")
        if self.direction not in ("up", "down"):
            raise ParameterError(f"direction must be 'up' or 'down', got {self.direction!r}")

    @property
    def n_samples(self) -> int:
        return 1 << int(self.sf)

    @property
    def symbol_duration(self) -> float:
        return self.n_samples / self.bw

    @property
    def chirp_rate(self) -> float:
        """Frequency sweep rate in Hz/s (bw**2 / 2**sf)."""
        return self.bw**2 / self.n_samples

    @property
    def sign(self) -> int:
        return 1 if self.direction == "up" else -1


@lru_cache(maxsize=64)
def _base_chirp_cached(sf: int, bw: float, direction: str) -> np.ndarray:
    params = LoRaParams(sf, bw, direction)
    n = np.arange(params.n_samples)
    t = -params.symbol_duration / 2 + n / params.bw
    cycles = -(params.bw / 2) * t + (params.chirp_rate / 2) * t**2
    # Integer cycle counts wrap to zero phase exactly; keep only the fraction.
    cycles = np.mod(cycles, 1.0)
    chirp = np.exp(2j * np.pi * params.sign * cycles)
    chirp.setflags(write=False)
    return chirp


def base_chirp(params: LoRaParams) -> np.ndarray:
    """Unit-modulus base chirp of length ``2**sf``."""
    return _base_chirp_cached(int(params.sf), float(params.bw), params.direction).copy()


def _check_symbol(params: LoRaParams, m) -> np.ndarray:
    m = np.asarray(m)
    if not np.issubdtype(m.dtype, np.integer):
        if np.any(m != np.round(m)):
            raise ParameterError(f"symbol index must be integral, got {m!r}")
        m = m.astype(np.int64)
    if np.any((m < 0) | (m >= params.n_samples)):
        raise ParameterError(f"symbol index out of range [0, {params.n_samples}): {m!r}")
    return m


def modulate_symbol(params: LoRaParams, m) -> np.ndarray:
    """Chirp for symbol ``m`` (scalar or integer array) as a cyclic delay of the base chirp."""
    m = _check_symbol(params, m)
    chirp = _base_chirp_cached(int(params.sf), float(params.bw), params.direction)
    n = np.arange(params.n_samples)
    return chirp[(n - m[..., None]) % params.n_samples] if m.ndim else np.roll(chirp, int(m))


def add_awgn(signal: np.ndarray, snr_db: float, seed=None) -> np.ndarray:
    """Add circular complex Gaussian noise with per-sample variance ``10**(-snr_db/10)``.

    ``snr_db=inf`` returns an unchanged copy. ``seed`` may be an int or a
    ``numpy.random.Generator``.
    """
    signal = np.asarray(signal, dtype=np.complex128)
    if np.isposinf(snr_db):
        return signal.copy()
    rng = np.random.default_rng(seed)
    sigma = 10.0 ** (-snr_db / 20.0)
    noise = rng.standard_normal(signal.shape) + 1j * rng.standard_normal(signal.shape)
    return signal + (sigma / np.sqrt(2.0)) * noise


def _check_length(params: LoRaParams, signal: np.ndarray) -> np.ndarray:
    signal = np.asarray(signal)
    if signal.ndim == 0 or signal.shape[-1] != params.n_samples:
        raise ShapeError(
            f"expected trailing length {params.n_samples} for sf={params.sf}, got shape {signal.shape}"
        )
    return signal


def dechirp_spectrum(params: LoRaParams, signal: np.ndarray) -> np.ndarray:
    """Magnitude of the dechirped FFT, reindexed so entry ``m`` scores symbol ``m``."""
    signal = _check_length(params, signal)
    ref = _base_chirp_cached(int(params.sf), float(params.bw), params.direction)
    spectrum = np.abs(np.fft.fft(signal * np.conj(ref), axis=-1))
    n = params.n_samples
    # A delay of m samples lands in bin -m for up-chirps and +m for down-chirps.
    bins = (-params.sign * np.arange(n)) % n
    return spectrum[..., bins]


def dechirp_demod(params: LoRaParams, signal: np.ndarray):
    """Standard dechirp + FFT argmax detector.

    Returns ``(symbol, peak_magnitude)``; arrays for batched input. Ties go
    to the smallest symbol index.
    """
    scores = dechirp_spectrum(params, signal)
    symbol = np.argmax(scores, axis=-1)
    peak = np.take_along_axis(scores, symbol[..., None], axis=-1)[..., 0]
    if np.ndim(symbol) == 0:
        return int(symbol), float(peak)
    return symbol, peak


def correlation_oracle_demod(params: LoRaParams, signal: np.ndarray):
    """Exhaustive matched filter: argmax over m of |<signal, modulate_symbol(m)>|.

    Slow on purpose; used as an independent check on :func:`dechirp_demod`.
    """
    signal = _check_length(params, signal)
    scores = np.stack(
        [np.abs(np.sum(signal * np.conj(modulate_symbol(params, m)), axis=-1))
         for m in range(params.n_samples)],
        axis=-1,
    )
    symbol = np.argmax(scores, axis=-1)
    return int(symbol) if np.ndim(symbol) == 0 else symbol


def symbol_error_rate(truth, pred) -> float:
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    if truth.shape != pred.shape:
        raise ShapeError(f"length mismatch: {truth.shape} vs {pred.shape}")
    if truth.size == 0:
        return 0.0
    return float(np.mean(truth != pred))
