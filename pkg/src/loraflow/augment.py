"""Training-time augmentations and the 8-dim condition vector."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .exceptions import ParameterError
from .modem import SF_MAX, SF_MIN
from .spectral import StftConfig, istft, masking_config, stft

TIME, FREQUENCY = "time", "frequency"
_AXIS = {FREQUENCY: -2, TIME: -1}


@dataclass(frozen=True)
class AugmentFlags:
    fd_mask_time: bool = False
    fd_mask_freq: bool = False
    time_roll: bool = False
    inversion: bool = False
    spec_roll_time: bool = False
    spec_roll_freq: bool = False
    reserved: bool = False

    def as_signs(self) -> np.ndarray:
        return np.array([1.0 if getattr(self, f.name) else -1.0 for f in fields(self)])

    def any(self) -> bool:
        return any(getattr(self, f.name) for f in fields(self))


@dataclass(frozen=True)
class AugmentConfig:
    base_prob: float = 0.15
    max_num_masks: int = 2
    max_mask_size: int = 2
    dropout_prob: float = 0.10
    stft: Optional[StftConfig] = None  # None: pick per SF with masking_config

    def __post_init__(self):
        for name in ("base_prob", "dropout_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ParameterError(f"{name} must be in [0, 1], got {p}")
        if self.max_num_masks < 1 or self.max_mask_size < 1:
            raise ParameterError("mask count and size bounds must be >= 1")

    def stft_for(self, sf: int) -> StftConfig:
        return self.stft if self.stft is not None else masking_config(sf)


@dataclass(frozen=True)
class MaskRecord:
    dim: str
    start: int
    size: int
    value_real: float
    value_imag: float


def _sf_of(signal) -> int:
    n = np.shape(signal)[-1]
    sf = int(n).bit_length() - 1
    if n != 1 << sf:
        raise ParameterError(f"signal length {n} is not a power of two")
    return sf


def _mask_value(rng: np.random.Generator) -> float:
    return rng.uniform(0.0, 0.5) if rng.random() < 0.5 else 0.0


def _mask_spectrogram(spec, dims, cfg: AugmentConfig, rng, record):
    for dim in dims:
        axis = _AXIS[dim]
        extent = spec.shape[axis]
        for _ in range(rng.integers(1, cfg.max_num_masks, endpoint=True)):
            size = int(rng.integers(1, cfg.max_mask_size, endpoint=True))
            start = int(rng.integers(0, extent - size, endpoint=True))
            vr, vi = _mask_value(rng), _mask_value(rng)
            index = [slice(None)] * spec.ndim
            index[axis] = slice(start, start + size)
            region = spec[tuple(index)]
            spec[tuple(index)] = region.real * vr + 1j * (region.imag * vi)
            if record is not None:
                record.append(MaskRecord(dim, start, size, vr, vi))
    return spec


def frequency_domain_masking(signal, cfg: AugmentConfig = AugmentConfig(), seed=None,
                             dims=(TIME, FREQUENCY), record: Optional[list] = None):
    """Attenuate or zero a few time frames and frequency rows of the STFT.

    Per dimension, 1..max_num_masks masks each cover 1..max_mask_size bins.
    Real and imaginary parts are scaled by separate draws, each 0 with
    probability 1/2 and otherwise U(0, 0.5). ``record`` (a list) collects
    one :class:`MaskRecord` per mask.
    """
    rng = np.random.default_rng(seed)
    signal = np.asarray(signal, dtype=np.complex128)
    scfg = cfg.stft_for(_sf_of(signal))
    spec = _mask_spectrogram(stft(signal, scfg), dims, cfg, rng, record)
    flags = AugmentFlags(fd_mask_time=TIME in dims, fd_mask_freq=FREQUENCY in dims)
    return istft(spec, scfg, signal.shape[-1]), flags


def apply_augmentations(signal, label: int, cfg: AugmentConfig = AugmentConfig(), seed=None):
    """Apply each augmentation independently with probability ``cfg.base_prob``.

    Returns ``(signal, label, flags)``. Operations that turn one chirp into
    another (time rolls, spectrogram time rolls) move the label along:
    a delay of ``r`` samples maps symbol ``m`` to ``(m + r) mod N``.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(signal, dtype=np.complex128).copy()
    sf = _sf_of(x)
    n = 1 << sf
    scfg = cfg.stft_for(sf)
    fire = rng.random(6) < cfg.base_prob

    mask_dims = tuple(d for d, on in zip((TIME, FREQUENCY), fire[:2]) if on)
    if mask_dims:
        x, _ = frequency_domain_masking(x, cfg, rng, dims=mask_dims)
    if fire[2]:
        r = int(rng.integers(1, n))
        x = np.roll(x, r)
        label = (label + r) % n
    if fire[3]:
        x = -x
    if fire[4] or fire[5]:
        spec = stft(x, scfg)
        if fire[4]:
            shift = int(rng.choice((-1, 1)))
            spec = np.roll(spec, shift, axis=-1)
            label = (label + shift * scfg.hop) % n
        if fire[5]:
            spec = np.roll(spec, int(rng.choice((-1, 1))), axis=-2)
        x = istft(spec, scfg, n)

    flags = AugmentFlags(*(bool(f) for f in fire), reserved=False)
    return x, int(label), flags


def sf_code(sf: int) -> float:
    return (sf - 7) / 3.0


def build_condition(flags: AugmentFlags, sf: int, cfg: AugmentConfig = AugmentConfig(), seed=None) -> np.ndarray:
    """8-dim condition: seven +/-1 flags then the SF code; all zeros on dropout."""
    if not SF_MIN <= sf <= SF_MAX:
        raise ParameterError(f"sf {sf} outside [{SF_MIN}, {SF_MAX}]")
    rng = np.random.default_rng(seed)
    if rng.random() < cfg.dropout_prob:
        return np.zeros(8)
    return np.append(flags.as_signs(), sf_code(sf))


def null_condition(batch: Optional[int] = None) -> np.ndarray:
    """Condition used for every evaluation: all zeros."""
    return np.zeros(8) if batch is None else np.zeros((batch, 8))
