"""Rectified-flow path, SNR/time mapping, insertion and Euler sampling.

The path runs from unit-variance complex Gaussian noise at ``t=0`` to a
clean unit-modulus chirp at ``t=1``: ``x_t = t*z1 + (1-t)*z0``. Signal to
noise power along it is ``(t/(1-t))**2``, which is what makes
:func:`snr_to_t` exact.

Functions are written against plain array arithmetic and work with numpy
arrays and torch tensors alike. ``t`` may be a scalar or carry one value
per leading batch index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np
import torch

from .exceptions import ParameterError, ShapeError

MAX_SNR_DB = 300.0

VelocityField = Callable[[Any, Any, Any], Any]


@dataclass
class FlowState:
    x_t: Any
    t: Any

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        if np.any((t < 0) | (t > 1)) or not np.all(np.isfinite(t)):
            raise ParameterError(f"t must lie in [0, 1], got {self.t!r}")


@dataclass
class FlowEndpoints:
    z0: Any
    z1: Any

    def __post_init__(self):
        if tuple(self.z0.shape) != tuple(self.z1.shape):
            raise ShapeError(f"endpoint shapes differ: {tuple(self.z0.shape)} vs {tuple(self.z1.shape)}")


def _expand(t, x):
    """Broadcast per-example times against the trailing sample axis of ``x``."""
    if np.ndim(t) == 0:
        return t
    if isinstance(x, torch.Tensor) and not isinstance(t, torch.Tensor):
        t = torch.as_tensor(np.asarray(t), dtype=x.real.dtype, device=x.device)
    return t.reshape(tuple(t.shape) + (1,) * (x.ndim - t.ndim))


def snr_to_t(snr_db):
    """Map SNR in dB to path time ``sqrt(SNR) / (1 + sqrt(SNR))``."""
    amp = np.power(10.0, np.asarray(snr_db, dtype=float) / 20.0)
    with np.errstate(invalid="ignore"):
        t = np.where(np.isposinf(amp), 1.0, amp / (1.0 + amp))
    return float(t) if t.ndim == 0 else t


def t_to_snr(t, max_snr_db: float = MAX_SNR_DB):
    """Inverse of :func:`snr_to_t`; ``t`` at or beyond float resolution of 1 clamps to ``max_snr_db``."""
    t = np.asarray(t, dtype=float)
    if np.any((t <= 0) | (t > 1)) or not np.all(np.isfinite(t)):
        raise ParameterError(f"t must lie in (0, 1), got {t!r}")
    with np.errstate(divide="ignore"):
        snr_db = 20.0 * np.log10(t / (1.0 - t))
    snr_db = np.minimum(snr_db, max_snr_db)
    return float(snr_db) if snr_db.ndim == 0 else snr_db


def sample_noise(shape, seed=None) -> np.ndarray:
    """Circular complex Gaussian with unit variance per complex sample."""
    rng = np.random.default_rng(seed)
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2.0)


def interpolate(e: FlowEndpoints, t) -> FlowState:
    tt = _expand(t, e.z1)
    return FlowState(tt * e.z1 + (1 - tt) * e.z0, t)


def velocity_target(e: FlowEndpoints):
    return e.z1 - e.z0


def insert_received(received, snr_db) -> FlowState:
    """Place a received buffer on the path at the time its SNR implies.

    With ``received = s + n`` and noise std ``sigma = (1-t)/t``, the scaled
    buffer ``t*received`` equals ``t*s + (1-t)*(n/sigma)``: a path point
    whose noise endpoint is ``n/sigma``.
    """
    t = snr_to_t(snr_db)
    return FlowState(_expand(t, received) * received, t)


def euler_sample(v: VelocityField, start: FlowState, nfe: int, cond=None):
    """Integrate ``dx/dt = v(x, t, cond)`` from ``start.t`` to 1 in ``nfe`` uniform steps."""
    if not isinstance(nfe, (int, np.integer)) or nfe < 1:
        raise ParameterError(f"nfe must be a positive integer, got {nfe!r}")
    t0 = np.asarray(start.t, dtype=float)
    if np.any(t0 >= 1):
        raise ParameterError("start.t must be < 1")
    dt = (1.0 - t0) / nfe
    x = start.x_t
    dt_x = _expand(dt if dt.ndim else float(dt), x)
    for k in range(nfe):
        t = t0 + k * dt
        x = x + dt_x * v(x, t if t.ndim else float(t), cond)
    return x


def steps_to_finish(t, step_size: float) -> int:
    """Euler steps a fixed-``step_size`` sampler needs from ``t`` to reach 1."""
    return int(math.ceil((1.0 - t) / step_size - 1e-12))


class OracleVelocity:
    """Constant straight-line field that lands every start point on ``z1``.

    For a start state ``(x, t)`` the implied noise endpoint is
    ``(x - t*z1)/(1-t)``, so the field is ``(z1 - x)/(1-t)``; it is frozen at
    construction and counts its evaluations.
    """

    def __init__(self, z1, start: FlowState):
        t = _expand(np.asarray(start.t, dtype=float), z1)
        self.velocity = (z1 - start.x_t) / (1 - t)
        self.calls = 0

    def __call__(self, x, t, cond=None):
        self.calls += 1
        return self.velocity


class CountingField:
    """Wraps a velocity field and counts evaluations."""

    def __init__(self, field: VelocityField):
        self.field = field
        self.calls = 0

    def __call__(self, x, t, cond=None):
        self.calls += 1
        return self.field(x, t, cond)
