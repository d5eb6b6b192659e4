"""STFT machinery and the frequency-domain training losses.

Everything here runs on torch tensors so the losses are differentiable;
:func:`stft` and :func:`istft` also accept numpy arrays and hand numpy
back.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import ParameterError, ShapeError
from .modem import LoRaParams, base_chirp

HUBER_DELTA = 1.0


@dataclass(frozen=True)
class StftConfig:
    window_size: int
    hop: int

    def __post_init__(self):
        w, h = self.window_size, self.hop
        if w < 2 or w & (w - 1):
            raise ParameterError(f"window_size must be a power of two >= 2, got {w}")
        if h < 1 or h > w:
            raise ParameterError(f"hop must be in [1, window_size], got {h}")
        # Periodic Hann sums to a constant for hops of window/k, k >= 2.
        if w % h or w // h < 2:
            raise ParameterError(f"(window={w}, hop={h}) does not satisfy COLA for a Hann window")

    def n_frames(self, length: int) -> int:
        return length // self.hop + 1


def default_scales(sf: int) -> tuple[StftConfig, ...]:
    """Three resolutions per symbol: windows 2**(sf-2), 2**(sf-1), 2**sf with 75% overlap."""
    return tuple(StftConfig(1 << k, 1 << (k - 2)) for k in (sf - 2, sf - 1, sf))


def masking_config(sf: int) -> StftConfig:
    window = 64 if sf == 7 else min(64, 1 << (sf - 1))
    return StftConfig(window, window // 4)


def _window(cfg: StftConfig, dtype, device) -> torch.Tensor:
    return torch.hann_window(cfg.window_size, periodic=True, dtype=dtype, device=device)


def _to_complex_tensor(x) -> tuple[torch.Tensor, bool]:
    if isinstance(x, torch.Tensor):
        return (x if x.is_complex() else x.to(torch.complex64)), False
    arr = np.asarray(x)
    if not np.iscomplexobj(arr):
        arr = arr.astype(np.complex128)
    return torch.from_numpy(np.ascontiguousarray(arr)), True


def stft(signal, cfg: StftConfig):
    """Complex STFT, Hann window, centered frames with reflection padding.

    Output axes are ``(..., frequency_bin, frame)`` with all ``window_size``
    bins kept (the input is complex, so the spectrum is two-sided).
    """
    x, from_numpy = _to_complex_tensor(signal)
    if x.shape[-1] < cfg.window_size:
        raise ShapeError(f"signal length {x.shape[-1]} shorter than window {cfg.window_size}")
    if cfg.window_size // 2 >= x.shape[-1]:
        raise ShapeError("reflection padding needs window_size/2 < signal length")
    lead = x.shape[:-1]
    spec = torch.stft(
        x.reshape(-1, x.shape[-1]),
        n_fft=cfg.window_size,
        hop_length=cfg.hop,
        window=_window(cfg, x.real.dtype, x.device),
        center=True,
        pad_mode="reflect",
        onesided=False,
        return_complex=True,
    )
    spec = spec.reshape(*lead, *spec.shape[-2:])
    return spec.numpy() if from_numpy else spec


def istft(spec, cfg: StftConfig, length: int | None = None):
    """Overlap-add inverse of :func:`stft`."""
    s, from_numpy = _to_complex_tensor(spec)
    if s.ndim < 2 or s.shape[-2] != cfg.window_size:
        raise ShapeError(f"expected {cfg.window_size} frequency rows, got shape {tuple(s.shape)}")
    n_frames = s.shape[-1]
    if length is None:
        length = (n_frames - 1) * cfg.hop
    elif cfg.n_frames(length) != n_frames:
        raise ShapeError(f"{n_frames} frames inconsistent with length {length} at hop {cfg.hop}")
    lead = s.shape[:-2]
    out = torch.istft(
        s.reshape(-1, *s.shape[-2:]),
        n_fft=cfg.window_size,
        hop_length=cfg.hop,
        window=_window(cfg, s.real.dtype, s.device),
        center=True,
        onesided=False,
        return_complex=True,
        length=length,
    )
    out = out.reshape(*lead, length)
    return out.numpy() if from_numpy else out


def _real_view(z: torch.Tensor) -> torch.Tensor:
    return torch.view_as_real(z.resolve_conj()) if z.is_complex() else z


def huber(a, b, delta: float = HUBER_DELTA) -> torch.Tensor:
    """Mean elementwise Huber loss; complex inputs are compared on real/imag parts."""
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if delta <= 0:
        raise ParameterError("delta must be positive")
    return F.huber_loss(_real_view(a), _real_view(b), reduction="mean", delta=delta)


def _dechirp_reference(params: LoRaParams, like: torch.Tensor) -> torch.Tensor:
    ref = np.conj(base_chirp(params))
    return torch.from_numpy(ref).to(dtype=like.dtype, device=like.device)


def fft_loss(pred, target, params: LoRaParams, delta: float = HUBER_DELTA) -> torch.Tensor:
    """Huber distance between the dechirped spectra of ``pred`` and ``target``."""
    pred, _ = _to_complex_tensor(pred)
    target, _ = _to_complex_tensor(target)
    if pred.shape != target.shape or pred.shape[-1] != params.n_samples:
        raise ShapeError(f"need equal shapes ending in {params.n_samples}, got {tuple(pred.shape)} / {tuple(target.shape)}")
    ref = _dechirp_reference(params, pred)
    return huber(torch.fft.fft(pred * ref, dim=-1), torch.fft.fft(target * ref, dim=-1), delta)


def multiscale_stft_loss(pred, target, scales: Iterable[StftConfig], delta: float = HUBER_DELTA) -> torch.Tensor:
    scales: Sequence[StftConfig] = tuple(scales)
    if not scales:
        raise ParameterError("scale set must be nonempty")
    pred, _ = _to_complex_tensor(pred)
    target, _ = _to_complex_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return sum(huber(stft(pred, cfg), stft(target, cfg), delta) for cfg in scales)
