"""Conditional velocity-field network.

A small hybrid of convolutional down/up stages around a stack of DiT-style
transformer blocks:

    I/Q (2 ch) -> conv -> 2x downsample -> conv feedforward
               -> transformer blocks (QK-norm + RoPE attention, AdaRMSNorm)
               -> conv feedforward -> 2x upsample (+ skip) -> RMSNorm -> linear -> I/Q

A mapping network turns the flow time ``t`` and the 8-dim augmentation
condition into ``c_g``, which modulates every AdaRMSNorm. An auxiliary
classifier reads the mean-pooled transformer output during training only.

Symbols of different SFs share one network: inputs shorter than
``2**sf_max`` are zero padded and the padded tokens are masked out of
attention and pooling.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import NumericError, ParameterError, ShapeError
from .modem import LoRaParams, base_chirp, modulate_symbol

COND_DIM = 8


@dataclass(frozen=True)
class ModelConfig:
    width: int = 64
    depth: int = 4
    heads: int = 4
    downsample_factor: int = 2
    fourier_dim: int = 8
    cond_dim: int = COND_DIM
    sf_max: int = 7
    ff_mult: int = 3
    kernel_size: int = 3
    rope_base: float = 10000.0
    # "matched": run the network on the phase-aligned dechirp spectrum (a fixed
    # unitary change of basis); "raw": run it on time-domain I/Q directly.
    frontend: str = "matched"
    bw: float = 125_000.0

    def __post_init__(self):
        if self.width % self.heads:
            raise ParameterError(f"width {self.width} not divisible by heads {self.heads}")
        if (self.width // self.heads) % 2:
            raise ParameterError("head dimension must be even for RoPE")
        if self.downsample_factor != 2:
            raise ParameterError("only 2x temporal downsampling is supported")
        if self.cond_dim != COND_DIM:
            raise ParameterError(f"cond_dim must be {COND_DIM}")
        if self.frontend not in ("matched", "raw"):
            raise ParameterError(f"unknown frontend {self.frontend!r}")
        LoRaParams(self.sf_max, self.bw)

    @property
    def classes(self) -> int:
        return 1 << self.sf_max

    @property
    def max_length(self) -> int:
        return 1 << self.sf_max

    def to_dict(self) -> dict:
        return asdict(self)


class ModelOutput(NamedTuple):
    velocity: torch.Tensor
    logits: Optional[torch.Tensor]


def fourier_features(t, n: int, frequencies=None):
    """``[sin(2*pi*f*t), cos(2*pi*f*t)]`` for ``n`` log-spaced frequencies in [1, 1000]."""
    if n < 1:
        raise ParameterError("need at least one frequency")
    if frequencies is None:
        frequencies = torch.logspace(0.0, 3.0, n, dtype=torch.float64)
    t = torch.as_tensor(t, dtype=frequencies.dtype)
    angle = 2 * math.pi * t[..., None] * frequencies
    return torch.cat([angle.sin(), angle.cos()], dim=-1)


def rms_norm(x: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + eps)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, learnable: bool = True):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim)) if learnable else None

    def forward(self, x):
        x = rms_norm(x)
        return x if self.gain is None else x * self.gain


class AdaRMSNorm(nn.Module):
    """RMSNorm whose per-channel gain is ``1 + Linear(c_g)``.

    The projection starts at zero, so a fresh layer is a plain RMSNorm. A
    side effect: the mapping network gets no gradient until the first
    update has made some projection nonzero.
    """

    def __init__(self, dim: int, cond_width: int):
        super().__init__()
        self.modulation = nn.Linear(cond_width, dim)
        nn.init.zeros_(self.modulation.weight)
        nn.init.zeros_(self.modulation.bias)

    def forward(self, x, cond):
        # x: (B, L, D), cond: (B, C)
        return rms_norm(x) * (1 + self.modulation(cond)[:, None, :])


class MappingNetwork(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.register_buffer(
            "frequencies", torch.logspace(0.0, 3.0, cfg.fourier_dim), persistent=False
        )
        self.time_proj = nn.Linear(2 * cfg.fourier_dim, cfg.width)
        self.cond_proj = nn.Linear(cfg.cond_dim, cfg.width, bias=False)
        self.hidden = nn.Linear(cfg.width, cfg.width)
        self.norm = RMSNorm(cfg.width, learnable=False)

    def forward(self, t, c):
        feats = fourier_features(t, self.frequencies.numel(), self.frequencies)
        h = self.time_proj(feats) + self.cond_proj(c)
        return self.norm(self.hidden(F.gelu(h)))


def rope(x: torch.Tensor, base: float) -> torch.Tensor:
    """Rotary position encoding over axis -2 of ``(B, H, L, D)``."""
    half = x.shape[-1] // 2
    inv_freq = base ** (-torch.arange(half, dtype=x.dtype, device=x.device) / half)
    angle = torch.arange(x.shape[-2], dtype=x.dtype, device=x.device)[:, None] * inv_freq
    cos, sin = angle.cos(), angle.sin()
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


class SelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.heads = cfg.heads
        self.rope_base = cfg.rope_base
        head_dim = cfg.width // cfg.heads
        self.qkv = nn.Linear(cfg.width, 3 * cfg.width)
        self.q_norm = nn.Parameter(torch.ones(head_dim))
        self.k_norm = nn.Parameter(torch.ones(head_dim))
        # Learned per-head temperature; normalized q/k need more than 1/sqrt(d).
        self.log_scale = nn.Parameter(torch.full((cfg.heads, 1, 1), math.log(10.0)))
        self.out = nn.Linear(cfg.width, cfg.width)

    def forward(self, x, key_mask=None):
        b, length, d = x.shape
        q, k, v = self.qkv(x).view(b, length, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q = rope(rms_norm(q) * self.q_norm, self.rope_base)
        k = rope(rms_norm(k) * self.k_norm, self.rope_base)
        scores = (q @ k.transpose(-1, -2)) * (self.log_scale.exp() / q.shape[-1])
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        h = scores.softmax(-1) @ v
        return self.out(h.transpose(1, 2).reshape(b, length, d))


class FeedForward(nn.Module):
    def __init__(self, width: int, mult: int):
        super().__init__()
        self.up = nn.Linear(width, mult * width)
        self.down = nn.Linear(mult * width, width)

    def forward(self, x):
        return self.down(F.gelu(self.up(x)))


class TransformerBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn_norm = AdaRMSNorm(cfg.width, cfg.width)
        self.attn = SelfAttention(cfg)
        self.ff_norm = AdaRMSNorm(cfg.width, cfg.width)
        self.ff = FeedForward(cfg.width, cfg.ff_mult)

    def forward(self, x, cond, key_mask=None):
        x = x + self.attn(self.attn_norm(x, cond), key_mask)
        return x + self.ff(self.ff_norm(x, cond))


class ConvFeedForward(nn.Module):
    """Feedforward block with 1D convolutions in place of the linear layers."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        pad = cfg.kernel_size // 2
        self.norm = AdaRMSNorm(cfg.width, cfg.width)
        self.up = nn.Conv1d(cfg.width, cfg.ff_mult * cfg.width, cfg.kernel_size, padding=pad)
        self.down = nn.Conv1d(cfg.ff_mult * cfg.width, cfg.width, cfg.kernel_size, padding=pad)

    def forward(self, x, cond, mask=None):
        # x: (B, L, D); convolutions run channels-first.
        h = self.norm(x, cond).transpose(1, 2)
        h = self.down(F.gelu(self.up(h))).transpose(1, 2)
        if mask is not None:
            h = h * mask[..., None]
        return x + h


class Frontend(nn.Module):
    """Fixed change of basis between time-domain I/Q and the network's input domain.

    The matched basis sends a buffer to its normalized correlations with
    every symbol chirp, ``y[m] = <x, s_m> / sqrt(N)``, computed as dechirp,
    FFT and a per-bin phase rotation. The chirps are orthogonal with norm
    ``sqrt(N)``, so the map is unitary and :meth:`inverse` is exact.
    """

    def __init__(self, kind: str, bw: float):
        super().__init__()
        self.kind = kind
        self.bw = bw
        self._tables: dict = {}

    def _table(self, sf: int, direction: str, dtype, device):
        key = (sf, direction, dtype, device)
        if key not in self._tables:
            params = LoRaParams(sf, self.bw, direction)
            n = params.n_samples
            ref = base_chirp(params)
            bins = (-params.sign * np.arange(n)) % n
            dechirped = np.fft.fft(modulate_symbol(params, np.arange(n)) * np.conj(ref), axis=-1)
            phase = dechirped[np.arange(n), bins] / n
            self._tables[key] = (
                torch.as_tensor(ref, dtype=dtype, device=device),
                torch.as_tensor(bins, device=device),
                torch.as_tensor(np.argsort(bins), device=device),
                torch.as_tensor(phase, dtype=dtype, device=device),
            )
        return self._tables[key]

    def forward(self, x, sf: int, direction: str):
        if self.kind == "raw":
            return x
        ref, bins, _, phase = self._table(sf, direction, x.dtype, x.device)
        spectrum = torch.fft.fft(x * ref.conj(), dim=-1, norm="ortho")
        return spectrum[..., bins] * phase.conj()

    def inverse(self, y, sf: int, direction: str):
        if self.kind == "raw":
            return y
        ref, _, unbins, phase = self._table(sf, direction, y.dtype, y.device)
        spectrum = (y * phase)[..., unbins]
        return torch.fft.ifft(spectrum, dim=-1, norm="ortho") * ref


class VelocityNet(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), with_classifier: bool = True):
        super().__init__()
        self.config = cfg
        w = cfg.width
        self.frontend = Frontend(cfg.frontend, cfg.bw)
        self.mapping = MappingNetwork(cfg)
        self.in_conv = nn.Conv1d(2, w, cfg.kernel_size, padding=cfg.kernel_size // 2)
        self.downsample = nn.Conv1d(w, w, 2, stride=2)
        self.in_ff = ConvFeedForward(cfg)
        self.blocks = nn.ModuleList(TransformerBlock(cfg) for _ in range(cfg.depth))
        self.out_ff = ConvFeedForward(cfg)
        self.upsample = nn.ConvTranspose1d(w, w, 2, stride=2)
        self.out_norm = RMSNorm(w)
        self.out_proj = nn.Linear(w, 2)
        if with_classifier:
            self.classifier = nn.Sequential(RMSNorm(w), nn.Linear(w, cfg.classes))
        else:
            self.classifier = None

    def condition(self, t, c):
        return self.mapping(t, c)

    def forward(self, x_t, t, c=None, train_mode: bool = False, direction: str = "up") -> ModelOutput:
        """Predict the flow velocity for complex ``x_t`` of shape ``(B, 2**sf)`` or ``(2**sf,)``."""
        cfg = self.config
        if not torch.is_tensor(x_t) or not x_t.is_complex():
            raise ShapeError("x_t must be a complex tensor")
        squeeze = x_t.ndim == 1
        if squeeze:
            x_t = x_t[None]
        b, n = x_t.shape
        sf = n.bit_length() - 1
        if n != 1 << sf or not 5 <= sf <= cfg.sf_max:
            raise ShapeError(f"input length {n} is not 2**sf for sf in [5, {cfg.sf_max}]")
        real_dtype = x_t.real.dtype
        t = torch.as_tensor(t, dtype=real_dtype, device=x_t.device).expand(b)
        if c is None:
            c = torch.zeros(b, cfg.cond_dim, dtype=real_dtype, device=x_t.device)
        c = torch.as_tensor(c, dtype=real_dtype, device=x_t.device).expand(b, cfg.cond_dim)

        cond = self.condition(t, c)
        y = self.frontend(x_t, sf, direction)
        h = torch.stack([y.real, y.imag], dim=1)
        pad = cfg.max_length - n
        if pad:
            h = F.pad(h, (0, pad))
        tokens = cfg.max_length // 2
        token_mask = torch.arange(tokens, device=h.device) < n // 2
        key_mask = None if not pad else token_mask.expand(b, tokens)
        sample_mask = (torch.arange(cfg.max_length, device=h.device) < n).to(real_dtype)

        h = self.in_conv(h) * sample_mask
        skip = h
        h = self.downsample(h).transpose(1, 2)
        valid = token_mask.to(real_dtype).expand(b, tokens)
        h = self.in_ff(h, cond, valid if pad else None)
        for block in self.blocks:
            h = block(h, cond, key_mask)

        logits = None
        if train_mode and self.classifier is not None:
            pooled = (h * valid[..., None]).sum(1) / valid.sum(1, keepdim=True)
            logits = self.classifier(pooled)

        h = self.out_ff(h, cond, valid if pad else None)
        h = self.upsample(h.transpose(1, 2)) + skip
        out = self.out_proj(self.out_norm(h.transpose(1, 2)))[:, :n]
        velocity = self.frontend.inverse(torch.complex(out[..., 0], out[..., 1]), sf, direction)
        if not torch.isfinite(torch.view_as_real(velocity)).all():
            raise NumericError("non-finite activations in velocity output")
        if squeeze:
            velocity = velocity[0]
            logits = None if logits is None else logits[0]
        return ModelOutput(velocity, logits)

    def velocity_field(self, direction: str = "up"):
        """Numpy-facing ``v(x, t, cond)`` for :func:`loraflow.flow.euler_sample`."""
        return ModelVelocity(self, direction)


class ModelVelocity:
    """Adapter: numpy complex buffers in and out, inference mode, counted calls."""

    def __init__(self, model: VelocityNet, direction: str = "up"):
        self.model = model
        self.direction = direction
        self.calls = 0

    def __call__(self, x, t, cond=None):
        self.calls += 1
        dtype = next(self.model.parameters()).dtype
        cdtype = torch.complex128 if dtype == torch.float64 else torch.complex64
        xt = torch.as_tensor(np.asarray(x), dtype=cdtype)
        tt = torch.as_tensor(np.asarray(t, dtype=float), dtype=dtype)
        cc = None if cond is None else torch.as_tensor(np.asarray(cond, dtype=float), dtype=dtype)
        with torch.no_grad():
            out = self.model(xt, tt, cc, train_mode=False, direction=self.direction)
        return out.velocity.numpy().astype(np.complex128)


def gradients(loss: torch.Tensor, model: nn.Module) -> dict[str, torch.Tensor]:
    """Reverse-mode gradient of ``loss`` for every trainable parameter, keyed by name."""
    if not torch.is_tensor(loss) or loss.grad_fn is None and not loss.requires_grad:
        raise RuntimeError("loss has no recorded graph; run forward with gradients enabled")
    named = [(k, p) for k, p in model.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True, retain_graph=True)
    return {
        k: torch.zeros_like(p) if g is None else g
        for (k, p), g in zip(named, grads)
    }
