"""Loss assembly, optimizer and the two training phases."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentConfig, apply_augmentations, build_condition
from .checkpoint import Checkpoint
from .dataset import MixtureSampler, SampleRecord
from .exceptions import NumericError, ParameterError, ShapeError
from .flow import FlowEndpoints, FlowState
from .model import ModelConfig, ModelOutput, VelocityNet
from .modem import LoRaParams, modulate_symbol
from .spectral import StftConfig, default_scales, fft_loss, multiscale_stft_loss

FULL_BATCH_SIZES = {7: 2048, 8: 1024, 9: 512, 10: 256}
DESK_SCALE_DIVISOR = 32


def desk_batch_size(sf: int) -> int:
    """Full-scale per-SF batch size divided by 32, extrapolated by halving per SF step."""
    full = FULL_BATCH_SIZES.get(sf, 2048 * 2.0 ** (7 - sf))
    return max(1, int(full) // DESK_SCALE_DIVISOR)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 0.1
    lambda3: float = 0.05
    alpha: float = 1e-4

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ParameterError(f"{k} must be >= 0")


@dataclass
class LossBreakdown:
    recon: torch.Tensor
    fft: torch.Tensor
    stft: torch.Tensor
    cls: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(v.detach()) for k, v in vars(self).items()}


@dataclass
class TrainConfig:
    sf_set: tuple[int, ...] = (7,)
    directions: tuple[str, ...] = ("up", "down")
    batch_sizes: dict[int, int] = field(default_factory=dict)  # empty: desk_batch_size
    updates: int = 1000
    lr: float = 1e-4
    warmup: int = 500
    betas: tuple[float, float] = (0.9, 0.99)
    eps: float = 1e-8
    seed: int = 0
    phase: str = "synthetic"
    p_real: float = 0.95
    checkpoint_every: int = 0
    bw: float = 125_000.0
    augment: AugmentConfig = AugmentConfig()
    weights: LossWeights = LossWeights()

    def __post_init__(self):
        if self.phase not in ("synthetic", "finetune"):
            raise ParameterError(f"phase must be synthetic or finetune, got {self.phase!r}")
        if any(b <= 0 for b in self.batch_sizes.values()):
            raise ParameterError("batch sizes must be positive")
        if self.updates < 0 or self.lr < 0 or self.warmup < 0:
            raise ParameterError("updates, lr and warmup must be >= 0")

    def batch_size(self, sf: int) -> int:
        return self.batch_sizes.get(sf, desk_batch_size(sf))

    def lr_at(self, step: int) -> float:
        if self.warmup == 0:
            return self.lr
        return self.lr * min(1.0, (step + 1) / self.warmup)


def classification_loss(logits: torch.Tensor, label, alpha: float = 1e-4) -> torch.Tensor:
    """Cross-entropy plus ``alpha * logsumexp(logits)**2`` (z-loss), batch-averaged."""
    logits = torch.as_tensor(logits)
    label = torch.as_tensor(label, device=logits.device)
    batched = logits.ndim == 2
    if not batched:
        logits, label = logits[None], label.reshape(1)
    if torch.any((label < 0) | (label >= logits.shape[-1])):
        raise ParameterError(f"label out of range for {logits.shape[-1]} classes")
    lse = torch.logsumexp(logits, dim=-1)
    ce = lse - logits.gather(-1, label.long()[:, None])[:, 0]
    return (ce + alpha * lse.pow(2)).mean()


def total_loss(state: FlowState, endpoints: FlowEndpoints, out: ModelOutput, label,
               params: LoRaParams, w: LossWeights = LossWeights(),
               scales: Optional[Sequence[StftConfig]] = None) -> LossBreakdown:
    """Weighted sum of flow-matching, FFT, multi-scale STFT and classification losses.

    The spectral terms compare the one-step clean estimate
    ``x_t + (1 - t) * velocity`` against ``z1``.
    """
    z0, z1 = torch.as_tensor(endpoints.z0), torch.as_tensor(endpoints.z1)
    v = out.velocity
    if v.shape != z1.shape:
        raise ShapeError(f"velocity shape {tuple(v.shape)} != target shape {tuple(z1.shape)}")
    recon = (v - (z1 - z0)).abs().pow(2).mean()
    t = torch.as_tensor(state.t, dtype=v.real.dtype)
    if t.ndim:
        t = t.reshape(*t.shape, *([1] * (v.ndim - t.ndim)))
    x_hat = torch.as_tensor(state.x_t) + (1 - t) * v
    fft = fft_loss(x_hat, z1, params)
    stft = multiscale_stft_loss(x_hat, z1, scales or default_scales(params.sf))
    if out.logits is not None:
        cls = classification_loss(out.logits, label, w.alpha)
    else:
        cls = torch.zeros((), dtype=recon.dtype)
    total = recon + w.lambda1 * fft + w.lambda2 * stft + w.lambda3 * cls
    return LossBreakdown(recon, fft, stft, cls, total)


@dataclass
class Batch:
    z1: torch.Tensor          # (B, N) complex clean targets
    labels: torch.Tensor      # (B,)
    cond: torch.Tensor        # (B, 8)
    sf: int
    direction: str
    n_real: int = 0


def _step_rng(seed: int, step: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, step, stream]))


def assemble_batch(records: Sequence[SampleRecord], cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    """Augment records and build condition vectors; all records share (sf, direction)."""
    sf, direction = records[0].sf, records[0].direction
    z1, labels, conds = [], [], []
    for r in records:
        x, label, flags = apply_augmentations(r.iq, r.label, cfg.augment, rng)
        z1.append(x)
        labels.append(label)
        conds.append(build_condition(flags, sf, cfg.augment, rng))
    return Batch(
        torch.as_tensor(np.stack(z1), dtype=torch.complex64),
        torch.as_tensor(labels),
        torch.as_tensor(np.stack(conds), dtype=torch.float32),
        sf,
        direction,
        sum(r.source == "real" for r in records),
    )


def synthetic_batch(cfg: TrainConfig, step: int) -> Batch:
    """Uniformly drawn symbols for this step's (sf, direction)."""
    rng = _step_rng(cfg.seed, step, 0)
    sf = cfg.sf_set[step % len(cfg.sf_set)]
    direction = cfg.directions[rng.integers(len(cfg.directions))]
    params = LoRaParams(sf, cfg.bw, direction)
    labels = rng.integers(0, params.n_samples, cfg.batch_size(sf))
    chirps = modulate_symbol(params, labels)
    records = [SampleRecord(chirps[i], int(m), sf, direction) for i, m in enumerate(labels)]
    return assemble_batch(records, cfg, rng)


def mixture_batch(cfg: TrainConfig, step: int, real, synth) -> Batch:
    """Fine-tuning batch from the real/synthetic mixture for this step's (sf, direction)."""
    rng = _step_rng(cfg.seed, step, 0)
    sf = cfg.sf_set[step % len(cfg.sf_set)]
    configs = sorted({(r.sf, r.direction) for r in synth if r.sf == sf})
    if not configs:
        raise ParameterError(f"no synthetic records for sf={sf}")
    sf, direction = configs[rng.integers(len(configs))]
    sampler = MixtureSampler(
        [r for r in real if (r.sf, r.direction) == (sf, direction)],
        [r for r in synth if (r.sf, r.direction) == (sf, direction)],
        cfg.p_real,
        np.random.SeedSequence([cfg.seed, step, 1]),
    )
    records = [next(sampler) for _ in range(cfg.batch_size(sf))]
    return assemble_batch(records, cfg, rng)


def make_optimizer(model: VelocityNet, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr_at(0), betas=cfg.betas, eps=cfg.eps)


def train_step(batch: Batch, model: VelocityNet, optimizer: torch.optim.Optimizer,
               cfg: TrainConfig, step: int) -> LossBreakdown:
    """One flow-matching update with ``t ~ U(0, 1)`` per example."""
    gen = torch.Generator().manual_seed(int(np.random.SeedSequence([cfg.seed, step, 2]).generate_state(1)[0]))
    b, n = batch.z1.shape
    t = torch.rand(b, generator=gen)
    z0 = torch.complex(torch.randn(b, n, generator=gen), torch.randn(b, n, generator=gen)) / math.sqrt(2.0)
    endpoints = FlowEndpoints(z0, batch.z1)
    x_t = t[:, None] * batch.z1 + (1 - t[:, None]) * z0
    state = FlowState(x_t, t)

    model.train()
    out = model(x_t, t, batch.cond, train_mode=True, direction=batch.direction)
    params = LoRaParams(batch.sf, cfg.bw, batch.direction)
    losses = total_loss(state, endpoints, out, batch.labels, params, cfg.weights)
    if not torch.isfinite(losses.total):
        raise NumericError(f"non-finite loss at step {step}: {losses.as_floats()}")
    for group in optimizer.param_groups:
        group["lr"] = cfg.lr_at(step)
    optimizer.zero_grad(set_to_none=False)
    losses.total.backward()
    optimizer.step()
    return losses


def init_model(model_cfg: ModelConfig, seed: int = 0) -> VelocityNet:
    torch.manual_seed(seed)
    return VelocityNet(model_cfg)


def to_checkpoint(model: VelocityNet, optimizer: Optional[torch.optim.Optimizer], step: int, seed: int) -> Checkpoint:
    params = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
    state = {}
    if optimizer is not None:
        names = {id(p): k for k, p in model.named_parameters()}
        for p, s in optimizer.state.items():
            if s:
                state[names[id(p)]] = {
                    "exp_avg": s["exp_avg"].detach().numpy().copy(),
                    "exp_avg_sq": s["exp_avg_sq"].detach().numpy().copy(),
                    "step": int(s["step"]),
                }
    return Checkpoint(model.config, params, step, seed, state)


def from_checkpoint(ckpt: Checkpoint, cfg: Optional[TrainConfig] = None):
    """Rebuild model (and optimizer, when ``cfg`` is given) from a checkpoint."""
    model = VelocityNet(ckpt.model_config, with_classifier=any(k.startswith("classifier.") for k in ckpt.params))
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in ckpt.params.items()})
    if cfg is None:
        return model, None
    optimizer = make_optimizer(model, cfg)
    params = dict(model.named_parameters())
    for name, s in ckpt.optimizer.items():
        optimizer.state[params[name]] = {
            "step": torch.tensor(float(s["step"])),
            "exp_avg": torch.from_numpy(s["exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(s["exp_avg_sq"].copy()),
        }
    return model, optimizer


def run_phase(cfg: TrainConfig, model_cfg: ModelConfig = ModelConfig(), *,
              synth: Optional[Sequence[SampleRecord]] = None,
              real: Optional[Sequence[SampleRecord]] = None,
              init: Optional[Checkpoint] = None,
              out_path=None, log_path=None,
              callback: Optional[Callable[[int, LossBreakdown, Batch], None]] = None) -> Checkpoint:
    """Run ``cfg.updates`` optimizer steps of one training phase.

    The synthetic phase draws uniform symbols on the fly; the fine-tuning
    phase needs a starting checkpoint plus ``real`` and ``synth`` records,
    mixed per :class:`MixtureSampler`. Training resumes from ``init.step``
    and, since every step's randomness is derived from ``(seed, step)``,
    an interrupted run continues on the same trajectory.
    """
    if cfg.phase == "finetune":
        if init is None:
            raise ParameterError("finetune phase needs a checkpoint from the synthetic phase")
        if not real:
            raise ParameterError("finetune phase needs real records")
        if not synth:
            raise ParameterError("finetune phase needs synthetic records")
    if init is not None:
        model, optimizer = from_checkpoint(init, cfg)
        start = init.step
    else:
        model = init_model(model_cfg, cfg.seed)
        optimizer = make_optimizer(model, cfg)
        start = 0
    log = open(log_path, "a") if log_path else None
    try:
        for step in range(start, start + cfg.updates):
            if cfg.phase == "finetune":
                batch = mixture_batch(cfg, step, real, synth)
            else:
                batch = synthetic_batch(cfg, step)
            losses = train_step(batch, model, optimizer, cfg, step)
            if log is not None:
                log.write(json.dumps({"step": step, **losses.as_floats(), "lr": cfg.lr_at(step)}) + "\n")
            if callback is not None:
                callback(step, losses, batch)
            if out_path and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                to_checkpoint(model, optimizer, step + 1, cfg.seed).save(out_path)
    finally:
        if log is not None:
            log.close()
    ckpt = to_checkpoint(model, optimizer, start + cfg.updates, cfg.seed)
    if out_path:
        ckpt.save(out_path)
    return ckpt
