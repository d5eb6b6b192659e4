"""scikit-learn style wrappers around the modem and the flow denoiser::

    demod = DechirpDemodulator(sf=7).fit()
    demod.predict(noisy_iq)

    den = FlowDenoiser(sf=5, updates=2000, snr_db=-10).fit()
    den.transform(noisy_iq)     # denoised IQ
    den.predict(noisy_iq)       # denoise, then dechirp
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .augment import null_condition
from .checkpoint import Checkpoint
from .dataset import SampleRecord, generate_synthetic
from .exceptions import ParameterError
from .flow import euler_sample, insert_received
from .model import ModelConfig
from .modem import LoRaParams, dechirp_demod, dechirp_spectrum
from .train import LossWeights, TrainConfig, from_checkpoint, run_phase
from .validation import check_iq, check_labels


class DechirpDemodulator(ClassifierMixin, BaseEstimator):
    """Standard dechirp + FFT detector. Nothing is learned; ``fit`` only validates."""

    def __init__(self, sf: int = 7, bw: float = 125_000.0, direction: str = "up"):
        self.sf = sf
        self.bw = bw
        self.direction = direction

    def fit(self, X=None, y=None):
        self.params_ = LoRaParams(self.sf, self.bw, self.direction)
        n = self.params_.n_samples
        if X is not None:
            X = check_iq(X, n)
            if y is not None:
                check_labels(y, X.shape[0], n)
        self.classes_ = np.arange(n)
        self.n_features_in_ = n
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        return dechirp_spectrum(self.params_, check_iq(X, self.n_features_in_))

    def predict(self, X):
        check_is_fitted(self, "params_")
        return dechirp_demod(self.params_, check_iq(X, self.n_features_in_))[0]

    def score(self, X, y, sample_weight=None):
        # plain accuracy; sklearn's version warns on many-class targets
        return float(np.average(self.predict(X) == np.asarray(y), weights=sample_weight))


class FlowDenoiser(TransformerMixin, ClassifierMixin, BaseEstimator):
    """Rectified-flow denoiser in front of the dechirp detector.

    ``fit`` trains on synthetic chirps for ``updates`` steps. When ``X`` and
    ``y`` are given they are treated as real captures (one or more per
    class) and a second fine-tuning phase of ``finetune_updates`` steps
    mixes them with synthetic symbols.

    ``transform`` needs the received SNR, either as ``snr_db`` here or per
    call, to place each buffer on the flow path.
    """

    def __init__(self, sf: int = 7, bw: float = 125_000.0, direction: str = "up",
                 snr_db: Optional[float] = None, nfe: int = 16,
                 width: int = 64, depth: int = 4, heads: int = 4, frontend: str = "matched",
                 updates: int = 1000, finetune_updates: int = 0, batch_size: Optional[int] = None,
                 lr: float = 1e-4, warmup: int = 500, p_real: float = 0.95,
                 lambda1: float = 0.1, lambda2: float = 0.1, lambda3: float = 0.05, alpha: float = 1e-4,
                 random_state: int = 0):
        self.sf = sf
        self.bw = bw
        self.direction = direction
        self.snr_db = snr_db
        self.nfe = nfe
        self.width = width
        self.depth = depth
        self.heads = heads
        self.frontend = frontend
        self.updates = updates
        self.finetune_updates = finetune_updates
        self.batch_size = batch_size
        self.lr = lr
        self.warmup = warmup
        self.p_real = p_real
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lambda3 = lambda3
        self.alpha = alpha
        self.random_state = random_state

    def _train_config(self, phase: str, updates: int) -> TrainConfig:
        return TrainConfig(
            sf_set=(self.sf,),
            directions=(self.direction,),
            batch_sizes={} if self.batch_size is None else {self.sf: self.batch_size},
            updates=updates,
            lr=self.lr,
            warmup=self.warmup,
            seed=self.random_state,
            phase=phase,
            p_real=self.p_real,
            bw=self.bw,
            weights=LossWeights(self.lambda1, self.lambda2, self.lambda3, self.alpha),
        )

    def fit(self, X=None, y=None):
        params = LoRaParams(self.sf, self.bw, self.direction)
        model_cfg = ModelConfig(width=self.width, depth=self.depth, heads=self.heads,
                                sf_max=self.sf, frontend=self.frontend, bw=self.bw)
        ckpt = run_phase(self._train_config("synthetic", self.updates), model_cfg)
        if X is not None:
            if y is None:
                raise ParameterError("real captures need labels for fine-tuning")
            X = check_iq(X, params.n_samples)
            y = check_labels(y, X.shape[0], params.n_samples)
            real = [SampleRecord(x / np.sqrt(np.mean(np.abs(x) ** 2)), int(m), self.sf, self.direction, "real")
                    for x, m in zip(X, y)]
            synth = generate_synthetic([self.sf], self.bw, (self.direction,))
            ckpt = run_phase(self._train_config("finetune", self.finetune_updates),
                             synth=synth, real=real, init=ckpt)
        return self._set_checkpoint(ckpt)

    def _set_checkpoint(self, ckpt: Checkpoint):
        self.checkpoint_ = ckpt
        self.model_, _ = from_checkpoint(ckpt)
        self.model_.eval()
        self.params_ = LoRaParams(self.sf, self.bw, self.direction)
        self.classes_ = np.arange(self.params_.n_samples)
        self.n_features_in_ = self.params_.n_samples
        return self

    @classmethod
    def from_checkpoint(cls, path, **kwargs) -> "FlowDenoiser":
        ckpt = Checkpoint.load(path)
        cfg = ckpt.model_config
        kwargs.setdefault("sf", cfg.sf_max)
        est = cls(width=cfg.width, depth=cfg.depth, heads=cfg.heads, frontend=cfg.frontend,
                  bw=cfg.bw, **kwargs)
        return est._set_checkpoint(ckpt)

    def transform(self, X, snr_db: Optional[float] = None, nfe: Optional[int] = None):
        check_is_fitted(self, "model_")
        X = check_iq(X, self.n_features_in_)
        snr = self.snr_db if snr_db is None else snr_db
        if snr is None:
            raise ParameterError("transform needs the received SNR (snr_db)")
        start = insert_received(X, snr)
        return euler_sample(self.model_.velocity_field(self.direction), start,
                            nfe or self.nfe, null_condition(X.shape[0]))

    def predict(self, X, snr_db: Optional[float] = None):
        return dechirp_demod(self.params_, self.transform(X, snr_db))[0]

    def score(self, X, y, sample_weight=None, snr_db: Optional[float] = None):
        pred = self.predict(X, snr_db)
        return float(np.average(pred == np.asarray(y), weights=sample_weight))
