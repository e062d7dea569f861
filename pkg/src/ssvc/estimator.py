"""scikit-learn style wrapper around the trainer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .augment import MaskSpec
from .features import Dataset, SynthCorpus, SynthConfig
from .losses import LossWeights
from .metrics import mcd_batch
from .networks import NetConfig
from .trainer import TrainConfig, convert_array, evaluate_pairs, mean_mcd, train


class StarGANConverter(TransformerMixin, BaseEstimator):
    """Many-to-many feature-map converter trained with a contrastive discriminator.

    ``fit(X, y)`` takes stacked feature maps ``X`` of shape
    (n_samples, n_mcep, n_frames) and 1-based speaker codes ``y``.
    ``transform(X, source=..., target=...)`` converts maps between speakers;
    ``target`` defaults to the ``target_domain`` parameter.

    Per-speaker reference maps for early stopping and scoring default to the
    per-speaker mean of the training maps.
    """

    def __init__(
        self,
        epochs=300,
        batch_size=8,
        steps_per_epoch=4,
        lr_g=1e-3,
        lr_d=5e-4,
        lambda1=0.01,
        lambda2=0.01,
        tau=0.5,
        early_stop_patience=50,
        d_steps_per_g_step=1,
        time_mask_width=None,
        freq_mask_width=None,
        target_domain=1,
        channels=(16, 32, 64),
        d_e=64,
        dtype="float32",
        random_state=7,
    ):
        self.epochs = epochs
        self.batch_size = batch_size
        self.steps_per_epoch = steps_per_epoch
        self.lr_g = lr_g
        self.lr_d = lr_d
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.tau = tau
        self.early_stop_patience = early_stop_patience
        self.d_steps_per_g_step = d_steps_per_g_step
        self.time_mask_width = time_mask_width
        self.freq_mask_width = freq_mask_width
        self.target_domain = target_domain
        self.channels = channels
        self.d_e = d_e
        self.dtype = dtype
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            steps_per_epoch=self.steps_per_epoch,
            lr_g=self.lr_g,
            lr_d=self.lr_d,
            weights=LossWeights(self.lambda1, self.lambda2),
            tau=self.tau,
            early_stop_patience=min(self.early_stop_patience, self.epochs),
            seed=self.random_state,
            d_steps_per_g_step=self.d_steps_per_g_step,
            t1=MaskSpec("time", self.time_mask_width),
            t2=MaskSpec("frequency", self.freq_mask_width),
            net=NetConfig(channels=tuple(self.channels), d_e=self.d_e, d_p=self.d_e, dtype=self.dtype),
        )

    def _check_X(self, X) -> np.ndarray:
        X = check_array(X, allow_nd=True, dtype=np.float32)
        if X.ndim != 3:
            raise ValueError(f"expected X of shape (n_samples, n_mcep, n_frames), got {X.shape}")
        return X

    def fit(self, X, y, prototypes=None, X_val=None, y_val=None):
        X = self._check_X(X)
        y = np.asarray(y, dtype=np.int64)
        if y.shape != (len(X),):
            raise ValueError("y must hold one speaker code per sample")
        n_domains = int(y.max())
        train_set = Dataset(X, y, n_domains)
        if prototypes is None:
            prototypes = np.stack([X[y == d].mean(axis=0) for d in range(1, n_domains + 1)])
        prototypes = np.asarray(prototypes, dtype=np.float32)
        held = train_set if X_val is None else Dataset(self._check_X(X_val), y_val, n_domains)
        corpus = SynthCorpus(train_set, held, prototypes, SynthConfig(n_domains=n_domains, n_mcep=X.shape[1], n_frames=X.shape[2]))
        result = train(corpus, self._config())
        self.generator_ = result.state.G
        self.discriminator_ = result.state.D
        self.prototypes_ = prototypes
        self.n_domains_ = n_domains
        self.history_ = result.logs
        self.stability_ = result.stability
        return self

    def transform(self, X, source=None, target=None):
        check_is_fitted(self, "generator_")
        X = self._check_X(X)
        if source is None:
            raise ValueError("transform needs the source speaker code(s)")
        target = self.target_domain if target is None else target
        return convert_array(self.generator_, X, source, target)

    def score(self, X, y, target=None):
        """Negative mean MCD (dB) of converted maps against the target reference map."""
        check_is_fitted(self, "generator_")
        X = self._check_X(X)
        y = np.asarray(y, dtype=np.int64)
        if target is None:
            return -mean_mcd(evaluate_pairs(self.generator_, Dataset(X, y, self.n_domains_), self.prototypes_))
        out = self.transform(X, source=y, target=target)
        return -float(np.mean(mcd_batch(out, self.prototypes_[target - 1])))
