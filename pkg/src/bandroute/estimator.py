"""scikit-learn style wrappers around the network and the band decomposition."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin

from .exceptions import ConfigError, DataError, InfiniteSNRError
from .metrics import snr_imp
from .model import Ablation, BandRouteNet, ModelConfig, count_params, routing_heatmap
from .spectral import DEFAULT_BANDS, BandSpec, band_decompose, build_masks
from .tensor import no_grad
from .train import TrainConfig, fit as fit_model
from .validation import check_fitted_model, check_paired_segments, check_segments

__all__ = ["BandRouteDenoiser", "BandDecomposer"]


def _band_spec(sample_rate_hz, band_edges, band_names, T) -> BandSpec:
    if band_edges is None:
        spec = BandSpec(sample_rate_hz=float(sample_rate_hz), bands=DEFAULT_BANDS, segment_length=T)
    else:
        spec = BandSpec.even(list(band_edges), band_names, float(sample_rate_hz), T)
    spec.validate()
    return spec


def _scale(X: np.ndarray) -> np.ndarray:
    sigma = X.std(axis=1, keepdims=True)
    if np.any(sigma == 0):
        raise DataError("cannot standardize a constant segment")
    return sigma


class BandRouteDenoiser(RegressorMixin, BaseEstimator):
    """Single-channel EEG artifact remover.

    ``fit(X, y)`` takes noisy segments ``X`` and their clean references ``y``,
    both shaped (n_segments, T). ``predict`` returns denoised segments in the
    input units. ``score`` is the mean SNR improvement in dB.

    Parameters
    ----------
    channels, heads, encoder_stages, blocks_per_stage : int
        Network width and depth.
    sample_rate_hz : float
    band_edges : sequence of float or None
        Band boundaries in Hz; None uses delta..epsilon.
    band_names : sequence of str or None
    ablate : sequence of str
        Any of no_fullband, route_all_one, no_cross_band, no_band_embedding.
    epochs, batch_size, lr, weight_decay, lr_schedule, clip_grad
        Optimiser settings.
    validation_fraction : float
        Share of the training pairs held out to select the best epoch.
    standardize : bool
        Scale each segment pair by the std of its noisy segment.
    dtype : {"float64", "float32"}
    random_state : int
    """

    def __init__(
        self,
        channels: int = 64,
        heads: int = 4,
        encoder_stages: int = 2,
        blocks_per_stage: int = 2,
        sample_rate_hz: float = 256.0,
        band_edges: Optional[Sequence[float]] = None,
        band_names: Optional[Sequence[str]] = None,
        ablate: Sequence[str] = (),
        epochs: int = 15,
        batch_size: int = 32,
        lr: float = 1e-3,
        weight_decay: float = 1e-4,
        lr_schedule: str = "constant",
        clip_grad: Optional[float] = None,
        validation_fraction: float = 0.1,
        standardize: bool = True,
        dtype: str = "float64",
        random_state: int = 0,
    ):
        self.channels = channels
        self.heads = heads
        self.encoder_stages = encoder_stages
        self.blocks_per_stage = blocks_per_stage
        self.sample_rate_hz = sample_rate_hz
        self.band_edges = band_edges
        self.band_names = band_names
        self.ablate = ablate
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.lr_schedule = lr_schedule
        self.clip_grad = clip_grad
        self.validation_fraction = validation_fraction
        self.standardize = standardize
        self.dtype = dtype
        self.random_state = random_state

    def _model_config(self, T: int) -> ModelConfig:
        return ModelConfig(
            channels=self.channels,
            heads=self.heads,
            encoder_stages=self.encoder_stages,
            blocks_per_stage=self.blocks_per_stage,
            band_spec=_band_spec(self.sample_rate_hz, self.band_edges, self.band_names, T),
            ablation=Ablation.from_names(list(self.ablate)),
            dtype=self.dtype,
            seed=self.random_state,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.random_state,
            clip_grad=self.clip_grad,
            lr_schedule=self.lr_schedule,
        )

    def fit(self, X, y):
        X, y = check_paired_segments(X, y)
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigError(f"validation_fraction must lie in [0, 1), got {self.validation_fraction}")
        n, T = X.shape
        model = BandRouteNet(self._model_config(T))
        tcfg = self._train_config()
        if self.standardize:
            sigma = _scale(X)
            X, y = X / sigma, y / sigma
        snr = np.zeros(n)
        n_val = int(round(n * self.validation_fraction))
        perm = np.random.default_rng(self.random_state).permutation(n)
        val_idx, tr_idx = perm[:n_val], perm[n_val:]
        if len(tr_idx) == 0:
            raise DataError("no training pairs left after the validation hold-out")
        val = (X[val_idx], y[val_idx], snr[val_idx]) if n_val else None
        result = fit_model(model, (X[tr_idx], y[tr_idx], snr[tr_idx]), val, tcfg)
        self.model_ = model
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.n_params_ = count_params(model)
        self.segment_length_ = T
        self.band_names_ = list(model.config.band_spec.names)
        return self

    @classmethod
    def from_model(cls, model: BandRouteNet, standardize: bool = True) -> "BandRouteDenoiser":
        """Wrap an already trained network (e.g. one loaded from a checkpoint)."""
        cfg = model.config
        spec = cfg.band_spec
        est = cls(
            channels=cfg.channels,
            heads=cfg.heads,
            encoder_stages=cfg.encoder_stages,
            blocks_per_stage=cfg.blocks_per_stage,
            sample_rate_hz=spec.sample_rate_hz,
            band_edges=[b.lo_hz for b in spec.bands] + [spec.bands[-1].hi_hz],
            band_names=list(spec.names),
            ablate=tuple(cfg.ablation.active()),
            standardize=standardize,
            dtype=cfg.dtype,
            random_state=cfg.seed,
        )
        est.model_ = model
        est.history_ = []
        est.best_epoch_ = 0
        est.n_params_ = count_params(model)
        est.segment_length_ = spec.segment_length
        est.band_names_ = list(spec.names)
        return est

    def predict(self, X) -> np.ndarray:
        model = check_fitted_model(self)
        X = check_segments(X, self.segment_length_)
        if not self.standardize:
            return model.predict(X)
        sigma = _scale(X)
        return model.predict(X / sigma) * sigma

    def score(self, X, y, sample_weight=None) -> float:
        """Mean SNR improvement (dB); pairs with an infinite gain are skipped."""
        X, y = check_paired_segments(X, y, self.segment_length_)
        yhat = self.predict(X)
        gains, weights = [], []
        w = np.ones(len(X)) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
        for i in range(len(X)):
            try:
                gains.append(snr_imp(y[i], X[i], yhat[i]))
                weights.append(w[i])
            except InfiniteSNRError:
                continue
        if not gains:
            raise DataError("SNR improvement is infinite for every pair")
        return float(np.average(gains, weights=weights))

    def routing_map(self, X) -> np.ndarray:
        """Channel-averaged routing mask per segment, shape (n, K, T)."""
        model = check_fitted_model(self)
        X = check_segments(X, self.segment_length_)
        if self.standardize:
            X = X / _scale(X)
        with no_grad():
            _, diag = model(X[:, None, :].astype(model.config.np_dtype))
        return routing_heatmap(diag, index=None)


class BandDecomposer(TransformerMixin, BaseEstimator):
    """Split segments into FFT-masked frequency bands that sum back exactly.

    ``transform`` maps (n, T) to (n, K, T); ``inverse_transform`` sums bands.
    """

    def __init__(self, sample_rate_hz: float = 256.0, band_edges=None, band_names=None):
        self.sample_rate_hz = sample_rate_hz
        self.band_edges = band_edges
        self.band_names = band_names

    def fit(self, X, y=None):
        X = check_segments(X)
        self.band_spec_ = _band_spec(self.sample_rate_hz, self.band_edges, self.band_names, X.shape[1])
        self.masks_ = build_masks(self.band_spec_)
        self.n_bands_ = self.band_spec_.K
        return self

    def transform(self, X) -> np.ndarray:
        check_fitted_model(self, "band_spec_")
        X = check_segments(X, self.band_spec_.segment_length)
        return band_decompose(X, self.band_spec_, self.masks_)

    def inverse_transform(self, Xb) -> np.ndarray:
        Xb = np.asarray(Xb, dtype=np.float64)
        if Xb.ndim != 3:
            raise DataError(f"expected (n, K, T) band array, got shape {Xb.shape}")
        return Xb.sum(axis=1)
