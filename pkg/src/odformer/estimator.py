"""scikit-learn style wrappers: preprocessing transformers and the forecaster."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import ODSeries, RegionGraph, fill_missing, nearest_rank_percentile
from .exceptions import NoPeriodicityError
from .model import ModelConfig, ODformer
from .temporal import PeriodSet, extract_periods
from .training import Checkpoint, TrainConfig, evaluate, load_checkpoint, save_checkpoint, train
from .validation import check_length, check_nonnegative, check_od_array, check_region_dims


class OutlierClipper(TransformerMixin, BaseEstimator):
    """Clip at the nearest-rank ``percentile`` of the data seen in ``fit``."""

    def __init__(self, percentile: float = 98.0):
        self.percentile = percentile

    def fit(self, X, y=None):
        x = check_od_array(X, allow_nan=True, batched=None)
        self.threshold_ = nearest_rank_percentile(x, self.percentile)
        return self

    def transform(self, X):
        check_is_fitted(self, "threshold_")
        x = check_od_array(X, allow_nan=True, batched=None)
        out = np.minimum(x, self.threshold_)
        out[np.isnan(x)] = np.nan
        return out


class NeighborImputer(TransformerMixin, BaseEstimator):
    """Fill NaN entries from graph neighbours (see ``fill_missing``)."""

    def __init__(self, origin_graph: RegionGraph | None = None, destination_graph: RegionGraph | None = None):
        self.origin_graph = origin_graph
        self.destination_graph = destination_graph

    def fit(self, X, y=None):
        x = check_od_array(X, allow_nan=True)
        self.n_regions_ = x.shape[1:3]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_regions_")
        x = check_od_array(X, allow_nan=True)
        s = ODSeries(np.nan_to_num(x), 1.0, self.origin_graph, self.destination_graph)
        filled = fill_missing(s, np.isnan(x))
        self.imputed_cells_ = filled.meta["imputed_cells"]
        return filled.values


class LogNormalizer(TransformerMixin, BaseEstimator):
    """``log1p`` forward, ``expm1`` inverse."""

    def fit(self, X, y=None):
        check_nonnegative(check_od_array(X, batched=None))
        self.fitted_ = True
        return self

    def transform(self, X):
        x = check_od_array(X, batched=None)
        check_nonnegative(x)
        return np.log1p(x)

    def inverse_transform(self, X):
        return np.expm1(check_od_array(X, batched=None))


class PeriodicityExtractor(BaseEstimator):
    """Top-``max_k`` periods of the entry-averaged series; ``periods_`` is empty when none exist."""

    def __init__(self, max_k: int = 4, window: int | None = None):
        self.max_k = max_k
        self.window = window

    def fit(self, X, y=None):
        x = check_od_array(X)
        try:
            self.period_set_ = extract_periods(x.mean(axis=(1, 2, 3)), self.max_k, self.window)
        except NoPeriodicityError:
            self.period_set_ = PeriodSet([])
        self.periods_ = list(self.period_set_.periods)
        return self


_MODEL_KEYS = ("input_length", "output_length", "d_model", "d_ff", "encoder_layers", "decoder_layers",
               "start_token_length", "alpha", "chebyshev_order", "d_attn", "sparsity_factor", "max_heads",
               "dominant_refresh", "importance", "moving_average_window", "center_inputs", "seed")
_TRAIN_KEYS = ("learning_rate", "batch_size", "max_epochs", "early_stop_patience", "shuffle_seed")


class ODformerForecaster(RegressorMixin, BaseEstimator):
    """Fit an ODformer on a normalized series and forecast ``output_length`` steps.

    ``fit(X)`` takes one series ``[T, N, N', F]`` (``F`` may be omitted);
    ``X_val`` supplies validation data that continues ``X``. ``predict`` takes
    histories ``[B, I, N, N', F]`` or a single ``[I, N, N', F]``.
    """

    def __init__(self, input_length=48, output_length=24, d_model=32, d_ff=64, encoder_layers=2, decoder_layers=1,
                 start_token_length=None, alpha=0.5, chebyshev_order=2, d_attn=16, sparsity_factor=2.0,
                 max_heads=4, dominant_refresh="pmax", importance="printed", moving_average_window=None,
                 center_inputs=True, seed=0, learning_rate=1e-4, batch_size=16, max_epochs=100,
                 early_stop_patience=8, shuffle_seed=0, origin_graph=None, destination_graph=None):
        self.input_length = input_length
        self.output_length = output_length
        self.d_model = d_model
        self.d_ff = d_ff
        self.encoder_layers = encoder_layers
        self.decoder_layers = decoder_layers
        self.start_token_length = start_token_length
        self.alpha = alpha
        self.chebyshev_order = chebyshev_order
        self.d_attn = d_attn
        self.sparsity_factor = sparsity_factor
        self.max_heads = max_heads
        self.dominant_refresh = dominant_refresh
        self.importance = importance
        self.moving_average_window = moving_average_window
        self.center_inputs = center_inputs
        self.seed = seed
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.early_stop_patience = early_stop_patience
        self.shuffle_seed = shuffle_seed
        self.origin_graph = origin_graph
        self.destination_graph = destination_graph

    def _configs(self, n, n_prime, f):
        cfg = ModelConfig(n=n, n_prime=n_prime, f=f, **{k: getattr(self, k) for k in _MODEL_KEYS})
        return cfg, TrainConfig(**{k: getattr(self, k) for k in _TRAIN_KEYS})

    def fit(self, X, y=None, X_val=None, callback=None):
        x = check_od_array(X)
        _, n, n_prime, f = x.shape
        cfg, tc = self._configs(n, n_prime, f)
        check_length(x, cfg.input_length + cfg.output_length)
        if X_val is None:
            val = x[:0]
        else:
            val = check_od_array(X_val, name="X_val")
            check_region_dims(val, n, n_prime, f, "X_val")
        model = ODformer(cfg, self.origin_graph, self.destination_graph)
        self.checkpoint_ = train(model, x, val, tc, val_context=x, callback=callback)
        self.model_ = self.checkpoint_.build_model().eval()
        self.config_ = cfg
        self.history_ = self.checkpoint_.history
        self.n_features_in_ = n * n_prime * f
        return self

    @torch.no_grad()
    def predict(self, X):
        check_is_fitted(self, "model_")
        x = check_od_array(X, name="history", batched=None)
        c = self.config_
        if x.ndim == 3:
            x = x[..., None]
        if x.ndim == 4 and x.shape[1:] != (c.n, c.n_prime, c.f):
            x = x[..., None]
        check_region_dims(x, c.n, c.n_prime, c.f, "history")
        check_length(x, c.input_length, "history", axis=-4)
        window = x[..., -c.input_length:, :, :, :]
        return self.model_(torch.from_numpy(np.ascontiguousarray(window))).numpy()

    def score(self, X, y, sample_weight=None):
        """Negative MSE of the forecasts for histories ``X`` against ``y``."""
        pred = self.predict(X)
        truth = check_od_array(y, name="y", batched=None).reshape(pred.shape)
        return -evaluate(pred, truth)[0]

    @property
    def periods_(self):
        check_is_fitted(self, "model_")
        return self.model_.last_periods

    def save(self, path):
        check_is_fitted(self, "checkpoint_")
        return save_checkpoint(self.checkpoint_, path)

    @classmethod
    def from_checkpoint(cls, source) -> "ODformerForecaster":
        ck = source if isinstance(source, Checkpoint) else load_checkpoint(source)
        cfg = ModelConfig.from_dict(ck.config)
        params = {k: getattr(cfg, k) for k in _MODEL_KEYS}
        params.update({k: v for k, v in ck.train_config.items() if k in _TRAIN_KEYS})
        est = cls(**params)
        est.checkpoint_ = ck
        est.model_ = ck.build_model().eval()
        est.origin_graph, est.destination_graph = est.model_.origin_graph, est.model_.destination_graph
        est.config_ = cfg
        est.history_ = ck.history
        est.n_features_in_ = cfg.n * cfg.n_prime * cfg.f
        return est
