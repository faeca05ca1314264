"""ODformer: origin-destination matrix forecasting with OD attention and PeriodSparse self-attention."""
from .data import (ODPair, ODSeries, RegionGraph, RegionPartition, Trajectory, build_od_series, clip_outliers,
                   fill_missing, generate_synthetic, load_series, log_denormalize, log_normalize, save_series,
                   segment_trajectory, split_series)
from .estimator import LogNormalizer, NeighborImputer, ODformerForecaster, OutlierClipper, PeriodicityExtractor
from .exceptions import (ConfigError, ContractError, DataError, IntegrityError, LengthError, NoDataError,
                         NoPeriodicityError, ODFormerError, ShapeError, VersionError)
from .model import ModelConfig, ODformer
from .temporal import PeriodSet, extract_periods, period_sparse_attention, select_heads
from .training import Checkpoint, TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "ConfigError", "ContractError", "DataError", "IntegrityError", "LengthError", "LogNormalizer",
    "ModelConfig", "NeighborImputer", "NoDataError", "NoPeriodicityError", "ODFormerError", "ODPair", "ODSeries",
    "ODformer", "ODformerForecaster", "OutlierClipper", "PeriodSet", "PeriodicityExtractor", "RegionGraph",
    "RegionPartition", "ShapeError", "TrainConfig", "Trajectory", "VersionError", "build_od_series",
    "clip_outliers", "evaluate", "extract_periods", "fill_missing", "generate_synthetic", "load_checkpoint",
    "load_series", "log_denormalize", "log_normalize", "period_sparse_attention", "save_checkpoint", "save_series",
    "segment_trajectory", "select_heads", "split_series", "train",
]
