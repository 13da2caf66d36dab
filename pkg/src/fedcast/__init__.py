"""Communication-efficient federated forecasting on daily demand series.

A self-contained stack: a taped reverse-mode autodiff engine, a
patch-based transformer forecaster, three federated parameter-exchange
policies with exact communication accounting, DTW/k-medoids client
grouping, a data pipeline, sklearn-style estimators, and a config-driven
CLI (`fedcast prepare|cluster|train|sweep`).
"""
from .clustering import Clustering, cluster_series, distance_matrix, dtw_distance, kmedoids, znormalize
from .data import (
    DailySeries,
    SplitWindows,
    aggregate_daily,
    clean_stations,
    ingest_transactions,
    load_daily_matrix,
    load_series_csv,
    make_windows,
    save_series_csv,
    subsample_windows,
    synth_dataset,
)
from .estimators import DTWKMedoids, FederatedForecaster, WindowForecaster
from .federation import (
    ClientState,
    FederationResult,
    RoundPlan,
    RoundRecord,
    aggregate_full,
    aggregate_partial,
    draw_round_plan,
    evaluate_rmse,
    local_update,
    run_federation,
    squared_error_totals,
    write_roundlog,
)
from .model import (
    ForecastConfig,
    ModelParams,
    RevinStats,
    attention_twin,
    forward,
    mse_loss,
    mse_per_step,
    param_count,
    param_spec,
    predict,
    revin_denormalize,
    revin_normalize,
    train_model,
)
from .optim import AdamState, LrSchedule, adam_step
from .tensor import NonFiniteError, ShapeError, Tape, Tensor, backward, constant, param

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "ClientState",
    "Clustering",
    "DTWKMedoids",
    "DailySeries",
    "FederatedForecaster",
    "FederationResult",
    "ForecastConfig",
    "LrSchedule",
    "ModelParams",
    "NonFiniteError",
    "RevinStats",
    "RoundPlan",
    "RoundRecord",
    "ShapeError",
    "SplitWindows",
    "Tape",
    "Tensor",
    "WindowForecaster",
    "adam_step",
    "aggregate_daily",
    "aggregate_full",
    "aggregate_partial",
    "attention_twin",
    "backward",
    "clean_stations",
    "cluster_series",
    "constant",
    "distance_matrix",
    "draw_round_plan",
    "dtw_distance",
    "evaluate_rmse",
    "forward",
    "ingest_transactions",
    "kmedoids",
    "load_daily_matrix",
    "load_series_csv",
    "local_update",
    "make_windows",
    "mse_loss",
    "mse_per_step",
    "param",
    "param_count",
    "param_spec",
    "predict",
    "revin_denormalize",
    "revin_normalize",
    "run_federation",
    "save_series_csv",
    "squared_error_totals",
    "subsample_windows",
    "synth_dataset",
    "train_model",
    "write_roundlog",
    "znormalize",
]
