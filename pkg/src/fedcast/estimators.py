"""Scikit-learn style estimators wrapping the library.

Three entry points compose with the usual sklearn tooling (`get_params`,
`set_params`, `clone`, pipelines over window matrices):

- :class:`WindowForecaster` fits the patch transformer on supervised
  windows (X = look-back rows, y = horizon rows).
- :class:`DTWKMedoids` groups equal-length series by DTW distance.
- :class:`FederatedForecaster` runs one federated session over per-client
  window lists and predicts with the resulting global model.

The round-based simulator itself (policies, communication accounting) is
plain library code in `federation`; these wrappers only adapt its inputs
and outputs to the estimator protocol.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .clustering import distance_matrix, kmedoids
from .federation import ClientState, evaluate_rmse, run_federation
from .model import ForecastConfig, ModelParams, predict, train_model
from .validation import check_matrix, check_positive_int, check_ratio, check_windows


def _config_from(x, y, params: dict) -> ForecastConfig:
    return ForecastConfig(
        lookback=x.shape[1],
        horizon=y.shape[1],
        patch_len=params["patch_len"],
        stride=params["stride"],
        embed_dim=params["embed_dim"],
        heads=params["heads"],
        head_dim=params["head_dim"],
        blocks=tuple(params["blocks"]),
    )


class WindowForecaster(RegressorMixin, BaseEstimator):
    """Patch-transformer regressor on (look-back, horizon) window pairs.

    The look-back and horizon lengths are inferred from the shapes of X
    and y at fit time; everything else is a constructor parameter.
    """

    def __init__(
        self,
        patch_len: int = 16,
        stride: int = 8,
        embed_dim: int = 64,
        heads: int = 4,
        head_dim: int = 16,
        blocks: tuple = ("id", "id", "attention"),
        lr: float = 1e-3,
        schedule: str = "one_cycle",
        max_epochs: int = 100,
        patience: int = 20,
        batch_size: int = 32,
        val_fraction: float = 0.0,
        random_state: int = 0,
    ):
        self.patch_len = patch_len
        self.stride = stride
        self.embed_dim = embed_dim
        self.heads = heads
        self.head_dim = head_dim
        self.blocks = blocks
        self.lr = lr
        self.schedule = schedule
        self.max_epochs = max_epochs
        self.patience = patience
        self.batch_size = batch_size
        self.val_fraction = val_fraction
        self.random_state = random_state

    def fit(self, X, y):
        x, y = check_windows(X, y)
        self.config_ = _config_from(x, y, self.get_params())
        val = None
        if self.val_fraction:
            check_ratio(self.val_fraction, "val_fraction")
            n_val = int(len(x) * self.val_fraction)
            if n_val:
                # windows are assumed chronological; hold out the tail
                val = (x[-n_val:], y[-n_val:])
                x, y = x[:-n_val], y[:-n_val]
        result = train_model(
            x,
            y,
            self.config_,
            seed=self.random_state,
            lr=self.lr,
            schedule=self.schedule,
            max_epochs=self.max_epochs,
            patience=self.patience,
            batch_size=self.batch_size,
            val=val,
        )
        self.vector_ = result.vector
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        return self

    def predict(self, X):
        check_is_fitted(self, "vector_")
        x = check_matrix(X)
        params = ModelParams.from_vector(self.config_, self.vector_)
        return predict(x, params)


class DTWKMedoids(ClusterMixin, BaseEstimator):
    """K-medoids over dynamic-time-warping distances.

    X is a matrix of equal-length series, one per row (z-normalized per
    row before the distance computation unless disabled).
    """

    def __init__(self, n_clusters: int = 2, znormalize: bool = True, max_iter: int = 100, random_state: int = 0):
        self.n_clusters = n_clusters
        self.znormalize = znormalize
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        x = check_matrix(X)
        check_positive_int(self.n_clusters, "n_clusters")
        dist = distance_matrix(list(x), znorm=self.znormalize)
        result = kmedoids(dist, self.n_clusters, self.random_state, max_iter=self.max_iter)
        self.labels_ = result.labels
        self.medoid_indices_ = np.asarray(result.medoids)
        self.inertia_ = result.cost
        self.n_iter_ = result.n_iter
        return self

    def predict(self, X=None):
        check_is_fitted(self, "labels_")
        return self.labels_


class FederatedForecaster(BaseEstimator):
    """One federated training session exposed as an estimator.

    `fit(X, y)` takes per-client window lists: X is a sequence of
    [n_i, lookback] arrays and y the aligned [n_i, horizon] targets.
    After fitting, `predict` runs the best global model.
    """

    def __init__(
        self,
        policy: str = "partial",
        select_ratio: float = 0.5,
        share_ratio: float = 0.5,
        forward_ratio: float = 0.2,
        patch_len: int = 16,
        stride: int = 8,
        embed_dim: int = 64,
        heads: int = 4,
        head_dim: int = 16,
        blocks: tuple = ("id", "id", "attention"),
        lr: float = 1e-3,
        epochs_per_round: int = 1,
        batch_size: int = 32,
        max_rounds: int = 100,
        patience: int | None = 10,
        eval_cap: int = 64,
        random_state: int = 0,
    ):
        self.policy = policy
        self.select_ratio = select_ratio
        self.share_ratio = share_ratio
        self.forward_ratio = forward_ratio
        self.patch_len = patch_len
        self.stride = stride
        self.embed_dim = embed_dim
        self.heads = heads
        self.head_dim = head_dim
        self.blocks = blocks
        self.lr = lr
        self.epochs_per_round = epochs_per_round
        self.batch_size = batch_size
        self.max_rounds = max_rounds
        self.patience = patience
        self.eval_cap = eval_cap
        self.random_state = random_state

    def fit(self, X, y):
        if len(X) != len(y) or len(X) == 0:
            raise ValueError("X and y must be equal-length non-empty per-client lists")
        pairs = [check_windows(xi, yi, name=f"X[{i}]") for i, (xi, yi) in enumerate(zip(X, y))]
        self.config_ = _config_from(pairs[0][0], pairs[0][1], self.get_params())
        vec0 = ModelParams.init(self.config_, self.random_state).as_vector()
        clients = [
            ClientState.create(i, vec0, xi, yi) for i, (xi, yi) in enumerate(pairs)
        ]
        result = run_federation(
            clients,
            self.config_,
            self.policy,
            seed=self.random_state,
            select_ratio=self.select_ratio,
            share_ratio=self.share_ratio,
            forward_ratio=self.forward_ratio,
            lr=self.lr,
            epochs=self.epochs_per_round,
            batch_size=self.batch_size,
            max_rounds=self.max_rounds,
            patience=self.patience,
            eval_cap=self.eval_cap,
            init_vector=vec0,
        )
        self.vector_ = result.best_vector
        self.records_ = result.records
        self.n_rounds_ = result.rounds_run
        self.best_round_ = result.best_round
        self.cum_downlink_ = result.cum_downlink
        self.cum_uplink_ = result.cum_uplink
        return self

    def predict(self, X):
        check_is_fitted(self, "vector_")
        x = check_matrix(X)
        params = ModelParams.from_vector(self.config_, self.vector_)
        return predict(x, params)

    def score_rmse(self, X, y) -> float:
        """Pooled RMSE of the global model over one window set."""
        check_is_fitted(self, "vector_")
        x, y = check_windows(X, y)
        return evaluate_rmse(self.vector_, self.config_, [(x, y)])
