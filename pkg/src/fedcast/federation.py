"""Federated training rounds with exact communication accounting.

Three parameter-exchange policies over one flat parameter vector whose
layout is the canonical order from `model.param_spec`:

- ``online``: every selected client downloads the full vector, trains,
  and uploads the full vector; the server averages the uploads.
  Unselected clients do nothing that round.
- ``partial``: each selected client overwrites only a random coordinate
  subset (its exchange mask) with server values, keeps its own values
  elsewhere, trains, and uploads only its report mask's coordinates; the
  server averages uploaded coordinates against its current value for the
  rest.  Unselected clients still run their local update, at zero
  communication cost.
- ``forward``: identical to ``partial`` for selected clients, but each
  unselected client additionally receives a small random subset of server
  coordinates (its forward mask) before its local update.  Uploads happen
  only from selected clients.

The report mask a client uploads at round n is, by construction, the same
mask it would be handed for exchange at round n+1: masks are drawn from a
per-(client, round) stream, and uploads use the round n+1 stream.

Communication counters tally transmitted payload scalars only (masks,
ids, and metadata ride for free) and are exact integers.

Every random draw comes from its own stream derived from
(seed, purpose, round, client), so client scheduling order cannot change
any result, and policies that share a code path under degenerate ratios
produce bit-identical trajectories.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .model import ForecastConfig, ModelParams, forward, mse_loss, param_count
from .optim import AdamState, adam_step
from .tensor import Tape, backward

logger = logging.getLogger(__name__)

POLICIES = ("online", "partial", "forward")

# purpose tags for rng stream derivation
_SELECT, _EXCHANGE, _FORWARD, _BATCH = 1, 2, 3, 4

ROUNDLOG_COLUMNS = ("round", "policy", "cum_downlink", "cum_uplink", "global_loss", "rmse_val")


def derive_rng(seed: int, purpose: int, round_index: int, client: int = 0) -> np.random.Generator:
    """Independent generator for one (purpose, round, client) triple."""
    if seed < 0 or round_index < 0 or client < 0:
        raise ValueError("seed, round and client must be non-negative")
    return np.random.default_rng(np.random.SeedSequence((seed, purpose, round_index, client)))


def scaled_count(ratio: float, total: int) -> int:
    """Number of coordinates a ratio selects out of `total`."""
    return int(round(ratio * total))


def _draw_mask(seed: int, purpose: int, round_index: int, client: int, size: int, total: int) -> np.ndarray:
    rng = derive_rng(seed, purpose, round_index, client)
    return np.sort(rng.choice(total, size=size, replace=False))


@dataclass
class ClientState:
    """One client's private model, optimizer state, and windows."""

    client_id: int
    params: np.ndarray
    adam: AdamState
    train_inputs: np.ndarray
    train_targets: np.ndarray
    val_inputs: np.ndarray | None = None
    val_targets: np.ndarray | None = None
    test_inputs: np.ndarray | None = None
    test_targets: np.ndarray | None = None
    last_loss: float = float("nan")

    @classmethod
    def create(
        cls,
        client_id: int,
        vector: np.ndarray,
        train_inputs: np.ndarray,
        train_targets: np.ndarray,
        **windows,
    ) -> "ClientState":
        return cls(
            client_id=client_id,
            params=vector.copy(),
            adam=AdamState.zeros(vector.size),
            train_inputs=np.asarray(train_inputs, dtype=np.float64),
            train_targets=np.asarray(train_targets, dtype=np.float64),
            **windows,
        )


@dataclass(frozen=True)
class RoundPlan:
    """Everything random about one round, fixed up front."""

    round_index: int
    selected: tuple[int, ...]
    exchange_masks: dict[int, np.ndarray]
    report_masks: dict[int, np.ndarray]
    forward_masks: dict[int, np.ndarray]


@dataclass
class RoundRecord:
    round_index: int
    policy: str
    downlink: int
    uplink: int
    cum_downlink: int
    cum_uplink: int
    global_loss: float = float("nan")
    rmse_val: float = float("nan")
    rmse_test: float = float("nan")
    selected: tuple[int, ...] = ()
    client_losses: dict[int, float] = field(default_factory=dict)


@dataclass
class FederationResult:
    policy: str
    best_vector: np.ndarray
    best_round: int
    best_loss: float
    rounds_run: int
    records: list[RoundRecord]
    config: ForecastConfig

    @property
    def cum_downlink(self) -> int:
        return self.records[-1].cum_downlink if self.records else 0

    @property
    def cum_uplink(self) -> int:
        return self.records[-1].cum_uplink if self.records else 0


def draw_round_plan(
    seed: int,
    round_index: int,
    policy: str,
    num_clients: int,
    d_total: int,
    select_ratio: float,
    share_ratio: float = 1.0,
    forward_ratio: float = 0.0,
) -> RoundPlan:
    """Client selection and coordinate masks for one round.

    Selection is uniform without replacement with
    `C = max(1, round(select_ratio * num_clients))`.  Masks are uniform
    coordinate subsets of size `round(share_ratio * d_total)` (exchange
    and report, selected clients) and `round(forward_ratio * d_total)`
    (forward, unselected clients, `forward` policy only).
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    if not 0.0 < select_ratio <= 1.0:
        raise ValueError("select_ratio must be in (0, 1]")
    c = max(1, scaled_count(select_ratio, num_clients))
    sel_rng = derive_rng(seed, _SELECT, round_index)
    selected = tuple(sorted(int(i) for i in sel_rng.choice(num_clients, size=c, replace=False)))
    exchange: dict[int, np.ndarray] = {}
    report: dict[int, np.ndarray] = {}
    fwd: dict[int, np.ndarray] = {}
    if policy in ("partial", "forward"):
        if not 0.0 < share_ratio <= 1.0:
            raise ValueError("share_ratio must be in (0, 1]")
        m_share = scaled_count(share_ratio, d_total)
        if m_share < 1:
            raise ValueError("share_ratio selects zero coordinates")
        for cid in selected:
            exchange[cid] = _draw_mask(seed, _EXCHANGE, round_index, cid, m_share, d_total)
            report[cid] = _draw_mask(seed, _EXCHANGE, round_index + 1, cid, m_share, d_total)
    if policy == "forward":
        if not 0.0 <= forward_ratio <= 1.0:
            raise ValueError("forward_ratio must be in [0, 1]")
        n_fwd = scaled_count(forward_ratio, d_total)
        for cid in range(num_clients):
            if cid not in selected:
                fwd[cid] = _draw_mask(seed, _FORWARD, round_index, cid, n_fwd, d_total)
    return RoundPlan(
        round_index=round_index,
        selected=selected,
        exchange_masks=exchange,
        report_masks=report,
        forward_masks=fwd,
    )


def local_update(
    client: ClientState,
    config: ForecastConfig,
    rng: np.random.Generator,
    *,
    epochs: int = 1,
    batch_size: int = 32,
    lr: float = 1e-3,
) -> None:
    """Run `epochs` passes of shuffled mini-batch Adam on the client's
    own windows, updating `client.params` and its Adam state in place.

    A client with no training windows is skipped with a warning."""
    n = len(client.train_inputs)
    if n == 0:
        logger.warning("client %d has no training windows; skipping update", client.client_id)
        return
    from .model import batch_loss_and_grads  # local import to avoid cycle at module load

    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss, gvec = batch_loss_and_grads(
                client.params, config, client.train_inputs[idx], client.train_targets[idx]
            )
            client.params = adam_step(client.params, gvec, client.adam, lr)
            client.last_loss = loss


# ---------------------------------------------------------------------------
# server-side aggregation: operates on vectors and masked payloads only


def aggregate_full(uploads: list[np.ndarray]) -> np.ndarray:
    """Plain average of fully uploaded vectors."""
    if not uploads:
        raise ValueError("aggregate_full needs at least one upload")
    acc = np.zeros_like(uploads[0])
    for vec in uploads:
        acc += vec
    return acc / len(uploads)


def aggregate_partial(base: np.ndarray, uploads: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Average uploaded coordinates against the server's current vector.

    Each upload is (mask, values).  Coordinate j of the result is the
    mean over clients of (client value if j is in that client's mask,
    else the server's current value).
    """
    if not uploads:
        raise ValueError("aggregate_partial needs at least one upload")
    acc = np.zeros_like(base)
    for mask, values in uploads:
        contrib = base.copy()
        contrib[mask] = values
        acc += contrib
    return acc / len(uploads)


# ---------------------------------------------------------------------------
# rounds


def online_round(global_vec, clients, plan, update_fn) -> tuple[np.ndarray, RoundRecord]:
    """Full-vector exchange with the selected clients; unselected clients
    sit the round out entirely."""
    d_total = global_vec.size
    for cid in plan.selected:
        client = clients[cid]
        client.params = global_vec.copy()
        update_fn(client, plan.round_index)
    new_vec = aggregate_full([clients[cid].params for cid in plan.selected])
    moved = len(plan.selected) * d_total
    rec = RoundRecord(
        round_index=plan.round_index,
        policy="online",
        downlink=moved,
        uplink=moved,
        cum_downlink=0,
        cum_uplink=0,
        selected=plan.selected,
        client_losses={cid: clients[cid].last_loss for cid in plan.selected},
    )
    return new_vec, rec


def partial_round(global_vec, clients, plan, update_fn) -> tuple[np.ndarray, RoundRecord]:
    """Masked exchange with selected clients; every unselected client
    still runs its local update at zero communication cost."""
    unselected = [c.client_id for c in clients if c.client_id not in plan.selected]
    for cid in plan.selected:
        client = clients[cid]
        mask = plan.exchange_masks[cid]
        client.params[mask] = global_vec[mask]
        update_fn(client, plan.round_index)
    for cid in unselected:
        update_fn(clients[cid], plan.round_index)
    uploads = [
        (plan.report_masks[cid], clients[cid].params[plan.report_masks[cid]].copy())
        for cid in plan.selected
    ]
    new_vec = aggregate_partial(global_vec, uploads)
    down = sum(len(plan.exchange_masks[cid]) for cid in plan.selected)
    up = sum(len(mask) for mask, _ in uploads)
    rec = RoundRecord(
        round_index=plan.round_index,
        policy="partial",
        downlink=down,
        uplink=up,
        cum_downlink=0,
        cum_uplink=0,
        selected=plan.selected,
        client_losses={c.client_id: c.last_loss for c in clients},
    )
    return new_vec, rec


def forward_round(global_vec, clients, plan, update_fn) -> tuple[np.ndarray, RoundRecord]:
    """Masked exchange as in `partial_round`, plus a masked download of
    fresh server coordinates to each unselected client before its local
    update.  Only selected clients upload."""
    unselected = [c.client_id for c in clients if c.client_id not in plan.selected]
    for cid in plan.selected:
        client = clients[cid]
        mask = plan.exchange_masks[cid]
        client.params[mask] = global_vec[mask]
        update_fn(client, plan.round_index)
    fwd_down = 0
    for cid in unselected:
        client = clients[cid]
        fmask = plan.forward_masks[cid]
        client.params[fmask] = global_vec[fmask]
        fwd_down += len(fmask)
        update_fn(client, plan.round_index)
    uploads = [
        (plan.report_masks[cid], clients[cid].params[plan.report_masks[cid]].copy())
        for cid in plan.selected
    ]
    new_vec = aggregate_partial(global_vec, uploads)
    down = sum(len(plan.exchange_masks[cid]) for cid in plan.selected) + fwd_down
    up = sum(len(mask) for mask, _ in uploads)
    rec = RoundRecord(
        round_index=plan.round_index,
        policy="forward",
        downlink=down,
        uplink=up,
        cum_downlink=0,
        cum_uplink=0,
        selected=plan.selected,
        client_losses={c.client_id: c.last_loss for c in clients},
    )
    return new_vec, rec


ROUND_FNS = {"online": online_round, "partial": partial_round, "forward": forward_round}


# ---------------------------------------------------------------------------
# evaluation helpers


def _eval_indices(n: int, cap: int) -> np.ndarray:
    """Deterministic evenly spaced subset of [0, n)."""
    if cap <= 0 or n <= cap:
        return np.arange(n)
    return np.unique(np.linspace(0, n - 1, cap).astype(int))


def global_train_loss(
    vec: np.ndarray, config: ForecastConfig, clients: list[ClientState], cap: int = 64
) -> float:
    """Training loss of the global model, pooled over a fixed evenly
    spaced subset of every client's training windows."""
    params = ModelParams.from_vector(config, vec)
    total, count = 0.0, 0
    for client in clients:
        n = len(client.train_inputs)
        if n == 0:
            continue
        idx = _eval_indices(n, cap)
        pred = forward(client.train_inputs[idx], params)
        loss = float(mse_loss(pred, client.train_targets[idx]).data)
        total += loss * len(idx)
        count += len(idx)
    return total / count if count else float("nan")


def squared_error_totals(
    vec: np.ndarray,
    config: ForecastConfig,
    window_sets: list[tuple[np.ndarray, np.ndarray]],
    cap: int = 0,
) -> tuple[float, int]:
    """Sum of squared prediction errors and the number of predicted
    points, pooled over the given window sets."""
    params = ModelParams.from_vector(config, vec)
    sq_sum, count = 0.0, 0
    for inputs, targets in window_sets:
        n = len(inputs)
        if n == 0:
            continue
        idx = _eval_indices(n, cap)
        pred = forward(inputs[idx], params).data
        err = pred - targets[idx]
        sq_sum += float((err * err).sum())
        count += err.size
    return sq_sum, count


def evaluate_rmse(
    vec: np.ndarray,
    config: ForecastConfig,
    window_sets: list[tuple[np.ndarray, np.ndarray]],
    cap: int = 0,
) -> float:
    """Root mean squared error pooled over every predicted point of every
    window set, in denormalized units."""
    sq_sum, count = squared_error_totals(vec, config, window_sets, cap=cap)
    if count == 0:
        return float("nan")
    return float(np.sqrt(sq_sum / count))


# ---------------------------------------------------------------------------
# the round loop


def run_federation(
    clients: list[ClientState],
    config: ForecastConfig,
    policy: str,
    *,
    seed: int,
    select_ratio: float = 0.5,
    share_ratio: float = 1.0,
    forward_ratio: float = 0.0,
    lr: float = 1e-3,
    epochs: int = 1,
    batch_size: int = 32,
    max_rounds: int = 100,
    patience: int | None = 10,
    eval_cap: int = 64,
    val_cap: int = 64,
    eval_test_each_round: bool = False,
    init_vector: np.ndarray | None = None,
) -> FederationResult:
    """Run one federated training session and return the best-loss model.

    All clients and the server start from one seeded initialization, and
    every client gets a fresh Adam state.  After each round the global
    training loss is evaluated; the session stops when it has not
    strictly improved for `patience` consecutive rounds (or after
    `max_rounds`, or pass `patience=None` for a fixed round budget).
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    if not clients:
        raise ValueError("run_federation needs at least one client")
    ids = [c.client_id for c in clients]
    if ids != list(range(len(clients))):
        raise ValueError("clients must be ordered with ids 0..K-1")
    vec = (
        init_vector.copy()
        if init_vector is not None
        else ModelParams.init(config, seed).as_vector()
    )
    d_total = param_count(config)
    if vec.size != d_total:
        raise ValueError("init_vector does not match config")
    for client in clients:
        client.params = vec.copy()
        client.adam = AdamState.zeros(d_total)

    def update_fn(client: ClientState, round_index: int) -> None:
        rng = derive_rng(seed, _BATCH, round_index, client.client_id)
        local_update(client, config, rng, epochs=epochs, batch_size=batch_size, lr=lr)

    round_fn = ROUND_FNS[policy]
    val_sets = [
        (c.val_inputs, c.val_targets)
        for c in clients
        if c.val_inputs is not None and len(c.val_inputs)
    ]
    test_sets = [
        (c.test_inputs, c.test_targets)
        for c in clients
        if c.test_inputs is not None and len(c.test_inputs)
    ]
    records: list[RoundRecord] = []
    cum_down = cum_up = 0
    best_vec, best_loss, best_round, stall = vec.copy(), np.inf, -1, 0
    for n in range(max_rounds):
        plan = draw_round_plan(
            seed, n, policy, len(clients), d_total, select_ratio, share_ratio, forward_ratio
        )
        vec, rec = round_fn(vec, clients, plan, update_fn)
        cum_down += rec.downlink
        cum_up += rec.uplink
        rec.cum_downlink, rec.cum_uplink = cum_down, cum_up
        rec.global_loss = global_train_loss(vec, config, clients, cap=eval_cap)
        if val_sets:
            rec.rmse_val = evaluate_rmse(vec, config, val_sets, cap=val_cap)
        if eval_test_each_round and test_sets:
            rec.rmse_test = evaluate_rmse(vec, config, test_sets, cap=val_cap)
        records.append(rec)
        if rec.global_loss < best_loss:
            best_loss, best_vec, best_round, stall = rec.global_loss, vec.copy(), n, 0
        else:
            stall += 1
            if patience is not None and stall >= patience:
                break
    return FederationResult(
        policy=policy,
        best_vector=best_vec,
        best_round=best_round,
        best_loss=best_loss,
        rounds_run=len(records),
        records=records,
        config=config,
    )


def write_roundlog(path, records: list[RoundRecord]) -> None:
    """Round log CSV with one row per round."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(ROUNDLOG_COLUMNS)
        for rec in records:
            writer.writerow(
                [
                    rec.round_index,
                    rec.policy,
                    rec.cum_downlink,
                    rec.cum_uplink,
                    repr(rec.global_loss),
                    repr(rec.rmse_val),
                ]
            )
