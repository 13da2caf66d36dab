"""Exchange policies: masks, aggregation, counters, degeneracies, and the
round loop — each checked against straight-line scripted oracles that
re-derive every stream and payload independently."""

import csv

import numpy as np
import pytest

from fedcast import ForecastConfig
from fedcast.federation import (
    _EXCHANGE,
    _FORWARD,
    _SELECT,
    ClientState,
    ROUNDLOG_COLUMNS,
    aggregate_full,
    aggregate_partial,
    derive_rng,
    draw_round_plan,
    evaluate_rmse,
    forward_round,
    global_train_loss,
    local_update,
    online_round,
    partial_round,
    run_federation,
    scaled_count,
    squared_error_totals,
    write_roundlog,
)
from fedcast.model import ModelParams, param_count

from conftest import make_client_windows
from oracles import delta_update, oracle_mask, oracle_round


def dummy_clients(k: int, d: int) -> list[ClientState]:
    x = np.zeros((1, 4))
    y = np.zeros((1, 1))
    return [ClientState.create(cid, np.zeros(d), x, y) for cid in range(k)]


# ---------------------------------------------------------------------------
# streams and plans


def test_derived_streams_are_deterministic_and_distinct():
    a = derive_rng(1, _SELECT, 3, 0).random(4)
    b = derive_rng(1, _SELECT, 3, 0).random(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, derive_rng(1, _SELECT, 4, 0).random(4))
    assert not np.array_equal(a, derive_rng(1, _EXCHANGE, 3, 0).random(4))
    assert not np.array_equal(a, derive_rng(2, _SELECT, 3, 0).random(4))


def test_scaled_count_rounds_to_nearest():
    assert scaled_count(0.5, 10) == 5
    assert scaled_count(0.3, 97732) == 29320
    assert scaled_count(0.25, 10) == 2  # banker's rounding at .5 not hit here
    assert scaled_count(1.0, 7) == 7


def test_round_plan_shapes_and_report_indexing():
    plan = draw_round_plan(seed=3, round_index=5, policy="forward", num_clients=8,
                           d_total=40, select_ratio=0.5, share_ratio=0.3, forward_ratio=0.1)
    assert len(plan.selected) == 4
    assert list(plan.selected) == sorted(plan.selected)
    for cid in plan.selected:
        assert plan.exchange_masks[cid].size == 12
        assert plan.report_masks[cid].size == 12
        # a client's report coordinates this round are exactly the
        # coordinates the server will refresh for it next round
        next_plan = draw_round_plan(seed=3, round_index=6, policy="forward", num_clients=8,
                                    d_total=40, select_ratio=0.5, share_ratio=0.3,
                                    forward_ratio=0.1)
        np.testing.assert_array_equal(plan.report_masks[cid],
                                      oracle_mask(3, _EXCHANGE, 6, cid, 12, 40))
        if cid in next_plan.selected:
            np.testing.assert_array_equal(plan.report_masks[cid],
                                          next_plan.exchange_masks[cid])
    unselected = [c for c in range(8) if c not in plan.selected]
    for cid in unselected:
        assert plan.forward_masks[cid].size == 4
        assert cid not in plan.exchange_masks


def test_round_plan_always_selects_at_least_one_client():
    plan = draw_round_plan(seed=0, round_index=0, policy="online", num_clients=10,
                           d_total=10, select_ratio=0.01)
    assert len(plan.selected) == 1


def test_round_plan_validation():
    with pytest.raises(ValueError):
        draw_round_plan(0, 0, "gossip", 4, 10, 0.5)
    with pytest.raises(ValueError):
        draw_round_plan(0, 0, "online", 4, 10, 0.0)
    with pytest.raises(ValueError):
        draw_round_plan(0, 0, "partial", 4, 10, 0.5, share_ratio=0.01)
    with pytest.raises(ValueError):
        draw_round_plan(0, 0, "forward", 4, 10, 0.5, share_ratio=0.5, forward_ratio=1.5)


def test_mask_coordinate_frequency_matches_share_ratio():
    # every coordinate should appear in ~share of the masks
    d, share, draws = 100, 0.3, 2000
    counts = np.zeros(d)
    for r in range(draws):
        counts[oracle_mask(0, _EXCHANGE, r, 0, scaled_count(share, d), d)] += 1
    freq = counts / draws
    assert np.max(np.abs(freq - share)) < 0.035
    assert abs(freq.mean() - share) < 1e-12  # exactly 30 of 100 per draw


# ---------------------------------------------------------------------------
# aggregation


def test_aggregate_full_hand_case():
    out = aggregate_full([np.array([1.0, 2.0]), np.array([3.0, 6.0])])
    np.testing.assert_array_equal(out, [2.0, 4.0])
    with pytest.raises(ValueError):
        aggregate_full([])


def test_aggregate_partial_hand_case():
    # hand-computed: coordinate-wise mean of per-client vectors in which
    # unreported coordinates fall back to the server's value
    base = np.array([10.0, 20.0, 30.0, 40.0])
    uploads = [
        (np.array([0, 2]), np.array([0.0, 0.0])),   # reports coords 0 and 2
        (np.array([0, 3]), np.array([2.0, 8.0])),   # reports coords 0 and 3
    ]
    out = aggregate_partial(base, uploads)
    # coord 0: (0 + 2)/2 = 1; coord 1: (20+20)/2; coord 2: (0+30)/2; coord 3: (40+8)/2
    np.testing.assert_array_equal(out, [1.0, 20.0, 15.0, 24.0])


# ---------------------------------------------------------------------------
# straight-line scripted round oracle (tests/oracles.py)


ROUND_FN = {"online": online_round, "partial": partial_round, "forward": forward_round}


@pytest.mark.parametrize("policy", ["online", "partial", "forward"])
def test_rounds_match_scripted_oracle_bit_for_bit(policy):
    seed, k, d = 17, 6, 12
    test_rng = np.random.default_rng(99)
    base = test_rng.normal(size=d)
    clients = dummy_clients(k, d)
    for cl in clients:
        cl.params = test_rng.normal(size=d)
    oracle_base = base.copy()
    oracle_params = {cid: clients[cid].params.copy() for cid in range(k)}

    def update_fn(client, round_index):
        client.params = client.params + delta_update(client.client_id, round_index, d)

    for r in range(50):
        sr = float(test_rng.choice([0.2, 0.5, 0.8, 1.0]))
        share = float(test_rng.choice([0.25, 0.5, 0.75, 1.0]))
        fwd = float(test_rng.choice([0.0, 0.25, 0.5])) if policy == "forward" else 0.0
        plan = draw_round_plan(seed, r, policy, k, d, sr, share, fwd)
        new_base, rec = ROUND_FN[policy](base, clients, plan, update_fn)
        oracle_new, oracle_params, o_down, o_up = oracle_round(
            policy, seed, r, k, d, oracle_base, oracle_params, sr, share, fwd
        )
        np.testing.assert_array_equal(new_base, oracle_new)
        for cid in range(k):
            np.testing.assert_array_equal(clients[cid].params, oracle_params[cid])
        assert (rec.downlink, rec.uplink) == (o_down, o_up)
        base, oracle_base = new_base, oracle_new


def test_unselected_clients_train_without_any_exchange():
    seed, k, d = 5, 4, 10
    base = np.full(d, 100.0)
    clients = dummy_clients(k, d)
    touched = []

    def update_fn(client, round_index):
        touched.append(client.client_id)

    plan = draw_round_plan(seed, 0, "partial", k, d, 0.5, 0.5)
    partial_round(base, clients, plan, update_fn)
    assert sorted(touched) == [0, 1, 2, 3]  # everyone trains
    for cid in range(k):
        if cid not in plan.selected:
            np.testing.assert_array_equal(clients[cid].params, np.zeros(d))  # untouched by server


# ---------------------------------------------------------------------------
# communication counters


def test_counter_closed_forms_small_scale():
    cfg = dict(k=6, d=20, rounds=10, sr=0.5, share=0.35, fwd=0.15)
    c = 3
    m = round(cfg["share"] * cfg["d"])      # 7
    n_fwd = round(cfg["fwd"] * cfg["d"])    # 3
    base = np.zeros(cfg["d"])
    for policy, want_down, want_up in [
        ("online", cfg["rounds"] * c * cfg["d"], cfg["rounds"] * c * cfg["d"]),
        ("partial", cfg["rounds"] * c * m, cfg["rounds"] * c * m),
        ("forward", cfg["rounds"] * (c * m + (cfg["k"] - c) * n_fwd), cfg["rounds"] * c * m),
    ]:
        clients = dummy_clients(cfg["k"], cfg["d"])
        down = up = 0
        vec = base
        for r in range(cfg["rounds"]):
            plan = draw_round_plan(1, r, policy, cfg["k"], cfg["d"], cfg["sr"],
                                   cfg["share"], cfg["fwd"])
            vec, rec = ROUND_FN[policy](vec, clients, plan, lambda cl, n: None)
            down += rec.downlink
            up += rec.uplink
        assert (down, up) == (want_down, want_up), policy


# ---------------------------------------------------------------------------
# degeneracies (module-scale; the acceptance suite re-runs them at the
# pinned scale)


def small_fleet(config, k, n_windows, seed):
    rng = np.random.default_rng(seed)
    vec = ModelParams.init(config, seed).as_vector()
    clients = []
    for cid in range(k):
        x, y = make_client_windows(rng, n_windows, config.lookback, config.horizon)
        clients.append(ClientState.create(cid, vec, x, y))
    return clients


def run_policy(config, policy, seed, **kwargs):
    clients = small_fleet(config, k=4, n_windows=6, seed=seed)
    result = run_federation(clients, config, policy, seed=seed, max_rounds=6,
                            patience=None, batch_size=8, **kwargs)
    return result, clients


def test_forward_with_zero_ratio_equals_partial(grad_config):
    a, ca = run_policy(grad_config, "forward", seed=3, select_ratio=0.5,
                       share_ratio=0.5, forward_ratio=0.0)
    b, cb = run_policy(grad_config, "partial", seed=3, select_ratio=0.5, share_ratio=0.5)
    np.testing.assert_array_equal(a.best_vector, b.best_vector)
    for x, y in zip(ca, cb):
        np.testing.assert_array_equal(x.params, y.params)
    assert [r.global_loss for r in a.records] == [r.global_loss for r in b.records]
    assert a.cum_uplink == b.cum_uplink


def test_full_share_full_selection_equals_full_exchange(grad_config):
    a, ca = run_policy(grad_config, "partial", seed=4, select_ratio=1.0, share_ratio=1.0)
    b, cb = run_policy(grad_config, "online", seed=4, select_ratio=1.0)
    np.testing.assert_array_equal(a.best_vector, b.best_vector)
    for x, y in zip(ca, cb):
        np.testing.assert_array_equal(x.params, y.params)
    assert a.cum_downlink == b.cum_downlink


# ---------------------------------------------------------------------------
# round loop behavior


def test_patience_stops_after_flat_rounds(grad_config):
    # two clients, zero local epochs: the global vector is bit-stable, so
    # the loss never strictly improves after round 0
    clients = small_fleet(grad_config, k=2, n_windows=4, seed=0)
    result = run_federation(clients, grad_config, "online", seed=0, select_ratio=1.0,
                            epochs=0, max_rounds=50, patience=10)
    assert result.rounds_run == 11
    assert result.best_round == 0
    losses = [r.global_loss for r in result.records]
    assert all(l == losses[0] for l in losses)


def test_run_federation_records_are_consistent(grad_config):
    clients = small_fleet(grad_config, k=3, n_windows=5, seed=1)
    for cl in clients:
        rng = np.random.default_rng(cl.client_id + 50)
        cl.val_inputs, cl.val_targets = make_client_windows(rng, 3, grad_config.lookback,
                                                            grad_config.horizon)
        cl.test_inputs, cl.test_targets = make_client_windows(rng, 3, grad_config.lookback,
                                                              grad_config.horizon)
    result = run_federation(clients, grad_config, "partial", seed=1, select_ratio=0.5,
                            share_ratio=0.5, max_rounds=4, patience=None,
                            eval_test_each_round=True)
    assert result.rounds_run == 4
    assert [r.round_index for r in result.records] == [0, 1, 2, 3]
    downs = [r.cum_downlink for r in result.records]
    ups = [r.cum_uplink for r in result.records]
    assert downs == sorted(downs) and ups == sorted(ups)
    assert all(np.isfinite(r.global_loss) for r in result.records)
    assert all(np.isfinite(r.rmse_val) for r in result.records)
    assert all(np.isfinite(r.rmse_test) for r in result.records)
    assert result.best_loss == min(r.global_loss for r in result.records)


def test_run_federation_is_deterministic(grad_config):
    def go():
        clients = small_fleet(grad_config, k=3, n_windows=5, seed=2)
        return run_federation(clients, grad_config, "forward", seed=2, select_ratio=0.5,
                              share_ratio=0.4, forward_ratio=0.2, max_rounds=3,
                              patience=None)

    a, b = go(), go()
    np.testing.assert_array_equal(a.best_vector, b.best_vector)
    assert [r.global_loss for r in a.records] == [r.global_loss for r in b.records]


def test_run_federation_validates_input(grad_config):
    clients = small_fleet(grad_config, k=2, n_windows=4, seed=0)
    with pytest.raises(ValueError):
        run_federation(clients, grad_config, "broadcast", seed=0)
    with pytest.raises(ValueError):
        run_federation(list(reversed(clients)), grad_config, "online", seed=0)
    with pytest.raises(ValueError):
        run_federation(clients, grad_config, "online", seed=0,
                       init_vector=np.zeros(3))


def test_local_update_skips_empty_client(grad_config, caplog):
    d = param_count(grad_config)
    client = ClientState.create(0, np.zeros(d), np.zeros((0, grad_config.lookback)),
                                np.zeros((0, grad_config.horizon)))
    before = client.params.copy()
    local_update(client, grad_config, np.random.default_rng(0))
    np.testing.assert_array_equal(client.params, before)


def test_local_update_trains_in_place(grad_config):
    rng = np.random.default_rng(0)
    x, y = make_client_windows(rng, 8, grad_config.lookback, grad_config.horizon)
    vec = ModelParams.init(grad_config, 0).as_vector()
    client = ClientState.create(0, vec, x, y)
    local_update(client, grad_config, np.random.default_rng(1), epochs=1, batch_size=4)
    assert not np.array_equal(client.params, vec)
    assert np.isfinite(client.last_loss)
    assert client.adam.t == 2  # two mini-batches of four windows


# ---------------------------------------------------------------------------
# evaluation


def test_rmse_of_zeroed_model_is_distance_to_window_mean(grad_config):
    # hand-computed: a zeroed model predicts each window's mean (2.0 for
    # an alternating 1/3 window), so a target of 4 gives an error of 2
    vec = np.zeros(param_count(grad_config))
    x = np.tile([1.0, 3.0], grad_config.lookback // 2)[None, :]
    y = np.full((1, grad_config.horizon), 4.0)
    assert evaluate_rmse(vec, grad_config, [(x, y)]) == pytest.approx(2.0)


def test_squared_error_totals_pool_across_sets(grad_config):
    vec = np.zeros(param_count(grad_config))
    x = np.tile([1.0, 3.0], grad_config.lookback // 2)[None, :]
    y4 = np.full((1, grad_config.horizon), 4.0)  # error 2 per point
    y3 = np.full((1, grad_config.horizon), 3.0)  # error 1 per point
    sq, count = squared_error_totals(vec, grad_config, [(x, y4), (x, y3)])
    assert count == 2 * grad_config.horizon
    assert sq == pytest.approx(grad_config.horizon * (4.0 + 1.0))
    # pooled rmse = sqrt(mean of [4, 4, 1, 1]) = sqrt(2.5)
    assert evaluate_rmse(vec, grad_config, [(x, y4), (x, y3)]) == pytest.approx(np.sqrt(2.5))


def test_global_train_loss_pools_client_losses(grad_config):
    vec = np.zeros(param_count(grad_config))
    x = np.tile([1.0, 3.0], grad_config.lookback // 2)
    clients = [
        ClientState.create(0, vec, x[None, :], np.full((1, grad_config.horizon), 4.0)),
        ClientState.create(1, vec, x[None, :], np.full((1, grad_config.horizon), 3.0)),
    ]
    # per-row loss sums squared errors over the horizon: 2 steps of 4 and of 1
    want = (2 * 4.0 + 2 * 1.0) / 2
    assert global_train_loss(vec, grad_config, clients) == pytest.approx(want)


# ---------------------------------------------------------------------------
# round log


def test_roundlog_schema_and_float_round_trip(tmp_path, grad_config):
    clients = small_fleet(grad_config, k=2, n_windows=4, seed=3)
    result = run_federation(clients, grad_config, "online", seed=3, select_ratio=1.0,
                            max_rounds=2, patience=None)
    path = tmp_path / "roundlog.csv"
    write_roundlog(path, result.records)
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == list(ROUNDLOG_COLUMNS)
    assert len(rows) == 3
    for row, rec in zip(rows[1:], result.records):
        assert int(row[0]) == rec.round_index
        assert row[1] == "online"
        assert float(row[4]) == rec.global_loss  # repr() round-trips exactly
