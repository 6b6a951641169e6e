# tests/unit/test_federation.py
import numpy as np
import pytest
from scipy.special import softmax

from services.data_core import ClientShard, TaskSplit
from services.fed_client import client_update
from services.fed_core import (
    ClientUpdateResult,
    FedConfig,
    aggregate,
    new_federation_state,
    sample_clients,
)
from services.fed_server import round_teacher, run_task
from services.inv_core import SyntheticMemory
from services.nn_params import init_params
from services.nn_train import OptimConfig, ce_step, local_sgd
from services.strat_registry import FedEWC, FedLwF, Finetune, Replay, Target
from tests._helpers.models import blob_dataset, bn_spec, linear_spec
from utils.exceptions import AggregationError, ConfigError
from utils.logging import clear_events, recent_events
from utils.rng import client_rng, named_rng

SPLIT = TaskSplit(((0, 1), (2,)), 0)


def _state(spec, seed=5, num_clients=3):
    return new_federation_state(spec, init_params(spec, named_rng(seed, "init")), seed, num_clients)


def _shards(num_clients=3, n=18):
    return [ClientShard(k, 0, np.arange(k, n, num_clients)) for k in range(num_clients)]


# ---- sampling ----

def test_full_participation_returns_every_client():
    assert sample_clients(5, 1.0, np.random.default_rng(0)) == [0, 1, 2, 3, 4]


def test_small_fraction_still_samples_one_client():
    ids = sample_clients(10, 0.01, np.random.default_rng(0))
    assert len(ids) == 1 and 0 <= ids[0] < 10


def test_sampling_is_partial_fisher_yates():
    for seed in range(5):
        got = sample_clients(7, 0.4, np.random.default_rng(seed))
        rng = np.random.default_rng(seed)
        ids = list(range(7))
        for i in range(3):
            j = int(rng.integers(i, 7))
            ids[i], ids[j] = ids[j], ids[i]
        assert got == sorted(ids[:3])
        assert len(set(got)) == 3


@pytest.mark.parametrize("fraction,expected", [(0.7, 7), (0.3, 3), (0.25, 3)])
def test_sample_count_is_ceiling_of_fraction(fraction, expected):
    assert len(sample_clients(10, fraction, np.random.default_rng(1))) == expected


@pytest.mark.parametrize("fraction", [0.0, -0.5, 1.5])
def test_bad_fraction_rejected(fraction):
    with pytest.raises(ConfigError):
        sample_clients(4, fraction, np.random.default_rng(0))


# ---- aggregation ----

def _result(cid, params, value, n):
    return ClientUpdateResult(cid, params.with_values(np.full(params.values.size, value)), n)


def test_weighted_average_example():
    params = init_params(linear_spec(), np.random.default_rng(0))
    merged = aggregate([_result(0, params, 10.0, 1), _result(1, params, 8.0, 3)])
    assert np.allclose(merged.values, 8.5)


def test_aggregation_symmetric_and_convex():
    spec = linear_spec()
    rng = np.random.default_rng(1)
    for _ in range(100):
        k = int(rng.integers(1, 5))
        results = [ClientUpdateResult(i, init_params(spec, rng), int(rng.integers(1, 50))) for i in range(k)]
        merged = aggregate(results)
        flipped = aggregate(list(reversed(results)))
        assert np.allclose(merged.values, flipped.values, atol=1e-12)
        stack = np.stack([r.params.values for r in results])
        assert (merged.values >= stack.min(axis=0) - 1e-12).all()
        assert (merged.values <= stack.max(axis=0) + 1e-12).all()


def test_single_client_aggregate_is_identity():
    params = init_params(linear_spec(), np.random.default_rng(2))
    assert np.array_equal(aggregate([ClientUpdateResult(0, params, 7)]).values, params.values)


def test_bn_running_stats_use_sample_weights():
    spec = bn_spec()
    a = init_params(spec, np.random.default_rng(0))
    b = a.copy()
    layer = spec.bn_layers()[0]
    a.bn_stats[layer] = (np.zeros(5), np.ones(5))
    b.bn_stats[layer] = (np.full(5, 4.0), np.full(5, 3.0))
    merged = aggregate([ClientUpdateResult(0, a, 3), ClientUpdateResult(1, b, 1)])
    assert np.allclose(merged.bn_stats[layer][0], 1.0)
    assert np.allclose(merged.bn_stats[layer][1], 1.5)


def test_aggregation_errors():
    params = init_params(linear_spec(), np.random.default_rng(0))
    other = init_params(linear_spec(num_classes=4), np.random.default_rng(0))
    with pytest.raises(AggregationError):
        aggregate([])
    with pytest.raises(AggregationError):
        aggregate([ClientUpdateResult(0, params, 0), ClientUpdateResult(1, params, 0)])
    with pytest.raises(AggregationError):
        aggregate([ClientUpdateResult(0, params, 1), ClientUpdateResult(1, other, 1)])


# ---- client update ----

def test_empty_shard_returns_global_copy():
    clear_events()
    spec = linear_spec()
    state = _state(spec)
    res = client_update(state, ClientShard(1, 0, np.zeros(0, dtype=np.int64)), blob_dataset([6, 6, 6]),
                        Finetune(), FedConfig())
    assert res.num_samples == 0
    assert np.array_equal(res.params.values, state.global_params.values)
    assert res.params is not state.global_params
    assert recent_events(stage="federation", event="empty_client_update")


def test_zero_epochs_leaves_params_unchanged():
    spec = linear_spec()
    state = _state(spec)
    res = client_update(state, _shards()[0], blob_dataset([6, 6, 6]), Finetune(), FedConfig(epochs=0))
    assert np.array_equal(res.params.values, state.global_params.values)
    assert res.local_loss_trace == []


def test_client_update_matches_local_sgd_on_client_stream():
    spec = linear_spec()
    ds = blob_dataset([6, 6, 6])
    state = _state(spec, seed=9)
    cfg = FedConfig(epochs=2, batch_size=4, lr=0.05)
    shard = _shards()[1]
    res = client_update(state, shard, ds, Finetune(), cfg)
    expected, losses = local_sgd(spec, state.global_params.copy(), ds, shard.indices, 2, 4,
                                 OptimConfig(0.05, cfg.momentum, cfg.weight_decay), ce_step, client_rng(9, 1))
    assert np.array_equal(res.params.values, expected.values)
    assert res.local_loss_trace == losses


def _strategies_at_task_zero():
    return [Finetune(), FedLwF(alpha=5.0), FedEWC(lam=50.0), Replay("local"), Replay("global"), Target(alpha=5.0)]


def test_every_strategy_reduces_to_finetune_on_first_task():
    spec = bn_spec()
    ds = blob_dataset([6, 6, 6])
    shard = _shards()[0]
    outs = []
    for strat in _strategies_at_task_zero():
        state = _state(spec)
        outs.append(client_update(state, shard, ds, strat, FedConfig(epochs=2, batch_size=4)).params)
    for p in outs[1:]:
        assert p.values.tobytes() == outs[0].values.tobytes()
        for layer, (m, v) in outs[0].bn_stats.items():
            assert np.array_equal(p.bn_stats[layer][0], m) and np.array_equal(p.bn_stats[layer][1], v)


def test_zero_alpha_target_matches_finetune_on_later_task():
    spec = linear_spec()
    ds = blob_dataset([6, 6, 6])
    shard = ClientShard(0, 1, ds.indices_of([2]))
    outs = []
    for strat in (Finetune(), Target(alpha=0.0), FedLwF(alpha=0.0)):
        state = _state(spec)
        state.task = 1
        state.frozen_teacher = state.global_params.copy()
        teacher = round_teacher(state, FedConfig())
        outs.append(client_update(state, shard, ds, strat, FedConfig(batch_size=2), teacher).params.values)
    assert outs[1].tobytes() == outs[0].tobytes()
    assert outs[2].tobytes() == outs[0].tobytes()


def test_target_with_memory_moves_away_from_finetune():
    spec = linear_spec()
    ds = blob_dataset([6, 6, 6])
    shard = ClientShard(0, 1, ds.indices_of([2]))
    base_state = _state(spec)
    base_state.task = 1
    base = client_update(base_state, shard, ds, Finetune(), FedConfig(batch_size=2)).params.values

    state = _state(spec)
    state.task = 1
    teacher_params = init_params(spec, np.random.default_rng(77))
    state.frozen_teacher = teacher_params
    strat = Target(alpha=10.0)
    strat.memory = SyntheticMemory(ds.inputs[ds.indices_of([0, 1])], 12, 0)
    out = client_update(state, shard, ds, strat, FedConfig(batch_size=2), round_teacher(state, FedConfig()))
    assert not np.allclose(out.params.values, base)


# ---- server ----

def test_round_teacher_modes():
    spec = linear_spec()
    state = _state(spec)
    assert round_teacher(state, FedConfig()) is None
    state.task = 1
    state.frozen_teacher = init_params(spec, np.random.default_rng(3))
    assert round_teacher(state, FedConfig()).params is state.frozen_teacher
    assert round_teacher(state, FedConfig(teacher="per_round")).params is state.global_params
    with pytest.raises(ConfigError):
        round_teacher(state, FedConfig(teacher="ema"))


def test_single_client_one_round_equals_local_training():
    spec = linear_spec()
    ds = blob_dataset([8, 8, 8])
    shard = ClientShard(0, 0, ds.indices_of([0, 1]))
    state = _state(spec, seed=4, num_clients=1)
    start = state.global_params.copy()
    cfg = FedConfig(rounds=1, epochs=3, batch_size=4, lr=0.05)
    run_task(state, 0, Finetune(), ds, [shard], ds, SPLIT, cfg)
    expected, _ = local_sgd(spec, start, ds, shard.indices, 3, 4,
                            OptimConfig(0.05, cfg.momentum, cfg.weight_decay), ce_step, client_rng(4, 0))
    assert np.array_equal(state.global_params.values, expected.values)


def test_zero_rounds_keep_initial_params_and_still_evaluate():
    spec = linear_spec()
    ds = blob_dataset([6, 6, 6])
    state = _state(spec)
    start = state.global_params.values.copy()
    out = run_task(state, 0, Finetune(), ds, _shards(), ds, SPLIT, FedConfig(rounds=0))
    assert np.array_equal(state.global_params.values, start)
    assert sorted(out.per_class) == [0, 1]
    assert out.round_losses == []


def test_threaded_clients_match_sequential():
    spec = bn_spec()
    ds = blob_dataset([6, 6, 6])
    finals = []
    for workers in (1, 3):
        state = _state(spec)
        run_task(state, 0, Finetune(), ds, _shards(), ds, SPLIT,
                 FedConfig(rounds=2, epochs=1, batch_size=3, workers=workers))
        finals.append(state.global_params)
    assert finals[0].values.tobytes() == finals[1].values.tobytes()
    for layer, (m, v) in finals[0].bn_stats.items():
        assert np.array_equal(finals[1].bn_stats[layer][0], m)
        assert np.array_equal(finals[1].bn_stats[layer][1], v)


def test_round_with_only_empty_shards_is_skipped():
    clear_events()
    spec = linear_spec()
    ds = blob_dataset([6, 6, 6])
    state = _state(spec, num_clients=2)
    start = state.global_params.values.copy()
    empty = [ClientShard(k, 0, np.zeros(0, dtype=np.int64)) for k in range(2)]
    out = run_task(state, 0, Finetune(), ds, empty, ds, SPLIT, FedConfig(rounds=2))
    assert np.array_equal(state.global_params.values, start)
    assert len(recent_events(stage="federation", event="empty_round")) == 2
    assert all(np.isnan(v) for v in out.round_losses)


def test_later_task_freezes_teacher_and_can_restart_from_fresh_init():
    spec = linear_spec()
    ds = blob_dataset([6, 6, 6])
    state = _state(spec, seed=12)
    previous = state.global_params.values.copy()
    shards = [ClientShard(k, 1, ds.indices_of([2])[k::3]) for k in range(3)]
    run_task(state, 1, Finetune(), ds, shards, ds, SPLIT, FedConfig(rounds=0, warm_start=False))
    assert np.array_equal(state.frozen_teacher.values, previous)
    assert np.array_equal(state.global_params.values, init_params(spec, named_rng(12, "init.1")).values)
    assert state.task == 1


def test_per_round_evaluation_curve():
    spec = linear_spec()
    ds = blob_dataset([6, 6, 6])
    state = _state(spec)
    out = run_task(state, 0, Finetune(), ds, _shards(), ds, SPLIT,
                   FedConfig(rounds=3, epochs=1, batch_size=4, eval_per_round=True))
    assert len(out.round_curve) == 3
    assert all(0.0 <= a <= 1.0 for a in out.round_curve)
    assert len(recent_events(stage="federation", event="round_completed")) >= 3


def test_one_sample_lwf_step_matches_closed_form():
    spec = linear_spec((1, 2, 2), 3)
    ds = blob_dataset([1, 1, 1])
    shard = ClientShard(0, 1, np.array([1]))
    state = _state(spec, num_clients=1)
    state.task = 1
    state.frozen_teacher = init_params(spec, np.random.default_rng(21))
    teacher = round_teacher(state, FedConfig())
    cfg = FedConfig(epochs=1, batch_size=1, lr=0.1, momentum=0.0, weight_decay=0.0)
    res = client_update(state, shard, ds, FedLwF(alpha=2.0), cfg, teacher)

    g = state.global_params
    x = ds.inputs[1].reshape(-1)
    p = softmax(g.view(1, "W") @ x + g.view(1, "b"))
    q = softmax(teacher.params.view(1, "W") @ x + teacher.params.view(1, "b"))
    d = (p - np.eye(3)[1]) + 2.0 * (p - q)
    assert np.allclose(res.params.view(1, "W"), g.view(1, "W") - 0.1 * np.outer(d, x), atol=1e-12)
    assert np.allclose(res.params.view(1, "b"), g.view(1, "b") - 0.1 * d, atol=1e-12)


def test_run_task_equals_sequential_replay_of_the_schedule():
    spec = linear_spec()
    ds = blob_dataset([6, 6, 6])
    shards = _shards(num_clients=2)
    cfg = FedConfig(rounds=2, fraction=0.5, epochs=1, batch_size=4)
    state = _state(spec, seed=31, num_clients=2)
    out = run_task(state, 0, Finetune(), ds, shards, ds, SPLIT, cfg)

    replay = _state(spec, seed=31, num_clients=2)
    sampler = named_rng(31, "sampling")
    for r in range(2):
        ids = sample_clients(2, 0.5, sampler)
        assert ids == out.sampled[r]
        results = [client_update(replay, shards[i], ds, Finetune(), cfg) for i in ids]
        replay.global_params = aggregate(results)
    assert np.array_equal(state.global_params.values, replay.global_params.values)
