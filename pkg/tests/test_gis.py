"""Tests for the greedy iterative search"""
import numpy as np
import pytest

from onnkit.backprop import train
from onnkit.gis import (
    apply_assignment,
    candidate_seeds,
    default_threads,
    gis_search,
    initial_assignment,
    ranking_table,
    searchable_layers,
)
from onnkit.models import GISConfig, LayerSpec, OperatorLibrary, PaddingMode, TrainConfig
from onnkit.network import forward, init, operator_assignment

LIBRARY_SETS = [0, 9, 13, 16]


@pytest.fixture
def one_hidden_layer():
    return [LayerSpec(neuron_count=2), LayerSpec(neuron_count=1)]


@pytest.fixture
def search_config() -> GISConfig:
    return GISConfig(passes=1, n_bp=2, short_iter_max=3, final_iter_max=3, seed=5)


def test_searchable_layers():
    """Test output-to-first order and frozen layers"""
    library = OperatorLibrary(frozen_layers={3: 0})
    assert searchable_layers(3, library) == [2, 1]
    assert searchable_layers(3, OperatorLibrary()) == [3, 2, 1]
    with pytest.raises(ValueError):
        searchable_layers(2, library)


def test_initial_assignment(one_hidden_layer):
    """Test that initial sets come from the library and frozen layers keep their pin"""
    library = OperatorLibrary(sets=[9, 13], frozen_layers={2: 0})
    assignment = initial_assignment(one_hidden_layer, library, seed=1)
    assert assignment[2] == 0
    assert assignment[1] in (9, 13)
    assert assignment == initial_assignment(one_hidden_layer, library, seed=1)
    assert [s.operator_set for s in apply_assignment(one_hidden_layer, {1: 9})] == [9, 0]


def test_candidate_seeds():
    """Test that seeds depend on the position and not on the candidate"""
    seeds = candidate_seeds(5, 1, 2, 3)
    assert len(seeds) == 3
    assert seeds == candidate_seeds(5, 1, 2, 3)
    assert seeds != candidate_seeds(5, 2, 2, 3)


def test_single_set_library(tiny_dataset, search_config):
    """Test that a one-set library is assigned everywhere with one row per position"""
    specs = [
        LayerSpec(neuron_count=2, sampling=-2),
        LayerSpec(neuron_count=2, sampling=2),
        LayerSpec(neuron_count=1),
    ]
    library = OperatorLibrary(sets=[9])
    config = search_config.model_copy(update={"passes": 2})
    model, log = gis_search(specs, tiny_dataset, library, config)
    assert log.assignment == {1: 9, 2: 9, 3: 9}
    assert operator_assignment(model) == {1: 9, 2: 9, 3: 9}
    assert len(log.entries) == 2 * 3
    assert all(e.rank == 1 for e in log.entries)


def test_matches_exhaustive_search(tiny_dataset, one_hidden_layer, search_config):
    """Test that one pass over one searchable layer equals brute-force enumeration"""
    library = OperatorLibrary(sets=LIBRARY_SETS, frozen_layers={2: 0})
    model, log = gis_search(
        one_hidden_layer, tiny_dataset, library, search_config, TrainConfig()
    )

    seeds = candidate_seeds(search_config.seed, 1, 1, search_config.n_bp)
    short = TrainConfig(iter_max=search_config.short_iter_max)
    scores = {}
    for set_index in LIBRARY_SETS:
        specs = [
            one_hidden_layer[0].model_copy(update={"operator_set": set_index}),
            one_hidden_layer[1],
        ]
        scores[set_index] = min(
            min(h.loss for h in train(init(specs, seed), tiny_dataset, short)[1])
            for seed in seeds
        )
    expected = min(LIBRARY_SETS, key=lambda s: (scores[s], s))

    assert log.assignment == {1: expected, 2: 0}
    assert operator_assignment(model) == {1: expected, 2: 0}
    assert {e.set_index: e.best_loss for e in log.entries} == scores


def test_log_bookkeeping(tiny_dataset, search_config):
    """Test candidate counts, frozen layers and the winner's loss"""
    specs = [LayerSpec(neuron_count=2), LayerSpec(neuron_count=2), LayerSpec(neuron_count=1)]
    library = OperatorLibrary(sets=[0, 7, 16], frozen_layers={3: 0})
    config = search_config.model_copy(update={"passes": 2})
    _, log = gis_search(specs, tiny_dataset, library, config)

    assert all(e.layer != 3 for e in log.entries)
    positions = {(e.pass_index, e.layer) for e in log.entries}
    assert positions == {(1, 2), (1, 1), (2, 2), (2, 1)}
    for position in positions:
        rows = [e for e in log.entries if (e.pass_index, e.layer) == position]
        assert sorted(e.set_index for e in rows) == [0, 7, 16]
        winner = next(e for e in rows if e.rank == 1)
        assert all(winner.best_loss <= e.best_loss for e in rows)
    assert [(e.pass_index, e.layer) for e in log.entries][0] == (1, 2)
    assert log.assignment[3] == 0
    assert not log.target_reached


def test_search_is_deterministic_across_threads(tiny_dataset, one_hidden_layer, search_config):
    """Test identical logs for repeated and multi-threaded searches"""
    library = OperatorLibrary(sets=LIBRARY_SETS, frozen_layers={2: 0})
    _, first = gis_search(one_hidden_layer, tiny_dataset, library, search_config, threads=1)
    _, second = gis_search(one_hidden_layer, tiny_dataset, library, search_config, threads=4)
    assert first.model_dump() == second.model_dump()


def test_target_stops_search(tiny_dataset, one_hidden_layer, search_config):
    """Test that reaching CP* ends the search after the first position"""
    library = OperatorLibrary(sets=[0, 9])
    config = search_config.model_copy(update={"passes": 2, "target_metric": 10.0})
    model, log = gis_search(one_hidden_layer, tiny_dataset, library, config)
    assert log.target_reached
    assert {e.layer for e in log.entries} == {2}
    assert model is not None


def test_rejects_fully_frozen_network(tiny_dataset, one_hidden_layer, search_config):
    """Test that nothing to search is an error"""
    library = OperatorLibrary(frozen_layers={1: 0, 2: 0})
    with pytest.raises(ValueError):
        gis_search(one_hidden_layer, tiny_dataset, library, search_config)


def test_ranking_table(tiny_dataset, one_hidden_layer, search_config):
    """Test the tab-separated log table"""
    library = OperatorLibrary(sets=[0, 9], frozen_layers={2: 0})
    _, log = gis_search(one_hidden_layer, tiny_dataset, library, search_config)
    lines = ranking_table(log).splitlines()
    assert lines[0] == "pass\tlayer\tset\toperators\tbest_mse\trank"
    assert len(lines) == 3
    assert lines[1].split("\t")[3] == "sum/tanh/mul"


def test_diverging_candidate_ranks_last(tiny_dataset, one_hidden_layer, search_config):
    """Test that a candidate whose short runs blow up is logged with inf and loses"""
    library = OperatorLibrary(sets=[3, 0], frozen_layers={1: 0})
    train_config = TrainConfig(epsilon0=1e5, eps_max=1e9)
    model, log = gis_search(one_hidden_layer, tiny_dataset, library, search_config, train_config)
    losses = {e.set_index: e.best_loss for e in log.entries}
    assert set(losses) == {0, 3}
    assert losses[3] == float("inf")
    assert losses[0] < float("inf")
    assert log.assignment == {1: 0, 2: 0}
    assert operator_assignment(model) == {1: 0, 2: 0}
    assert "\tinf\t2" in ranking_table(log)


def test_threads_from_environment(monkeypatch):
    """Test the ONN_THREADS fallback and its validation"""
    monkeypatch.delenv("ONN_THREADS", raising=False)
    assert default_threads() == 1
    monkeypatch.setenv("ONN_THREADS", "3")
    assert default_threads() == 3
    for bad in ("many", "0"):
        monkeypatch.setenv("ONN_THREADS", bad)
        with pytest.raises(ValueError, match="ONN_THREADS"):
            default_threads()


def test_harmonic_generator_prefers_harmonic_set(rng):
    """Test that targets of a frozen sin-nodal network rank set 2 above set 0"""
    spec = LayerSpec(
        neuron_count=1, kernel_rows=1, kernel_cols=1, padding=PaddingMode.NO_ZERO_PAD,
        operator_set=2,
    )
    generator = init([spec], seed=0)
    layer = generator.layers[0].model_copy(
        update={"kernels": np.full((1, 1, 1, 1), 1.2), "biases": np.zeros(1)}
    )
    generator = generator.model_copy(update={"layers": [layer]})
    inputs = [rng.uniform(-1.0, 1.0, size=(1, 8, 8)) for _ in range(2)]
    dataset = [(x, forward(generator, x)[0]) for x in inputs]

    config = GISConfig(passes=1, n_bp=1, short_iter_max=200, final_iter_max=0, seed=0)
    specs = [spec.model_copy(update={"operator_set": 0})]
    model, log = gis_search(specs, dataset, OperatorLibrary(sets=[0, 2]), config)
    losses = {e.set_index: e.best_loss for e in log.entries}
    assert losses[2] < losses[0]
    assert log.assignment == {1: 2}
    assert operator_assignment(model) == {1: 2}
