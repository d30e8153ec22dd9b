"""Tests for run artifacts"""
import json
import math

import numpy as np
import pytest

from onnkit.errors import DatasetError
from onnkit.models import GISLog, GISLogEntry, HistoryEntry, MetricReport
from onnkit.storage import (
    GIS_LOG_FILE,
    HISTORY_FILE,
    METRICS_FILE,
    MODEL_FILE,
    OUTPUTS_DIR,
    TIMING_FILE,
    ArtifactStore,
    average_report,
    load_model,
)


@pytest.fixture
def store(tmp_path) -> ArtifactStore:
    return ArtifactStore(tmp_path / "run")


def test_model_round_trip(store, small_model):
    """Test that a stored model reloads with identical parameters"""
    path = store.save_model(small_model)
    assert path.name == MODEL_FILE
    loaded = store.load_model()
    for a, b in zip(small_model.layers, loaded.layers):
        np.testing.assert_array_equal(a.kernels, b.kernels)
        np.testing.assert_array_equal(a.biases, b.biases)
    assert store.save_model(loaded).read_text() == path.read_text()


def test_load_model_missing_file(tmp_path):
    """Test the error for an absent model document"""
    with pytest.raises(DatasetError):
        load_model(tmp_path / "nothing.json")


def test_history_table(store):
    """Test header, rows and that wall times are left out"""
    history = [
        HistoryEntry(iteration=1, loss=0.5, epsilon=0.05, fp_ms=3.0),
        HistoryEntry(iteration=2, loss=0.25, epsilon=0.0525, fp_ms=4.0),
    ]
    lines = store.write_history(history).read_text().splitlines()
    assert lines == ["iteration\tloss\tepsilon", "1\t0.5\t0.05", "2\t0.25\t0.0525"]
    assert store.path(HISTORY_FILE).exists()


def test_metrics_with_average_row(store):
    """Test one JSON line per item plus the averages"""
    reports = [
        MetricReport(item_id="a", mse=0.1, snr_db=10.0),
        MetricReport(item_id="b", mse=0.3, snr_db=math.inf),
    ]
    lines = store.write_metrics(reports).read_text().splitlines()
    assert len(lines) == 3
    assert json.loads(lines[0])["item_id"] == "a"
    summary = json.loads(lines[2])
    assert summary["item_id"] == "average"
    assert summary["mse"] == pytest.approx(0.2)
    assert summary["snr_db"] == 10.0
    assert store.path(METRICS_FILE).exists()


def test_average_report():
    """Test empty input, all-infinite SNRs and the segmentation fields"""
    assert average_report([]) is None
    exact = [MetricReport(mse=0.0, snr_db=math.inf), MetricReport(mse=0.0, snr_db=math.inf)]
    assert average_report(exact).snr_db == math.inf
    seg = [
        MetricReport(mse=0.1, snr_db=1.0, ce=0.2, f1=0.5),
        MetricReport(mse=0.1, snr_db=3.0, ce=0.4, f1=1.0),
    ]
    summary = average_report(seg)
    assert summary.ce == pytest.approx(0.3)
    assert summary.f1 == pytest.approx(0.75)
    assert summary.snr_db == pytest.approx(2.0)
    assert summary.precision is None


def test_timing_file(store):
    """Test the per-iteration means and extra fields"""
    history = [
        HistoryEntry(iteration=1, loss=1.0, epsilon=0.1, fp_ms=2.0, bp_ms=6.0),
        HistoryEntry(iteration=2, loss=0.9, epsilon=0.1, fp_ms=4.0, bp_ms=8.0),
    ]
    timing = json.loads(store.write_timing(history, {"run_index": 0}).read_text())
    assert timing == {
        "iterations": 2,
        "fp_ms_per_iter": 3.0,
        "bp_ms_per_iter": 7.0,
        "run_index": 0,
    }
    assert store.path(TIMING_FILE).exists()
    assert json.loads(store.write_timing([]).read_text())["fp_ms_per_iter"] == 0.0


def test_gis_log_file(store):
    """Test that the ranking table is written"""
    log = GISLog(
        entries=[GISLogEntry(pass_index=1, layer=1, set_index=9, best_loss=0.1, seeds=[1], rank=1)],
        assignment={1: 9},
    )
    lines = store.write_gis_log(log).read_text().splitlines()
    assert lines[0].startswith("pass\tlayer\tset")
    assert lines[1].split("\t")[:3] == ["1", "1", "9"]
    assert store.path(GIS_LOG_FILE).exists()


def test_output_images(store, rng):
    """Test single- and multi-channel previews"""
    single = store.write_image("x", rng.uniform(-1.0, 1.0, size=(1, 4, 4)))
    assert single.exists()
    assert single.parent.name == OUTPUTS_DIR
    store.write_image("y", rng.uniform(-1.0, 1.0, size=(2, 4, 4)))
    assert (store.path(OUTPUTS_DIR) / "y_c0.pgm").exists()
    assert (store.path(OUTPUTS_DIR) / "y_c1.pgm").exists()
