"""Artifact persistence for experiment runs"""
import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from .datasets import DatasetManifest, write_pgm
from .errors import DatasetError
from .gis import ranking_table
from .logger import setup_logger
from .models import GISLog, HistoryEntry, MetricReport
from .network import NetworkModel, from_document, to_document

logger = setup_logger("onnkit.storage")

MODEL_FILE = "model.json"
HISTORY_FILE = "history.tsv"
METRICS_FILE = "metrics.jsonl"
TIMING_FILE = "timing.json"
GIS_LOG_FILE = "gis_log.tsv"
DATASET_FILE = "dataset.json"
RUN_LOG_FILE = "run.log"
OUTPUTS_DIR = "outputs"


class ArtifactStore:
    """Writes the files of one run below a single output directory"""

    def __init__(self, out_dir: Union[str, Path]):
        self.root = Path(out_dir)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.root / name

    def _write(self, name: str, text: str) -> Path:
        target = self.path(name)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(text)
        logger.debug(f"Wrote {target}")
        return target

    # =========================================================================
    # Deterministic artifacts
    # =========================================================================

    def save_model(self, model: NetworkModel, name: str = MODEL_FILE) -> Path:
        return self._write(name, to_document(model))

    def load_model(self, name: str = MODEL_FILE) -> NetworkModel:
        return load_model(self.path(name))

    def write_history(self, history: Sequence[HistoryEntry]) -> Path:
        """iteration / loss / epsilon table; wall times go to the timing file"""
        rows = ["iteration\tloss\tepsilon"]
        rows += [f"{h.iteration}\t{h.loss!r}\t{h.epsilon!r}" for h in history]
        return self._write(HISTORY_FILE, "\n".join(rows) + "\n")

    def write_table(self, name: str, text: str) -> Path:
        return self._write(name, text)

    def write_gis_log(self, log: GISLog) -> Path:
        return self._write(GIS_LOG_FILE, ranking_table(log))

    def write_metrics(self, reports: Sequence[MetricReport]) -> Path:
        """One JSON object per item, then one for the averages"""
        lines = [report.model_dump_json() for report in reports]
        summary = average_report(reports)
        if summary is not None:
            lines.append(summary.model_dump_json())
        return self._write(METRICS_FILE, "\n".join(lines) + "\n")

    def write_dataset_manifest(self, manifest: DatasetManifest) -> Path:
        return self._write(DATASET_FILE, manifest.model_dump_json(indent=2) + "\n")

    def write_image(self, item_id: str, data) -> Path:
        maps = np.asarray(data, dtype=np.float64)
        target = self.path(OUTPUTS_DIR) / f"{item_id}.pgm"
        target.parent.mkdir(parents=True, exist_ok=True)
        if maps.ndim == 3 and maps.shape[0] == 1:
            maps = maps[0]
        if maps.ndim == 3:
            for channel, plane in enumerate(maps):
                write_pgm(target.with_name(f"{item_id}_c{channel}.pgm"), plane)
        else:
            write_pgm(target, maps)
        return target

    # =========================================================================
    # Volatile artifacts
    # =========================================================================

    def write_timing(
        self, history: Sequence[HistoryEntry], extra: Optional[Dict[str, Any]] = None
    ) -> Path:
        """Mean FP / BP wall time per iteration; differs between identical runs"""
        timing: Dict[str, Any] = {
            "iterations": len(history),
            "fp_ms_per_iter": float(np.mean([h.fp_ms for h in history])) if history else 0.0,
            "bp_ms_per_iter": float(np.mean([h.bp_ms for h in history])) if history else 0.0,
        }
        timing.update(extra or {})
        return self._write(TIMING_FILE, json.dumps(timing, indent=2) + "\n")


def load_model(path: Union[str, Path]) -> NetworkModel:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DatasetError(f"cannot read model {path}: {e}")
    return from_document(text)


def average_report(reports: Sequence[MetricReport]) -> Optional[MetricReport]:
    """Mean of every numeric field over the items (finite SNRs only)"""
    if not reports:
        return None

    def mean(values: List[Optional[float]]) -> Optional[float]:
        present = [v for v in values if v is not None and np.isfinite(v)]
        return float(np.mean(present)) if present else None

    snrs = [r.snr_db for r in reports]
    snr_mean = mean(snrs)
    if snr_mean is None:
        snr_mean = float("inf") if all(s == float("inf") for s in snrs) else float("nan")
    return MetricReport(
        item_id="average",
        mse=float(np.mean([r.mse for r in reports])),
        snr_db=snr_mean,
        ce=mean([r.ce for r in reports]),
        f1=mean([r.f1 for r in reports]),
        precision=mean([r.precision for r in reports]),
        recall=mean([r.recall for r in reports]),
    )
