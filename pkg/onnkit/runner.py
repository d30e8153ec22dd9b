"""Experiment runner: the commands behind the CLI"""
import time
from typing import List, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field

from .backprop import GradcheckResult, gradient_check, train_best_of
from .datasets import (
    DatasetManifest,
    DatasetPair,
    dataset_manifest,
    generate,
    load_dataset,
    make_data,
    training_pairs,
)
from .errors import ShapeError
from .evalmetrics import evaluate_item
from .gis import default_threads, gis_search
from .logger import setup_logger
from .models import (
    NUM_OPERATOR_SETS,
    ExperimentConfig,
    GISLog,
    HistoryEntry,
    LayerSpec,
    MetricReport,
    OperatorLibrary,
    PaddingMode,
    TaskKind,
)
from .network import NetworkModel, forward, layer_output_shape
from .operators import describe, index_to_set
from .storage import ArtifactStore, load_model

logger = setup_logger("onnkit.runner")

DEFAULT_GRADCHECK_SEEDS = 5
DEFAULT_TOLERANCE = 1e-5
GRADCHECK_FILE = "gradcheck.tsv"


class TrainOutcome(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    model: NetworkModel
    history: List[HistoryEntry] = Field(default_factory=list)
    reports: List[MetricReport] = Field(default_factory=list)
    run_index: int = 0


class GISOutcome(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    model: NetworkModel
    log: GISLog
    reports: List[MetricReport] = Field(default_factory=list)


class GradcheckRow(BaseModel):
    """Worst error of one operator set over every seed and padding mode"""
    set_index: int
    operators: str
    max_relative_error: float
    checks: int
    redraws: int
    passed: bool


class ExperimentRunner:
    """Runs one experiment configuration and writes its artifacts"""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.threads = config.threads or default_threads()
        self._store: Optional[ArtifactStore] = None

    @property
    def store(self) -> ArtifactStore:
        if self._store is None:
            self._store = ArtifactStore(self.config.out_dir)
        return self._store

    # =========================================================================
    # Public API Methods
    # =========================================================================

    def train(self) -> TrainOutcome:
        """
        BP training (best of ``runs`` seeds) followed by per-item evaluation

        Writes model.json, history.tsv, metrics.jsonl, timing.json and outputs/.
        """
        pairs = self._training_data()
        specs = self._specs(pairs)
        train_config = self.config.train.model_copy(update={"seed": self.config.seed})
        logger.info(
            f"Training {self._describe_net(pairs, specs)} on {len(pairs)} items, "
            f"{train_config.iter_max} iterations, {self.config.runs} run(s)"
        )
        model, history, run_index = train_best_of(
            specs,
            training_pairs(pairs),
            train_config,
            runs=self.config.runs,
            input_channels=int(pairs[0].input.shape[0]),
            params=self.config.operator_params,
            show_progress=self.config.show_progress,
        )
        reports = self._evaluate_model(model, self._eval_data(pairs))
        self.store.save_model(model)
        self.store.write_history(history)
        self.store.write_timing(history, {"run_index": run_index})
        if history:
            logger.info(
                f"Best E={min(h.loss for h in history):.6g} after {len(history)} iterations"
            )
        return TrainOutcome(model=model, history=history, reports=reports, run_index=run_index)

    def gis(self) -> GISOutcome:
        """Greedy iterative search over the operator library, then final BP"""
        pairs = self._training_data()
        specs = self._specs(pairs)
        frozen = {l: s for l, s in self.config.frozen_layers.items() if 1 <= l <= len(specs)}
        library = OperatorLibrary(sets=self.config.library, frozen_layers=frozen)
        gis_config = self.config.gis.model_copy(update={"seed": self.config.seed})

        start = time.perf_counter()
        model, log = gis_search(
            specs,
            training_pairs(pairs),
            library,
            gis_config,
            train_config=self.config.train,
            input_channels=int(pairs[0].input.shape[0]),
            params=self.config.operator_params,
            threads=self.threads,
            show_progress=self.config.show_progress,
        )
        elapsed = time.perf_counter() - start

        reports = self._evaluate_model(model, self._eval_data(pairs))
        self.store.save_model(model)
        self.store.write_gis_log(log)
        self.store.write_timing([], {"gis_seconds": elapsed, "threads": self.threads})
        for layer, set_index in log.assignment.items():
            operator_set = index_to_set(set_index)
            logger.info(f"layer {layer}: {operator_set} {describe(operator_set)}")
        return GISOutcome(model=model, log=log, reports=reports)

    def evaluate(self) -> List[MetricReport]:
        """Forward-only inference of a saved model on the evaluation dataset"""
        if not self.config.model_path:
            raise ValueError("eval needs a model path")
        model = load_model(self.config.model_path)
        path = self.config.eval_dataset or self.config.dataset
        if path is None:
            raise ValueError("eval needs a dataset")
        pairs = load_dataset(path, size=self.config.image_size, task=self.config.task)
        self.store.write_dataset_manifest(dataset_manifest(path, pairs, self.config.task))
        return self._evaluate_model(model, pairs)

    def gradcheck(
        self,
        sets: Optional[Sequence[int]] = None,
        seeds: int = DEFAULT_GRADCHECK_SEEDS,
        tolerance: float = DEFAULT_TOLERANCE,
        paddings: Sequence[PaddingMode] = (PaddingMode.NO_ZERO_PAD, PaddingMode.SAME_PAD),
    ) -> Tuple[List[GradcheckRow], bool]:
        """
        Analytic vs central-difference gradients for every operator set

        Args:
            sets: Operator sets to check (all 28 by default)
            seeds: Random draws per set and padding mode
            tolerance: A set passes when its worst relative error is below this
            paddings: Padding modes to check

        Returns:
            (one row per set, whether every set passed)
        """
        rows = []
        for set_index in sets if sets is not None else range(NUM_OPERATOR_SETS):
            results: List[GradcheckResult] = [
                gradient_check(set_index, self.config.seed + k, padding)
                for padding in paddings
                for k in range(seeds)
            ]
            worst = max(r.max_relative_error for r in results)
            rows.append(
                GradcheckRow(
                    set_index=set_index,
                    operators=describe(index_to_set(set_index)),
                    max_relative_error=worst,
                    checks=len(results),
                    redraws=sum(r.redraws for r in results),
                    passed=worst < tolerance,
                )
            )
            logger.debug(f"set {set_index}: max rel. error {worst:.3e}")
        self.store.write_table(GRADCHECK_FILE, gradcheck_table(rows))
        return rows, all(row.passed for row in rows)

    def make_data(self) -> DatasetManifest:
        out = self.config.dataset or self.config.out_dir
        return make_data(
            self.config.task, self.config.seed, out, self.config.image_size, self.config.items
        )

    # =========================================================================
    # Internal Orchestration/Helper Methods
    # =========================================================================

    def _training_data(self) -> List[DatasetPair]:
        if self.config.dataset:
            pairs = load_dataset(
                self.config.dataset, size=self.config.image_size, task=self.config.task
            )
            self.store.write_dataset_manifest(
                dataset_manifest(self.config.dataset, pairs, self.config.task)
            )
            return pairs
        logger.info(f"No dataset: generating {self.config.items} {self.config.task.value} items")
        return generate(
            self.config.task, self.config.seed, self.config.image_size, self.config.items
        )

    def _eval_data(self, training: List[DatasetPair]) -> List[DatasetPair]:
        if self.config.eval_dataset:
            return load_dataset(
                self.config.eval_dataset, size=self.config.image_size, task=self.config.task
            )
        return training

    def _specs(self, pairs: List[DatasetPair]) -> List[LayerSpec]:
        """Configured layers, checked against the data dims"""
        specs = list(self.config.layers)
        target_channels, rows, cols = pairs[0].target.shape
        if specs[-1].neuron_count != target_channels:
            raise ShapeError(
                f"output layer has {specs[-1].neuron_count} neurons, targets have "
                f"{target_channels} channels"
            )
        shape = pairs[0].input.shape[1:]
        for spec in specs:
            shape = layer_output_shape(spec, *shape)
        if shape != (rows, cols):
            raise ShapeError(
                f"network maps {pairs[0].input.shape[1]}x{pairs[0].input.shape[2]} inputs to "
                f"{shape[0]}x{shape[1]}, targets are {rows}x{cols}"
            )
        return specs

    def _describe_net(self, pairs: List[DatasetPair], specs: List[LayerSpec]) -> str:
        counts = [int(pairs[0].input.shape[0])] + [s.neuron_count for s in specs]
        return "x".join(str(c) for c in counts) + " ONN"

    def _evaluate_model(self, model: NetworkModel, pairs: List[DatasetPair]) -> List[MetricReport]:
        segmentation = self.config.task == TaskKind.SEGMENT
        reports = []
        for pair in pairs:
            outputs, _ = forward(model, pair.input)
            if outputs.shape != pair.target.shape:
                raise ShapeError(f"{pair.id}: output {outputs.shape} vs target {pair.target.shape}")
            reports.append(
                evaluate_item(
                    outputs, pair.target, pair.id, segmentation, self.config.threshold
                )
            )
            self.store.write_image(pair.id, outputs)
        self.store.write_metrics(reports)
        return reports


def gradcheck_table(rows: Sequence[GradcheckRow]) -> str:
    lines = ["set\toperators\tmax_rel_error\tchecks\tredraws\tstatus"]
    for row in rows:
        status = "pass" if row.passed else "FAIL"
        lines.append(
            f"{row.set_index}\t{row.operators}\t{row.max_relative_error:.3e}\t{row.checks}"
            f"\t{row.redraws}\t{status}"
        )
    return "\n".join(lines) + "\n"

