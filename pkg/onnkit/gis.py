"""Two-pass greedy iterative search (GIS) over layerwise operator sets"""
import asyncio
import os
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .backprop import TrainingPair, train, train_best_of
from .errors import NumericalError
from .logger import setup_logger
from .models import (
    GISConfig,
    GISLog,
    GISLogEntry,
    LayerSpec,
    OperatorLibrary,
    OperatorParams,
    TrainConfig,
)
from .network import NetworkModel, derive_seed, init
from .operators import describe, index_to_set

logger = setup_logger("onnkit.gis")

# Optional tqdm for progress bar
try:
    from tqdm import tqdm
except ImportError:
    tqdm = None

INITIAL_ASSIGNMENT_KEY = 0
FINAL_TRAINING_KEY = 1


def default_threads() -> int:
    """Worker count from ONN_THREADS, 1 when unset"""
    value = os.getenv("ONN_THREADS", "1")
    try:
        threads = int(value)
    except ValueError:
        raise ValueError(f"ONN_THREADS must be an integer, got {value!r}")
    if threads < 1:
        raise ValueError(f"ONN_THREADS must be >= 1, got {threads}")
    return threads


class CandidateResult(BaseModel):
    """Short BP runs of one candidate set at one (pass, layer) position"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    set_index: int = Field(..., description="Candidate operator set")
    best_loss: float = Field(..., description="Lowest loss over the runs")
    seeds: List[int] = Field(..., description="Initialisation seeds, shared by all candidates")
    best_model: Optional[NetworkModel] = Field(None, description="Model of the best run")


# =========================================================================
# Public helpers
# =========================================================================

def candidate_seeds(root_seed: int, pass_index: int, layer: int, n_bp: int) -> List[int]:
    """Seeds of the short BP runs at one (pass, layer); every candidate there uses them"""
    return [derive_seed(root_seed, pass_index, layer, run) for run in range(n_bp)]


def searchable_layers(depth: int, library: OperatorLibrary) -> List[int]:
    """Layer numbers open to the search, output side first"""
    for layer in library.frozen_layers:
        if not 1 <= layer <= depth:
            raise ValueError(f"frozen layer {layer} outside [1, {depth}]")
    return [l for l in range(depth, 0, -1) if l not in library.frozen_layers]


def apply_assignment(specs: Sequence[LayerSpec], assignment: Dict[int, int]) -> List[LayerSpec]:
    """Specs with layer l carrying operator set assignment[l]"""
    return [
        spec.model_copy(update={"operator_set": assignment.get(l, spec.operator_set)})
        for l, spec in enumerate(specs, start=1)
    ]


def initial_assignment(
    specs: Sequence[LayerSpec], library: OperatorLibrary, seed: int
) -> Dict[int, int]:
    """Random library sets for searchable layers, pinned sets for frozen ones"""
    rng = np.random.default_rng(derive_seed(seed, INITIAL_ASSIGNMENT_KEY))
    assignment = {}
    for layer in range(1, len(specs) + 1):
        if layer in library.frozen_layers:
            assignment[layer] = library.frozen_layers[layer]
        else:
            assignment[layer] = library.sets[int(rng.integers(len(library.sets)))]
    return assignment


def evaluate_candidate(
    specs: Sequence[LayerSpec],
    dataset: Sequence[TrainingPair],
    assignment: Dict[int, int],
    seeds: Sequence[int],
    train_config: TrainConfig,
    set_index: int,
    input_channels: int = 1,
    params: Optional[OperatorParams] = None,
) -> CandidateResult:
    """
    Run one short BP session per seed with the given assignment and keep the best

    A diverged session scores inf, so the candidate still gets a log entry and ranks last.
    """
    assigned = apply_assignment(specs, assignment)
    best_loss, best_model = float("inf"), None
    for seed in seeds:
        model = init(assigned, seed, input_channels=input_channels, params=params)
        try:
            trained, history = train(
                model, dataset, train_config.model_copy(update={"seed": seed})
            )
        except NumericalError as e:
            logger.warning(f"set {set_index} seed {seed}: {e}")
            continue
        run_loss = min((h.loss for h in history), default=float("inf"))
        if run_loss < best_loss:
            best_loss, best_model = run_loss, trained
    return CandidateResult(
        set_index=set_index, best_loss=best_loss, seeds=list(seeds), best_model=best_model
    )


def ranking_table(log: GISLog) -> str:
    """Tab-separated pass/layer/set/loss/rank table"""
    rows = ["pass\tlayer\tset\toperators\tbest_mse\trank"]
    for e in log.entries:
        rows.append(
            f"{e.pass_index}\t{e.layer}\t{e.set_index}\t{describe(index_to_set(e.set_index))}"
            f"\t{e.best_loss!r}\t{e.rank}"
        )
    return "\n".join(rows) + "\n"


# =========================================================================
# Search
# =========================================================================

class GreedySearch:
    """Greedy iterative search session"""

    def __init__(
        self,
        specs: Sequence[LayerSpec],
        dataset: Sequence[TrainingPair],
        library: OperatorLibrary,
        config: GISConfig,
        train_config: Optional[TrainConfig] = None,
        input_channels: int = 1,
        params: Optional[OperatorParams] = None,
        threads: Optional[int] = None,
    ):
        if not dataset:
            raise ValueError("GIS needs a non-empty dataset")
        self.specs = list(specs)
        self.dataset = dataset
        self.library = library
        self.config = config
        self.input_channels = input_channels
        self.params = params
        self.layers = searchable_layers(len(self.specs), library)
        if not self.layers:
            raise ValueError("every layer is frozen: nothing to search")
        if not library.sets:
            raise ValueError("operator library must not be empty")

        base = train_config or TrainConfig()
        self.short_config = base.model_copy(
            update={"iter_max": config.short_iter_max, "target_metric": config.target_metric}
        )
        self.final_config = base.model_copy(
            update={
                "iter_max": config.final_iter_max,
                "target_metric": config.target_metric,
                "seed": derive_seed(config.seed, FINAL_TRAINING_KEY),
            }
        )
        self.threads = threads or default_threads()
        self.semaphore: Optional[asyncio.Semaphore] = None

    # =========================================================================
    # Public API Methods
    # =========================================================================

    def run(self, show_progress: bool = False) -> Tuple[NetworkModel, GISLog]:
        return asyncio.run(self.search(show_progress=show_progress))

    async def search(self, show_progress: bool = False) -> Tuple[NetworkModel, GISLog]:
        """
        Visit the searchable layers from output to first, pass after pass, keeping each
        layer's winning set before moving on

        Returns:
            (final model, GISLog)
        """
        self.semaphore = asyncio.Semaphore(self.threads)
        assignment = initial_assignment(self.specs, self.library, self.config.seed)
        log = GISLog()
        reached: Optional[CandidateResult] = None

        total = self.config.passes * len(self.layers) * len(self.library.sets)
        pbar = None
        if show_progress and tqdm:
            pbar = tqdm(total=total, desc="GIS", unit="set")
        logger.info(
            f"GIS over layers {self.layers} with {len(self.library.sets)} sets, "
            f"{self.config.passes} passes, {self.threads} threads"
        )

        for pass_index in range(1, self.config.passes + 1):
            for layer in self.layers:
                results = await self._evaluate_position(pass_index, layer, assignment, pbar)
                winner = min(results, key=lambda r: (r.best_loss, r.set_index))
                assignment[layer] = winner.set_index
                self._log_position(log, pass_index, layer, results)
                logger.info(
                    f"pass {pass_index} layer {layer}: set {winner.set_index} "
                    f"({describe(index_to_set(winner.set_index))}) E={winner.best_loss:.6g}"
                )
                reached = self._target_run(results)
                if reached is not None:
                    break
            if reached is not None:
                break

        if pbar:
            pbar.close()

        log.assignment = dict(sorted(assignment.items()))
        if reached is not None:
            log.target_reached = True
            logger.info(f"Target {self.config.target_metric} reached during the search")
            return reached.best_model, log

        model, _, _ = await asyncio.to_thread(
            train_best_of,
            apply_assignment(self.specs, assignment),
            self.dataset,
            self.final_config,
            1,
            self.input_channels,
            self.params,
        )
        return model, log

    # =========================================================================
    # Internal Orchestration/Helper Methods
    # =========================================================================

    async def _evaluate_position(
        self, pass_index: int, layer: int, assignment: Dict[int, int], pbar
    ) -> List[CandidateResult]:
        seeds = candidate_seeds(self.config.seed, pass_index, layer, self.config.n_bp)
        tasks = [
            self._evaluate_with_semaphore({**assignment, layer: set_index}, seeds, set_index, pbar)
            for set_index in self.library.sets
        ]
        # gather keeps library order
        return list(await asyncio.gather(*tasks))

    async def _evaluate_with_semaphore(
        self, assignment: Dict[int, int], seeds: List[int], set_index: int, pbar
    ) -> CandidateResult:
        async with self.semaphore:
            result = await asyncio.to_thread(
                evaluate_candidate,
                self.specs,
                self.dataset,
                assignment,
                seeds,
                self.short_config,
                set_index,
                self.input_channels,
                self.params,
            )
        if pbar:
            pbar.update(1)
        else:
            logger.debug(f"set {set_index}: E={result.best_loss:.6g}")
        return result

    def _log_position(
        self, log: GISLog, pass_index: int, layer: int, results: List[CandidateResult]
    ) -> None:
        ranked = sorted(results, key=lambda r: (r.best_loss, r.set_index))
        ranks = {r.set_index: rank for rank, r in enumerate(ranked, start=1)}
        for r in results:
            log.entries.append(
                GISLogEntry(
                    pass_index=pass_index,
                    layer=layer,
                    set_index=r.set_index,
                    best_loss=r.best_loss,
                    seeds=r.seeds,
                    rank=ranks[r.set_index],
                )
            )

    def _target_run(self, results: List[CandidateResult]) -> Optional[CandidateResult]:
        target = self.config.target_metric
        if target is None:
            return None
        hits = [r for r in results if r.best_loss <= target]
        return min(hits, key=lambda r: (r.best_loss, r.set_index)) if hits else None


def gis_search(
    specs: Sequence[LayerSpec],
    dataset: Sequence[TrainingPair],
    library: OperatorLibrary,
    config: GISConfig,
    train_config: Optional[TrainConfig] = None,
    input_channels: int = 1,
    params: Optional[OperatorParams] = None,
    threads: Optional[int] = None,
    show_progress: bool = False,
) -> Tuple[NetworkModel, GISLog]:
    """
    Two-pass GIS: assign one operator set per searchable layer by short BP sessions

    Args:
        specs: Network structure; operator sets of searchable layers are overwritten
        dataset: (input maps, target maps) pairs
        library: Candidate sets and frozen layers
        config: Passes, runs per candidate, iteration budgets, CP* and root seed
        train_config: Learning-rate schedule shared by all BP sessions
        input_channels: Number of input maps
        params: Operator constants
        threads: Parallel candidate evaluations (ONN_THREADS by default)
        show_progress: Show a tqdm bar over candidates

    Returns:
        (final model, GISLog)
    """
    search = GreedySearch(
        specs, dataset, library, config, train_config, input_channels, params, threads
    )
    return search.run(show_progress=show_progress)
