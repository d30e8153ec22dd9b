"""Pydantic models for type safety and validation"""
import math
from enum import Enum, IntEnum
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

NUM_OPERATOR_SETS = 28


class PaddingMode(str, Enum):
    """Border handling of the 2D operations"""
    NO_ZERO_PAD = "NoZeroPad"
    SAME_PAD = "SamePad"


class NodalId(IntEnum):
    """Nodal operators in enumeration order"""
    MUL = 0
    CUBIC = 1
    HARMONIC = 2
    EXP = 3
    DOG = 4
    SINC = 5
    CHIRP = 6


class PoolId(IntEnum):
    """Pool operators"""
    SUM = 0
    MEDIAN = 1


class ActId(IntEnum):
    """Activation operators"""
    TANH = 0
    LIN_CUT = 1


class BatchPolicy(str, Enum):
    """When accumulated sensitivities are applied"""
    PER_ITEM = "per_item"
    FULL_BATCH = "full_batch"


class LossKind(str, Enum):
    """Training loss"""
    MSE = "mse"


class TaskKind(str, Enum):
    """Experiment families of the CLI"""
    DENOISE = "denoise"
    SYNTH = "synth"
    SEGMENT = "segment"
    TRANSFORM = "transform"


class OperatorSet(BaseModel):
    """(pool, activation, nodal) triple; index = pool*14 + act*7 + nodal"""
    model_config = ConfigDict(frozen=True)

    pool: PoolId = Field(..., description="Pool operator id")
    act: ActId = Field(..., description="Activation operator id")
    nodal: NodalId = Field(..., description="Nodal operator id")

    @property
    def index(self) -> int:
        return int(self.pool) * 14 + int(self.act) * 7 + int(self.nodal)

    @classmethod
    def from_index(cls, index: int) -> "OperatorSet":
        if not 0 <= index < NUM_OPERATOR_SETS:
            raise ValueError(f"Operator set index {index} outside [0, {NUM_OPERATOR_SETS - 1}]")
        pool, rest = divmod(index, 14)
        act, nodal = divmod(rest, 7)
        return cls(pool=PoolId(pool), act=ActId(act), nodal=NodalId(nodal))

    def __str__(self) -> str:
        return f"{self.index}:{{{int(self.pool)},{int(self.act)},{int(self.nodal)}}}"


class OperatorParams(BaseModel):
    """Constants of the nodal and activation operators"""
    k_harmonic: float = Field(math.pi / 2, description="K of the harmonic and sinc nodal operators")
    k_dog: float = Field(1.0, description="K_D of the DoG nodal operator")
    k_chirp: float = Field(math.pi / 2, description="K_C of the chirp nodal operator")
    k_cubic: float = Field(math.pi / 2, description="K of the cubic nodal operator")
    cut: float = Field(1.0, description="Saturation threshold of lin-cut")

    @field_validator("k_harmonic", "k_dog", "k_chirp", "k_cubic", "cut")
    @classmethod
    def _strictly_positive(cls, value: float) -> float:
        if not (math.isfinite(value) and value > 0):
            raise ValueError(f"operator constants must be finite and > 0, got {value}")
        return value


class LayerSpec(BaseModel):
    """Structure of one operational layer"""
    neuron_count: int = Field(..., ge=1, description="Number of neurons N_l")
    kernel_rows: int = Field(3, ge=1, description="Kernel height Kx (odd)")
    kernel_cols: int = Field(3, ge=1, description="Kernel width Ky (odd)")
    sampling: int = Field(
        1,
        description="Negative: down-sample by |f|; positive > 1: up-sample by f; 1: none",
    )
    padding: PaddingMode = Field(PaddingMode.SAME_PAD, description="Border handling")
    operator_set: int = Field(
        0, ge=0, lt=NUM_OPERATOR_SETS, description="Layerwise operator set index"
    )

    @field_validator("kernel_rows", "kernel_cols")
    @classmethod
    def _odd_kernel(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError(f"kernel dims must be odd, got {value}")
        return value

    @field_validator("sampling")
    @classmethod
    def _nonzero_sampling(cls, value: int) -> int:
        if value == 0:
            raise ValueError("sampling factor must be non-zero")
        # down-sampling by 1 is the identity
        return 1 if value == -1 else value

    @property
    def down_factor(self) -> int:
        return -self.sampling if self.sampling < 0 else 1

    @property
    def up_factor(self) -> int:
        return self.sampling if self.sampling > 1 else 1


class TrainConfig(BaseModel):
    """BP training parameters"""
    epsilon0: float = Field(0.05, gt=0, description="Initial learning rate")
    alpha_lr: float = Field(1.05, description="Learning-rate growth factor")
    beta_lr: float = Field(0.7, description="Learning-rate decay factor")
    eps_min: float = Field(5e-5, gt=0, description="Learning-rate floor")
    eps_max: float = Field(5e-1, gt=0, description="Learning-rate cap")
    iter_max: int = Field(240, ge=0, description="Maximum BP iterations")
    target_metric: Optional[float] = Field(None, description="CP*: stop once the batch MSE <= this")
    batch_policy: BatchPolicy = Field(BatchPolicy.FULL_BATCH, description="Update granularity")
    loss: LossKind = Field(LossKind.MSE, description="Training loss")
    seed: int = Field(0, description="Seed of the parameter initialisation")

    @model_validator(mode="after")
    def _check_schedule(self) -> "TrainConfig":
        if not 0 < self.eps_min < self.eps_max:
            raise ValueError("require 0 < eps_min < eps_max")
        if not self.alpha_lr > 1 > self.beta_lr > 0:
            raise ValueError("require alpha_lr > 1 > beta_lr > 0")
        if not self.eps_min <= self.epsilon0 <= self.eps_max:
            raise ValueError("epsilon0 must lie within [eps_min, eps_max]")
        return self


class GISConfig(BaseModel):
    """Greedy iterative search parameters"""
    passes: int = Field(2, ge=1, description="Number of GIS passes")
    n_bp: int = Field(2, ge=1, description="Short BP runs per candidate set")
    short_iter_max: int = Field(80, ge=0, description="Iterations of each search BP run")
    final_iter_max: int = Field(240, ge=0, description="Iterations of the final BP run")
    target_metric: Optional[float] = Field(None, description="CP*: abort the search once reached")
    seed: int = Field(0, description="Root seed for the search")


class OperatorLibrary(BaseModel):
    """Candidate operator sets and the layers excluded from the search"""
    sets: List[int] = Field(
        default_factory=lambda: list(range(NUM_OPERATOR_SETS)),
        description="Candidate set indices in evaluation order",
    )
    frozen_layers: Dict[int, int] = Field(
        default_factory=dict, description="Layer number (1-based) -> pinned set index"
    )

    @field_validator("sets")
    @classmethod
    def _valid_sets(cls, value: List[int]) -> List[int]:
        if not value:
            raise ValueError("operator library must not be empty")
        for index in value:
            if not 0 <= index < NUM_OPERATOR_SETS:
                raise ValueError(f"operator set index {index} outside [0, {NUM_OPERATOR_SETS - 1}]")
        return list(dict.fromkeys(value))


class HistoryEntry(BaseModel):
    """One BP iteration"""
    iteration: int = Field(..., description="Iteration number t")
    loss: float = Field(..., description="Batch MSE E(t)")
    epsilon: float = Field(..., description="Learning rate used for the update of iteration t")
    fp_ms: float = Field(0.0, description="Forward-pass wall time (volatile)")
    bp_ms: float = Field(0.0, description="Back-propagation wall time (volatile)")


class GISLogEntry(BaseModel):
    """Outcome of one candidate set at one (pass, layer) position"""
    pass_index: int = Field(..., description="GIS pass, 1-based")
    layer: int = Field(..., description="Layer number, 1-based")
    set_index: int = Field(..., description="Candidate operator set index")
    best_loss: float = Field(..., description="Lowest final MSE over the n_bp runs")
    seeds: List[int] = Field(..., description="Initialisation seeds of the runs")
    rank: int = Field(0, description="1 = winner at this (pass, layer)")


class GISLog(BaseModel):
    """Bookkeeping of a GIS session"""
    entries: List[GISLogEntry] = Field(default_factory=list)
    assignment: Dict[int, int] = Field(default_factory=dict, description="Layer -> final set index")
    target_reached: bool = Field(False, description="Whether CP* stopped the search")


class MetricReport(BaseModel):
    """Regression and segmentation scores of one evaluated item"""
    model_config = ConfigDict(ser_json_inf_nan="constants")

    item_id: Optional[str] = Field(None, description="Dataset item identifier")
    mse: float = Field(..., description="Mean squared error")
    snr_db: float = Field(..., description="SNR in dB; inf when the output is exact")
    ce: Optional[float] = Field(None, description="Classification error 1 - Acc")
    f1: Optional[float] = Field(None, description="F1 score")
    precision: Optional[float] = Field(None, description="Precision")
    recall: Optional[float] = Field(None, description="Recall")
    precision_defined: Optional[bool] = Field(None, description="False when TP + FP = 0")
    recall_defined: Optional[bool] = Field(None, description="False when TP + FN = 0")


def default_layers(input_channels: int = 1, output_channels: int = 1) -> List[LayerSpec]:
    """The In x 16 x 32 x Out configuration with sampling 2 in both hidden layers"""
    return [
        LayerSpec(neuron_count=16, sampling=-2),
        LayerSpec(neuron_count=32, sampling=2),
        LayerSpec(neuron_count=output_channels, sampling=1),
    ]


class ExperimentConfig(BaseModel):
    """Everything one CLI command needs"""
    task: TaskKind = Field(TaskKind.DENOISE, description="Experiment family")
    layers: List[LayerSpec] = Field(default_factory=default_layers, description="Network spec")
    input_channels: int = Field(1, ge=1, description="Input channel count")
    operator_params: OperatorParams = Field(default_factory=OperatorParams)
    train: TrainConfig = Field(default_factory=TrainConfig)
    gis: GISConfig = Field(default_factory=GISConfig)
    library: List[int] = Field(
        default_factory=lambda: list(range(NUM_OPERATOR_SETS)),
        description="GIS candidate set indices",
    )
    frozen_layers: Dict[int, int] = Field(
        default_factory=lambda: {3: 0}, description="Layers pinned during GIS"
    )
    dataset: Optional[str] = Field(None, description="Training dataset directory")
    eval_dataset: Optional[str] = Field(None, description="Evaluation dataset directory")
    model_path: Optional[str] = Field(None, description="Model document for eval")
    out_dir: str = Field("runs/default", description="Output directory")
    seed: int = Field(0, description="Root seed")
    runs: int = Field(1, ge=1, description="BP runs with fresh seeds; the best is kept")
    threads: Optional[int] = Field(None, ge=1, description="Worker threads (ONN_THREADS fallback)")
    image_size: int = Field(16, ge=2, description="Side of generated / resized images")
    items: int = Field(4, ge=1, description="Items generated by make-data")
    threshold: float = Field(0.0, description="Segmentation threshold")
    show_progress: bool = Field(False, description="Show tqdm progress bars")
