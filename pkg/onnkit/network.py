"""Operational network structure, initialisation, forward pass and model documents"""
import json
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field

from .errors import NumericalError, ShapeError
from .logger import setup_logger
from .models import LayerSpec, NodalId, OperatorParams, OperatorSet, PaddingMode, PoolId
from .operators import activation, index_to_set, nodal, pool
from .tensor_core import (
    conv2d,
    downsample,
    output_dims,
    pad_same,
    sliding_windows,
    to_input_frame,
    upsample,
)

logger = setup_logger("onnkit.network")

INIT_RANGE = 0.1
MODEL_FORMAT = "onnkit-model"
MODEL_VERSION = 1


class Layer(BaseModel):
    """Parameters of one operational layer; kernels[i, k] connects input map k to neuron i"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    spec: LayerSpec
    kernels: NDArray[np.float64] = Field(..., description="Shape (N_l, N_{l-1}, Kx, Ky)")
    biases: NDArray[np.float64] = Field(..., description="Shape (N_l,)")
    operator_sets: List[int] = Field(..., description="Operator set index per neuron")

    @property
    def neuron_count(self) -> int:
        return self.spec.neuron_count

    @property
    def input_count(self) -> int:
        return int(self.kernels.shape[1])


class NetworkModel(BaseModel):
    """Layered operational network; layer 0 is the input, layers[l - 1] is layer l"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    input_channels: int = Field(..., ge=1)
    input_shape: Optional[Tuple[int, int]] = Field(None, description="Declared input map dims")
    layers: List[Layer] = Field(default_factory=list)
    params: OperatorParams = Field(default_factory=OperatorParams)
    seed: int = Field(0)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def output_channels(self) -> int:
        return self.layers[-1].neuron_count

    @property
    def specs(self) -> List[LayerSpec]:
        return [layer.spec for layer in self.layers]


class LayerTrace(BaseModel):
    """
    Everything one layer's BP needs, recorded by a training-mode forward pass

    Connection caches are indexed [neuron, input, m, n, r, t] where (m, n) runs over the
    layer's (padded) input maps, i.e. the frame of the varying 2D convolutions.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    inputs: NDArray[np.float64] = Field(..., description="Previous outputs as read (padded)")
    x: NDArray[np.float64] = Field(..., description="Pre-activation maps, bias included")
    activated: NDArray[np.float64] = Field(..., description="f(x), the pre-sampling intermediate")
    fprime: NDArray[np.float64] = Field(..., description="f'(x)")
    y: NDArray[np.float64] = Field(..., description="Outputs after sampling")
    psi: NDArray[np.float64] = Field(..., description="Nodal terms at output positions")
    pool_grad: NDArray[np.float64] = Field(..., description="dP/dPsi cache")
    grad_y: NDArray[np.float64] = Field(..., description="dPsi/dy cache")
    grad_w: NDArray[np.float64] = Field(..., description="dPsi/dw cache")


class ForwardTrace(BaseModel):
    """Per-layer caches of one training-mode forward pass"""
    layers: List[LayerTrace] = Field(default_factory=list)


# =========================================================================
# Construction
# =========================================================================

def derive_seed(*keys: int) -> int:
    """Deterministic child seed of a key path, e.g. (root, pass, layer, run)"""
    return int(np.random.default_rng([int(k) % 2**32 for k in keys]).integers(0, 2**31 - 1))


def validate_specs(specs: Sequence[LayerSpec]) -> None:
    if not specs:
        raise ShapeError("a network needs at least one operational layer")


def init(
    specs: Sequence[LayerSpec],
    seed: int,
    input_channels: int = 1,
    input_shape: Optional[Tuple[int, int]] = None,
    params: Optional[OperatorParams] = None,
) -> NetworkModel:
    """
    Create a network with weights and biases drawn i.i.d. from U(-0.1, 0.1)

    Args:
        specs: One LayerSpec per operational layer, input side first
        seed: Seed of the generator; the same seed gives a bitwise-identical model
        input_channels: Number of input maps
        input_shape: Optional declared input dims, checked by forward and shape law
        params: Operator constants

    Returns:
        The initialised model
    """
    validate_specs(specs)
    rng = np.random.default_rng(seed)
    layers = []
    fan_in = input_channels
    for spec in specs:
        shape = (spec.neuron_count, fan_in, spec.kernel_rows, spec.kernel_cols)
        kernels = rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape)
        biases = rng.uniform(-INIT_RANGE, INIT_RANGE, size=spec.neuron_count)
        layers.append(
            Layer(
                spec=spec,
                kernels=kernels,
                biases=biases,
                operator_sets=[spec.operator_set] * spec.neuron_count,
            )
        )
        fan_in = spec.neuron_count

    model = NetworkModel(
        input_channels=input_channels,
        input_shape=input_shape,
        layers=layers,
        params=params or OperatorParams(),
        seed=seed,
    )
    if input_shape is not None:
        output_shape(model, *input_shape)
    return model


def assign_operator_set(
    model: NetworkModel, layer_index: int, operator_set: Union[OperatorSet, int]
) -> NetworkModel:
    """Return a copy whose layer ``layer_index`` (1-based) uses one set for every neuron"""
    if not 1 <= layer_index <= model.depth:
        raise ShapeError(f"layer {layer_index} outside [1, {model.depth}]")
    index = operator_set.index if isinstance(operator_set, OperatorSet) else int(operator_set)
    index_to_set(index)

    layers = list(model.layers)
    old = layers[layer_index - 1]
    layers[layer_index - 1] = old.model_copy(
        update={
            "spec": old.spec.model_copy(update={"operator_set": index}),
            "operator_sets": [index] * old.neuron_count,
        }
    )
    return model.model_copy(update={"layers": layers})


def layer_operator_set(model: NetworkModel, layer_index: int) -> int:
    """Operator set of a homogeneous layer"""
    sets = set(model.layers[layer_index - 1].operator_sets)
    if len(sets) != 1:
        raise ValueError(f"layer {layer_index} is heterogeneous: {sorted(sets)}")
    return sets.pop()


def operator_assignment(model: NetworkModel) -> Dict[int, int]:
    return {l: layer_operator_set(model, l) for l in range(1, model.depth + 1)}


def layer_output_shape(spec: LayerSpec, rows: int, cols: int) -> Tuple[int, int]:
    """Shape law of one layer: 2D operation, then sampling"""
    out_rows, out_cols = output_dims(rows, cols, spec.kernel_rows, spec.kernel_cols, spec.padding)
    if out_rows < 1 or out_cols < 1:
        raise ShapeError(
            f"{spec.kernel_rows}x{spec.kernel_cols} kernel does not fit a {rows}x{cols} map"
        )
    if spec.down_factor > 1:
        f = spec.down_factor
        return -(-out_rows // f), -(-out_cols // f)
    return out_rows * spec.up_factor, out_cols * spec.up_factor


def output_shape(model: NetworkModel, rows: int, cols: int) -> Tuple[int, int]:
    for spec in model.specs:
        rows, cols = layer_output_shape(spec, rows, cols)
    return rows, cols


# =========================================================================
# Forward pass
# =========================================================================

def _stack_inputs(model: NetworkModel, inputs) -> NDArray[np.float64]:
    maps = np.asarray(inputs, dtype=np.float64)
    if maps.ndim == 2:
        maps = maps[None]
    if maps.ndim != 3:
        raise ShapeError(f"input must be a list of 2D maps, got shape {maps.shape}")
    if maps.shape[0] != model.input_channels:
        raise ShapeError(
            f"model expects {model.input_channels} input channels, got {maps.shape[0]}"
        )
    if model.input_shape is not None and tuple(maps.shape[1:]) != tuple(model.input_shape):
        raise ShapeError(
            f"model expects {model.input_shape[0]}x{model.input_shape[1]} inputs, "
            f"got {maps.shape[1]}x{maps.shape[2]}"
        )
    if not np.all(np.isfinite(maps)):
        raise NumericalError("input maps contain non-finite values")
    return maps


def _groups(operator_sets: List[int]) -> Dict[int, List[int]]:
    groups: Dict[int, List[int]] = {}
    for neuron, index in enumerate(operator_sets):
        groups.setdefault(index, []).append(neuron)
    return groups


def _sample(spec: LayerSpec, maps: NDArray[np.float64]) -> NDArray[np.float64]:
    if spec.down_factor > 1:
        return downsample(maps, spec.down_factor, spec.down_factor)
    if spec.up_factor > 1:
        return upsample(maps, spec.up_factor, spec.up_factor)
    return maps


def _check_layer(array: NDArray[np.float64], layer_number: int, what: str) -> None:
    if np.all(np.isfinite(array)):
        return
    neuron = int(np.argwhere(~np.isfinite(array))[0][0])
    raise NumericalError(
        f"non-finite {what} at layer {layer_number}, neuron {neuron}",
        location=(layer_number, neuron),
    )


def forward_layer(
    layer: Layer,
    y_prev: NDArray[np.float64],
    params: OperatorParams,
    training: bool,
    layer_number: int = 0,
) -> Tuple[NDArray[np.float64], Optional[LayerTrace]]:
    """Forward one layer: per connection nodal terms, window pool, connection sum, bias,
    activation, then sampling"""
    spec = layer.spec
    krows, kcols = spec.kernel_rows, spec.kernel_cols
    inputs = pad_same(y_prev, krows, kcols) if spec.padding == PaddingMode.SAME_PAD else y_prev
    rows, cols = inputs.shape[-2:]
    if krows > rows or kcols > cols:
        raise ShapeError(
            f"layer {layer_number}: {krows}x{kcols} kernel does not fit {rows}x{cols} input maps"
        )
    out_rows, out_cols = rows - krows + 1, cols - kcols + 1
    windows = sliding_windows(inputs, krows, kcols)
    n_out, n_in = layer.kernels.shape[:2]

    x = np.zeros((n_out, out_rows, out_cols), dtype=np.float64)
    activated = np.zeros_like(x)
    fprime = np.zeros_like(x) if training else None
    if training:
        cache_shape = (n_out, n_in, out_rows, out_cols, krows, kcols)
        psi_cache = np.zeros(cache_shape, dtype=np.float64)
        pool_cache = np.zeros(cache_shape, dtype=np.float64)
        grad_y_cache = np.zeros(cache_shape, dtype=np.float64)
        grad_w_cache = np.zeros(cache_shape, dtype=np.float64)

    for set_index, neurons in _groups(layer.operator_sets).items():
        operator_set = index_to_set(set_index)
        kernels = layer.kernels[neurons]
        weights = kernels[:, :, None, None]

        if not training and operator_set.pool == PoolId.SUM and operator_set.nodal == NodalId.MUL:
            pooled = conv2d(inputs[None], kernels)
        else:
            nodal_op = nodal(operator_set.nodal)
            pool_op = pool(operator_set.pool)
            psi = nodal_op.evaluate(windows[None], weights, params)
            terms = psi.reshape(psi.shape[:4] + (krows * kcols,))
            pooled, selected = pool_op.evaluate(terms)
            if training:
                psi_cache[neurons] = psi
                pool_cache[neurons] = pool_op.gradient(terms, selected).reshape(psi.shape)
                d_w, d_y = nodal_op.gradient(windows[None], weights, params)
                grad_w_cache[neurons] = d_w
                grad_y_cache[neurons] = d_y

        # connections are accumulated in input order
        x[neurons] = np.cumsum(pooled, axis=1)[:, -1] + layer.biases[neurons, None, None]
        act_op = activation(operator_set.act)
        activated[neurons] = act_op.evaluate(x[neurons], params)
        if training:
            fprime[neurons] = act_op.gradient(x[neurons], params)

    _check_layer(x, layer_number, "pre-activation")
    y = _sample(spec, activated)
    _check_layer(y, layer_number, "output")

    if not training:
        return y, None
    trace = LayerTrace(
        inputs=inputs,
        x=x,
        activated=activated,
        fprime=fprime,
        y=y,
        psi=psi_cache,
        pool_grad=to_input_frame(pool_cache, rows, cols),
        grad_y=to_input_frame(grad_y_cache, rows, cols),
        grad_w=to_input_frame(grad_w_cache, rows, cols),
    )
    return y, trace


def forward(
    model: NetworkModel,
    inputs,
    training: bool = False,
) -> Tuple[NDArray[np.float64], Optional[ForwardTrace]]:
    """
    Propagate input maps through every layer

    Args:
        model: Network to evaluate
        inputs: Input maps, shape (C, M, N) or a single (M, N) map
        training: When set, every layer records its BP caches

    Returns:
        (output maps of shape (N_L, ., .), ForwardTrace or None)
    """
    y = _stack_inputs(model, inputs)
    trace = ForwardTrace() if training else None
    for number, layer in enumerate(model.layers, start=1):
        y, layer_trace = forward_layer(layer, y, model.params, training, number)
        if trace is not None:
            trace.layers.append(layer_trace)
    return y, trace


# =========================================================================
# Model documents
# =========================================================================

class LayerDocument(BaseModel):
    spec: LayerSpec
    operator_sets: List[int]
    kernels: List[List[List[List[float]]]]
    biases: List[float]


class ModelDocument(BaseModel):
    """Versioned JSON form of a NetworkModel"""
    format: str = Field(MODEL_FORMAT)
    version: int = Field(MODEL_VERSION)
    input_channels: int
    input_shape: Optional[Tuple[int, int]] = None
    seed: int
    params: OperatorParams
    layers: List[LayerDocument]


def to_document(model: NetworkModel) -> str:
    """Serialise to JSON; floats use the shortest round-trip repr, so loading is exact"""
    document = ModelDocument(
        input_channels=model.input_channels,
        input_shape=model.input_shape,
        seed=model.seed,
        params=model.params,
        layers=[
            LayerDocument(
                spec=layer.spec,
                operator_sets=list(layer.operator_sets),
                kernels=layer.kernels.tolist(),
                biases=layer.biases.tolist(),
            )
            for layer in model.layers
        ],
    )
    return json.dumps(document.model_dump(mode="json"), indent=2) + "\n"


def from_document(text: str) -> NetworkModel:
    document = ModelDocument.model_validate_json(text)
    if document.format != MODEL_FORMAT or document.version != MODEL_VERSION:
        raise ValueError(
            f"unsupported model document {document.format!r} v{document.version}"
        )
    fan_in = document.input_channels
    layers = []
    for number, layer in enumerate(document.layers, start=1):
        kernels = np.asarray(layer.kernels, dtype=np.float64)
        expected = (layer.spec.neuron_count, fan_in, layer.spec.kernel_rows, layer.spec.kernel_cols)
        if kernels.shape != expected or len(layer.biases) != layer.spec.neuron_count:
            raise ShapeError(f"layer {number}: kernels {kernels.shape}, expected {expected}")
        layers.append(
            Layer(
                spec=layer.spec,
                kernels=kernels,
                biases=np.asarray(layer.biases, dtype=np.float64),
                operator_sets=list(layer.operator_sets),
            )
        )
        fan_in = layer.spec.neuron_count
    logger.debug(f"Loaded model with {len(layers)} layers")
    return NetworkModel(
        input_channels=document.input_channels,
        input_shape=document.input_shape,
        layers=layers,
        params=document.params,
        seed=document.seed,
    )
