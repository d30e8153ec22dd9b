"""Operator library: nodal, pool and activation operators with analytic derivatives.

Every operator works elementwise on numpy arrays (scalars included). The registries
are ordered so that a registry position equals the operator id used by the 28-entry
operator-set enumeration.
"""
from abc import ABC, abstractmethod
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import OperatorError
from .models import NUM_OPERATOR_SETS, ActId, NodalId, OperatorParams, OperatorSet, PoolId

SINC_GUARD = 1e-6

Array = NDArray[np.float64]


class NodalOperator(ABC):
    """Abstract base class for nodal operators Psi(y, w)"""

    name: str = ""

    @abstractmethod
    def evaluate(self, y: Array, w: Array, params: OperatorParams) -> Array:
        """Psi(y, w)"""
        pass

    @abstractmethod
    def gradient(self, y: Array, w: Array, params: OperatorParams) -> Tuple[Array, Array]:
        """(dPsi/dw, dPsi/dy)"""
        pass


class Multiplication(NodalOperator):
    name = "mul"

    def evaluate(self, y, w, params):
        return w * y

    def gradient(self, y, w, params):
        return np.broadcast_arrays(y * 1.0, w * 1.0)


class Cubic(NodalOperator):
    name = "cubic"

    def evaluate(self, y, w, params):
        return params.k_cubic * w * y ** 3

    def gradient(self, y, w, params):
        k = params.k_cubic
        return k * y ** 3 + 0.0 * w, 3.0 * k * w * y ** 2


class Harmonic(NodalOperator):
    name = "sin"

    def evaluate(self, y, w, params):
        return np.sin(params.k_harmonic * w * y)

    def gradient(self, y, w, params):
        k = params.k_harmonic
        c = np.cos(k * w * y)
        return k * y * c, k * w * c


class Exponential(NodalOperator):
    name = "exp"

    def evaluate(self, y, w, params):
        return np.expm1(w * y)

    def gradient(self, y, w, params):
        e = np.exp(w * y)
        return y * e, w * e


class DerivativeOfGaussian(NodalOperator):
    """w*y*exp(-K_D w^2 y^2); the squared weight makes the tabled derivatives exact"""

    name = "DoG"

    def evaluate(self, y, w, params):
        return w * y * np.exp(-params.k_dog * w ** 2 * y ** 2)

    def gradient(self, y, w, params):
        k = params.k_dog
        u = k * w ** 2 * y ** 2
        common = (1.0 - 2.0 * u) * np.exp(-u)
        return y * common, w * common


class Sinc(NodalOperator):
    """sin(K w y) / y with a series expansion inside the |y| < 1e-6 guard band"""

    name = "sinc"

    def evaluate(self, y, w, params):
        y, w = np.broadcast_arrays(np.asarray(y, dtype=np.float64), np.asarray(w, dtype=np.float64))
        a = params.k_harmonic * w
        small = np.abs(y) < SINC_GUARD
        safe_y = np.where(small, 1.0, y)
        return np.where(small, a - a ** 3 * y ** 2 / 6.0, np.sin(a * y) / safe_y)

    def gradient(self, y, w, params):
        y, w = np.broadcast_arrays(np.asarray(y, dtype=np.float64), np.asarray(w, dtype=np.float64))
        k = params.k_harmonic
        a = k * w
        small = np.abs(y) < SINC_GUARD
        safe_y = np.where(small, 1.0, y)
        d_w = k * np.cos(a * y)
        exact_dy = a * np.cos(a * y) / safe_y - np.sin(a * y) / safe_y ** 2
        series_dy = -(a ** 3) * y / 3.0 + a ** 5 * y ** 3 / 30.0
        return d_w, np.where(small, series_dy, exact_dy)


class Chirp(NodalOperator):
    name = "chirp"

    def evaluate(self, y, w, params):
        return np.sin(params.k_chirp * w * y ** 2)

    def gradient(self, y, w, params):
        k = params.k_chirp
        c = np.cos(k * w * y ** 2)
        return k * y ** 2 * c, 2.0 * k * w * y * c


class PoolOperator(ABC):
    """Abstract base class for pool operators over the last axis of a term array"""

    name: str = ""

    @abstractmethod
    def evaluate(self, terms: Array) -> Tuple[Array, Optional[NDArray[np.intp]]]:
        """Pooled value and, for selection pools, the index of the selected term"""
        pass

    @abstractmethod
    def gradient(self, terms: Array, selected: Optional[NDArray[np.intp]]) -> Array:
        """dP/dterm for every term, same shape as ``terms``"""
        pass


class Summation(PoolOperator):
    name = "sum"

    def evaluate(self, terms):
        # sequential accumulation keeps the row-major window order
        return np.cumsum(terms, axis=-1)[..., -1], None

    def gradient(self, terms, selected):
        return np.ones_like(terms)


class Median(PoolOperator):
    """Lower-middle order statistic; ties route to the lowest index holding the value"""

    name = "median"

    def evaluate(self, terms):
        count = terms.shape[-1]
        value = np.sort(terms, axis=-1)[..., (count - 1) // 2]
        selected = np.argmax(terms == value[..., None], axis=-1)
        return value, selected

    def gradient(self, terms, selected):
        if selected is None:
            _, selected = self.evaluate(terms)
        grad = np.zeros_like(terms)
        np.put_along_axis(grad, np.asarray(selected)[..., None], 1.0, axis=-1)
        return grad


class ActivationOperator(ABC):
    """Abstract base class for activation operators"""

    name: str = ""

    @abstractmethod
    def evaluate(self, x: Array, params: OperatorParams) -> Array:
        pass

    @abstractmethod
    def gradient(self, x: Array, params: OperatorParams) -> Array:
        pass


class Tanh(ActivationOperator):
    name = "tanh"

    def evaluate(self, x, params):
        return np.tanh(x)

    def gradient(self, x, params):
        return 1.0 - np.tanh(x) ** 2


class LinearCut(ActivationOperator):
    name = "lin-cut"

    def evaluate(self, x, params):
        return np.clip(np.asarray(x, dtype=np.float64) / params.cut, -1.0, 1.0)

    def gradient(self, x, params):
        x = np.asarray(x, dtype=np.float64)
        return np.where(np.abs(x) <= params.cut, 1.0 / params.cut, 0.0)


NODAL_OPERATORS: List[NodalOperator] = [
    Multiplication(),
    Cubic(),
    Harmonic(),
    Exponential(),
    DerivativeOfGaussian(),
    Sinc(),
    Chirp(),
]
POOL_OPERATORS: List[PoolOperator] = [Summation(), Median()]
ACTIVATION_OPERATORS: List[ActivationOperator] = [Tanh(), LinearCut()]

DEFAULT_PARAMS = OperatorParams()


def _lookup(registry: Sequence, op_id: int, kind: str):
    try:
        index = int(op_id)
    except (TypeError, ValueError):
        raise OperatorError(f"{kind} id must be an integer, got {op_id!r}")
    if not 0 <= index < len(registry):
        raise OperatorError(f"{kind} id {index} outside [0, {len(registry) - 1}]")
    return registry[index]


def nodal(op_id: int) -> NodalOperator:
    return _lookup(NODAL_OPERATORS, op_id, "nodal")


def pool(op_id: int) -> PoolOperator:
    return _lookup(POOL_OPERATORS, op_id, "pool")


def activation(op_id: int) -> ActivationOperator:
    return _lookup(ACTIVATION_OPERATORS, op_id, "activation")


def _finite(*values: ArrayLike) -> None:
    for value in values:
        if not np.all(np.isfinite(value)):
            raise OperatorError(f"operator input must be finite, got {value!r}")


# =========================================================================
# Scalar API
# =========================================================================

def nodal_eval(
    op_id: NodalId, y: float, w: float, params: Optional[OperatorParams] = None
) -> float:
    """Psi(y, w) of nodal operator ``op_id``"""
    _finite(y, w)
    return float(nodal(op_id).evaluate(np.float64(y), np.float64(w), params or DEFAULT_PARAMS))


def nodal_grad(
    op_id: NodalId, y: float, w: float, params: Optional[OperatorParams] = None
) -> Tuple[float, float]:
    """(dPsi/dw, dPsi/dy) of nodal operator ``op_id``"""
    _finite(y, w)
    d_w, d_y = nodal(op_id).gradient(np.float64(y), np.float64(w), params or DEFAULT_PARAMS)
    return float(d_w), float(d_y)


def pool_eval(op_id: PoolId, terms: Sequence[float]) -> Tuple[float, Optional[int]]:
    """Pooled value and the selected term index (median only)"""
    array = np.asarray(terms, dtype=np.float64)
    if array.ndim != 1 or array.size == 0:
        raise OperatorError("pool terms must be a non-empty list")
    _finite(array)
    value, selected = pool(op_id).evaluate(array)
    return float(value), (None if selected is None else int(selected))


def pool_grad(op_id: PoolId, terms: Sequence[float], term_index: int) -> float:
    """dP/dterm for the term at ``term_index``"""
    array = np.asarray(terms, dtype=np.float64)
    if array.ndim != 1 or array.size == 0:
        raise OperatorError("pool terms must be a non-empty list")
    if not 0 <= term_index < array.size:
        raise OperatorError(f"term index {term_index} outside [0, {array.size - 1}]")
    operator = pool(op_id)
    _, selected = operator.evaluate(array)
    return float(operator.gradient(array, selected)[term_index])


def act_eval(op_id: ActId, x: float, params: Optional[OperatorParams] = None) -> float:
    _finite(x)
    return float(activation(op_id).evaluate(np.float64(x), params or DEFAULT_PARAMS))


def act_grad(op_id: ActId, x: float, params: Optional[OperatorParams] = None) -> float:
    _finite(x)
    return float(activation(op_id).gradient(np.float64(x), params or DEFAULT_PARAMS))


# =========================================================================
# Operator-set enumeration
# =========================================================================

def set_to_index(operator_set: OperatorSet) -> int:
    return operator_set.index


def index_to_set(index: int) -> OperatorSet:
    try:
        return OperatorSet.from_index(int(index))
    except ValueError as e:
        raise OperatorError(str(e))


def library(indices: Optional[Sequence[int]] = None) -> List[OperatorSet]:
    """Ordered operator sets (all 28 by default)"""
    if indices is None:
        indices = range(NUM_OPERATOR_SETS)
    return [index_to_set(i) for i in indices]


def parse_library(text: str) -> List[int]:
    """Parse a CLI library string such as "0,9,13" """
    try:
        indices = [int(part) for part in text.replace(" ", "").split(",") if part]
    except ValueError:
        raise OperatorError(f"invalid operator library {text!r}")
    if not indices:
        raise OperatorError("operator library must not be empty")
    for index in indices:
        index_to_set(index)
    return list(dict.fromkeys(indices))


def describe(operator_set: OperatorSet) -> str:
    """Human-readable operator names, e.g. "sum/tanh/mul" """
    return "/".join(
        [
            POOL_OPERATORS[operator_set.pool].name,
            ACTIVATION_OPERATORS[operator_set.act].name,
            NODAL_OPERATORS[operator_set.nodal].name,
        ]
    )
