"""Dense 2D/4D array primitives: fixed, full and varying 2D convolution, zero-order sampling.

All maps are float64 numpy arrays. Functions operate on the last two axes (maps) or the
last four axes (caches, indexed ``(m, n, r, t)``) and broadcast over any leading axes, so
the network code can process every connection of a layer in one call.

Summation order is fixed: kernel offsets ``(r, t)`` are visited row-major and each
pixel accumulates its terms in that order; reductions over pixels run row-major and
strictly sequentially. Results are therefore bit-identical to nested-loop reference code.
"""
from typing import Tuple

import numpy as np
from numpy.typing import NDArray

from .errors import NumericalError, ShapeError
from .models import PaddingMode

Map2D = NDArray[np.float64]
Cache4D = NDArray[np.float64]


def as_map(data, name: str = "map") -> Map2D:
    """Validate and convert to a float64 array with at least two axes"""
    array = np.asarray(data, dtype=np.float64)
    if array.ndim < 2:
        raise ShapeError(f"{name} must be at least 2D, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise NumericalError(f"{name} contains non-finite values")
    return array


def _check_finite(array: NDArray[np.float64], op: str) -> NDArray[np.float64]:
    if not np.all(np.isfinite(array)):
        raise NumericalError(f"{op} produced non-finite values")
    return array


def ordered_sum(values: NDArray[np.float64], axes: int = 2) -> NDArray[np.float64]:
    """Sequential row-major sum over the trailing ``axes`` axes.

    ``np.sum`` uses pairwise summation; a cumulative sum keeps the left-to-right
    order of a plain loop.
    """
    lead = values.shape[: values.ndim - axes]
    flat = values.reshape(*lead, -1)
    if flat.shape[-1] == 0:
        return np.zeros(lead, dtype=np.float64)
    return np.cumsum(flat, axis=-1)[..., -1]


def same_pad_widths(krows: int, kcols: int) -> Tuple[Tuple[int, int], Tuple[int, int]]:
    """Zero rows/cols added (before, after) so a kernel keeps the map size"""
    top = (krows - 1) // 2
    left = (kcols - 1) // 2
    return (top, krows - 1 - top), (left, kcols - 1 - left)


def pad_same(maps: Map2D, krows: int, kcols: int) -> Map2D:
    """Zero-pad the trailing two axes for SamePad operation"""
    rows, cols = same_pad_widths(krows, kcols)
    widths = [(0, 0)] * (maps.ndim - 2) + [rows, cols]
    return np.pad(maps, widths, mode="constant", constant_values=0.0)


def crop_same(maps: Map2D, krows: int, kcols: int) -> Map2D:
    """Inverse of :func:`pad_same` (drops the padded border)"""
    (top, bottom), (left, right) = same_pad_widths(krows, kcols)
    rows, cols = maps.shape[-2:]
    return maps[..., top: rows - bottom, left: cols - right]


def output_dims(rows: int, cols: int, krows: int, kcols: int, mode: PaddingMode) -> Tuple[int, int]:
    """Dims of a 2D operation's output before sampling"""
    if mode == PaddingMode.SAME_PAD:
        return rows, cols
    return rows - krows + 1, cols - kcols + 1


def sliding_windows(maps: Map2D, krows: int, kcols: int) -> NDArray[np.float64]:
    """Read-only view ``win[..., m, n, r, t] = maps[..., m + r, n + t]``"""
    rows, cols = maps.shape[-2:]
    if krows > rows or kcols > cols:
        raise ShapeError(
            f"kernel {krows}x{kcols} larger than input {rows}x{cols}"
        )
    return np.lib.stride_tricks.sliding_window_view(maps, (krows, kcols), axis=(-2, -1))


def conv2d(
    input_map: Map2D,
    kernel: Map2D,
    mode: PaddingMode = PaddingMode.NO_ZERO_PAD,
) -> Map2D:
    """
    2D correlation anchored at kernel element (0, 0)

    out(m, n) = sum_{r,t} kernel(r, t) * input(m + r, n + t)

    Args:
        input_map: Map of shape (..., M, N)
        kernel: Kernel of shape (..., Kx, Ky), broadcast against the input's leading axes
        mode: NoZeroPad gives (M - Kx + 1) x (N - Ky + 1); SamePad keeps M x N with
            zero reads outside the map

    Returns:
        The correlated map
    """
    input_map = as_map(input_map, "input")
    kernel = as_map(kernel, "kernel")
    krows, kcols = kernel.shape[-2:]
    if mode == PaddingMode.SAME_PAD:
        input_map = pad_same(input_map, krows, kcols)
    rows, cols = input_map.shape[-2:]
    if krows > rows or kcols > cols:
        raise ShapeError(f"kernel {krows}x{kcols} larger than input {rows}x{cols}")

    out_rows, out_cols = rows - krows + 1, cols - kcols + 1
    lead = np.broadcast_shapes(input_map.shape[:-2], kernel.shape[:-2])
    out = np.zeros(lead + (out_rows, out_cols), dtype=np.float64)
    for r in range(krows):
        for t in range(kcols):
            out += kernel[..., r, t, None, None] * input_map[..., r: r + out_rows, t: t + out_cols]
    return _check_finite(out, "conv2d")


def conv2d_full(delta: Map2D, kernel: Map2D) -> Map2D:
    """
    Full convolution with zero padding: the adjoint of :func:`conv2d` in NoZeroPad mode

    out(m, n) = sum_{r,t} delta(m - r, n - t) * kernel(r, t), out-of-range delta = 0.
    The output grows by (Kx - 1, Ky - 1).
    """
    delta = as_map(delta, "delta")
    kernel = as_map(kernel, "kernel")
    krows, kcols = kernel.shape[-2:]
    rows, cols = delta.shape[-2:]
    lead = np.broadcast_shapes(delta.shape[:-2], kernel.shape[:-2])
    out = np.zeros(lead + (rows + krows - 1, cols + kcols - 1), dtype=np.float64)
    for r in range(krows):
        for t in range(kcols):
            out[..., r: r + rows, t: t + cols] += kernel[..., r, t, None, None] * delta
    return _check_finite(out, "conv2d_full")


def conv2dvar(delta: Map2D, varying_kernel: Cache4D, mode: str = "delta") -> Map2D:
    """
    Varying 2D convolution with a position-dependent kernel

    Args:
        delta: Delta map of shape (..., Mo, No)
        varying_kernel: Cache of shape (..., M, N, Kx, Ky) indexed at input-map positions
        mode: "delta" gives the (..., M, N) map
                  out(m, n) = sum_{r,t} delta(m - r, n - t) * K(m, n, r, t)
              with out-of-range delta reads as 0 (requires M = Mo + Kx - 1);
              "weight" gives the (..., Kx, Ky) kernel sensitivity
                  out(r, t) = sum_{m,n} delta(m, n) * K(m + r, n + t, r, t)

    Returns:
        The varying-convolution result
    """
    delta = as_map(delta, "delta")
    varying_kernel = np.asarray(varying_kernel, dtype=np.float64)
    if varying_kernel.ndim < 4:
        raise ShapeError(f"varying kernel must be 4D, got shape {varying_kernel.shape}")
    rows, cols, krows, kcols = varying_kernel.shape[-4:]
    drows, dcols = delta.shape[-2:]
    if (rows, cols) != (drows + krows - 1, dcols + kcols - 1):
        raise ShapeError(
            f"varying kernel {rows}x{cols}x{krows}x{kcols} inconsistent with delta "
            f"{drows}x{dcols}: expected maps of {drows + krows - 1}x{dcols + kcols - 1}"
        )
    lead = np.broadcast_shapes(delta.shape[:-2], varying_kernel.shape[:-4])

    if mode == "delta":
        out = np.zeros(lead + (rows, cols), dtype=np.float64)
        for r in range(krows):
            for t in range(kcols):
                out[..., r: r + drows, t: t + dcols] += (
                    delta * varying_kernel[..., r: r + drows, t: t + dcols, r, t]
                )
    elif mode == "weight":
        out = np.zeros(lead + (krows, kcols), dtype=np.float64)
        for r in range(krows):
            for t in range(kcols):
                out[..., r, t] = ordered_sum(
                    delta * varying_kernel[..., r: r + drows, t: t + dcols, r, t]
                )
    else:
        raise ValueError(f"unknown conv2dvar mode {mode!r}")
    return _check_finite(out, "conv2dvar")


def to_input_frame(cache: Cache4D, rows: int, cols: int) -> Cache4D:
    """
    Re-index an output-position cache into the input-position frame

    ``cache[..., m, n, r, t]`` describes the term at output pixel (m, n) that reads input
    pixel (m + r, n + t). The result holds the same value at ``[..., m + r, n + t, r, t]``;
    entries with no corresponding term are 0.
    """
    out_rows, out_cols, krows, kcols = cache.shape[-4:]
    if (rows, cols) != (out_rows + krows - 1, out_cols + kcols - 1):
        raise ShapeError(
            f"cache {out_rows}x{out_cols}x{krows}x{kcols} cannot map onto input {rows}x{cols}"
        )
    out = np.zeros(cache.shape[:-4] + (rows, cols, krows, kcols), dtype=np.float64)
    for r in range(krows):
        for t in range(kcols):
            out[..., r: r + out_rows, t: t + out_cols, r, t] = cache[..., r, t]
    return out


def _check_factors(*factors: int) -> None:
    for factor in factors:
        if factor < 1:
            raise ValueError(f"sampling factors must be >= 1, got {factor}")


def _block_counts(rows: int, cols: int, ssx: int, ssy: int) -> NDArray[np.float64]:
    row_counts = np.minimum(ssx, rows - np.arange(0, rows, ssx))
    col_counts = np.minimum(ssy, cols - np.arange(0, cols, ssy))
    return np.outer(row_counts, col_counts).astype(np.float64)


def downsample(maps: Map2D, ssx: int, ssy: int) -> Map2D:
    """
    Average pooling over non-overlapping ssx x ssy blocks

    Trailing partial blocks average over the pixels present, so the output has
    ceil(M / ssx) x ceil(N / ssy) pixels.
    """
    maps = as_map(maps)
    _check_factors(ssx, ssy)
    if ssx == 1 and ssy == 1:
        return maps.copy()
    rows, cols = maps.shape[-2:]
    out_rows, out_cols = -(-rows // ssx), -(-cols // ssy)
    padded = np.zeros(maps.shape[:-2] + (out_rows * ssx, out_cols * ssy), dtype=np.float64)
    padded[..., :rows, :cols] = maps
    blocks = padded.reshape(maps.shape[:-2] + (out_rows, ssx, out_cols, ssy))
    sums = blocks.sum(axis=(-3, -1))
    return _check_finite(sums / _block_counts(rows, cols, ssx, ssy), "downsample")


def upsample(maps: Map2D, usx: int, usy: int) -> Map2D:
    """Zero-order up-sampling: every pixel becomes a usx x usy block"""
    maps = as_map(maps)
    _check_factors(usx, usy)
    return np.repeat(np.repeat(maps, usx, axis=-2), usy, axis=-1)


def downsample_backward(grad: Map2D, ssx: int, ssy: int, rows: int, cols: int) -> Map2D:
    """
    Gradient of :func:`downsample` w.r.t. its (rows x cols) input

    Each block's gradient is spread evenly over its pixels, i.e. up(grad) * 1/(ssx*ssy)
    for full blocks.
    """
    _check_factors(ssx, ssy)
    if (grad.shape[-2], grad.shape[-1]) != (-(-rows // ssx), -(-cols // ssy)):
        raise ShapeError(
            f"gradient {grad.shape[-2]}x{grad.shape[-1]} does not match down-sampling of "
            f"{rows}x{cols} by {ssx}x{ssy}"
        )
    scaled = grad / _block_counts(rows, cols, ssx, ssy)
    return upsample(scaled, ssx, ssy)[..., :rows, :cols]


def upsample_backward(grad: Map2D, usx: int, usy: int) -> Map2D:
    """Gradient of :func:`upsample`: block sums, i.e. down(grad) * usx*usy"""
    _check_factors(usx, usy)
    rows, cols = grad.shape[-2:]
    if rows % usx or cols % usy:
        raise ShapeError(
            f"gradient {rows}x{cols} is not a multiple of the up-sampling {usx}x{usy}"
        )
    return downsample(grad, usx, usy) * (usx * usy)
