"""Normalisation, regression and segmentation metrics"""
import math
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from .errors import ShapeError
from .models import MetricReport

Array = NDArray[np.float64]

PIXEL_MIN = 0.0
PIXEL_MAX = 255.0


def _pair(a, b, what: str):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"{what}: dims {a.shape} and {b.shape} differ")
    return a, b


def normalize(image, lo: float = PIXEL_MIN, hi: float = PIXEL_MAX) -> Array:
    """Map the container range [lo, hi] affinely onto [-1, 1]"""
    if not hi > lo:
        raise ValueError(f"cannot normalise with max {hi} <= min {lo}")
    image = np.asarray(image, dtype=np.float64)
    return 2.0 * (image - lo) / (hi - lo) - 1.0


def denormalize(image, lo: float = PIXEL_MIN, hi: float = PIXEL_MAX) -> Array:
    """Inverse of :func:`normalize`"""
    image = np.asarray(image, dtype=np.float64)
    return (image + 1.0) * (hi - lo) / 2.0 + lo


def mse(target, output) -> float:
    target, output = _pair(target, output, "mse")
    return float(np.mean((output - target) ** 2))


def snr(target, output, power: str = "variance") -> float:
    """
    Signal-to-noise ratio in dB with noise = target - output

    Args:
        target: Clean signal
        output: Estimate
        power: "variance" (mean removed) or "mean_square"

    Returns:
        10 log10(P_signal / P_noise); +inf when the noise power is zero
    """
    target, output = _pair(target, output, "snr")
    noise = target - output
    if power == "variance":
        signal_power, noise_power = float(np.var(target)), float(np.var(noise))
    elif power == "mean_square":
        signal_power, noise_power = float(np.mean(target**2)), float(np.mean(noise**2))
    else:
        raise ValueError(f"unknown power estimator {power!r}")
    if signal_power == 0.0:
        raise ValueError("signal power is zero: SNR undefined")
    if noise_power == 0.0:
        return math.inf
    return 10.0 * math.log10(signal_power / noise_power)


def binary_mask(truth) -> NDArray[np.bool_]:
    """Boolean foreground of a {0, 1} or {-1, 1} mask"""
    truth = np.asarray(truth, dtype=np.float64)
    values = set(np.unique(truth).tolist())
    if not (values <= {0.0, 1.0} or values <= {-1.0, 1.0}):
        raise ValueError(f"truth mask must be binary, found values {sorted(values)[:5]}")
    return truth == 1.0


def segmentation_metrics(
    output, truth_mask, threshold: float = 0.0, item_id: Optional[str] = None
) -> MetricReport:
    """
    Threshold the output and score it against a binary mask

    Precision (recall) is reported as 0 with precision_defined (recall_defined) False when
    its denominator is zero.
    """
    output, truth = _pair(output, truth_mask, "segmentation")
    actual = binary_mask(truth)
    predicted = output >= threshold

    tp = int(np.sum(predicted & actual))
    fp = int(np.sum(predicted & ~actual))
    fn = int(np.sum(~predicted & actual))
    tn = int(np.sum(~predicted & ~actual))
    accuracy = (tp + tn) / actual.size

    precision_defined = tp + fp > 0
    recall_defined = tp + fn > 0
    precision = tp / (tp + fp) if precision_defined else 0.0
    recall = tp / (tp + fn) if recall_defined else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0

    truth_signal = np.where(actual, 1.0, -1.0)
    try:
        snr_db = snr(truth_signal, output)
    except ValueError:
        snr_db = math.nan
    return MetricReport(
        item_id=item_id,
        mse=mse(truth_signal, output),
        snr_db=snr_db,
        ce=1.0 - accuracy,
        f1=f1,
        precision=precision,
        recall=recall,
        precision_defined=precision_defined,
        recall_defined=recall_defined,
    )


def evaluate_item(
    output,
    target,
    item_id: Optional[str] = None,
    segmentation: bool = False,
    threshold: float = 0.0,
) -> MetricReport:
    """MSE and SNR of one item, plus the segmentation scores for mask targets"""
    if segmentation:
        return segmentation_metrics(output, target, threshold, item_id)
    target, output = _pair(target, output, "evaluation")
    try:
        snr_db = snr(target, output)
    except ValueError:
        snr_db = math.nan
    return MetricReport(item_id=item_id, mse=mse(target, output), snr_db=snr_db)
