"""Expected Calibration Error, Brier score, reliability curves, and
temperature scaling.

Binning uses M equal-width bins on [0, 1], interval convention [lo, hi)
with the final bin closed at 1.0, so confidence 1.0 lands in the top
bin. Empty bins contribute zero weight, never NaN.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .errors import NumericError, ValidationError

TEMPERATURE_BOUNDS = (0.05, 20.0)
TEMPERATURE_XATOL = 1e-4


@dataclass(frozen=True)
class CalibrationBin:
    lo: float
    hi: float
    count: int
    mean_conf: float
    accuracy: float
    count_correct: int


@dataclass(frozen=True)
class TemperatureParam:
    T: float

    def __post_init__(self):
        if not self.T > 0:
            raise NumericError(f"temperature must be positive, got {self.T}")


def _check_inputs(confidences, correct) -> tuple[np.ndarray, np.ndarray]:
    conf = np.asarray(confidences, dtype=np.float64)
    corr = np.asarray(correct, dtype=bool)
    if conf.ndim != 1 or corr.ndim != 1:
        raise ValidationError("confidences and correctness must be 1-D")
    if conf.shape != corr.shape:
        raise ValidationError(
            f"length mismatch: {conf.shape[0]} confidences vs {corr.shape[0]} outcomes"
        )
    if conf.size == 0:
        raise ValidationError("empty input")
    if np.any(~np.isfinite(conf)) or np.any(conf < 0.0) or np.any(conf > 1.0):
        raise ValidationError("confidences must lie in [0, 1]")
    return conf, corr


def _bin_index(conf: np.ndarray, m: int) -> np.ndarray:
    # [lo, hi) bins; conf exactly 1.0 belongs to the last bin.
    idx = np.floor(conf * m).astype(np.int64)
    return np.minimum(idx, m - 1)


def bin_stats(confidences, correct, m: int) -> list[CalibrationBin]:
    """Per-bin count, mean confidence, and accuracy over M equal-width bins."""
    if m < 1:
        raise ValidationError(f"bin count must be >= 1, got {m}")
    conf, corr = _check_inputs(confidences, correct)
    idx = _bin_index(conf, m)
    counts = np.bincount(idx, minlength=m)
    conf_sums = np.bincount(idx, weights=conf, minlength=m)
    correct_counts = np.bincount(idx, weights=corr.astype(np.float64), minlength=m)
    bins: list[CalibrationBin] = []
    for b in range(m):
        count = int(counts[b])
        mean_conf = float(conf_sums[b] / count) if count else 0.0
        accuracy = float(correct_counts[b] / count) if count else 0.0
        bins.append(
            CalibrationBin(
                lo=b / m,
                hi=(b + 1) / m,
                count=count,
                mean_conf=mean_conf,
                accuracy=accuracy,
                count_correct=int(correct_counts[b]),
            )
        )
    return bins


def ece(confidences, correct, m: int = 10) -> tuple[float, list[CalibrationBin]]:
    """Expected Calibration Error over M equal-width bins, plus the bins.

    ECE = sum_b (count_b / N) * |accuracy_b - mean_confidence_b|.
    """
    bins = bin_stats(confidences, correct, m)
    n = sum(b.count for b in bins)
    value = sum(b.count / n * abs(b.accuracy - b.mean_conf) for b in bins if b.count)
    return float(value), bins


def brier(confidences, correct) -> float:
    """Mean squared error between confidence and the binary outcome."""
    conf, corr = _check_inputs(confidences, correct)
    return float(np.mean((conf - corr.astype(np.float64)) ** 2))


@dataclass
class ReliabilityCurve:
    bins: list[CalibrationBin]
    histogram: list[int]
    histogram_correct: list[int]
    histogram_incorrect: list[int]


def reliability_curve(confidences, correct, m: int = 10) -> ReliabilityCurve:
    """Per-bin reliability data plus confidence histograms, overall and
    split by correctness, for plotting."""
    bins = bin_stats(confidences, correct, m)
    return ReliabilityCurve(
        bins=bins,
        histogram=[b.count for b in bins],
        histogram_correct=[b.count_correct for b in bins],
        histogram_incorrect=[b.count - b.count_correct for b in bins],
    )


def apply_temperature(logits, temperature: float) -> np.ndarray:
    """softmax(logits / T), computed with max-subtraction for stability."""
    if not temperature > 0:
        raise NumericError(f"temperature must be positive, got {temperature}")
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValidationError("logits must be finite")
    scaled = z / temperature
    shifted = scaled - np.max(scaled, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def nll_at_temperature(logit_rows: np.ndarray, target_ids: np.ndarray, temperature: float) -> float:
    """Mean negative log-likelihood of the targets under softmax(z / T)."""
    z = logit_rows / temperature
    zmax = np.max(z, axis=1)
    lse = zmax + np.log(np.sum(np.exp(z - zmax[:, None]), axis=1))
    picked = z[np.arange(z.shape[0]), target_ids]
    return float(np.mean(lse - picked))


def fit_temperature(logit_rows, target_ids) -> TemperatureParam:
    """Fit the temperature minimizing mean NLL over T in [0.05, 20].

    Coarse log-spaced grid to bracket the minimum, then a bounded
    scalar minimization refined to 1e-4 on T. The result never has
    higher NLL than T=1.
    """
    z = np.asarray(logit_rows, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1:
        raise ValidationError("logit_rows must be a non-empty matrix")
    if not np.all(np.isfinite(z)):
        raise ValidationError("logits must be finite")
    targets = np.asarray(target_ids, dtype=np.int64)
    if targets.shape != (z.shape[0],):
        raise ValidationError(
            f"expected {z.shape[0]} target ids, got shape {targets.shape}"
        )
    if np.any(targets < 0) or np.any(targets >= z.shape[1]):
        raise ValidationError("target id out of range")

    lo, hi = TEMPERATURE_BOUNDS
    grid = np.geomspace(lo, hi, 256)
    nlls = np.array([nll_at_temperature(z, targets, t) for t in grid])
    k = int(np.argmin(nlls))
    left = grid[max(k - 1, 0)]
    right = grid[min(k + 1, grid.size - 1)]
    if left == right:
        best_t = float(grid[k])
    else:
        res = optimize.minimize_scalar(
            lambda t: nll_at_temperature(z, targets, t),
            bounds=(left, right),
            method="bounded",
            options={"xatol": TEMPERATURE_XATOL},
        )
        best_t = float(res.x)

    candidates = [best_t, 1.0, lo, hi]
    best_t = min(candidates, key=lambda t: nll_at_temperature(z, targets, t))
    if not np.isfinite(nll_at_temperature(z, targets, best_t)):
        raise NumericError("temperature fit produced non-finite NLL")
    return TemperatureParam(T=best_t)
