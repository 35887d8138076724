"""Quantitative readouts: Dice overlap, line profiles, coefficient error.

Fields are compared after sampling onto a common regular grid so nodal
and network-based reconstructions meet on equal footing. The default
binarization threshold is half of each field's own maximum, making Dice
invariant to global intensity scaling.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .volume import GridSpec, trilinear


class MetricsError(Exception):
    pass


@dataclass(frozen=True)
class DiceResult:
    dice: float
    threshold_policy: str
    threshold_a: float
    threshold_b: float
    n_a: int
    n_b: int
    n_overlap: int


def _threshold(values, policy, fixed_value):
    if policy == "half_max":
        return 0.5 * float(values.max())
    if policy == "fixed":
        if fixed_value is None:
            raise MetricsError("fixed threshold policy needs a value")
        return float(fixed_value)
    if policy == "otsu":
        return _otsu(values)
    raise MetricsError(f"unknown threshold policy {policy!r}")


def _otsu(values, bins=256):
    flat = values.ravel()
    lo, hi = float(flat.min()), float(flat.max())
    if hi <= lo:
        return hi
    hist, edges = np.histogram(flat, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w = hist.astype(float)
    total = w.sum()
    best, best_t = -1.0, centers[0]
    cum_w = np.cumsum(w)
    cum_m = np.cumsum(w * centers)
    mean_all = cum_m[-1] / total
    for k in range(bins - 1):
        w0 = cum_w[k]
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            continue
        m0 = cum_m[k] / w0
        m1 = (cum_m[-1] - cum_m[k]) / w1
        between = w0 * w1 * (m0 - m1) ** 2
        if between > best:
            best, best_t = between, centers[k]
    return best_t


def dice(recon_samples, truth_samples, policy="half_max",
         fixed_value=None) -> DiceResult:
    """Overlap of the two fields after per-field binarization.

    Both-empty pairs score 1; exactly one empty scores 0.
    """
    a = np.asarray(recon_samples, dtype=np.float64)
    b = np.asarray(truth_samples, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricsError(f"sample grids differ: {a.shape} vs {b.shape}")
    ta = _threshold(a, policy, fixed_value)
    tb = _threshold(b, policy, fixed_value)
    mask_a = a > ta
    mask_b = b > tb
    n_a = int(mask_a.sum())
    n_b = int(mask_b.sum())
    n_overlap = int(np.logical_and(mask_a, mask_b).sum())
    if n_a == 0 and n_b == 0:
        score = 1.0
    elif n_a == 0 or n_b == 0:
        score = 0.0
    else:
        score = 2.0 * n_overlap / (n_a + n_b)
    return DiceResult(dice=score, threshold_policy=policy, threshold_a=ta,
                      threshold_b=tb, n_a=n_a, n_b=n_b, n_overlap=n_overlap)


def line_profile(values, grid: GridSpec, start, end, n_samples=100):
    """Field values linearly interpolated along a segment.

    The segment must lie inside the sampled grid; axis-aligned segments
    through sample planes reduce to 1D linear interpolation.
    """
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    t = np.linspace(0.0, 1.0, n_samples)[:, None]
    pts = start + t * (end - start)
    return trilinear(values, grid, pts)


def fwhm(profile, spacing):
    """Full width at half maximum of a 1D profile, via linear crossing
    interpolation; nan when the profile never rises above half max."""
    profile = np.asarray(profile, dtype=float)
    peak = profile.max()
    if peak <= 0:
        return float("nan")
    half = 0.5 * peak
    above = profile >= half
    if not above.any():
        return float("nan")
    first = int(np.argmax(above))
    last = len(profile) - 1 - int(np.argmax(above[::-1]))
    left = float(first)
    if first > 0:
        left = first - 1 + (half - profile[first - 1]) / (
            profile[first] - profile[first - 1])
    right = float(last)
    if last < len(profile) - 1:
        right = last + (profile[last] - half) / (
            profile[last] - profile[last + 1])
    return (right - left) * spacing


@dataclass(frozen=True)
class MuErrorResult:
    errors_pct: np.ndarray      # per-iteration |mu - mu*| / mu* * 100
    final_window_pct: float     # mean over the last tenth of iterations


def mu_error(trace_values, true_mu) -> MuErrorResult:
    """Percent coefficient error over a reconstruction trace."""
    values = np.asarray(trace_values, dtype=np.float64)
    if values.size == 0:
        raise MetricsError("empty trace")
    if true_mu <= 0:
        raise MetricsError(f"true coefficient must be > 0, got {true_mu}")
    errors = np.abs(values - true_mu) / true_mu * 100.0
    window = max(1, values.size // 10)
    return MuErrorResult(errors_pct=errors,
                         final_window_pct=float(errors[-window:].mean()))


REPORT_HEADER = ["case", "method", "dice", "final_mu_a_err_pct",
                 "final_mu_s_err_pct"]


def write_report_csv(rows, path):
    """Metrics report: one row per (case, method) pair."""
    with open(path, "w", encoding="ascii", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_HEADER)
        for row in rows:
            writer.writerow([row[0], row[1]] +
                            [f"{float(v):.6g}" for v in row[2:]])
