"""Evaluation metrics: overlap, boundary distance, test-retest agreement,
and AHA-16 segmental summaries, plus the delimited report schema.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import Grid2D, Mask

METRICS_COLUMNS = (
    ["case", "slice", "method", "r2_mean", "dice", "hd_mm", "mean_detJ", "folds"]
    + [f"t1_seg_{i:02d}" for i in range(1, 17)]
)

RING_SECTORS = {"basal": (6, 0), "mid": (6, 6), "apical": (4, 12)}
STACK_RINGS_5 = ("basal", "basal", "mid", "mid", "apical")


class MetricsError(ValueError):
    """Metric undefined for the given inputs."""


def dice(a: Mask, b: Mask) -> float:
    """Overlap coefficient 2|A∩B| / (|A|+|B|)."""
    if a.grid != b.grid:
        raise MetricsError("masks must share a grid")
    na, nb = a.count, b.count
    if na + nb == 0:
        raise MetricsError("Dice undefined for two empty masks")
    inter = int(np.count_nonzero(a.values & b.values))
    return 2.0 * inter / (na + nb)


def dice_arrays(a: np.ndarray, b: np.ndarray) -> float:
    """Dice between two boolean arrays (no grid bookkeeping)."""
    na, nb = int(np.count_nonzero(a)), int(np.count_nonzero(b))
    if na + nb == 0:
        raise MetricsError("Dice undefined for two empty masks")
    return 2.0 * int(np.count_nonzero(a & b)) / (na + nb)


def _boundary_points(values: np.ndarray) -> np.ndarray:
    """(y, x) coordinates of mask pixels with a non-mask 4-neighbor.

    Pixels on the image border count as boundary (the outside is non-mask).
    """
    padded = np.pad(values, 1, constant_values=False)
    core = padded[1:-1, 1:-1]
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1]
        & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    ys, xs = np.nonzero(core & ~interior)
    return np.stack([ys, xs], axis=1).astype(np.float64)


def hausdorff(a: Mask, b: Mask, grid: Grid2D | None = None) -> float:
    """Symmetric Hausdorff distance between mask boundaries, in mm."""
    if a.grid != b.grid:
        raise MetricsError("masks must share a grid")
    if a.count == 0 or b.count == 0:
        raise MetricsError("Hausdorff undefined for an empty mask")
    g = grid if grid is not None else a.grid
    scale = np.array([g.spacing_y, g.spacing_x])
    pa = _boundary_points(a.values) * scale
    pb = _boundary_points(b.values) * scale
    d2 = np.sum((pa[:, None, :] - pb[None, :, :]) ** 2, axis=2)
    h_ab = np.sqrt(d2.min(axis=1)).max()
    h_ba = np.sqrt(d2.min(axis=0)).max()
    return float(max(h_ab, h_ba))


def icc3(test, retest) -> float:
    """ICC(3,1): two-way mixed, single-measure, consistency.

    (MS_R - MS_E) / (MS_R + (k-1)*MS_E) with k = 2 rating columns.
    """
    t = np.asarray(test, dtype=np.float64).ravel()
    s = np.asarray(retest, dtype=np.float64).ravel()
    if t.size != s.size or t.size < 3:
        raise MetricsError("icc3 needs two equal-length vectors of >= 3 values")
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(s))):
        raise MetricsError("icc3 requires finite values")
    x = np.stack([t, s], axis=1)
    n, k = x.shape
    grand = x.mean()
    rows = x.mean(axis=1)
    cols = x.mean(axis=0)
    ss_rows = k * float(np.sum((rows - grand) ** 2))
    if ss_rows == 0.0:
        raise MetricsError("icc3 undefined: zero between-target variance")
    resid = x - rows[:, None] - cols[None, :] + grand
    ms_r = ss_rows / (n - 1)
    ms_e = float(np.sum(resid**2)) / ((n - 1) * (k - 1))
    return (ms_r - ms_e) / (ms_r + (k - 1) * ms_e)


def aha16_labels(myo: Mask, center: tuple[float, float], ref_angle_deg: float,
                 ring: str) -> np.ndarray:
    """Angular AHA segment labels for one short-axis slice.

    Basal and mid rings split the myocardium into six 60-degree sectors,
    the apical ring into four 90-degree sectors, counted counterclockwise
    (in conventional display orientation, y pointing down) from
    ``ref_angle_deg``.  Labels are globally numbered 1-6 (basal), 7-12
    (mid), 13-16 (apical); background pixels get 0.
    """
    if ring not in RING_SECTORS:
        raise MetricsError(f"ring must be one of {sorted(RING_SECTORS)}")
    if myo.count == 0:
        raise MetricsError("aha16_labels needs a nonempty myocardium mask")
    cy, cx = center
    h, w = myo.grid.shape
    if not (0 <= cy < h and 0 <= cx < w):
        raise MetricsError("center must lie inside the grid")
    sectors, offset = RING_SECTORS[ring]
    width = 360.0 / sectors
    yy, xx = np.nonzero(myo.values)
    ang = np.degrees(np.arctan2(-(yy - cy), xx - cx))
    rel = np.mod(ang - ref_angle_deg, 360.0)
    sector = np.minimum((rel / width).astype(np.intp), sectors - 1)
    labels = np.zeros(myo.grid.shape, dtype=np.intp)
    labels[yy, xx] = offset + sector + 1
    return labels


@dataclass
class SegmentalReport:
    """Mean T1 per AHA segment with pixel counts; NaN where empty."""

    segment_means: np.ndarray
    segment_counts: np.ndarray
    icc: float | None = None


def segmental_means(t1_map: np.ndarray, labels: np.ndarray,
                    invalid: np.ndarray | None = None) -> SegmentalReport:
    """Mean over valid pixels per segment 1..16."""
    if t1_map.shape != labels.shape:
        raise MetricsError("t1 map and labels must share a shape")
    good = np.isfinite(t1_map)
    if invalid is not None:
        good &= ~invalid
    means = np.full(16, np.nan)
    counts = np.zeros(16, dtype=np.int64)
    for s in range(1, 17):
        sel = (labels == s) & good
        c = int(np.count_nonzero(sel))
        counts[s - 1] = c
        if c:
            means[s - 1] = float(t1_map[sel].mean())
    return SegmentalReport(means, counts)


# ---------------------------------------------------------------------------
# Map summaries used by the report path
# ---------------------------------------------------------------------------

def mean_inside(raster: np.ndarray, mask: Mask,
                invalid: np.ndarray | None = None) -> float:
    sel = mask.values & np.isfinite(raster)
    if invalid is not None:
        sel &= ~invalid
    if not sel.any():
        return float("nan")
    return float(raster[sel].mean())


def t1_error_stats(t1_map: np.ndarray, truth_t1: np.ndarray, mask: Mask,
                   invalid: np.ndarray | None = None) -> dict:
    """Absolute-error summary of a T1 map against truth inside a mask.

    Pixels without a usable fit count at infinite error so that invalid
    fits cannot improve the statistics.
    """
    sel = mask.values
    err = np.abs(t1_map - truth_t1)
    err = np.where(np.isfinite(err), err, np.inf)
    if invalid is not None:
        err = np.where(invalid, np.inf, err)
    inside = err[sel]
    finite = inside[np.isfinite(inside)]
    return {
        "median_abs_err_ms": float(np.median(inside)),
        "mean_abs_err_ms": float(finite.mean()) if finite.size else float("inf"),
        "p95_abs_err_ms": float(np.percentile(inside, 95)),
        "invalid_fraction": float(np.mean(~np.isfinite(inside))),
    }


def write_metrics_csv(path: str | Path, rows: list[dict]) -> None:
    """Write report rows in the fixed metrics schema; missing cells empty."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS,
                                restval="", extrasaction="raise")
        writer.writeheader()
        for row in rows:
            out = {}
            for key, value in row.items():
                if isinstance(value, float):
                    out[key] = "" if not np.isfinite(value) else f"{value:.6g}"
                else:
                    out[key] = value
            writer.writerow(out)


def read_metrics_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
