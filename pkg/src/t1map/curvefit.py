"""Per-pixel nonlinear least-squares estimation of recovery-model parameters.

Magnitude data destroys the sign of the inverted signal, so every fit sweeps
polarity-restoration candidates: for k = 0..N-1 the k earliest-time samples
are negated, the signed model is fitted by Levenberg-Marquardt, and the
candidate with the lowest residual wins.  Each candidate runs three T1 seeds
(zero-crossing estimate, x0.5, x2) to dodge local minima.

All fitting goes through one batched solver that treats pixels as independent
rows, so map fits are vectorized yet produce exactly the per-pixel result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .imaging import Grid2D, Mask, Series
from .signal import (
    MolliParams,
    StoneParams,
    molli_correct,
    molli_correction_physical,
)

T1_BOUNDS_MS = (1.0, 5000.0)
AMP_BOUND_FACTOR = 10.0  # amplitude upper bound = factor * max observed signal

_LM_LAMBDA0 = 1e-3
_LM_MAX_ITER = 200
_LM_PTOL = 1e-8
_LM_LAMBDA_STALL = 1e12
_SEED_T1_MULTIPLIERS = (1.0, 0.5, 2.0)


class FitInputError(ValueError):
    """Sample/time vectors violate the fitting preconditions."""


@dataclass(frozen=True)
class FitResult:
    """Outcome of one pixel fit."""

    params: StoneParams | MolliParams | None
    corrected_t1: float
    r2: float
    residual_norm: float
    polarity_flips: int
    converged: bool
    degenerate: bool = False


def r_squared(observed, predicted) -> float:
    """Coefficient of determination 1 - SS_res/SS_tot."""
    o = np.asarray(observed, dtype=np.float64).ravel()
    p = np.asarray(predicted, dtype=np.float64).ravel()
    if o.size != p.size or o.size < 2:
        raise FitInputError("observed and predicted must have equal length >= 2")
    ss_tot = float(np.sum((o - o.mean()) ** 2))
    if ss_tot == 0.0:
        raise FitInputError("R^2 undefined for constant observed values")
    ss_res = float(np.sum((o - p) ** 2))
    return 1.0 - ss_res / ss_tot


@njit(cache=True)
def _lm_kernel(kind: int, y: np.ndarray, times: np.ndarray, p0: np.ndarray,
               lo: np.ndarray, hi: np.ndarray, ssr_hist: np.ndarray):
    """Box-constrained Levenberg-Marquardt on the signed model, per pixel.

    kind 0 fits (M0, T1), kind 1 fits (A, B, T1star).  Damping starts at
    1e-3 and adapts x10 on rejection, /10 on acceptance; accepted steps
    never increase the residual.  A pixel terminates converged when its
    relative parameter change drops below 1e-8 (including a step fully
    annihilated by the box projection, i.e. a constrained optimum), and
    unconverged when damping exceeds 1e12 or the iteration cap is hit.
    ``ssr_hist``, when non-empty, records pixel 0's running residual.
    """
    n_pix, n = y.shape
    k = p0.shape[1]
    p_out = np.empty_like(p0)
    ssr_out = np.empty(n_pix)
    conv = np.zeros(n_pix, dtype=np.bool_)
    record = ssr_hist.shape[0] > 0

    p = np.empty(3)
    pn = np.empty(3)
    e_cur = np.empty(n)
    e_new = np.empty(n)
    for q in range(n_pix):
        for j in range(k):
            v = p0[q, j]
            if v < lo[q, j]:
                v = lo[q, j]
            elif v > hi[q, j]:
                v = hi[q, j]
            p[j] = v
        ssr = 0.0
        for i in range(n):
            e = math.exp(-times[i] / p[k - 1])
            e_cur[i] = e
            if kind == 0:
                f = p[0] * (1.0 - 2.0 * e)
            else:
                f = p[0] - p[1] * e
            d = f - y[q, i]
            ssr += d * d
        if record and q == 0:
            ssr_hist[0] = ssr

        lam = _LM_LAMBDA0
        for it in range(_LM_MAX_ITER):
            # normal equations from the cached exponentials
            g0 = 0.0
            g1 = 0.0
            g2 = 0.0
            a00 = 0.0
            a01 = 0.0
            a02 = 0.0
            a11 = 0.0
            a12 = 0.0
            a22 = 0.0
            tk = p[k - 1]
            for i in range(n):
                e = e_cur[i]
                t = times[i]
                if kind == 0:
                    f = p[0] * (1.0 - 2.0 * e)
                    j0 = 1.0 - 2.0 * e
                    j1 = -2.0 * p[0] * e * t / (tk * tk)
                    r = f - y[q, i]
                    g0 += j0 * r
                    g1 += j1 * r
                    a00 += j0 * j0
                    a01 += j0 * j1
                    a11 += j1 * j1
                else:
                    f = p[0] - p[1] * e
                    j1 = -e
                    j2 = -p[1] * e * t / (tk * tk)
                    r = f - y[q, i]
                    g0 += r
                    g1 += j1 * r
                    g2 += j2 * r
                    a01 += j1
                    a02 += j2
                    a11 += j1 * j1
                    a12 += j1 * j2
                    a22 += j2 * j2
            ok = True
            if kind == 0:
                m00 = a00 * (1.0 + lam)
                m11 = a11 * (1.0 + lam)
                det = m00 * m11 - a01 * a01
                if det > 0.0 and np.isfinite(det):
                    inv = 1.0 / det
                    pn[0] = p[0] - (m11 * g0 - a01 * g1) * inv
                    pn[1] = p[1] - (m00 * g1 - a01 * g0) * inv
                else:
                    ok = False
            else:
                m00 = n * (1.0 + lam)
                m11 = a11 * (1.0 + lam)
                m22 = a22 * (1.0 + lam)
                c00 = m11 * m22 - a12 * a12
                c01 = a12 * a02 - a01 * m22
                c02 = a01 * a12 - m11 * a02
                det = m00 * c00 + a01 * c01 + a02 * c02
                if det > 0.0 and np.isfinite(det):
                    inv = 1.0 / det
                    c11 = m00 * m22 - a02 * a02
                    c12 = a01 * a02 - m00 * a12
                    c22 = m00 * m11 - a01 * a01
                    pn[0] = p[0] - (c00 * g0 + c01 * g1 + c02 * g2) * inv
                    pn[1] = p[1] - (c01 * g0 + c11 * g1 + c12 * g2) * inv
                    pn[2] = p[2] - (c02 * g0 + c12 * g1 + c22 * g2) * inv
                else:
                    ok = False
            if not ok:
                lam *= 10.0
                if lam > _LM_LAMBDA_STALL:
                    break
                continue
            rel = 0.0
            for j in range(k):
                v = pn[j]
                if v < lo[q, j]:
                    v = lo[q, j]
                elif v > hi[q, j]:
                    v = hi[q, j]
                pn[j] = v
                den = abs(p[j])
                if den < 1e-300:
                    den = 1e-300
                change = abs(v - p[j]) / den
                if change > rel:
                    rel = change
            ssr_new = 0.0
            for i in range(n):
                e = math.exp(-times[i] / pn[k - 1])
                e_new[i] = e
                if kind == 0:
                    f = pn[0] * (1.0 - 2.0 * e)
                else:
                    f = pn[0] - pn[1] * e
                d = f - y[q, i]
                ssr_new += d * d
            if np.isfinite(ssr_new) and ssr_new < ssr:
                for j in range(k):
                    p[j] = pn[j]
                for i in range(n):
                    e_cur[i] = e_new[i]
                ssr = ssr_new
                lam *= 0.1
                if record and q == 0:
                    ssr_hist[it + 1] = ssr
                if rel < _LM_PTOL:
                    conv[q] = True
                    break
            else:
                if record and q == 0:
                    ssr_hist[it + 1] = ssr
                if rel == 0.0:
                    # projection wiped the step: constrained stationary point
                    conv[q] = True
                    break
                lam *= 10.0
                if lam > _LM_LAMBDA_STALL:
                    break
        for j in range(k):
            p_out[q, j] = p[j]
        ssr_out[q] = ssr
    return p_out, ssr_out, conv


def _lm_solve(kind: str, y: np.ndarray, times: np.ndarray, p0: np.ndarray,
              lo: np.ndarray, hi: np.ndarray,
              ssr_hist: np.ndarray | None = None):
    """Typed wrapper around the compiled per-pixel solver."""
    hist = ssr_hist if ssr_hist is not None else np.empty(0)
    return _lm_kernel(0 if kind == "STONE" else 1,
                      np.ascontiguousarray(y, dtype=np.float64),
                      np.ascontiguousarray(times, dtype=np.float64),
                      np.ascontiguousarray(p0, dtype=np.float64),
                      np.ascontiguousarray(lo, dtype=np.float64),
                      np.ascontiguousarray(hi, dtype=np.float64),
                      hist)


@dataclass
class BatchFit:
    """Vectorized fit results for P pixels."""

    kind: str
    params: np.ndarray          # (P, k) in model order
    corrected_t1: np.ndarray    # (P,)
    r2: np.ndarray
    residual_norm: np.ndarray
    polarity_flips: np.ndarray
    converged: np.ndarray
    degenerate: np.ndarray
    physical: np.ndarray        # Look-Locker correction validity (True for STONE)

    @property
    def param_names(self) -> tuple[str, ...]:
        return ("m0", "t1") if self.kind == "STONE" else ("a", "b", "t1star")


def fit_batch(samples: np.ndarray, times, kind: str,
              t1_bounds: tuple[float, float] = T1_BOUNDS_MS) -> BatchFit:
    """Fit every row of ``samples`` (P, N magnitude values) independently.

    This is the engine behind both :func:`fit_pixel` and :func:`fit_map`;
    rows are mathematically independent, so batching changes nothing.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    times = np.asarray(times, dtype=np.float64)
    n_par = 2 if kind == "STONE" else 3
    p_count, n = samples.shape
    if times.shape != (n,):
        raise FitInputError("times must match the sample count")
    min_n = n_par + 1
    if n < min_n:
        raise FitInputError(f"{kind} fit needs at least {min_n} samples, got {n}")
    if np.any(samples < 0):
        raise FitInputError("magnitude samples must be non-negative")
    if np.any(~np.isfinite(samples)) or np.any(~np.isfinite(times)) or np.any(times < 0):
        raise FitInputError("samples and times must be finite, times non-negative")
    t1_lo, t1_hi = float(t1_bounds[0]), float(t1_bounds[1])

    peak = samples.max(axis=1)
    degenerate = peak <= 0.0
    live = ~degenerate

    params = np.full((p_count, n_par), np.nan)
    best_ssr = np.full(p_count, np.inf)
    best_flips = np.zeros(p_count, dtype=np.int64)
    best_conv = np.zeros(p_count, dtype=bool)
    best_y = np.zeros_like(samples)

    if np.any(live):
        s = samples[live]
        amp_hi = AMP_BOUND_FACTOR * s.max(axis=1)
        amp_lo = amp_hi * 1e-12
        t0 = times[np.argmin(s, axis=1)]
        t1_seed_base = np.clip(t0 / np.log(2.0), t1_lo, t1_hi)
        amp_seed = np.clip(s[:, np.argmax(times)], amp_hi * 1e-6, amp_hi)
        if kind == "STONE":
            lo = np.stack([amp_lo, np.full_like(amp_lo, t1_lo)], axis=1)
            hi = np.stack([amp_hi, np.full_like(amp_hi, t1_hi)], axis=1)
        else:
            lo = np.stack([amp_lo, amp_lo, np.full_like(amp_lo, t1_lo)], axis=1)
            hi = np.stack([amp_hi, amp_hi, np.full_like(amp_hi, t1_hi)], axis=1)

        order = np.argsort(times, kind="stable")
        q = s.shape[0]
        b_ssr = np.full(q, np.inf)
        b_par = np.full((q, n_par), np.nan)
        b_flip = np.zeros(q, dtype=np.int64)
        b_conv = np.zeros(q, dtype=bool)
        b_y = np.zeros_like(s)
        for flips in range(n):
            signs = np.ones(n)
            signs[order[:flips]] = -1.0
            y = s * signs[None, :]
            for mult in _SEED_T1_MULTIPLIERS:
                t1_seed = np.clip(t1_seed_base * mult, t1_lo, t1_hi)
                if kind == "STONE":
                    p0 = np.stack([amp_seed, t1_seed], axis=1)
                else:
                    p0 = np.stack(
                        [amp_seed, np.clip(2.0 * amp_seed, amp_lo, amp_hi), t1_seed],
                        axis=1,
                    )
                p_fit, ssr, conv = _lm_solve(kind, y, times, p0, lo, hi)
                better = ssr < b_ssr
                b_par[better] = p_fit[better]
                b_ssr[better] = ssr[better]
                b_flip[better] = flips
                b_conv[better] = conv[better]
                b_y[better] = y[better]
        params[live] = b_par
        best_ssr[live] = b_ssr
        best_flips[live] = b_flip
        best_conv[live] = b_conv
        best_y[live] = b_y

    best_ssr[degenerate] = 0.0
    residual_norm = np.sqrt(np.maximum(best_ssr, 0.0))

    ss_tot = np.sum((best_y - best_y.mean(axis=1, keepdims=True)) ** 2, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = np.where(ss_tot > 0.0, 1.0 - best_ssr / ss_tot, 0.0)
    r2[degenerate] = 0.0

    if kind == "STONE":
        corrected = params[:, 1].copy()
        physical = np.ones(p_count, dtype=bool)
    else:
        corrected = np.asarray(
            molli_correct(params[:, 0], params[:, 1], params[:, 2])
        )
        with np.errstate(invalid="ignore"):
            physical = np.asarray(molli_correction_physical(params[:, 0], params[:, 1]))
    physical &= ~degenerate
    return BatchFit(
        kind=kind,
        params=params,
        corrected_t1=corrected,
        r2=r2,
        residual_norm=residual_norm,
        polarity_flips=best_flips,
        converged=best_conv & ~degenerate,
        degenerate=degenerate,
        physical=physical,
    )


def fit_pixel(samples, times, kind: str,
              t1_bounds: tuple[float, float] = T1_BOUNDS_MS) -> FitResult:
    """Fit one pixel's magnitude samples; see module docstring for the scheme."""
    batch = fit_batch(np.asarray(samples, dtype=np.float64)[None, :], times, kind,
                      t1_bounds=t1_bounds)
    if batch.degenerate[0]:
        return FitResult(None, float("nan"), 0.0, 0.0, 0, False, degenerate=True)
    row = batch.params[0]
    if kind == "STONE":
        p = StoneParams(float(row[0]), float(row[1]))
    else:
        p = MolliParams(float(row[0]), float(row[1]), float(row[2]))
    return FitResult(
        params=p,
        corrected_t1=float(batch.corrected_t1[0]),
        r2=float(batch.r2[0]),
        residual_norm=float(batch.residual_norm[0]),
        polarity_flips=int(batch.polarity_flips[0]),
        converged=bool(batch.converged[0]),
    )


@dataclass
class FitMaps:
    """Per-pixel fit maps; NaN marks pixels without a usable fit."""

    kind: str
    grid: Grid2D
    params: dict[str, np.ndarray]
    t1: np.ndarray
    r2: np.ndarray
    invalid: np.ndarray
    converged: np.ndarray
    polarity_flips: np.ndarray


def fit_map(series: Series, mask: Mask | None = None,
            t1_bounds: tuple[float, float] = T1_BOUNDS_MS) -> FitMaps:
    """Fit every pixel inside ``mask`` (everywhere when absent).

    Degenerate or non-physical pixels are flagged in the invalid map rather
    than aborting the fit; outside-mask pixels carry NaN and are invalid.
    """
    grid = series.grid
    stack = series.stack()
    sel = mask.values if mask is not None else np.ones(grid.shape, dtype=bool)
    pix = stack[:, sel].T
    shape = grid.shape

    def scatter(vec, fill=np.nan, dtype=np.float64):
        out = np.full(shape, fill, dtype=dtype)
        out[sel] = vec
        return out

    batch = fit_batch(pix, series.times, series.sequence_kind, t1_bounds=t1_bounds)
    params = {
        name: scatter(batch.params[:, j])
        for j, name in enumerate(batch.param_names)
    }
    t1 = scatter(batch.corrected_t1)
    r2 = scatter(batch.r2)
    invalid = np.ones(shape, dtype=bool)
    invalid[sel] = batch.degenerate | ~batch.physical
    converged = scatter(batch.converged, fill=False, dtype=bool)
    flips = scatter(batch.polarity_flips, fill=-1, dtype=np.int64)
    t1[invalid & sel] = np.nan
    return FitMaps(series.sequence_kind, grid, params, t1, r2, invalid,
                   converged, flips)
