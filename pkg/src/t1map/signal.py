"""Closed-form inversion-recovery signal models and Look-Locker correction.

Two recovery models are supported:

* a three-parameter Look-Locker model ``A - B*exp(-t/T1star)`` whose apparent
  time constant is corrected to tissue T1 by ``T1 = T1star*(B/A - 1)``, and
* a two-parameter model ``M0*(1 - 2*exp(-t/T1))`` assuming perfect inversion,
  where the fitted time constant is tissue T1 directly.

The acquired frames are magnitude images, so any model-vs-image comparison
uses the absolute model value; signed evaluation stays available for fitting
with restored polarity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MolliParams:
    """Look-Locker fit parameters (signal units, signal units, ms)."""

    a: float
    b: float
    t1star: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0 and self.t1star > 0):
            raise ValueError("MolliParams require A > 0, B > 0, T1* > 0")

    def signal(self, t):
        return molli_signal(self.a, self.b, self.t1star, t)

    def corrected_t1(self) -> float:
        return float(molli_correct(self.a, self.b, self.t1star))


@dataclass(frozen=True)
class StoneParams:
    """Two-parameter inversion-recovery fit parameters (signal units, ms)."""

    m0: float
    t1: float

    def __post_init__(self):
        if not (self.m0 > 0 and self.t1 > 0):
            raise ValueError("StoneParams require M0 > 0, T1 > 0")

    def signal(self, t):
        return stone_signal(self.m0, self.t1, t)

    def corrected_t1(self) -> float:
        return float(self.t1)


def molli_signal(a, b, t1star, t):
    """Signed Look-Locker recovery ``A - B*exp(-t/T1star)``; broadcasts."""
    a, b, t1star, t = (np.asarray(x, dtype=np.float64) for x in (a, b, t1star, t))
    return a - b * np.exp(-t / t1star)


def molli_correct(a, b, t1star):
    """Look-Locker correction ``T1 = T1star*(B/A - 1)``; broadcasts.

    The result is non-physical (<= 0) when B/A <= 1; callers flag those
    pixels rather than this function raising, since map-level fits must
    not abort on isolated bad pixels.
    """
    a, b, t1star = (np.asarray(x, dtype=np.float64) for x in (a, b, t1star))
    return t1star * (b / a - 1.0)


def molli_correction_physical(a, b):
    """True where the Look-Locker correction yields a positive T1."""
    return np.asarray(b, dtype=np.float64) / np.asarray(a, dtype=np.float64) > 1.0


def stone_signal(m0, t1, t):
    """Signed two-parameter recovery ``M0*(1 - 2*exp(-t/T1))``; broadcasts."""
    m0, t1, t = (np.asarray(x, dtype=np.float64) for x in (m0, t1, t))
    return m0 * (1.0 - 2.0 * np.exp(-t / t1))


def molli_signal_jac(a, b, t1star, t):
    """Partials of molli_signal w.r.t. (A, B, T1star), stacked last axis."""
    a, b, t1star, t = (np.asarray(x, dtype=np.float64) for x in (a, b, t1star, t))
    e = np.exp(-t / t1star)
    da = np.ones(np.broadcast_shapes(a.shape, b.shape, t1star.shape, t.shape))
    db = -e * np.ones_like(da)
    dt1s = -b * e * t / t1star**2
    return np.stack(np.broadcast_arrays(da, db, dt1s), axis=-1)


def stone_signal_jac(m0, t1, t):
    """Partials of stone_signal w.r.t. (M0, T1), stacked last axis."""
    m0, t1, t = (np.asarray(x, dtype=np.float64) for x in (m0, t1, t))
    e = np.exp(-t / t1)
    dm0 = 1.0 - 2.0 * e
    dt1 = -2.0 * m0 * e * t / t1**2
    return np.stack(np.broadcast_arrays(dm0, dt1), axis=-1)


def synth_map(kind: str, params: dict[str, np.ndarray], t: float,
              magnitude: bool = True) -> np.ndarray:
    """Evaluate the per-pixel model at time ``t`` over parameter maps.

    ``params`` holds rasters keyed 'm0'/'t1' (STONE) or 'a'/'b'/'t1star'
    (MOLLI).  With ``magnitude`` set the absolute value is returned, matching
    the acquired magnitude frames.
    """
    if kind == "STONE":
        out = stone_signal(params["m0"], params["t1"], t)
    elif kind == "MOLLI":
        out = molli_signal(params["a"], params["b"], params["t1star"], t)
    else:
        raise ValueError(f"unknown sequence kind {kind!r}")
    return np.abs(out) if magnitude else out


def synth_stack(kind: str, params: dict[str, np.ndarray], times,
                magnitude: bool = True) -> np.ndarray:
    """Synthetic frames at every time point, shape (N, H, W)."""
    return np.stack([synth_map(kind, params, float(t), magnitude) for t in times])
