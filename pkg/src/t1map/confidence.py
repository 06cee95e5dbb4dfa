"""Confidence-gated segmentation selection and reference-frame choice.

A frame's segmentation is retained when a required fraction gamma of its
myocardium pixels carries softmax confidence above alpha and the mask forms
exactly one 4-connected component.  The reference frame is the retained frame
with the highest mean confidence inside its mask (ties break to the lowest
index), and the extended mask K is the pixelwise OR of the retained masks.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imaging import Mask, load_segmentation_rasters

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


@dataclass(frozen=True)
class SegFrame:
    """Per-frame myocardium + left-ventricle masks with a confidence map."""

    myo: Mask
    lv: Mask
    conf: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.conf, dtype=np.float64)
        if c.shape != self.myo.grid.shape:
            raise ValueError("confidence map shape differs from the mask grid")
        if np.any(c < 0.0) or np.any(c > 1.0) or not np.all(np.isfinite(c)):
            raise ValueError("confidence values must lie in [0, 1]")
        if self.lv.grid != self.myo.grid:
            raise ValueError("myo and lv masks must share a grid")
        c = np.ascontiguousarray(c)
        c.flags.writeable = False
        object.__setattr__(self, "conf", c)


@dataclass(frozen=True)
class ConfidenceSelection:
    """Retained frame indices G, reference index r, extended mask K."""

    retained: tuple[int, ...]
    reference: int
    mask_union: Mask
    fallback: bool
    scores: tuple[float, ...]


def _single_component(mask_values: np.ndarray) -> bool:
    _, count = ndimage.label(mask_values, structure=_FOUR_CONN)
    return count == 1


def select(segs: list[SegFrame], alpha: float = 0.9,
           gamma: float = 0.99) -> ConfidenceSelection:
    """Apply the confidence gate and pick the reference frame.

    When no frame survives the gate, selection falls back to an all-ones
    extended mask and the last frame as reference (longest recovery time,
    highest tissue contrast) with the fallback flag raised; with fewer than
    two retained frames the segmentation losses have nothing to compare, so
    the flag is raised there as well.
    """
    if not segs:
        raise ValueError("need at least one segmentation frame")
    if not (0.0 < alpha < 1.0):
        raise ValueError("alpha must lie strictly inside (0, 1)")
    if not (0.0 < gamma <= 1.0):
        raise ValueError("gamma must lie in (0, 1]")
    grid = segs[0].myo.grid
    retained = []
    scores = []
    for i, seg in enumerate(segs):
        m = seg.myo.values
        count = int(m.sum())
        if count == 0:
            continue
        passing = np.count_nonzero(seg.conf[m] > alpha)
        if passing / count < gamma:
            continue
        if not _single_component(m):
            continue
        retained.append(i)
        scores.append(float(seg.conf[m].mean()))
    if not retained:
        union = Mask(grid, np.ones(grid.shape, dtype=bool))
        return ConfidenceSelection((), len(segs) - 1, union, True, ())
    reference = retained[int(np.argmax(scores))]
    union_values = np.zeros(grid.shape, dtype=bool)
    for i in retained:
        union_values |= segs[i].myo.values
    return ConfidenceSelection(
        tuple(retained), reference, Mask(grid, union_values),
        fallback=len(retained) < 2, scores=tuple(scores),
    )


def load_seg_frames(manifest_path: str | Path) -> list[SegFrame] | None:
    """Read the manifest's segmentation rasters into SegFrame objects."""
    rasters = load_segmentation_rasters(manifest_path)
    if rasters is None:
        return None
    return [SegFrame(myo, lv, conf) for myo, lv, conf in rasters]
