"""Synthetic ground-truth cases: annulus/disc anatomy, smooth motion, noise.

A phantom slice is an annular "myocardium" around a disc "blood pool" on a
uniform background, each with its own recovery parameters.  Frame zero is the
motionless anchor (it carries the reference geometry); every later frame is
deformed by a random smooth velocity field integrated to a displacement, then
corrupted with Rician noise.  Segmentations are the warped truth masks and
the confidence maps equal 1 inside them, so the confidence gate retains every
frame and ties resolve to frame zero unless deliberately degraded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .confidence import SegFrame
from .field import DisplacementField, VelocityField, integrate_svf, node_shape, warp_image, zero_displacement
from .imaging import Frame, Grid2D, Mask, Series, save_map, save_series
from .signal import synth_stack

DEFAULT_STONE_TIMES = tuple(np.geomspace(100.0, 4500.0, 11).round(1))
# typical 5(3)3 breath-hold scheme: two inversion trains interleaved in time
DEFAULT_MOLLI_TIMES = (120.0, 200.0, 1120.0, 1200.0, 2120.0, 2200.0, 3120.0, 3500.0)


class PhantomGeometryError(ValueError):
    """Annulus/disc radii do not fit the requested grid."""


@dataclass(frozen=True)
class PhantomSpec:
    """Everything needed to generate one slice deterministically."""

    grid: Grid2D = Grid2D(160, 160, 2.1, 2.1)
    sequence_kind: str = "STONE"
    times: tuple[float, ...] = DEFAULT_STONE_TIMES
    center: tuple[float, float] | None = None   # (cy, cx), defaults to middle
    inner_radius_px: float = 28.0
    outer_radius_px: float = 38.0
    lv_radius_px: float = 28.0
    t1_myo: float = 1100.0
    t1_blood: float = 1700.0
    t1_background: float = 300.0
    m0_myo: float = 0.8
    m0_blood: float = 1.0
    m0_background: float = 0.3
    b_over_a: float = 2.0                        # MOLLI only
    motion_amplitude_px: float = 0.0
    motion_smoothness_px: float = 6.0
    noise_sigma: float = 0.0
    conf_degrade: float = 0.0
    seed: int = 0

    def resolved_center(self) -> tuple[float, float]:
        if self.center is not None:
            return self.center
        return ((self.grid.height - 1) / 2.0, (self.grid.width - 1) / 2.0)

    def to_json(self) -> str:
        doc = {
            "height": self.grid.height, "width": self.grid.width,
            "spacing_mm": [self.grid.spacing_x, self.grid.spacing_y],
            "sequence": self.sequence_kind, "times_ms": list(self.times),
            "center": list(self.resolved_center()),
            "inner_radius_px": self.inner_radius_px,
            "outer_radius_px": self.outer_radius_px,
            "lv_radius_px": self.lv_radius_px,
            "t1_myo": self.t1_myo, "t1_blood": self.t1_blood,
            "t1_background": self.t1_background,
            "m0_myo": self.m0_myo, "m0_blood": self.m0_blood,
            "m0_background": self.m0_background, "b_over_a": self.b_over_a,
            "motion_amplitude_px": self.motion_amplitude_px,
            "motion_smoothness_px": self.motion_smoothness_px,
            "noise_sigma": self.noise_sigma, "conf_degrade": self.conf_degrade,
            "seed": self.seed,
        }
        return json.dumps(doc, indent=2) + "\n"

    @staticmethod
    def from_json(text: str) -> "PhantomSpec":
        doc = json.loads(text)
        sx, sy = doc.get("spacing_mm", [2.1, 2.1])
        grid = Grid2D(int(doc["height"]), int(doc["width"]), float(sx), float(sy))
        kind = doc.get("sequence", "STONE")
        times = doc.get("times_ms")
        if times is None:
            times = DEFAULT_STONE_TIMES if kind == "STONE" else DEFAULT_MOLLI_TIMES
        keys = (
            "inner_radius_px", "outer_radius_px", "lv_radius_px",
            "t1_myo", "t1_blood", "t1_background",
            "m0_myo", "m0_blood", "m0_background", "b_over_a",
            "motion_amplitude_px", "motion_smoothness_px",
            "noise_sigma", "conf_degrade", "seed",
        )
        base = PhantomSpec(grid=grid, sequence_kind=kind, times=tuple(times),
                           center=tuple(doc["center"]) if "center" in doc else None)
        present = {k: doc[k] for k in keys if k in doc}
        return replace(base, **present)


@dataclass
class PhantomCase:
    """Ground truth plus the corrupted observation derived from it."""

    spec: PhantomSpec
    truth_params: dict[str, np.ndarray]
    truth_t1: np.ndarray
    truth_fields: list[DisplacementField]
    truth_velocities: list[VelocityField]
    series: Series
    segs: list[SegFrame]
    truth_myo: Mask
    truth_lv: Mask


def default_spec(kind: str = "STONE", size: int = 160, **overrides) -> PhantomSpec:
    """Spec with anatomy scaled to a square grid of the given size."""
    s = size / 160.0
    base = PhantomSpec(
        grid=Grid2D(size, size, 2.1, 2.1),
        sequence_kind=kind,
        times=DEFAULT_STONE_TIMES if kind == "STONE" else DEFAULT_MOLLI_TIMES,
        inner_radius_px=28.0 * s,
        outer_radius_px=38.0 * s,
        lv_radius_px=28.0 * s,
    )
    return replace(base, **overrides) if overrides else base


def add_rician(values: np.ndarray, sigma: float, rng) -> np.ndarray:
    """Magnitude of the value plus complex Gaussian noise of std sigma."""
    if sigma < 0:
        raise ValueError("noise sigma must be >= 0")
    v = np.asarray(values, dtype=np.float64)
    if sigma == 0:
        return np.abs(v)
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    n1 = rng.normal(0.0, sigma, v.shape)
    n2 = rng.normal(0.0, sigma, v.shape)
    return np.sqrt((v + n1) ** 2 + n2**2)


def _region_masks(spec: PhantomSpec):
    h, w = spec.grid.shape
    cy, cx = spec.resolved_center()
    if not (0 < spec.inner_radius_px < spec.outer_radius_px < min(h, w) / 2):
        raise PhantomGeometryError(
            "need 0 < inner < outer < min(H, W)/2 for the annulus"
        )
    if not (0 < spec.lv_radius_px <= spec.inner_radius_px):
        raise PhantomGeometryError("lv disc must fit inside the annulus")
    yy, xx = np.mgrid[0:h, 0:w]
    rho = np.hypot(yy - cy, xx - cx)
    myo = (rho >= spec.inner_radius_px) & (rho < spec.outer_radius_px)
    lv = rho < spec.lv_radius_px
    return myo, lv


def _truth_params(spec: PhantomSpec, myo, lv):
    def regionwise(v_myo, v_blood, v_bg):
        out = np.full(spec.grid.shape, v_bg, dtype=np.float64)
        out[lv] = v_blood
        out[myo] = v_myo
        return out

    t1 = regionwise(spec.t1_myo, spec.t1_blood, spec.t1_background)
    if spec.sequence_kind == "STONE":
        params = {"m0": regionwise(spec.m0_myo, spec.m0_blood, spec.m0_background),
                  "t1": t1}
    else:
        if spec.b_over_a <= 1.0:
            raise PhantomGeometryError("MOLLI phantom needs B/A > 1")
        a = regionwise(spec.m0_myo, spec.m0_blood, spec.m0_background)
        params = {"a": a, "b": spec.b_over_a * a,
                  "t1star": t1 / (spec.b_over_a - 1.0)}
    return params, t1


def _random_velocity(spec: PhantomSpec, rng) -> VelocityField:
    hh, ww = node_shape(spec.grid)
    sigma_nodes = max(spec.motion_smoothness_px / 2.0, 1e-6)
    vx = ndimage.gaussian_filter(rng.standard_normal((hh, ww)), sigma_nodes)
    vy = ndimage.gaussian_filter(rng.standard_normal((hh, ww)), sigma_nodes)
    # amplitude fixes the mean vector magnitude, so a 3 px setting moves
    # typical tissue by about 3 px rather than only at the field's peak
    mean_mag = float(np.hypot(vx, vy).mean())
    if mean_mag > 0:
        scale = spec.motion_amplitude_px / mean_mag
        vx, vy = vx * scale, vy * scale
    return VelocityField(spec.grid, vx, vy)


def make_phantom(spec: PhantomSpec) -> PhantomCase:
    """Generate one slice; fully determined by the spec (incl. its seed)."""
    rng = np.random.default_rng(spec.seed)
    myo, lv = _region_masks(spec)
    params, t1 = _truth_params(spec, myo, lv)
    clean = synth_stack(spec.sequence_kind, params, spec.times, magnitude=True)

    n = len(spec.times)
    velocities: list[VelocityField] = []
    fields: list[DisplacementField] = []
    for i in range(n):
        if i == 0 or spec.motion_amplitude_px == 0.0:
            vel = VelocityField(spec.grid, *np.zeros((2, *node_shape(spec.grid))))
            fields.append(zero_displacement(spec.grid))
        else:
            vel = _random_velocity(spec, rng)
            fields.append(integrate_svf(vel))
        velocities.append(vel)

    myo_f = myo.astype(np.float64)
    lv_f = lv.astype(np.float64)
    frames = []
    segs = []
    for i in range(n):
        moved = warp_image(clean[i], fields[i])
        noisy = add_rician(moved, spec.noise_sigma, rng)
        frames.append(Frame(spec.grid, np.maximum(noisy, 0.0), spec.times[i]))
        myo_i = warp_image(myo_f, fields[i]) >= 0.5
        lv_i = warp_image(lv_f, fields[i]) >= 0.5
        conf = np.zeros(spec.grid.shape)
        conf[myo_i] = 1.0
        if spec.conf_degrade > 0:
            drop = spec.conf_degrade * rng.uniform(size=spec.grid.shape)
            conf = np.where(myo_i, np.clip(conf - drop, 0.0, 1.0), conf)
        segs.append(SegFrame(Mask(spec.grid, myo_i), Mask(spec.grid, lv_i), conf))

    series = Series(tuple(frames), spec.sequence_kind, spec.grid,
                    slice_id=f"phantom-{spec.seed}")
    return PhantomCase(spec, params, t1, fields, velocities, series, segs,
                       Mask(spec.grid, myo), Mask(spec.grid, lv))


def save_case(case: PhantomCase, out_dir: str | Path) -> Path:
    """Write the observation (series + segs) and the truth/ subdirectory."""
    out_dir = Path(out_dir)
    seg_tuples = [(s.myo, s.lv, s.conf) for s in case.segs]
    manifest = save_series(case.series, out_dir, segmentations=seg_tuples)
    truth = out_dir / "truth"
    truth.mkdir(parents=True, exist_ok=True)
    for name, raster in case.truth_params.items():
        save_map(raster, truth / f"{name}.f32")
    save_map(case.truth_t1, truth / "t1.f32")
    save_map(case.truth_myo.astype_float(), truth / "myo.f32")
    save_map(case.truth_lv.astype_float(), truth / "lv.f32")
    for i, d in enumerate(case.truth_fields):
        save_map(d.dx, truth / f"field_{i:02d}_dx.f32")
        save_map(d.dy, truth / f"field_{i:02d}_dy.f32")
    (truth / "spec.json").write_text(case.spec.to_json())
    return manifest
