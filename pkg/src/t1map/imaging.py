"""Raster containers, raw-float32 series I/O, normalization, and map rendering.

All rasters are row-major with origin at the top-left corner; x indexes
columns and y indexes rows.  On-disk rasters are headerless little-endian
float32.  A series is described by a JSON manifest (see :func:`load_series`).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SEQUENCE_KINDS = ("STONE", "MOLLI")

MIN_FRAMES = 4


class ManifestError(ValueError):
    """Manifest missing, malformed, or inconsistent with the referenced files."""


class DegenerateSeriesError(ValueError):
    """Series content unusable (constant intensities, negative magnitudes, ...)."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Grid2D:
    """Pixel lattice of one slice; spacing in mm per pixel."""

    height: int
    width: int
    spacing_x: float = 1.0
    spacing_y: float = 1.0

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ValueError(f"grid must be at least 8x8, got {self.height}x{self.width}")
        if not (self.spacing_x > 0 and self.spacing_y > 0):
            raise ValueError("pixel spacing must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


@dataclass(frozen=True)
class Frame:
    """One magnitude image acquired at time ``t`` ms after preparation."""

    grid: Grid2D
    values: np.ndarray
    t: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != self.grid.shape:
            raise ValueError(f"frame shape {v.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(v)):
            raise DegenerateSeriesError("frame contains non-finite values")
        if not (np.isfinite(self.t) and self.t >= 0):
            raise ValueError(f"time after preparation must be >= 0, got {self.t}")
        object.__setattr__(self, "values", _freeze(v))


@dataclass(frozen=True)
class Series:
    """Ordered frames of one slice sharing a grid and a sequence kind."""

    frames: tuple[Frame, ...]
    sequence_kind: str
    grid: Grid2D
    slice_id: str = ""

    def __post_init__(self):
        if self.sequence_kind not in SEQUENCE_KINDS:
            raise ValueError(f"unknown sequence kind {self.sequence_kind!r}")
        if len(self.frames) < MIN_FRAMES:
            raise DegenerateSeriesError(
                f"need at least {MIN_FRAMES} frames, got {len(self.frames)}"
            )
        for f in self.frames:
            if f.grid != self.grid:
                raise ValueError("all frames must share the series grid")
        object.__setattr__(self, "frames", tuple(self.frames))

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def times(self) -> np.ndarray:
        return np.array([f.t for f in self.frames], dtype=np.float64)

    def stack(self) -> np.ndarray:
        """Frame values as one (N, H, W) array."""
        return np.stack([f.values for f in self.frames])


@dataclass(frozen=True)
class Mask:
    """Binary raster on a grid."""

    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.shape != self.grid.shape:
            raise ValueError(f"mask shape {v.shape} does not match grid {self.grid.shape}")
        if v.dtype != np.bool_:
            fv = np.asarray(v, dtype=np.float64)
            if not np.all(np.isin(fv, (0.0, 1.0))):
                raise ValueError("mask values must be exactly 0 or 1")
            v = fv.astype(bool)
        v = np.ascontiguousarray(v)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def count(self) -> int:
        return int(self.values.sum())

    def astype_float(self) -> np.ndarray:
        return self.values.astype(np.float64)


# ---------------------------------------------------------------------------
# Raw raster I/O
# ---------------------------------------------------------------------------

def read_raster(path: str | Path, grid: Grid2D) -> np.ndarray:
    """Read a headerless little-endian float32 raster of the grid's shape."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"raster file not found: {path}")
    expected = 4 * grid.height * grid.width
    actual = path.stat().st_size
    if actual != expected:
        raise ManifestError(
            f"{path}: size mismatch, expected {expected} bytes for "
            f"{grid.height}x{grid.width} float32, found {actual}"
        )
    raw = np.fromfile(path, dtype="<f4").reshape(grid.shape)
    return raw.astype(np.float64)


def save_map(raster: np.ndarray, path: str | Path) -> None:
    """Write a raster as headerless little-endian float32, row-major."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(raster).astype("<f4").tofile(path)


def load_map(path: str | Path, grid: Grid2D) -> np.ndarray:
    """Inverse of :func:`save_map` (values may be any finite/NaN float)."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"raster file not found: {path}")
    expected = 4 * grid.height * grid.width
    if path.stat().st_size != expected:
        raise ManifestError(f"{path}: size mismatch for grid {grid.shape}")
    return np.fromfile(path, dtype="<f4").reshape(grid.shape).astype(np.float64)


# ---------------------------------------------------------------------------
# Series manifest
# ---------------------------------------------------------------------------

def _manifest_grid(doc: dict) -> Grid2D:
    try:
        sx, sy = doc["spacing_mm"]
        return Grid2D(int(doc["height"]), int(doc["width"]), float(sx), float(sy))
    except (KeyError, TypeError, ValueError) as e:
        raise ManifestError(f"bad manifest geometry: {e}") from e


def _load_manifest(manifest_path: str | Path) -> tuple[dict, Path]:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise ManifestError(f"manifest not found: {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest is not valid JSON: {e}") from e
    if not isinstance(doc, dict) or "frames" not in doc:
        raise ManifestError("manifest must be a JSON object with a 'frames' list")
    return doc, manifest_path.parent


def load_series(manifest_path: str | Path) -> Series:
    """Load a series from its JSON manifest.

    Manifest schema::

        { "sequence": "STONE"|"MOLLI", "height": int, "width": int,
          "spacing_mm": [sx, sy], "slice_id": str,
          "frames": [ {"file": "frame_00.f32", "t_ms": number}, ... ],
          "segmentations": [ {"myo": ..., "lv": ..., "conf": ...}, ... ] }

    Frame files are raw float32, little-endian, row-major, no header.
    Negative stored values are rejected: magnitude data is non-negative
    by definition, so a negative value indicates a corrupt file.
    """
    doc, base = _load_manifest(manifest_path)
    kind = doc.get("sequence")
    if kind not in SEQUENCE_KINDS:
        raise ManifestError(f"manifest 'sequence' must be one of {SEQUENCE_KINDS}, got {kind!r}")
    grid = _manifest_grid(doc)
    entries = doc["frames"]
    if len(entries) < MIN_FRAMES:
        raise DegenerateSeriesError(
            f"manifest lists {len(entries)} frames, need at least {MIN_FRAMES}"
        )
    frames = []
    for entry in entries:
        values = read_raster(base / entry["file"], grid)
        if not np.all(np.isfinite(values)):
            raise DegenerateSeriesError(f"{entry['file']}: non-finite value encountered")
        if np.any(values < 0):
            raise DegenerateSeriesError(f"{entry['file']}: negative magnitude value")
        t = float(entry["t_ms"])
        if not (np.isfinite(t) and t >= 0):
            raise ManifestError(f"{entry['file']}: bad t_ms {entry['t_ms']}")
        frames.append(Frame(grid, values, t))
    return Series(tuple(frames), kind, grid, str(doc.get("slice_id", "")))


def load_segmentation_rasters(manifest_path: str | Path):
    """Per-frame (myo, lv, conf) rasters listed in the manifest, or None.

    Masks are validated to {0,1} and confidence to [0,1]; returned as
    (Mask, Mask, ndarray) tuples aligned with the frame order.
    """
    doc, base = _load_manifest(manifest_path)
    segs = doc.get("segmentations")
    if segs is None:
        return None
    grid = _manifest_grid(doc)
    if len(segs) != len(doc["frames"]):
        raise ManifestError("segmentations list must align with frames list")
    out = []
    for entry in segs:
        myo = Mask(grid, read_raster(base / entry["myo"], grid))
        lv = Mask(grid, read_raster(base / entry["lv"], grid))
        conf = read_raster(base / entry["conf"], grid)
        if np.any(conf < 0) or np.any(conf > 1):
            raise ManifestError(f"{entry['conf']}: confidence values outside [0,1]")
        out.append((myo, lv, conf))
    return out


def save_series(series: Series, out_dir: str | Path,
                segmentations=None, manifest_name: str = "series.json") -> Path:
    """Write a series (and optional per-frame segmentations) to a directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "sequence": series.sequence_kind,
        "height": series.grid.height,
        "width": series.grid.width,
        "spacing_mm": [series.grid.spacing_x, series.grid.spacing_y],
        "slice_id": series.slice_id,
        "frames": [],
    }
    for i, frame in enumerate(series.frames):
        name = f"frame_{i:02d}.f32"
        save_map(frame.values, out_dir / name)
        doc["frames"].append({"file": name, "t_ms": frame.t})
    if segmentations is not None:
        doc["segmentations"] = []
        for i, (myo, lv, conf) in enumerate(segmentations):
            names = {"myo": f"myo_{i:02d}.f32", "lv": f"lv_{i:02d}.f32",
                     "conf": f"conf_{i:02d}.f32"}
            save_map(myo.astype_float(), out_dir / names["myo"])
            save_map(lv.astype_float(), out_dir / names["lv"])
            save_map(conf, out_dir / names["conf"])
            doc["segmentations"].append(names)
    manifest = out_dir / manifest_name
    manifest.write_text(json.dumps(doc, indent=2) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def normalize_minmax(series: Series) -> Series:
    """Min-max normalize jointly over the whole sequence to exactly [0, 1].

    Normalization is global over the series (not per frame) so that the
    inter-frame intensity relations required by the recovery model survive.
    """
    stack = series.stack()
    lo = float(stack.min())
    hi = float(stack.max())
    if not hi > lo:
        raise DegenerateSeriesError("constant series cannot be normalized")
    scale = hi - lo
    frames = tuple(
        Frame(series.grid, (f.values - lo) / scale, f.t) for f in series.frames
    )
    return Series(frames, series.sequence_kind, series.grid, series.slice_id)


# ---------------------------------------------------------------------------
# PPM rendering
# ---------------------------------------------------------------------------

# Fixed perceptual ramp for relaxation-time maps: dark blue through violet and
# orange to pale sand, interpolated to 256 entries.
_RAMP_ANCHORS = np.array([
    (0.03, 0.02, 0.10),
    (0.10, 0.07, 0.33),
    (0.22, 0.12, 0.49),
    (0.42, 0.17, 0.56),
    (0.62, 0.23, 0.51),
    (0.80, 0.33, 0.40),
    (0.92, 0.48, 0.32),
    (0.97, 0.67, 0.42),
    (0.98, 0.84, 0.62),
    (0.99, 0.96, 0.86),
])


def colormap_table() -> np.ndarray:
    """256x3 uint8 lookup table of the built-in map colormap."""
    n = 256
    pos = np.linspace(0.0, 1.0, len(_RAMP_ANCHORS))
    xs = np.linspace(0.0, 1.0, n)
    rgb = np.stack([np.interp(xs, pos, _RAMP_ANCHORS[:, c]) for c in range(3)], axis=1)
    return np.round(rgb * 255).astype(np.uint8)


def render_ppm(raster: np.ndarray, low: float, high: float, path: str | Path,
               mask: Mask | None = None) -> None:
    """Render a raster to binary PPM (P6) through the built-in colormap.

    Values are clipped to [low, high] before mapping.  Pixels outside the
    mask, and non-finite pixels, render black.
    """
    if not high > low:
        raise ValueError("require low < high for rendering range")
    v = np.asarray(raster, dtype=np.float64)
    finite = np.isfinite(v)
    idx = np.zeros(v.shape, dtype=np.intp)
    scaled = (np.clip(np.where(finite, v, low), low, high) - low) / (high - low)
    idx = np.round(scaled * 255).astype(np.intp)
    rgb = colormap_table()[idx]
    black = ~finite
    if mask is not None:
        black |= ~mask.values
    rgb[black] = 0
    h, w = v.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())
