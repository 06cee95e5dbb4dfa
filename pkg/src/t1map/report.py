"""Figure rendering for the report path.

Every CLI command that emits a delimited report also renders PNG figures next
to it: parameter maps through the built-in relaxation colormap, loss traces,
and AHA-16 bullseye plots.  Rendering is headless (Agg) and byte-deterministic
for fixed inputs so reruns compare clean.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402
from matplotlib.patches import Wedge  # noqa: E402

from .imaging import colormap_table  # noqa: E402
from .metrics import RING_SECTORS  # noqa: E402

_PNG_METADATA = {"Software": "t1map"}


def t1_colormap() -> ListedColormap:
    cmap = ListedColormap(colormap_table() / 255.0, name="t1map")
    cmap.set_bad(color="black")
    return cmap


def _save(fig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_PNG_METADATA)
    plt.close(fig)


def save_map_figure(raster: np.ndarray, path: str | Path, vmin: float,
                    vmax: float, title: str = "", cbar_label: str = "",
                    mask: np.ndarray | None = None) -> None:
    """Render a raster as an image figure with a colorbar."""
    values = np.array(raster, dtype=np.float64)
    if mask is not None:
        values[~mask] = np.nan
    fig, ax = plt.subplots(figsize=(5.2, 4.4))
    im = ax.imshow(values, cmap=t1_colormap(), vmin=vmin, vmax=vmax,
                   interpolation="nearest")
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(im, ax=ax, label=cbar_label, shrink=0.85)
    _save(fig, path)


def save_loss_figure(trace: dict[str, np.ndarray], path: str | Path) -> None:
    """Plot the joint-loss components against the iteration index."""
    fig, ax = plt.subplots(figsize=(5.6, 3.8))
    for key in ("total", "fit", "smooth", "seg"):
        if key in trace and len(trace[key]):
            values = np.asarray(trace[key], dtype=np.float64)
            ax.plot(values, label=key)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(True, alpha=0.3)
    _save(fig, path)


def save_bullseye_figure(segment_values: np.ndarray, path: str | Path,
                         vmin: float, vmax: float, title: str = "",
                         cbar_label: str = "") -> None:
    """AHA-16 bullseye: 6 basal (outer), 6 mid, 4 apical (inner) wedges."""
    values = np.asarray(segment_values, dtype=np.float64)
    if values.shape != (16,):
        raise ValueError("bullseye needs exactly 16 segment values")
    cmap = t1_colormap()
    rings = (("basal", 1.0, 0.70), ("mid", 0.70, 0.40), ("apical", 0.40, 0.12))
    fig, ax = plt.subplots(figsize=(4.8, 4.6))
    for ring, r_out, r_in in rings:
        sectors, offset = RING_SECTORS[ring]
        width = 360.0 / sectors
        for s in range(sectors):
            v = values[offset + s]
            if np.isfinite(v):
                frac = np.clip((v - vmin) / (vmax - vmin), 0.0, 1.0)
                color = cmap(frac)
            else:
                color = (0.85, 0.85, 0.85, 1.0)
            theta1 = s * width
            wedge = Wedge((0, 0), r_out, theta1, theta1 + width,
                          width=r_out - r_in, facecolor=color,
                          edgecolor="white", linewidth=1.2)
            ax.add_patch(wedge)
            if np.isfinite(v):
                mid = np.deg2rad(theta1 + width / 2.0)
                rr = (r_out + r_in) / 2.0
                ax.text(rr * np.cos(mid), rr * np.sin(mid), f"{v:.0f}",
                        ha="center", va="center", fontsize=7)
    ax.set_xlim(-1.05, 1.05)
    ax.set_ylim(-1.05, 1.05)
    ax.set_aspect("equal")
    ax.axis("off")
    ax.set_title(title)
    sm = plt.cm.ScalarMappable(cmap=cmap,
                               norm=plt.Normalize(vmin=vmin, vmax=vmax))
    fig.colorbar(sm, ax=ax, label=cbar_label, shrink=0.8)
    _save(fig, path)
