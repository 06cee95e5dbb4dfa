"""Deformation fields: velocity integration, warping, adjoints, diagnostics.

Velocities are stationary fields stored on a half-resolution node lattice
(node (i, j) sits at full-resolution pixel (2j, 2i)) with component values in
full-resolution pixels.  Integration by scaling-and-squaring runs on the node
lattice and upsamples last.  Warping follows the pull convention

    output(x) = image(x + d(x))

with clamp-to-border bilinear sampling, so a displacement field pulls the
moving image into the reference frame.

Every differentiable operation has an exact vector-Jacobian product
(`vjp_*`), which is what the joint optimizer backpropagates through; the
adjoint of integration re-runs the squaring chain in reverse.  The sampling
primitives are compiled single-pass kernels batched over a leading frame
axis; the per-field operations wrap them with a singleton axis.
"""

from __future__ import annotations


from dataclasses import dataclass

import numpy as np
from numba import njit

from .imaging import Frame, Grid2D

DEFAULT_INT_STEPS = 7


def node_shape(grid: Grid2D) -> tuple[int, int]:
    """Half-resolution node lattice shape (ceil(H/2), ceil(W/2))."""
    return (-(-grid.height // 2), -(-grid.width // 2))


@dataclass(frozen=True)
class VelocityField:
    """Stationary velocity on the half-resolution lattice, values in px."""

    grid: Grid2D
    vx: np.ndarray
    vy: np.ndarray

    def __post_init__(self):
        shape = node_shape(self.grid)
        for name, comp in (("vx", self.vx), ("vy", self.vy)):
            c = np.ascontiguousarray(comp, dtype=np.float64)
            if c.shape != shape:
                raise ValueError(f"{name} shape {c.shape} != node lattice {shape}")
            if not np.all(np.isfinite(c)):
                raise ValueError(f"{name} contains non-finite values")
            object.__setattr__(self, name, c)


@dataclass(frozen=True)
class DisplacementField:
    """Per-pixel displacement (dx, dy) on the full-resolution grid, in px."""

    grid: Grid2D
    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        for name, comp in (("dx", self.dx), ("dy", self.dy)):
            c = np.ascontiguousarray(comp, dtype=np.float64)
            if c.shape != self.grid.shape:
                raise ValueError(f"{name} shape {c.shape} != grid {self.grid.shape}")
            if not np.all(np.isfinite(c)):
                raise ValueError(f"{name} contains non-finite values")
            object.__setattr__(self, name, c)

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.dx, self.dy)


def zero_velocity(grid: Grid2D) -> VelocityField:
    hh, ww = node_shape(grid)
    return VelocityField(grid, np.zeros((hh, ww)), np.zeros((hh, ww)))


def zero_displacement(grid: Grid2D) -> DisplacementField:
    return DisplacementField(grid, np.zeros(grid.shape), np.zeros(grid.shape))


# ---------------------------------------------------------------------------
# Compiled sampling kernels (frame-batched, single pass, sequential loops)
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _cell(q: float, size: int):
    """Clamped bilinear cell: (corner index, fraction, border gate)."""
    qc = q
    if qc < 0.0:
        qc = 0.0
    elif qc > size - 1.0:
        qc = size - 1.0
    c = int(qc)
    if c > size - 2:
        c = size - 2
    gate = 1.0 if (0.0 < q < size - 1.0) else 0.0
    return c, qc - c, gate


@njit(cache=True)
def _nb_warp(imgs: np.ndarray, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """out[f](x) = imgs[f](x + d[f](x)), edge-clamped bilinear."""
    nf, h, w = imgs.shape
    out = np.empty_like(imgs)
    for f in range(nf):
        for i in range(h):
            for j in range(w):
                y0, fy, _ = _cell(i + dy[f, i, j], h)
                x0, fx, _ = _cell(j + dx[f, i, j], w)
                # weighted-corner form: exact at integer queries, and the
                # weights coincide with the adjoint's splat weights
                out[f, i, j] = (
                    (1.0 - fy) * (1.0 - fx) * imgs[f, y0, x0]
                    + (1.0 - fy) * fx * imgs[f, y0, x0 + 1]
                    + fy * (1.0 - fx) * imgs[f, y0 + 1, x0]
                    + fy * fx * imgs[f, y0 + 1, x0 + 1]
                )
    return out


@njit(cache=True)
def _nb_warp_vjp(imgs: np.ndarray, dx: np.ndarray, dy: np.ndarray,
                 cot: np.ndarray):
    """VJP of _nb_warp w.r.t. (imgs, dx, dy)."""
    nf, h, w = imgs.shape
    cot_imgs = np.zeros_like(imgs)
    cot_dx = np.empty_like(dx)
    cot_dy = np.empty_like(dy)
    for f in range(nf):
        for i in range(h):
            for j in range(w):
                qy = i + dy[f, i, j]
                qx = j + dx[f, i, j]
                y0, fy, gy = _cell(qy, h)
                x0, fx, gx = _cell(qx, w)
                v00 = imgs[f, y0, x0]
                v01 = imgs[f, y0, x0 + 1]
                v10 = imgs[f, y0 + 1, x0]
                v11 = imgs[f, y0 + 1, x0 + 1]
                c = cot[f, i, j]
                w11 = fy * fx
                w10 = fy * (1.0 - fx)
                w01 = (1.0 - fy) * fx
                w00 = (1.0 - fy) * (1.0 - fx)
                cot_imgs[f, y0, x0] += w00 * c
                cot_imgs[f, y0, x0 + 1] += w01 * c
                cot_imgs[f, y0 + 1, x0] += w10 * c
                cot_imgs[f, y0 + 1, x0 + 1] += w11 * c
                ddqx = ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10)) * gx
                ddqy = ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01)) * gy
                cot_dx[f, i, j] = c * ddqx
                cot_dy[f, i, j] = c * ddqy
    return cot_imgs, cot_dx, cot_dy


@njit(cache=True)
def _nb_self_compose(ux: np.ndarray, uy: np.ndarray):
    """One squaring step: u'(x) = u(x) + u(x + u(x)), per frame."""
    nf, h, w = ux.shape
    nx = np.empty_like(ux)
    ny = np.empty_like(uy)
    for f in range(nf):
        for i in range(h):
            for j in range(w):
                y0, fy, _ = _cell(i + uy[f, i, j], h)
                x0, fx, _ = _cell(j + ux[f, i, j], w)
                w11 = fy * fx
                w10 = fy * (1.0 - fx)
                w01 = (1.0 - fy) * fx
                w00 = (1.0 - fy) * (1.0 - fx)
                sx = (w00 * ux[f, y0, x0] + w01 * ux[f, y0, x0 + 1]
                      + w10 * ux[f, y0 + 1, x0] + w11 * ux[f, y0 + 1, x0 + 1])
                sy = (w00 * uy[f, y0, x0] + w01 * uy[f, y0, x0 + 1]
                      + w10 * uy[f, y0 + 1, x0] + w11 * uy[f, y0 + 1, x0 + 1])
                nx[f, i, j] = ux[f, i, j] + sx
                ny[f, i, j] = uy[f, i, j] + sy
    return nx, ny


@njit(cache=True)
def _nb_self_compose_vjp(ux: np.ndarray, uy: np.ndarray, cx: np.ndarray,
                         cy: np.ndarray):
    """Pull (cx, cy) on u' back to u through one squaring step."""
    nf, h, w = ux.shape
    ncx = cx.copy()
    ncy = cy.copy()
    for f in range(nf):
        for i in range(h):
            for j in range(w):
                qy = i + uy[f, i, j]
                qx = j + ux[f, i, j]
                y0, fy, gy = _cell(qy, h)
                x0, fx, gx = _cell(qx, w)
                vx00 = ux[f, y0, x0]
                vx01 = ux[f, y0, x0 + 1]
                vx10 = ux[f, y0 + 1, x0]
                vx11 = ux[f, y0 + 1, x0 + 1]
                vy00 = uy[f, y0, x0]
                vy01 = uy[f, y0, x0 + 1]
                vy10 = uy[f, y0 + 1, x0]
                vy11 = uy[f, y0 + 1, x0 + 1]
                c_x = cx[f, i, j]
                c_y = cy[f, i, j]
                w11 = fy * fx
                w10 = fy * (1.0 - fx)
                w01 = (1.0 - fy) * fx
                w00 = (1.0 - fy) * (1.0 - fx)
                ncx[f, y0, x0] += w00 * c_x
                ncx[f, y0, x0 + 1] += w01 * c_x
                ncx[f, y0 + 1, x0] += w10 * c_x
                ncx[f, y0 + 1, x0 + 1] += w11 * c_x
                ncy[f, y0, x0] += w00 * c_y
                ncy[f, y0, x0 + 1] += w01 * c_y
                ncy[f, y0 + 1, x0] += w10 * c_y
                ncy[f, y0 + 1, x0 + 1] += w11 * c_y
                dx_dqx = ((1.0 - fy) * (vx01 - vx00) + fy * (vx11 - vx10)) * gx
                dx_dqy = ((1.0 - fx) * (vx10 - vx00) + fx * (vx11 - vx01)) * gy
                dy_dqx = ((1.0 - fy) * (vy01 - vy00) + fy * (vy11 - vy10)) * gx
                dy_dqy = ((1.0 - fx) * (vy10 - vy00) + fx * (vy11 - vy01)) * gy
                ncx[f, i, j] += c_x * dx_dqx + c_y * dy_dqx
                ncy[f, i, j] += c_x * dx_dqy + c_y * dy_dqy
    return ncx, ncy


@njit(cache=True)
def _nb_upsample(half: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear x2 upsample: full pixel (y, x) samples the lattice at (y/2, x/2)."""
    nf, hh, ww = half.shape
    out = np.empty((nf, h, w))
    for f in range(nf):
        for i in range(h):
            y0, fy, _ = _cell(0.5 * i, hh)
            for j in range(w):
                x0, fx, _ = _cell(0.5 * j, ww)
                out[f, i, j] = (
                    (1.0 - fy) * (1.0 - fx) * half[f, y0, x0]
                    + (1.0 - fy) * fx * half[f, y0, x0 + 1]
                    + fy * (1.0 - fx) * half[f, y0 + 1, x0]
                    + fy * fx * half[f, y0 + 1, x0 + 1]
                )
    return out


@njit(cache=True)
def _nb_upsample_vjp(cot: np.ndarray, hh: int, ww: int) -> np.ndarray:
    nf, h, w = cot.shape
    out = np.zeros((nf, hh, ww))
    for f in range(nf):
        for i in range(h):
            y0, fy, _ = _cell(0.5 * i, hh)
            for j in range(w):
                x0, fx, _ = _cell(0.5 * j, ww)
                c = cot[f, i, j]
                out[f, y0, x0] += (1.0 - fy) * (1.0 - fx) * c
                out[f, y0, x0 + 1] += (1.0 - fy) * fx * c
                out[f, y0 + 1, x0] += fy * (1.0 - fx) * c
                out[f, y0 + 1, x0 + 1] += fy * fx * c
    return out


def _c3(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


# ---------------------------------------------------------------------------
# Warping and composition (per-field API)
# ---------------------------------------------------------------------------

def _as_raster(img) -> np.ndarray:
    return img.values if isinstance(img, Frame) else np.asarray(img, dtype=np.float64)


def warp_image(img, disp: DisplacementField) -> np.ndarray:
    """Resample: output(x) = img(x + d(x)), edge-clamped bilinear."""
    values = _as_raster(img)
    if values.shape != disp.grid.shape:
        raise ValueError("image and displacement grids differ")
    return _nb_warp(_c3(values)[None], _c3(disp.dx)[None], _c3(disp.dy)[None])[0]


def vjp_warp(img, disp: DisplacementField, cot: np.ndarray):
    """VJP of warp_image; returns (cot_img, cot_dx, cot_dy)."""
    values = _as_raster(img)
    ci, cdx, cdy = _nb_warp_vjp(_c3(values)[None], _c3(disp.dx)[None],
                                _c3(disp.dy)[None], _c3(cot)[None])
    return ci[0], cdx[0], cdy[0]


def compose(outer_dx, outer_dy, inner_dx, inner_dy):
    """Composite displacement of mapping by ``inner`` then ``outer``.

    dc(x) = d_in(x) + d_out(x + d_in(x)); all arrays share one lattice and
    the same coordinate units.
    """
    idx, idy = _c3(inner_dx)[None], _c3(inner_dy)[None]
    sx = _nb_warp(_c3(outer_dx)[None], idx, idy)[0]
    sy = _nb_warp(_c3(outer_dy)[None], idx, idy)[0]
    return inner_dx + sx, inner_dy + sy


def vjp_compose(outer_dx, outer_dy, inner_dx, inner_dy, cot_cx, cot_cy):
    """VJP of compose w.r.t. (outer, inner) displacement components."""
    idx, idy = _c3(inner_dx)[None], _c3(inner_dy)[None]
    co_x, px_x, py_x = _nb_warp_vjp(_c3(outer_dx)[None], idx, idy,
                                    _c3(cot_cx)[None])
    co_y, px_y, py_y = _nb_warp_vjp(_c3(outer_dy)[None], idx, idy,
                                    _c3(cot_cy)[None])
    cot_inner_x = cot_cx + px_x[0] + px_y[0]
    cot_inner_y = cot_cy + py_x[0] + py_y[0]
    return co_x[0], co_y[0], cot_inner_x, cot_inner_y


# ---------------------------------------------------------------------------
# Stationary-velocity-field integration (scaling and squaring)
# ---------------------------------------------------------------------------

def _integrate_states_b(vx: np.ndarray, vy: np.ndarray, steps: int):
    """Forward squaring chain in node units for a (F, hh, ww) stack."""
    scale = 1.0 / (2.0 * 2.0**steps)  # px -> node units and 2^-steps together
    ux = _c3(vx * scale)
    uy = _c3(vy * scale)
    states = [(ux, uy)]
    for _ in range(steps):
        ux, uy = _nb_self_compose(ux, uy)
        states.append((ux, uy))
    return states


def _vjp_integrate_states_b(states, steps: int, cot_ux: np.ndarray,
                            cot_uy: np.ndarray):
    """Reverse squaring chain; cotangents arrive in node units."""
    cot_ux = _c3(cot_ux)
    cot_uy = _c3(cot_uy)
    for k in range(steps - 1, -1, -1):
        ux, uy = states[k]
        cot_ux, cot_uy = _nb_self_compose_vjp(ux, uy, cot_ux, cot_uy)
    scale = 1.0 / (2.0 * 2.0**steps)
    return cot_ux * scale, cot_uy * scale


def integrate_svf(vel: VelocityField, steps: int = DEFAULT_INT_STEPS) -> DisplacementField:
    """Exponentiate a stationary velocity field into a displacement field.

    The velocity is scaled by 2^-steps, self-composed ``steps`` times on the
    node lattice, converted back to pixel units, and finally upsampled to the
    full grid (values are already in pixels, so only positions rescale).
    """
    if steps < 1:
        raise ValueError("integration needs at least one squaring step")
    ux, uy = _integrate_states_b(vel.vx[None], vel.vy[None], steps)[-1]
    h, w = vel.grid.shape
    dx = _nb_upsample(_c3(2.0 * ux), h, w)[0]
    dy = _nb_upsample(_c3(2.0 * uy), h, w)[0]
    return DisplacementField(vel.grid, dx, dy)


def vjp_integrate(vel: VelocityField, steps: int, cot_dx: np.ndarray,
                  cot_dy: np.ndarray):
    """VJP of integrate_svf w.r.t. the velocity components.

    Re-runs the squaring chain forward to recover intermediates, then pulls
    the cotangent back through upsampling and each squaring in reverse.
    """
    states = _integrate_states_b(vel.vx[None], vel.vy[None], steps)
    hh, ww = vel.vx.shape
    cot_ux = 2.0 * _nb_upsample_vjp(_c3(cot_dx)[None], hh, ww)
    cot_uy = 2.0 * _nb_upsample_vjp(_c3(cot_dy)[None], hh, ww)
    gx, gy = _vjp_integrate_states_b(states, steps, cot_ux, cot_uy)
    return gx[0], gy[0]


# ---------------------------------------------------------------------------
# Regularity diagnostics and smoothness penalty
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class JacobianStats:
    """Determinant summary of the map x -> x + d(x) over interior pixels."""

    mean_det: float
    nonpositive: int
    interior: int

    @property
    def fold_fraction(self) -> float:
        return self.nonpositive / self.interior if self.interior else 0.0


def jacobian_stats(disp: DisplacementField) -> JacobianStats:
    """Central-difference Jacobian determinants on interior pixels."""
    h, w = disp.grid.shape
    if h < 3 or w < 3:
        raise ValueError("jacobian_stats needs a grid of at least 3x3")
    dx, dy = disp.dx, disp.dy
    dxdx = (dx[1:-1, 2:] - dx[1:-1, :-2]) * 0.5
    dxdy = (dx[2:, 1:-1] - dx[:-2, 1:-1]) * 0.5
    dydx = (dy[1:-1, 2:] - dy[1:-1, :-2]) * 0.5
    dydy = (dy[2:, 1:-1] - dy[:-2, 1:-1]) * 0.5
    det = (1.0 + dxdx) * (1.0 + dydy) - dxdy * dydx
    return JacobianStats(float(det.mean()), int(np.count_nonzero(det <= 0.0)),
                         det.size)


def _grad_penalty_b(vx: np.ndarray, vy: np.ndarray):
    """Per-frame penalty values and gradients for a (F, hh, ww) stack."""
    _, hh, ww = vx.shape
    norm = hh * ww
    values = np.zeros(vx.shape[0])
    outs = []
    for comp in (vx, vy):
        gx = comp[:, :, 1:] - comp[:, :, :-1]
        gy = comp[:, 1:, :] - comp[:, :-1, :]
        values += (np.sum(gx**2, axis=(1, 2)) + np.sum(gy**2, axis=(1, 2)))
        g = np.zeros_like(comp)
        g[:, :, 1:] += 2.0 * gx
        g[:, :, :-1] -= 2.0 * gx
        g[:, 1:, :] += 2.0 * gy
        g[:, :-1, :] -= 2.0 * gy
        outs.append(g / norm)
    return values / norm, outs[0], outs[1]


def grad_penalty(vel: VelocityField):
    """Mean squared forward-difference gradient of the velocity components.

    Returns the penalty and its exact gradient w.r.t. (vx, vy).  Differences
    are taken per lattice step; the normalizer is the full node count.
    """
    values, gx, gy = _grad_penalty_b(vel.vx[None], vel.vy[None])
    return float(values[0]), gx[0], gy[0]


# ---------------------------------------------------------------------------
# Frame-batched warping wrappers used by the joint optimizer
# ---------------------------------------------------------------------------

def _warp_b(imgs: np.ndarray, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return _nb_warp(_c3(imgs), _c3(dx), _c3(dy))


def _vjp_warp_b(imgs: np.ndarray, dx: np.ndarray, dy: np.ndarray,
                cot: np.ndarray):
    """Displacement-side VJP of the batched warp."""
    _, cdx, cdy = _nb_warp_vjp(_c3(imgs), _c3(dx), _c3(dy), _c3(cot))
    return cdx, cdy


def _upsample_b(half: np.ndarray, out_shape) -> np.ndarray:
    return _nb_upsample(_c3(half), out_shape[0], out_shape[1])


def _upsample_vjp_b(cot_full: np.ndarray, half_shape) -> np.ndarray:
    return _nb_upsample_vjp(_c3(cot_full), half_shape[0], half_shape[1])


# ---------------------------------------------------------------------------
# Raster export
# ---------------------------------------------------------------------------

def displacement_to_rasters(disp: DisplacementField):
    """(dx, dy) float arrays ready for the imaging raw-raster writer."""
    return disp.dx.copy(), disp.dy.copy()
