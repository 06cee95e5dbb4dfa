"""Joint subject-specific motion correction and parameter mapping.

Minimizes, per series,

    L_total = lambda1*L_fit + lambda2*L_smooth + lambda3*L_seg

over per-frame stationary velocity fields and per-pixel recovery parameters.
L_fit compares model-synthesized magnitudes against the warped acquisition
inside the extended myocardium mask K, L_smooth penalizes velocity gradients,
and L_seg sums soft Dice losses between warped and reference segmentations
for the confidence-retained frames.

Optimization is block-coordinate: the parameter maps are refit exactly by the
per-pixel solver every ``refit_every`` iterations, and the velocity fields
take one Adam step per iteration against the analytic gradient assembled from
the field adjoints.  The reference frame's field is pinned to zero throughout.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .confidence import ConfidenceSelection, SegFrame, select
from .curvefit import FitMaps, fit_batch, fit_map
from .field import (
    DisplacementField,
    JacobianStats,
    VelocityField,
    _grad_penalty_b,
    _integrate_states_b,
    _upsample_b,
    _upsample_vjp_b,
    _vjp_integrate_states_b,
    _vjp_warp_b,
    _warp_b,
    grad_penalty,
    jacobian_stats,
    node_shape,
    warp_image,
)
from .imaging import Frame, Mask, Series
from .signal import synth_stack

log = logging.getLogger("t1map.mocor")

DICE_EPS = 1e-6
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class NumericalDivergenceError(RuntimeError):
    """The joint loss became non-finite; optimization aborted."""


@dataclass(frozen=True)
class MocorConfig:
    """Knobs of the joint optimizer; field names double as config-file keys.

    ``lr``/``iters``/``refit_every`` govern the direct optimization of the
    velocity grids; the remaining weights and gates carry the tuned defaults
    of the loss.  ``seed`` is recorded for reproducibility bookkeeping even
    though the optimizer itself draws no random numbers.
    """

    lambda1: float = 1.0
    lambda2: float = 5000.0
    lambda3: float = 80000.0
    alpha: float = 0.9
    gamma: float = 0.99
    lr: float = 0.05
    iters: int = 300
    steps: int = 7
    refit_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.iters < 1:
            raise ValueError("need at least one iteration")
        if self.refit_every < 1:
            raise ValueError("refit_every must be >= 1")
        if self.steps < 1:
            raise ValueError("integration steps must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(doc: dict) -> "MocorConfig":
        known = {f: doc[f] for f in MocorConfig.__dataclass_fields__ if f in doc}
        unknown = set(doc) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return MocorConfig(**known)

    @staticmethod
    def from_json_file(path: str | Path) -> "MocorConfig":
        return MocorConfig.from_dict(json.loads(Path(path).read_text()))

    def override(self, **kwargs) -> "MocorConfig":
        present = {k: v for k, v in kwargs.items() if v is not None}
        return replace(self, **present) if present else self


@dataclass
class JointState:
    """Everything the joint loss depends on at one optimization instant."""

    series: Series
    params: dict[str, np.ndarray]
    velocities: list[VelocityField]
    selection: ConfidenceSelection
    segs: list[SegFrame] | None


@dataclass
class CaseResult:
    """Output of one joint optimization run on one slice."""

    corrected: np.ndarray
    fields: list[DisplacementField]
    velocities: list[VelocityField]
    maps: FitMaps
    reference: int
    retained: tuple[int, ...]
    mask_union: Mask
    fallback: bool
    loss_trace: dict[str, np.ndarray]
    diagnostics: list[JacobianStats]
    config: MocorConfig


# ---------------------------------------------------------------------------
# Loss terms (per-field reference forms)
# ---------------------------------------------------------------------------

def loss_fit(synths: np.ndarray, registered: np.ndarray, mask: Mask) -> float:
    """Sum over frames and pixels of the masked squared model mismatch."""
    k = mask.astype_float()
    diff = (synths - registered) * k
    return float(np.sum(diff * diff))


def loss_smooth(velocities) -> float:
    """Sum of the per-frame velocity-gradient penalties."""
    return float(sum(grad_penalty(v)[0] for v in velocities))


def _dice_terms(ref: np.ndarray, moved: np.ndarray):
    """Soft Dice losses and gradients for a (M, H, W) stack of moved masks."""
    num = 2.0 * np.sum(ref[None] * moved, axis=(1, 2)) + DICE_EPS
    den = (np.sum(ref * ref) + np.sum(moved * moved, axis=(1, 2))) + DICE_EPS
    losses = 1.0 - num / den
    grad = (num[:, None, None] * 2.0 * moved
            - 2.0 * ref[None] * den[:, None, None]) / (den**2)[:, None, None]
    return losses, grad


def loss_seg(selection: ConfidenceSelection, segs: list[SegFrame],
             fields: list[DisplacementField]) -> float:
    """Dice losses of warped vs reference masks over the retained frames.

    Masks are warped as real-valued rasters (no re-thresholding inside the
    loss).  With fewer than two retained frames the sum is empty.
    """
    if selection.fallback or len(selection.retained) < 2:
        return 0.0
    r = selection.reference
    total = 0.0
    for ref_mask, pick in ((segs[r].myo, lambda s: s.myo),
                           (segs[r].lv, lambda s: s.lv)):
        ref = ref_mask.astype_float()
        for i in selection.retained:
            if i == r:
                continue
            moved = warp_image(pick(segs[i]).astype_float(), fields[i])
            total += float(_dice_terms(ref, moved[None])[0][0])
    return total


def total_loss(state: JointState, config: MocorConfig, want_grads: bool = True):
    """Weighted joint loss, its components, and d(loss)/d(velocity).

    Gradients are exact vector-Jacobian products assembled from the field
    adjoints, returned per frame as (gvx, gvy) node-lattice arrays.  The
    reference frame is differentiated like any other; pinning it to zero is
    the optimizer's job, which keeps this function honest for gradient
    checking.
    """
    series = state.series
    vx = np.stack([v.vx for v in state.velocities])
    vy = np.stack([v.vy for v in state.velocities])
    frames = series.stack()
    synths = synth_stack(series.sequence_kind, state.params, series.times)
    k_float = state.selection.mask_union.astype_float()
    out = _loss_and_grads(frames, synths, vx, vy, k_float, state.selection,
                          state.segs, config, want_grads)
    if want_grads:
        total, parts, gvx, gvy = out
        grads = [(gvx[i], gvy[i]) for i in range(len(series))]
        return total, parts, grads
    return out


def _loss_and_grads(frames: np.ndarray, synths: np.ndarray, vx: np.ndarray,
                    vy: np.ndarray, k_float: np.ndarray,
                    selection: ConfidenceSelection,
                    segs: list[SegFrame] | None, config: MocorConfig,
                    want_grads: bool):
    """Batched forward (and optionally backward) pass of the joint loss."""
    n, h, w = frames.shape
    r = selection.reference
    states = _integrate_states_b(vx, vy, config.steps)
    ux, uy = states[-1]
    dx = _upsample_b(2.0 * ux, (h, w))
    dy = _upsample_b(2.0 * uy, (h, w))

    registered = _warp_b(frames, dx, dy)
    diff = (synths - registered) * k_float[None]
    fit_total = float(np.sum(diff * diff))

    pen, pgx, pgy = _grad_penalty_b(vx, vy)
    smooth_total = float(pen.sum())

    seg_on = (
        config.lambda3 > 0.0
        and segs is not None
        and not selection.fallback
        and len(selection.retained) >= 2
    )
    movers = [i for i in selection.retained if i != r] if seg_on else []

    seg_total = 0.0
    if want_grads:
        cot_dx = -2.0 * config.lambda1 * diff
        cot_dx, cot_dy = _vjp_warp_b(frames, dx, dy, cot_dx)

    if movers:
        midx = np.array(movers, dtype=np.intp)
        for pick_ref, pick in ((segs[r].myo, lambda s: s.myo),
                               (segs[r].lv, lambda s: s.lv)):
            ref = pick_ref.astype_float()
            stack = np.stack([pick(segs[i]).astype_float() for i in movers])
            moved = _warp_b(stack, dx[midx], dy[midx])
            losses, dgrad = _dice_terms(ref, moved)
            seg_total += float(losses.sum())
            if want_grads:
                gx, gy = _vjp_warp_b(stack, dx[midx], dy[midx],
                                     config.lambda3 * dgrad)
                np.add.at(cot_dx, midx, gx)
                np.add.at(cot_dy, midx, gy)

    parts = {
        "fit": fit_total,
        "smooth": smooth_total,
        "seg": seg_total,
        "total": (config.lambda1 * fit_total + config.lambda2 * smooth_total
                  + config.lambda3 * seg_total),
    }
    if not np.isfinite(parts["total"]):
        log.error("non-finite joint loss: %s", parts)
        raise NumericalDivergenceError(f"joint loss diverged: {parts}")
    if not want_grads:
        return parts["total"], parts

    hh, ww = vx.shape[1:]
    cot_ux = 2.0 * _upsample_vjp_b(cot_dx, (hh, ww))
    cot_uy = 2.0 * _upsample_vjp_b(cot_dy, (hh, ww))
    gvx, gvy = _vjp_integrate_states_b(states, config.steps, cot_ux, cot_uy)
    gvx += config.lambda2 * pgx
    gvy += config.lambda2 * pgy
    return parts["total"], parts, gvx, gvy


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

def _refit_inside(registered: np.ndarray, times, kind, sel: np.ndarray,
                  params: dict[str, np.ndarray]) -> None:
    """Exact per-pixel refit on the current registered frames, inside K."""
    batch = fit_batch(registered[:, sel].T, times, kind)
    for j, name in enumerate(batch.param_names):
        col = batch.params[:, j]
        live = np.isfinite(col)
        target = params[name][sel]
        target[live] = col[live]
        params[name][sel] = target


def _displacements(vx, vy, steps, shape):
    states = _integrate_states_b(vx, vy, steps)
    ux, uy = states[-1]
    return _upsample_b(2.0 * ux, shape), _upsample_b(2.0 * uy, shape)


def run_mocor(series: Series, segs: list[SegFrame] | None,
                config: MocorConfig = MocorConfig()) -> CaseResult:
    """Run the joint optimization on one normalized slice.

    Steps: confidence selection; exact parameter initialization inside K;
    alternating exact refits and Adam velocity updates; final full-grid refit
    and diagnostics.  The reference frame's velocity and the border node ring
    stay pinned to zero.  Deterministic for fixed inputs and config.
    """
    stack = series.stack()
    if stack.max() > 1.0 + 1e-9 or stack.min() < 0.0:
        raise ValueError("run_mocor expects a min-max normalized series")
    if segs is not None and len(segs) != len(series):
        raise ValueError("segmentations must align with the series frames")

    grid = series.grid
    if segs is not None:
        selection = select(segs, config.alpha, config.gamma)
    else:
        selection = ConfidenceSelection(
            (), len(series) - 1, Mask(grid, np.ones(grid.shape, dtype=bool)),
            True, ())
    if selection.fallback:
        log.warning("confidence fallback engaged (retained=%d)",
                    len(selection.retained))
    sel = selection.mask_union.values
    k_float = selection.mask_union.astype_float()
    times = series.times
    kind = series.sequence_kind
    n = len(series)
    r = selection.reference

    # benign finite values outside K keep the masked loss NaN-free; the final
    # full refit replaces them
    fill = ({"m0": 0.0, "t1": 1000.0} if kind == "STONE"
            else {"a": 1e-6, "b": 2e-6, "t1star": 1000.0})
    init = fit_batch(stack[:, sel].T, times, kind)
    params = {}
    for j, name in enumerate(init.param_names):
        m = np.full(grid.shape, fill[name], dtype=np.float64)
        col = init.params[:, j]
        m[sel] = np.where(np.isfinite(col), col, fill[name])
        params[name] = m

    hh, ww = node_shape(grid)
    vx = np.zeros((n, hh, ww))
    vy = np.zeros((n, hh, ww))
    adam_m = np.zeros((n, 2, hh, ww))
    adam_v = np.zeros((n, 2, hh, ww))
    update_mask = np.ones(n, dtype=bool)
    update_mask[r] = False  # reference field pinned to zero
    # the border node ring stays zero as well: deformations must decay at the
    # image edge, otherwise smoothness extrapolates the central lobes across
    # the whole slice and inflates the mean Jacobian determinant
    node_mask = np.zeros((hh, ww))
    node_mask[1:-1, 1:-1] = 1.0

    trace = {"fit": [], "smooth": [], "seg": [], "total": []}
    synths = synth_stack(kind, params, times)

    for it in range(config.iters):
        if it > 0 and it % config.refit_every == 0:
            dx, dy = _displacements(vx, vy, config.steps, grid.shape)
            _refit_inside(_warp_b(stack, dx, dy), times, kind, sel, params)
            synths = synth_stack(kind, params, times)
        _, parts, gvx, gvy = _loss_and_grads(
            stack, synths, vx, vy, k_float, selection, segs, config, True)
        for key in trace:
            trace[key].append(parts[key])
        g = np.stack([gvx, gvy], axis=1) * node_mask
        g[~update_mask] = 0.0
        step = it + 1
        adam_m = ADAM_BETA1 * adam_m + (1.0 - ADAM_BETA1) * g
        adam_v = ADAM_BETA2 * adam_v + (1.0 - ADAM_BETA2) * g * g
        upd = (config.lr * (adam_m / (1.0 - ADAM_BETA1**step))
               / (np.sqrt(adam_v / (1.0 - ADAM_BETA2**step)) + ADAM_EPS))
        upd[~update_mask] = 0.0
        vx -= upd[:, 0]
        vy -= upd[:, 1]
        if it % 50 == 0:
            log.info("iter %4d  total=%.6g fit=%.4g smooth=%.4g seg=%.4g",
                     it, parts["total"], parts["fit"], parts["smooth"],
                     parts["seg"])

    dx, dy = _displacements(vx, vy, config.steps, grid.shape)
    corrected = _warp_b(stack, dx, dy)
    reg_series = Series(
        tuple(Frame(grid, corrected[i], times[i]) for i in range(n)),
        kind, grid, series.slice_id,
    )
    maps = fit_map(reg_series)
    fields = [DisplacementField(grid, dx[i], dy[i]) for i in range(n)]
    velocities = [VelocityField(grid, vx[i], vy[i]) for i in range(n)]
    diagnostics = [jacobian_stats(d) for d in fields]
    return CaseResult(
        corrected=corrected,
        fields=fields,
        velocities=velocities,
        maps=maps,
        reference=r,
        retained=selection.retained,
        mask_union=selection.mask_union,
        fallback=selection.fallback,
        loss_trace={k: np.asarray(v) for k, v in trace.items()},
        diagnostics=diagnostics,
        config=config,
    )
