"""Command-line pipelines: fit, mocor, phantom, eval, icc.

Every command writes its delimited report (CSV) with PNG figures beside it,
plus raw float32 maps and a run manifest.  Exit codes: 0 success, 1 numeric
failure, 2 I/O or usage error.  Verbosity via T1MAP_LOG={error|info|debug}.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .confidence import load_seg_frames
from .curvefit import FitInputError, FitMaps, fit_map
from .field import DisplacementField, jacobian_stats, warp_image
from .imaging import (
    DegenerateSeriesError,
    ManifestError,
    Mask,
    Series,
    load_map,
    load_series,
    normalize_minmax,
    render_ppm,
    save_map,
    save_series,
)
from .metrics import (
    MetricsError,
    aha16_labels,
    dice_arrays,
    hausdorff,
    icc3,
    mean_inside,
    read_metrics_csv,
    segmental_means,
    t1_error_stats,
    write_metrics_csv,
)
from .mocor import CaseResult, MocorConfig, NumericalDivergenceError, run_mocor
from .phantom import PhantomGeometryError, PhantomSpec, make_phantom, save_case
from .report import save_bullseye_figure, save_loss_figure, save_map_figure

log = logging.getLogger("t1map.cli")

T1_RENDER_RANGE = (0.0, 2000.0)

_USAGE_ERRORS = (ManifestError, PhantomGeometryError, OSError,
                 json.JSONDecodeError)
_NUMERIC_ERRORS = (NumericalDivergenceError, MetricsError, FitInputError,
                   DegenerateSeriesError)


def _setup_logging() -> None:
    level = os.environ.get("T1MAP_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO,
              "debug": logging.DEBUG}
    logging.basicConfig(
        level=levels.get(level, logging.ERROR),
        format="%(levelname)s %(name)s: %(message)s",
    )


def _write_run_manifest(out_dir: Path, command: str, inputs: list[str],
                        config: dict, seed: int, started: float) -> None:
    doc = {
        "command": command,
        "config": config,
        "inputs": inputs,
        "output": str(out_dir),
        "seed": seed,
        "version": __version__,
        "wall_time_s": round(time.monotonic() - started, 3),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    tmp = out_dir / "run_manifest.json.tmp"
    tmp.write_text(json.dumps(doc, indent=2) + "\n")
    os.replace(tmp, out_dir / "run_manifest.json")


def _find_manifest(series_dir: str | Path) -> Path:
    p = Path(series_dir)
    if p.is_file():
        return p
    manifest = p / "series.json"
    if not manifest.is_file():
        raise ManifestError(f"no series.json found in {p}")
    return manifest


def _write_fit_maps(maps: FitMaps, out_dir: Path, t1_range) -> None:
    maps_dir = out_dir / "maps"
    for name, raster in maps.params.items():
        save_map(raster, maps_dir / f"{name}.f32")
    save_map(maps.t1, maps_dir / "t1.f32")
    save_map(maps.r2, maps_dir / "r2.f32")
    save_map(maps.invalid.astype(np.float64), maps_dir / "invalid.f32")
    render_ppm(maps.t1, t1_range[0], t1_range[1], maps_dir / "t1.ppm")
    render_ppm(maps.r2, 0.0, 1.0, maps_dir / "r2.ppm")
    save_map_figure(maps.t1, out_dir / "figures" / "t1_map.png",
                    t1_range[0], t1_range[1], title="T1 map",
                    cbar_label="T1 [ms]")
    save_map_figure(maps.r2, out_dir / "figures" / "r2_map.png", 0.0, 1.0,
                    title="model fit R^2", cbar_label="R^2")


def _segment_cells(report) -> dict:
    return {
        f"t1_seg_{i + 1:02d}": float(report.segment_means[i])
        for i in range(16)
    }


# ---------------------------------------------------------------------------
# phantom
# ---------------------------------------------------------------------------

def cmd_phantom(args) -> int:
    started = time.monotonic()
    spec = PhantomSpec.from_json(Path(args.spec).read_text())
    if args.seed is not None:
        spec = replace(spec, seed=int(args.seed))
    out_dir = Path(args.out)
    case = make_phantom(spec)
    save_case(case, out_dir)
    save_map_figure(case.truth_t1, out_dir / "figures" / "truth_t1.png",
                    *T1_RENDER_RANGE, title="ground-truth T1",
                    cbar_label="T1 [ms]")
    _write_run_manifest(out_dir, "phantom", [str(args.spec)],
                        json.loads(spec.to_json()), spec.seed, started)
    return 0


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _fit_one(series_dir: str, out_dir: Path, mask_path: str | None,
             t1_range) -> None:
    # raw intensities: the least-squares fit is scale-equivariant, and the
    # min-max offset would bias amplitudes, so no normalization here
    started = time.monotonic()
    manifest = _find_manifest(series_dir)
    series = load_series(manifest)
    mask = None
    if mask_path:
        mask = Mask(series.grid, load_map(mask_path, series.grid))
    maps = fit_map(series, mask=mask)
    _write_fit_maps(maps, out_dir, t1_range)
    summary_mask = mask if mask is not None else Mask(
        series.grid, np.ones(series.grid.shape, dtype=bool))
    row = {
        "case": series.slice_id or Path(series_dir).name,
        "slice": 0,
        "method": "fit",
        "r2_mean": mean_inside(maps.r2, summary_mask, maps.invalid),
    }
    if mask is not None and mask.count:
        ys, xs = np.nonzero(mask.values)
        center = (float(ys.mean()), float(xs.mean()))
        labels = aha16_labels(mask, center, 0.0, "mid")
        row.update(_segment_cells(segmental_means(maps.t1, labels,
                                                  maps.invalid)))
    write_metrics_csv(out_dir / "metrics.csv", [row])
    _write_run_manifest(out_dir, "fit", [str(series_dir)],
                        {"mask": mask_path, "t1_range": list(t1_range)},
                        0, started)


def cmd_fit(args) -> int:
    t1_range = (args.t1_min, args.t1_max)
    jobs = [(d, _case_out_dir(args.out, d, len(args.series_dir)),
             args.mask, t1_range) for d in args.series_dir]
    _run_jobs(_fit_one, jobs, args.jobs)
    return 0


# ---------------------------------------------------------------------------
# mocor
# ---------------------------------------------------------------------------

def _build_config(args) -> MocorConfig:
    config = (MocorConfig.from_json_file(args.config) if args.config
              else MocorConfig())
    return config.override(
        lambda1=args.lambda1, lambda2=args.lambda2, lambda3=args.lambda3,
        alpha=args.alpha, gamma=args.gamma, lr=args.lr, iters=args.iters,
        steps=args.steps, refit_every=args.refit_every, seed=args.seed,
    )


def _mocor_metrics_row(series: Series, result: CaseResult, segs) -> dict:
    row = {
        "case": series.slice_id,
        "slice": 0,
        "method": "mocor",
        "r2_mean": mean_inside(result.maps.r2, result.mask_union,
                               result.maps.invalid),
    }
    moving = [i for i in range(len(series)) if i != result.reference]
    if moving:
        stats = [result.diagnostics[i] for i in moving]
        row["mean_detJ"] = float(np.mean([s.mean_det for s in stats]))
        row["folds"] = float(np.mean([s.nonpositive for s in stats]))
    if segs is not None and result.retained and not result.fallback:
        r = result.reference
        ref_myo = segs[r].myo
        dices, hds = [], []
        for i in result.retained:
            if i == r:
                continue
            warped = warp_image(segs[i].myo.astype_float(),
                                result.fields[i]) >= 0.5
            dices.append(dice_arrays(warped, ref_myo.values))
            hds.append(hausdorff(Mask(series.grid, warped), ref_myo))
        if dices:
            row["dice"] = float(np.mean(dices))
            row["hd_mm"] = float(np.mean(hds))
    return row


def _mocor_one(series_dir: str, out_dir: Path, config: MocorConfig,
               t1_range) -> None:
    started = time.monotonic()
    manifest = _find_manifest(series_dir)
    series = normalize_minmax(load_series(manifest))
    segs = load_seg_frames(manifest)
    result = run_mocor(series, segs, config)

    corrected = Series(
        tuple(series.frames[i].__class__(series.grid, result.corrected[i],
                                         series.frames[i].t)
              for i in range(len(series))),
        series.sequence_kind, series.grid, series.slice_id,
    )
    save_series(corrected, out_dir / "corrected")
    fields_dir = out_dir / "fields"
    for i, d in enumerate(result.fields):
        save_map(d.dx, fields_dir / f"field_{i:02d}_dx.f32")
        save_map(d.dy, fields_dir / f"field_{i:02d}_dy.f32")
    for i, v in enumerate(result.velocities):
        save_map(v.vx, out_dir / "velocity" / f"vel_{i:02d}_vx.f32")
        save_map(v.vy, out_dir / "velocity" / f"vel_{i:02d}_vy.f32")
    _write_fit_maps(result.maps, out_dir, t1_range)
    save_map(result.mask_union.astype_float(), out_dir / "maps" / "mask_k.f32")

    (out_dir / "selection.json").write_text(json.dumps({
        "reference": result.reference,
        "retained": list(result.retained),
        "fallback": result.fallback,
    }, indent=2) + "\n")

    trace_path = out_dir / "loss_trace.csv"
    with open(trace_path, "w") as fh:
        fh.write("iter,fit,smooth,seg,total\n")
        for it in range(len(result.loss_trace["total"])):
            fh.write(f"{it},{result.loss_trace['fit'][it]:.10g},"
                     f"{result.loss_trace['smooth'][it]:.10g},"
                     f"{result.loss_trace['seg'][it]:.10g},"
                     f"{result.loss_trace['total'][it]:.10g}\n")
    save_loss_figure(result.loss_trace, out_dir / "figures" / "loss_trace.png")

    write_metrics_csv(out_dir / "metrics.csv",
                      [_mocor_metrics_row(series, result, segs)])
    _write_run_manifest(out_dir, "mocor", [str(series_dir)],
                        result.config.to_dict(), result.config.seed, started)


def cmd_mocor(args) -> int:
    config = _build_config(args)
    t1_range = (args.t1_min, args.t1_max)
    jobs = [(d, _case_out_dir(args.out, d, len(args.series_dir)),
             config, t1_range) for d in args.series_dir]
    _run_jobs(_mocor_one, jobs, args.jobs)
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _load_truth(case_dir: Path):
    truth_dir = case_dir / "truth"
    if not truth_dir.is_dir():
        raise ManifestError(f"no truth/ directory under {case_dir}")
    spec = PhantomSpec.from_json((truth_dir / "spec.json").read_text())
    grid = spec.grid
    t1 = load_map(truth_dir / "t1.f32", grid)
    myo = Mask(grid, load_map(truth_dir / "myo.f32", grid))
    return spec, t1, myo


def cmd_eval(args) -> int:
    started = time.monotonic()
    case_dir = Path(args.case_dir)
    result_dir = Path(args.result_dir)
    out_dir = Path(args.out)
    spec, truth_t1, truth_myo = _load_truth(case_dir)
    grid = spec.grid

    t1 = load_map(result_dir / "maps" / "t1.f32", grid)
    r2 = load_map(result_dir / "maps" / "r2.f32", grid)
    invalid = load_map(result_dir / "maps" / "invalid.f32", grid) > 0.5
    method = "result"
    man_path = result_dir / "run_manifest.json"
    if man_path.is_file():
        method = json.loads(man_path.read_text()).get("command", method)

    row = {
        "case": case_dir.name,
        "slice": 0,
        "method": method,
        "r2_mean": mean_inside(r2, truth_myo, invalid),
    }

    segs = load_seg_frames(case_dir / "series.json")
    fields_dir = result_dir / "fields"
    ref = 0
    sel_path = result_dir / "selection.json"
    if sel_path.is_file():
        ref = int(json.loads(sel_path.read_text())["reference"])
    if segs is not None:
        ref_myo = segs[ref].myo
        dices, hds = [], []
        stats = []
        for i in range(len(segs)):
            if i == ref:
                continue
            dx_path = fields_dir / f"field_{i:02d}_dx.f32"
            if dx_path.is_file():
                d = DisplacementField(grid, load_map(dx_path, grid),
                                      load_map(fields_dir / f"field_{i:02d}_dy.f32", grid))
                moved = warp_image(segs[i].myo.astype_float(), d) >= 0.5
                stats.append(jacobian_stats(d))
            else:
                moved = segs[i].myo.values
            if moved.any() and ref_myo.count:
                dices.append(dice_arrays(moved, ref_myo.values))
                hds.append(hausdorff(Mask(grid, moved), ref_myo))
        if dices:
            row["dice"] = float(np.mean(dices))
            row["hd_mm"] = float(np.mean(hds))
        if stats:
            row["mean_detJ"] = float(np.mean([s.mean_det for s in stats]))
            row["folds"] = float(np.mean([s.nonpositive for s in stats]))

    center = spec.resolved_center()
    labels = aha16_labels(truth_myo, center, args.ref_angle, args.ring)
    report = segmental_means(t1, labels, invalid)
    row.update(_segment_cells(report))
    write_metrics_csv(out_dir / "metrics.csv", [row])

    errs = t1_error_stats(t1, truth_t1, truth_myo, invalid)
    (out_dir / "summary.json").write_text(json.dumps(errs, indent=2) + "\n")

    save_bullseye_figure(report.segment_means,
                         out_dir / "figures" / "t1_bullseye.png",
                         *T1_RENDER_RANGE, title="segmental mean T1",
                         cbar_label="T1 [ms]")
    err_map = np.where(truth_myo.values, np.abs(t1 - truth_t1), np.nan)
    save_map_figure(err_map, out_dir / "figures" / "t1_abs_error.png",
                    0.0, 300.0, title="|T1 error| in myocardium",
                    cbar_label="ms")
    _write_run_manifest(out_dir, "eval", [str(case_dir), str(result_dir)],
                        {"ring": args.ring, "ref_angle": args.ref_angle},
                        0, started)
    return 0


# ---------------------------------------------------------------------------
# icc
# ---------------------------------------------------------------------------

def _segment_pairs(row_a: dict, row_b: dict):
    va, vb = [], []
    for i in range(1, 17):
        key = f"t1_seg_{i:02d}"
        a, b = row_a.get(key, ""), row_b.get(key, "")
        if a != "" and b != "":
            va.append(float(a))
            vb.append(float(b))
    return np.array(va), np.array(vb)


def cmd_icc(args) -> int:
    started = time.monotonic()
    rows_a = read_metrics_csv(Path(args.test_dir) / "metrics.csv")
    rows_b = read_metrics_csv(Path(args.retest_dir) / "metrics.csv")
    out_dir = Path(args.out)
    by_key = {(r["case"], r["slice"]): r for r in rows_b}
    out_rows = []
    all_a, all_b = [], []
    for row_a in rows_a:
        key = (row_a["case"], row_a["slice"])
        if key not in by_key:
            continue
        va, vb = _segment_pairs(row_a, by_key[key])
        all_a.extend(va)
        all_b.extend(vb)
        entry = {"case": row_a["case"], "slice": row_a["slice"],
                 "n_segments": len(va)}
        entry["icc3"] = icc3(va, vb) if len(va) >= 3 else ""
        out_rows.append(entry)
    pooled = {"case": "ALL", "slice": "", "n_segments": len(all_a)}
    if len(all_a) >= 3:
        pooled["icc3"] = icc3(all_a, all_b)
    out_rows.append(pooled)
    out_dir.mkdir(parents=True, exist_ok=True)
    import csv as _csv
    with open(out_dir / "icc.csv", "w", newline="") as fh:
        writer = _csv.DictWriter(fh, fieldnames=["case", "slice",
                                                 "n_segments", "icc3"])
        writer.writeheader()
        for r in out_rows:
            if isinstance(r.get("icc3"), float):
                r["icc3"] = f"{r['icc3']:.6g}"
            writer.writerow(r)
    _write_run_manifest(out_dir, "icc",
                        [str(args.test_dir), str(args.retest_dir)], {}, 0,
                        started)
    return 0


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------

def _case_out_dir(out_root: str, series_dir: str, n_inputs: int) -> Path:
    out = Path(out_root)
    return out if n_inputs == 1 else out / Path(series_dir).name


def _run_jobs(func, jobs, n_workers: int) -> None:
    if n_workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            futures = [pool.submit(func, *job) for job in jobs]
            for f in futures:
                f.result()
    else:
        for job in jobs:
            func(*job)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="t1map",
        description="Motion-robust quantitative T1 mapping pipelines",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic ground-truth case")
    p.add_argument("spec", help="phantom spec JSON file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="override the spec seed")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("fit", help="per-pixel fit without motion correction")
    p.add_argument("series_dir", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--mask", default=None, help="float32 {0,1} raster path")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--t1-min", type=float, default=T1_RENDER_RANGE[0])
    p.add_argument("--t1-max", type=float, default=T1_RENDER_RANGE[1])
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("mocor", help="joint motion correction and mapping")
    p.add_argument("series_dir", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="config JSON file")
    for name in ("lambda1", "lambda2", "lambda3", "alpha", "gamma", "lr"):
        p.add_argument(f"--{name}", type=float, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--refit-every", dest="refit_every", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--t1-min", type=float, default=T1_RENDER_RANGE[0])
    p.add_argument("--t1-max", type=float, default=T1_RENDER_RANGE[1])
    p.set_defaults(func=cmd_mocor)

    p = sub.add_parser("eval", help="score a result against phantom truth")
    p.add_argument("case_dir", help="phantom case directory (with truth/)")
    p.add_argument("result_dir", help="fit or mocor output directory")
    p.add_argument("--out", required=True)
    p.add_argument("--ring", default="mid", choices=["basal", "mid", "apical"])
    p.add_argument("--ref-angle", dest="ref_angle", type=float, default=0.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("icc", help="segmental test-retest agreement")
    p.add_argument("test_dir", help="eval output of the test run")
    p.add_argument("retest_dir", help="eval output of the retest run")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_icc)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _NUMERIC_ERRORS as e:
        print(f"t1map: numeric failure: {e}", file=sys.stderr)
        return 1
    except _USAGE_ERRORS as e:
        print(f"t1map: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"t1map: invalid input: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
