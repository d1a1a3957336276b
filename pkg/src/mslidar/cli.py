"""Command-line pipelines: simulate, design-mask, reconstruct, evaluate.

Every command is a pure function of its input files, configuration and
seed.  Exit codes: 0 success, 2 input/validation failure, 3 numerical
failure.  Run configurations are JSON documents validated strictly
(unknown keys are rejected).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import math
import os
import sys

import numpy as np

from . import __version__
from .background import EmpiricalBayesConfig
from .codes import CodeDesignSpec, design_blue_noise, local_variance, random_code_per_band, random_code_per_pixel
from .cube import CubeDims, CubeError, ImpulseResponse, LidarCube, SamplingMask, load_cube, save_mask_csv, store_cube
from .metrics import evaluate
from .multires import ScaleSchedule, ScaleSpec, run_multires, scale_hyper
from .pointcloud import PointCloud
from .rjmcmc import MoveProbabilities, ProposalScales
from .simulator import SceneSpec, SurfaceSpec, desk_scene, expected_photons_per_histogram, gaussian_irf, make_scene, render_cube


class ConfigError(ValueError):
    pass


def _check_keys(d: dict, allowed: set[str], where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


# -- file formats ----------------------------------------------------------------

def load_irf(path) -> ImpulseResponse:
    """JSON impulse response: {"bands": [{"offset_start": int, "values": [...]}]}"""
    with open(path) as f:
        doc = json.load(f)
    _check_keys(doc, {"bands"}, "irf")
    offsets, values = [], []
    for band in doc["bands"]:
        _check_keys(band, {"offset_start", "values"}, "irf band")
        offsets.append(int(band["offset_start"]))
        values.append(np.asarray(band["values"], dtype=float))
    return ImpulseResponse(offsets, values)


def save_irf(irf: ImpulseResponse, path) -> None:
    doc = {"bands": [{"offset_start": int(o), "values": [float(v) for v in vals]}
                     for o, vals in zip(irf.offset_start, irf.values)]}
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)


def save_background_csv(B: np.ndarray, prefix) -> list[str]:
    """One per-band grid CSV per file; returns the written paths."""
    paths = []
    B = np.asarray(B)
    for l in range(B.shape[2]):
        path = f"{prefix}_band{l + 1}.csv"
        np.savetxt(path, B[:, :, l], delimiter=",", fmt="%.8g")
        paths.append(path)
    return paths


def load_background_csv(prefix, n_bands: int) -> np.ndarray:
    grids = [np.loadtxt(f"{prefix}_band{l + 1}.csv", delimiter=",", ndmin=2)
             for l in range(n_bands)]
    return np.stack(grids, axis=2)


def load_scene_spec(path) -> tuple[SceneSpec, dict]:
    """Scene JSON: dims, photon budget and either 'desk' or explicit surfaces."""
    with open(path) as f:
        doc = json.load(f)
    allowed = {"preset", "n_rows", "n_cols", "n_bands", "n_bins", "photons_per_band_pixel",
               "background_photons", "background_mode", "surfaces", "overlay_offset",
               "d_min_check"}
    _check_keys(doc, allowed, "scene")
    if doc.get("preset") == "desk":
        return desk_scene(
            n_rows=doc.get("n_rows", 64), n_cols=doc.get("n_cols", 64),
            n_bands=doc.get("n_bands", 4), n_bins=doc.get("n_bins", 300),
            overlay_offset=doc.get("overlay_offset", 50.0),
            d_min_check=doc.get("d_min_check", 17.0),
            photons_per_band_pixel=doc.get("photons_per_band_pixel", 10.0),
            background_photons=doc.get("background_photons", 3.4)), doc
    dims = CubeDims(doc["n_rows"], doc["n_cols"], doc["n_bands"], doc["n_bins"])
    surfaces = []
    for s in doc["surfaces"]:
        _check_keys(s, {"depth", "reflectivity", "coverage"}, "surface")
        depth = np.asarray(s["depth"], dtype=float)
        if depth.ndim == 0:
            depth = np.full((dims.n_rows, dims.n_cols), float(depth))
        refl = np.asarray(s["reflectivity"], dtype=float)
        if refl.ndim == 1:
            refl = np.broadcast_to(refl, (dims.n_rows, dims.n_cols, dims.n_bands)).copy()
        coverage = None
        if s.get("coverage") is not None:
            coverage = np.asarray(s["coverage"], dtype=bool)
        surfaces.append(SurfaceSpec(depth=depth, reflectivity=refl, coverage=coverage))
    spec = SceneSpec(dims=dims, surfaces=surfaces,
                     background_mode=doc.get("background_mode", "smooth-passive"),
                     photons_per_band_pixel=doc.get("photons_per_band_pixel", 10.0),
                     background_photons=doc.get("background_photons", 3.4),
                     d_min_check=doc.get("d_min_check", 0.0))
    return spec, doc


# -- run configuration --------------------------------------------------------------

_DEFAULT_RUN = {
    "n_scales": 3,
    "base_bin": 2,
    "pitch_ratio": 1.0,
    "pixel_pitch": 1.0,
    "bin_pitch": 1.0,
    "iters_per_pixel": 12.0,
    "burnin_frac": 0.3,
    "gibbs_stride": 1,
    "iters": None,            # explicit per-scale iteration list overrides
    "move_probs": None,       # dict of MoveProbabilities fields, or per-scale list
    "delta_mark": 0.25,
    "delta_shift": 4.0,
    "eta": 2.0,
    "alpha_b": 1.0,
    "d_mode": "laplacian",
    "eb_samples": 1000,
    "eb_burnin": 100,
    "sbr_init": 1.0,
    "sbr_min": 0.1,
    "sbr_max": 100.0,
}


def load_run_config(path: str | None) -> dict:
    cfg = dict(_DEFAULT_RUN)
    if path is not None:
        with open(path) as f:
            doc = json.load(f)
        _check_keys(doc, set(_DEFAULT_RUN), "run config")
        cfg.update(doc)
    return cfg


def _move_probs_from(doc) -> MoveProbabilities | None:
    if doc is None:
        return None
    allowed = {"birth_family", "dilation_family", "shift", "mark", "split_family",
               "p_birth", "p_dilation", "p_split"}
    _check_keys(doc, allowed, "move_probs")
    return MoveProbabilities(**doc)


def build_schedule(dims: CubeDims, cfg: dict, n_scales: int | None = None,
                   iters_override: list[int] | None = None) -> ScaleSchedule:
    n_scales = n_scales or cfg["n_scales"]
    schedule = ScaleSchedule.default(
        dims, n_scales=n_scales, base_bin=cfg["base_bin"], pitch_ratio=cfg["pitch_ratio"],
        iters_per_pixel=cfg["iters_per_pixel"], burnin_frac=cfg["burnin_frac"],
        pixel_pitch=cfg["pixel_pitch"], bin_pitch=cfg["bin_pitch"],
        gibbs_stride=cfg["gibbs_stride"])
    iters = iters_override if iters_override is not None else cfg["iters"]
    if iters is not None:
        if len(iters) != len(schedule.scales):
            raise ConfigError("iters list length must equal the number of scales")
        for spec, n in zip(schedule.scales, iters):
            spec.n_iter = int(n)
            spec.n_burnin = int(cfg["burnin_frac"] * n)
    mp = cfg["move_probs"]
    if isinstance(mp, list):
        if len(mp) != len(schedule.scales):
            raise ConfigError("per-scale move_probs list length mismatch")
        for spec, doc in zip(schedule.scales, mp):
            spec.move_probs = _move_probs_from(doc)
    elif mp is not None:
        for spec in schedule.scales:
            spec.move_probs = _move_probs_from(mp)
    return schedule


# -- commands ----------------------------------------------------------------------

def cmd_simulate(args) -> int:
    spec, doc = load_scene_spec(args.scene)
    d = spec.dims
    if args.irf:
        irf = load_irf(args.irf)
    else:
        irf = gaussian_irf(d.n_bands, sigma=3.0, radius=10)
    if irf.n_bands != d.n_bands:
        raise ConfigError("impulse response band count does not match the scene")
    if args.mask:
        _, mask = load_cube(args.mask) if args.mask.endswith(".bin") else (None, None)
        if mask is None:
            from .cube import load_mask_csv
            mask = load_mask_csv(args.mask)
    elif args.bands_per_pixel:
        mask, _ = design_blue_noise(CodeDesignSpec(
            d.n_rows, d.n_cols, d.n_bands, args.bands_per_pixel, seed=args.seed))
    else:
        mask = SamplingMask.full(d.n_rows, d.n_cols, d.n_bands)
    if mask.shape != (d.n_rows, d.n_cols, d.n_bands):
        raise ConfigError("mask shape does not match the scene dims")
    cloud, B = make_scene(spec, irf)
    rng = np.random.default_rng(args.seed)
    cube = render_cube(cloud, B, irf, mask, rng, dims=d)
    os.makedirs(args.out_dir, exist_ok=True)
    store_cube(cube, os.path.join(args.out_dir, "cube.bin"), mask)
    save_irf(irf, os.path.join(args.out_dir, "irf.json"))
    cloud.save_csv(os.path.join(args.out_dir, "gt_points.csv"))
    cloud.save_ply(os.path.join(args.out_dir, "gt_points.ply"))
    save_background_csv(B, os.path.join(args.out_dir, "gt_background"))
    save_mask_csv(mask, os.path.join(args.out_dir, "mask.csv"))
    mean = expected_photons_per_histogram(cloud, B, irf, d)
    print(f"simulated {d.n_rows}x{d.n_cols}x{d.n_bands}x{d.n_bins} cube: "
          f"{cube.total_photons()} photons, expected {mean:.3f}/histogram")
    return 0


def cmd_design_mask(args) -> int:
    spec = CodeDesignSpec(args.rows, args.cols, args.bands, args.per_pixel,
                          window_radius=args.window_radius, seed=args.seed)
    if args.method == "blue-noise":
        mask, obj = design_blue_noise(spec)
    elif args.method == "random-pixel":
        mask = random_code_per_pixel(spec)
        obj = local_variance(mask, spec.window_radius)
    else:
        mask = random_code_per_band(spec)
        obj = local_variance(mask, spec.window_radius)
    save_mask_csv(mask, args.out)
    print(f"{args.method} mask {args.rows}x{args.cols}x{args.bands} W={args.per_pixel}: "
          f"local-variance objective {obj:.6g}")
    return 0


def _reconstruct_one(seed: int, cube_path: str, irf_path: str | None, cfg: dict,
                     n_scales: int | None, iters: list[int] | None):
    cube, mask = load_cube(cube_path)
    if mask is None:
        d = cube.dims
        mask = SamplingMask.full(d.n_rows, d.n_cols, d.n_bands)
    irf = load_irf(irf_path) if irf_path else gaussian_irf(cube.dims.n_bands, sigma=3.0, radius=10)
    schedule = build_schedule(cube.dims, cfg, n_scales=n_scales, iters_override=iters)
    eb = EmpiricalBayesConfig(alpha_b=cfg["alpha_b"], d_mode=cfg["d_mode"],
                              n_samples=cfg["eb_samples"], n_burnin=cfg["eb_burnin"],
                              sbr_min=cfg["sbr_min"], sbr_max=cfg["sbr_max"])
    scales = ProposalScales(delta_mark=cfg["delta_mark"], delta_shift=cfg["delta_shift"],
                            eta=cfg["eta"])
    rng = np.random.default_rng(seed)
    result = run_multires(cube, mask, irf, schedule, rng, eb_config=eb, scales=scales,
                          sbr_init=cfg["sbr_init"], track_trace=True)
    final = result.scale_results[-1]
    return result, final


def cmd_reconstruct(args) -> int:
    cfg = load_run_config(args.config)
    iters = [int(x) for x in args.iters.split(",")] if args.iters else None
    seeds = [args.seed + k for k in range(args.chains)]
    runs = []
    if args.chains > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.chains) as ex:
            futures = [ex.submit(_reconstruct_one, s, args.cube, args.irf, cfg,
                                 args.scales, iters) for s in seeds]
            runs = [f.result() for f in futures]
    else:
        runs = [_reconstruct_one(seeds[0], args.cube, args.irf, cfg, args.scales, iters)]
    best_idx = int(np.argmax([final.map_log_posterior for _, final in runs]))
    result, final = runs[best_idx]
    os.makedirs(args.out_dir, exist_ok=True)
    result.cloud.save_csv(os.path.join(args.out_dir, "points.csv"))
    result.cloud.save_ply(os.path.join(args.out_dir, "points.ply"))
    save_background_csv(result.B, os.path.join(args.out_dir, "background"))
    final.diagnostics.save_trace_csv(os.path.join(args.out_dir, "trace.csv"))
    final.diagnostics.save_moves_csv(os.path.join(args.out_dir, "moves.csv"))
    rates = final.diagnostics.acceptance_rates()
    rate_txt = ", ".join(f"{k}={v:.2f}" for k, v in rates.items() if not math.isnan(v))
    print(f"reconstructed {result.cloud.n_points} points "
          f"(chain {best_idx}, seed {seeds[best_idx]}); acceptance: {rate_txt}")
    return 0


def cmd_evaluate(args) -> int:
    est = PointCloud.load_csv(args.est)
    gt = PointCloud.load_csv(args.gt)
    irf = load_irf(args.irf) if args.irf else gaussian_irf(est.n_bands, sigma=3.0, radius=10)
    B_est = B_true = None
    if args.est_background and args.gt_background:
        B_true = load_background_csv(args.gt_background, gt.n_bands)
        B_est = load_background_csv(args.est_background, est.n_bands)
    tau_grid = np.arange(0.0, args.tau_max + 1e-9, args.tau_step)
    report = evaluate(est, gt, irf, B_est=B_est, B_true=B_true, tau_grid=tau_grid,
                      mae_tau=args.mae_tau)
    os.makedirs(args.out_dir, exist_ok=True)
    report.save_csv(os.path.join(args.out_dir, "report.csv"))
    summary = report.summary()
    with open(os.path.join(args.out_dir, "summary.txt"), "w") as f:
        f.write(summary + "\n")
    print(summary)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mslidar",
                                description="Multispectral single-photon lidar reconstruction")
    p.add_argument("--version", action="version", version=f"mslidar {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("simulate", help="render a synthetic scene to a photon cube")
    ps.add_argument("--scene", required=True, help="scene spec JSON")
    ps.add_argument("--irf", help="impulse response JSON (default: Gaussian sigma=3)")
    ps.add_argument("--mask", help="sampling mask file (.csv)")
    ps.add_argument("--bands-per-pixel", type=int, default=0,
                    help="design a blue-noise mask with W bands per pixel")
    ps.add_argument("--seed", type=int, default=0)
    ps.add_argument("--out-dir", required=True)
    ps.set_defaults(func=cmd_simulate)

    pd = sub.add_parser("design-mask", help="design or draw a spectral sampling mask")
    pd.add_argument("--rows", type=int, required=True)
    pd.add_argument("--cols", type=int, required=True)
    pd.add_argument("--bands", type=int, required=True)
    pd.add_argument("--per-pixel", type=int, required=True)
    pd.add_argument("--method", choices=["blue-noise", "random-pixel", "random-band"],
                    default="blue-noise")
    pd.add_argument("--window-radius", type=int, default=1)
    pd.add_argument("--seed", type=int, default=0)
    pd.add_argument("--out", required=True)
    pd.set_defaults(func=cmd_design_mask)

    pr = sub.add_parser("reconstruct", help="multiresolution reconstruction")
    pr.add_argument("--cube", required=True, help="binary cube container")
    pr.add_argument("--irf", help="impulse response JSON")
    pr.add_argument("--config", help="run configuration JSON")
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--scales", type=int, help="override number of scales")
    pr.add_argument("--iters", help="comma-separated per-scale iteration counts")
    pr.add_argument("--chains", type=int, default=1,
                    help="independent seeded chains; the best-MAP chain is reported")
    pr.add_argument("--out-dir", required=True)
    pr.set_defaults(func=cmd_reconstruct)

    pe = sub.add_parser("evaluate", help="compare an estimate against ground truth")
    pe.add_argument("--est", required=True, help="estimated points CSV")
    pe.add_argument("--gt", required=True, help="ground-truth points CSV")
    pe.add_argument("--irf", help="impulse response JSON (for intensity normalisation)")
    pe.add_argument("--est-background", help="prefix of estimated background CSVs")
    pe.add_argument("--gt-background", help="prefix of ground-truth background CSVs")
    pe.add_argument("--tau-max", type=float, default=10.0)
    pe.add_argument("--tau-step", type=float, default=0.5)
    pe.add_argument("--mae-tau", type=float, default=3.0)
    pe.add_argument("--out-dir", required=True)
    pe.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ConfigError, CubeError, ValueError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ArithmeticError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
