"""Coarse-to-fine orchestration.

The cube is downsampled by integrating photons over patches of
``n_bin x n_bin`` pixels; the chain runs at each scale and the estimate is
upsampled (nearest neighbour, one point per covered fine pixel) to
initialise the next.  Gamma hyperparameters start non-informative
(k = 0.01, theta = 100) at the coarsest scale and are refreshed by the
empirical-Bayes pipeline at every finer one, together with the
signal-to-background ratios.

Per-scale hyperparameters follow the reference closed forms: attraction
e^2 at coarse scales and e^3 at the finest, abundance
(n_rows n_cols / n_bin^2)^1.5, depth neighbourhood 8 n_bin Delta_p /
Delta_bin with hard-core 2 n_b + 1, and mark variance 0.36 at coarse
scales shrinking to 0.36 / base_bin at the finest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .background import EmpiricalBayesConfig, GammaHyper, empirical_bayes_refresh, estimate_sbr, gibbs_background_step
from .cube import CubeDims, ImpulseResponse, LidarCube, SamplingMask, bin_pixels
from .model import ModelHyper
from .pointcloud import PointCloud
from .rjmcmc import ChainConfig, ChainResult, MoveProbabilities, ProposalScales, run_chain


def scale_hyper(n_rows: int, n_cols: int, n_bin: int, base_bin: int,
                pitch_ratio: float = 1.0, pixel_pitch: float = 1.0,
                bin_pitch: float = 1.0, n_bins: int | None = None,
                area_per_column: bool = False,
                net_log_abundance: float | None = None) -> ModelHyper:
    """Closed-form per-scale hyperparameters; ``pitch_ratio`` is Delta_p/Delta_bin.

    By default the attraction e^2 (coarse) / e^3 (fine) applies per voxel of
    the interaction boxes and the abundance is (n_pixels)^1.5, the reference
    closed forms.  ``area_per_column=True`` divides the log attraction by the
    box height 2 n_b + 1, so one fully fresh box column costs the same at
    every scale (the reference values assume an area unit the source never
    states; per-voxel at depth-resolved box heights suppresses every second
    return).  ``net_log_abundance`` instead pins log(lambda_a) + log(V) to a
    fixed per-point prior gain, with V the position-proposal volume.
    """
    coarse = n_bin > 1
    n_b = 8.0 * n_bin * pitch_ratio
    sigma2 = 0.36 if coarse else 0.36 / base_bin
    log_gamma = 2.0 if coarse else 3.0
    if area_per_column:
        log_gamma /= 2.0 * n_b + 1.0
    if net_log_abundance is not None:
        if n_bins is None:
            raise ValueError("net_log_abundance needs n_bins to size the domain volume")
        npix = math.ceil(n_rows / n_bin) * math.ceil(n_cols / n_bin)
        volume = npix * max(n_bins - 1, 1)
        lambda_a = math.exp(net_log_abundance) / volume
    else:
        lambda_a = (n_rows * n_cols / n_bin ** 2) ** 1.5
    return ModelHyper(
        gamma_a=math.exp(log_gamma),
        lambda_a=lambda_a,
        sigma2=sigma2,
        beta=sigma2 / 100.0,
        d_min=2.0 * n_b + 1.0,
        n_b=n_b,
        pixel_pitch=pixel_pitch,
        bin_pitch=bin_pitch,
    )


@dataclass
class ScaleSpec:
    n_bin: int
    hyper: ModelHyper
    n_iter: int
    n_burnin: int
    move_probs: MoveProbabilities | None = None
    gibbs_stride: int = 1


@dataclass
class ScaleSchedule:
    """Ordered coarse-to-fine scales; binning factors strictly decrease to 1."""

    scales: list[ScaleSpec]

    def __post_init__(self):
        if not self.scales:
            raise ValueError("schedule needs at least one scale")
        bins = [s.n_bin for s in self.scales]
        if bins[-1] != 1:
            raise ValueError("finest scale must have n_bin = 1")
        for a, b in zip(bins, bins[1:]):
            if a <= b:
                raise ValueError("n_bin must strictly decrease across scales")
            if a % b:
                raise ValueError("consecutive binning factors must divide")

    @classmethod
    def default(cls, dims: CubeDims, n_scales: int = 3, base_bin: int = 2,
                pitch_ratio: float = 1.0, iters_per_pixel: float = 12.0,
                burnin_frac: float = 0.3, pixel_pitch: float = 1.0,
                bin_pitch: float = 1.0, gibbs_stride: int = 1,
                area_per_column: bool = False,
                net_log_abundance: float | None = None) -> "ScaleSchedule":
        scales = []
        for k in range(n_scales):
            n_bin = base_bin ** (n_scales - 1 - k)
            npix = math.ceil(dims.n_rows / n_bin) * math.ceil(dims.n_cols / n_bin)
            n_iter = max(200, int(iters_per_pixel * npix))
            scales.append(ScaleSpec(
                n_bin=n_bin,
                hyper=scale_hyper(dims.n_rows, dims.n_cols, n_bin, base_bin,
                                  pitch_ratio, pixel_pitch, bin_pitch,
                                  n_bins=dims.n_bins, area_per_column=area_per_column,
                                  net_log_abundance=net_log_abundance),
                n_iter=n_iter,
                n_burnin=int(burnin_frac * n_iter),
                gibbs_stride=gibbs_stride,
            ))
        return cls(scales)


def upsample(cloud: PointCloud, B: np.ndarray, factor: int, fine_dims: CubeDims,
             fine_mask: SamplingMask | None = None) -> tuple[PointCloud, np.ndarray]:
    """Nearest-neighbour upsampling of a coarse estimate.

    Every coarse point is replicated to each fine pixel its coarse pixel
    covers (same depth); the background is replicated the same way.
    Intensities and background levels are divided by the number of fine
    pixels the coarse value aggregated: the patch area, or, when the fine
    sampling mask is given, the per-band count of *sampled* fine pixels
    (a coarse histogram only collects photons from sampled fine pixels, so
    dividing by the full patch area would bias finer scales low under
    subsampling).  The result is hard-core valid whenever the coarse
    estimate was, since replicas keep their depth separations.
    """
    B = np.asarray(B, dtype=float)
    if factor == 1:
        return cloud.copy(), B.copy()
    n_bands = cloud.n_bands
    if fine_mask is not None:
        counts = np.zeros((B.shape[0], B.shape[1], n_bands))
        for I in range(B.shape[0]):
            for J in range(B.shape[1]):
                patch = fine_mask.bits[I * factor:(I + 1) * factor,
                                       J * factor:(J + 1) * factor, :]
                counts[I, J] = patch.sum(axis=(0, 1))
        counts = np.maximum(counts, 1.0)
    else:
        counts = np.full((B.shape[0], B.shape[1], n_bands), float(factor ** 2))
    fine = PointCloud(n_bands)
    for n in cloud.ids():
        I, J = cloud.x(n), cloud.y(n)
        dm = np.log(counts[I, J])
        for i in range(I * factor, min((I + 1) * factor, fine_dims.n_rows)):
            for j in range(J * factor, min((J + 1) * factor, fine_dims.n_cols)):
                fine.add(i, j, cloud.t(n), cloud.m(n) - dm)
    fine_B = np.repeat(np.repeat(B / counts, factor, axis=0), factor, axis=1)
    fine_B = fine_B[: fine_dims.n_rows, : fine_dims.n_cols, :]
    return fine, fine_B


@dataclass
class MultiresResult:
    cloud: PointCloud
    B: np.ndarray
    scale_results: list[ChainResult] = field(default_factory=list)


def run_multires(cube: LidarCube, mask: SamplingMask, irf: ImpulseResponse,
                 schedule: ScaleSchedule, rng: np.random.Generator,
                 eb_config: EmpiricalBayesConfig | None = None,
                 scales: ProposalScales | None = None,
                 sbr_init: float = 1.0, track_trace: bool = False) -> MultiresResult:
    """Run the full coarse-to-fine reconstruction.

    The coarsest scale starts from an empty cloud, one prior-conditional
    background sweep and non-informative gamma hyperparameters; every finer
    scale starts from the upsampled previous estimate with empirically
    refitted priors and signal-to-background ratios.
    """
    eb_config = eb_config or EmpiricalBayesConfig()
    results: list[ChainResult] = []
    prev_cloud: PointCloud | None = None
    prev_B: np.ndarray | None = None
    prev_bin = None
    for spec in schedule.scales:
        cube_k, mask_k = bin_pixels(cube, mask, spec.n_bin)
        d_k = cube_k.dims
        shape = (d_k.n_rows, d_k.n_cols, d_k.n_bands)
        if prev_cloud is None:
            cloud0 = PointCloud(d_k.n_bands)
            gamma_h = GammaHyper.noninformative(shape)
            B0 = gibbs_background_step(cube_k, cloud0, np.ones(shape), gamma_h,
                                       mask_k, irf, rng)
            sbr = np.full(d_k.n_bands, float(sbr_init))
        else:
            cloud0, B0 = upsample(prev_cloud, prev_B, prev_bin // spec.n_bin, d_k,
                                  fine_mask=mask_k)
            eb = empirical_bayes_refresh(cube_k, cloud0, irf, mask_k, eb_config, rng)
            gamma_h = eb.hyper
            sbr = estimate_sbr(cloud0, B0, irf, mask_k, d_k.n_bins,
                               eb_config.sbr_min, eb_config.sbr_max)
        config = ChainConfig(n_iter=spec.n_iter, n_burnin=spec.n_burnin,
                             gibbs_stride=spec.gibbs_stride, track_trace=track_trace)
        res = run_chain(cube_k, cloud0, B0, spec.hyper, mask_k, irf, gamma_h, sbr,
                        config, rng, move_probs=spec.move_probs, scales=scales)
        results.append(res)
        prev_cloud, prev_B, prev_bin = res.map_cloud, res.mmse_B, spec.n_bin
    return MultiresResult(cloud=prev_cloud, B=prev_B, scale_results=results)
