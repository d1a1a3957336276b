"""Synthetic ground-truth scenes and forward Poisson rendering.

Scenes are built from surface primitives (a full-frame base surface plus
optional semi-transparent overlays) with per-band reflectivity maps, and a
background field that is either constant or a smoothed passive image of the
scene (mono-static systems see ambient light reflected off the target).
Reflectivities and background levels are rescaled so that the expected
photon count per acquired histogram hits the requested budget exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cube import CubeDims, ImpulseResponse, LidarCube, SamplingMask
from .pointcloud import PointCloud


# -- impulse response library -------------------------------------------------

def gaussian_irf(n_bands: int, sigma: float | list[float], radius: int | None = None,
                 amplitude: float = 1.0) -> ImpulseResponse:
    """Truncated Gaussian response per band; width may vary across bands.

    Endpoint nodes are zero, so the waveform falls continuously to zero and
    off-grid shifts preserve the discrete response sum exactly.
    """
    sigmas = np.broadcast_to(np.asarray(sigma, dtype=float), (n_bands,))
    offsets, values = [], []
    for s in sigmas:
        rad = int(radius if radius is not None else np.ceil(3.5 * s))
        x = np.arange(-rad - 1, rad + 2, dtype=float)
        v = amplitude * np.exp(-0.5 * (x / s) ** 2)
        v[0] = 0.0
        v[-1] = 0.0
        offsets.append(-rad - 1)
        values.append(v)
    return ImpulseResponse(offsets, values)


def emg_irf(n_bands: int, sigma: float | list[float], tau: float | list[float],
            radius: int | None = None, amplitude: float = 1.0) -> ImpulseResponse:
    """Exponentially-modified Gaussian: Gaussian rise with exponential tail."""
    from scipy.stats import exponnorm

    sigmas = np.broadcast_to(np.asarray(sigma, dtype=float), (n_bands,))
    taus = np.broadcast_to(np.asarray(tau, dtype=float), (n_bands,))
    offsets, values = [], []
    for s, tu in zip(sigmas, taus):
        rad = int(radius if radius is not None else np.ceil(4.0 * s + 7.0 * tu))
        x = np.arange(-rad, rad + 1, dtype=float)
        v = exponnorm.pdf(x, K=tu / s, scale=s)
        v *= amplitude / v.max()
        v[0] = 0.0
        v[-1] = 0.0
        offsets.append(-rad)
        values.append(v)
    return ImpulseResponse(offsets, values)


# -- scene specification -------------------------------------------------------

@dataclass
class SurfaceSpec:
    """One surface primitive.

    ``depth`` and per-band ``reflectivity`` are (n_rows, n_cols) maps;
    ``coverage`` is a boolean map selecting the pixels the surface occupies.
    """

    depth: np.ndarray
    reflectivity: np.ndarray  # (n_rows, n_cols, n_bands), relative weights
    coverage: np.ndarray | None = None


@dataclass
class SceneSpec:
    dims: CubeDims
    surfaces: list[SurfaceSpec]
    background_mode: str = "smooth-passive"   # or "constant"
    photons_per_band_pixel: float = 10.0
    background_photons: float = 3.4
    d_min_check: float = 0.0

    def __post_init__(self):
        if self.photons_per_band_pixel <= self.background_photons:
            raise ValueError("photon budget must exceed the background share")
        if self.background_mode not in ("smooth-passive", "constant"):
            raise ValueError("background_mode must be 'smooth-passive' or 'constant'")


def make_scene(spec: SceneSpec, irf: ImpulseResponse) -> tuple[PointCloud, np.ndarray]:
    """Deterministic ground truth (point cloud, background field).

    Reflectivities are scaled so the expected signal photons per
    pixel-band average ``photons_per_band_pixel - background_photons``;
    the background field is scaled to average ``background_photons`` per
    histogram.  Overlapping surfaces must respect ``d_min_check`` where set.
    """
    d = spec.dims
    cloud = PointCloud(d.n_bands)
    raw_signal = 0.0
    entries = []
    for surf in spec.surfaces:
        cover = surf.coverage if surf.coverage is not None else np.ones((d.n_rows, d.n_cols), bool)
        for i in range(d.n_rows):
            for j in range(d.n_cols):
                if not cover[i, j]:
                    continue
                t = float(surf.depth[i, j])
                if not (1.0 <= t <= d.n_bins):
                    raise ValueError("surface depth outside [1, n_bins]")
                refl = np.asarray(surf.reflectivity[i, j], dtype=float)
                if (refl < 0).any():
                    raise ValueError("reflectivities must be nonnegative")
                entries.append((i, j, t, refl))
                raw_signal += float(refl @ irf.band_sums)
    mean_raw = raw_signal / (d.n_pixels * d.n_bands)
    target_signal = spec.photons_per_band_pixel - spec.background_photons
    scale = target_signal / mean_raw if mean_raw > 0 else 1.0
    for i, j, t, refl in entries:
        if spec.d_min_check > 0:
            for n in cloud.points_in_pixel(i, j):
                if abs(cloud.t(n) - t) < spec.d_min_check:
                    raise ValueError("ground-truth surfaces violate the hard-core separation")
        cloud.add(i, j, t, np.log(np.maximum(refl * scale, 1e-12)))

    if spec.background_mode == "constant":
        levels = np.ones((d.n_rows, d.n_cols, d.n_bands))
    else:
        # passive image: ambient light reflected off the scene, lightly blurred
        levels = np.full((d.n_rows, d.n_cols, d.n_bands), 1e-3)
        for i, j, _, refl in entries:
            levels[i, j] += refl
        for _ in range(2):
            sm = levels.copy()
            sm[1:, :] += levels[:-1, :]
            sm[:-1, :] += levels[1:, :]
            sm[:, 1:] += levels[:, :-1]
            sm[:, :-1] += levels[:, 1:]
            counts = np.full((d.n_rows, d.n_cols), 5.0)
            counts[0, :] -= 1
            counts[-1, :] -= 1
            counts[:, 0] -= 1
            counts[:, -1] -= 1
            levels = sm / counts[:, :, None]
    levels *= spec.background_photons / (levels.mean() * d.n_bins)
    return cloud, levels


def expected_photons_per_histogram(cloud: PointCloud, B: np.ndarray, irf: ImpulseResponse,
                                   dims: CubeDims) -> float:
    """Closed-form mean photon count per (pixel, band) histogram if acquired."""
    total = float(np.asarray(B).sum() * dims.n_bins)
    for n in cloud.ids():
        total += float(np.exp(cloud.m(n)) @ irf.band_sums)
    return total / (dims.n_pixels * dims.n_bands)


def render_cube(cloud: PointCloud, B: np.ndarray, irf: ImpulseResponse,
                mask: SamplingMask, rng: np.random.Generator,
                dims: CubeDims | None = None) -> LidarCube:
    """Draw z ~ Poisson(g (sum_n r_n h(t - t_n) + b)) independently per voxel."""
    B = np.asarray(B, dtype=float)
    if dims is None:
        nr, nc, nb = B.shape
        raise ValueError("dims required")
    d = dims
    bins = np.arange(1, d.n_bins + 1, dtype=float)
    events: dict = {}
    for i in range(d.n_rows):
        for j in range(d.n_cols):
            pts = cloud.points_in_pixel(i, j)
            for l in range(d.n_bands):
                if mask.bits[i, j, l] == 0:
                    continue
                lam = np.full(d.n_bins, B[i, j, l])
                for n in pts:
                    lam += np.exp(cloud.m(n)[l]) * irf.eval(l, bins - cloud.t(n))
                z = rng.poisson(lam)
                nz = np.flatnonzero(z)
                if nz.size:
                    events[(i, j, l)] = ((nz + 1).astype(np.int64), z[nz].astype(np.int64))
    return LidarCube(d, events)


# -- reference desk-scale scene -------------------------------------------------

def desk_scene(n_rows: int = 64, n_cols: int = 64, n_bands: int = 4, n_bins: int = 300,
               overlay_offset: float = 14.0, d_min_check: float = 9.0,
               photons_per_band_pixel: float = 10.0, background_photons: float = 3.4) -> SceneSpec:
    """Textured stepped surface plus a semi-transparent overlay plane.

    A desk-scale stand-in for a cluttered indoor scene: the base surface is
    a staircase of depth plateaus with smoothly varying per-band
    reflectivity, and a fronto-parallel semi-transparent plane covers the
    central quarter of the image ``overlay_offset`` bins in front of it.
    The default offset keeps the two returns' impulse responses
    overlapping, the regime the split/merge moves are built for.
    """
    dims = CubeDims(n_rows, n_cols, n_bands, n_bins)
    ii, jj = np.meshgrid(np.arange(n_rows), np.arange(n_cols), indexing="ij")
    ramp = (ii + jj) / (n_rows + n_cols - 2)
    base_depth = 120.0 + 40.0 * np.floor(ramp * 4.0) + 4.0 * np.sin(2.0 * np.pi * jj / n_cols)
    base_depth = np.clip(base_depth, 1.0, n_bins - 1.0)

    refl = np.empty((n_rows, n_cols, n_bands))
    for l in range(n_bands):
        phase = 2.0 * np.pi * (l + 1) / n_bands
        pattern = 0.15 * np.sin(2.0 * np.pi * ii / 24.0 + phase) \
            + 0.15 * np.cos(2.0 * np.pi * jj / 20.0 + 0.5 * phase)
        refl[:, :, l] = 1.0 + 0.4 * (l + 1) / n_bands + pattern
    base = SurfaceSpec(depth=base_depth, reflectivity=refl)

    cover = np.zeros((n_rows, n_cols), bool)
    cover[n_rows // 4: 3 * n_rows // 4, n_cols // 4: 3 * n_cols // 4] = True
    ov_depth = np.clip(base_depth - overlay_offset, 1.0, n_bins - 1.0)
    ov_refl = 0.45 * refl[:, :, ::-1]
    overlay = SurfaceSpec(depth=ov_depth, reflectivity=ov_refl, coverage=cover)

    return SceneSpec(dims=dims, surfaces=[base, overlay],
                     background_mode="smooth-passive",
                     photons_per_band_pixel=photons_per_band_pixel,
                     background_photons=background_photons,
                     d_min_check=d_min_check)
