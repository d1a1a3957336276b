"""Background-level inference.

Three pieces live here:

* the data-augmentation Gibbs update that thins each photon count into
  background vs surface components and redraws the background levels from
  their conjugate gamma conditionals,
* the empirical-Bayes construction of independent gamma priors: signal
  photons are stripped using a coarse point cloud, the remaining counts
  drive a Poisson log-Gaussian surrogate model sampled by an
  independence Metropolis-Hastings chain, and per-pixel gamma shapes are
  fitted by KL projection (theta is set to the surrogate mean and the
  shape solves the stationarity condition with a Newton iteration),
* signal-to-background ratio estimation used by the birth-style moves.

``alpha_b`` multiplies the smoothness *precision*: larger values give a
tighter latent prior (samples concentrate at the per-band mean rate).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import polygamma, psi

from .cube import ImpulseResponse, LidarCube, SamplingMask
from .pointcloud import PointCloud

K_CEILING = 1e6
_B_FLOOR = 1e-100


@dataclass
class GammaHyper:
    """Per pixel-band gamma shape and scale arrays, both (n_rows, n_cols, n_bands)."""

    k: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=float)
        self.theta = np.asarray(self.theta, dtype=float)
        if (self.k <= 0).any() or (self.theta <= 0).any():
            raise ValueError("gamma shapes and scales must be positive")

    @classmethod
    def noninformative(cls, shape) -> "GammaHyper":
        """Flat initialisation k=0.01, theta=100 used at the coarsest scale."""
        return cls(np.full(shape, 0.01), np.full(shape, 100.0))


@dataclass
class EmpiricalBayesConfig:
    alpha_b: float = 1.0
    d_mode: str = "laplacian"   # "laplacian" (mono-static) or "identity" (bi-static)
    n_samples: int = 1000
    n_burnin: int = 100
    ridge: float = 1e-6
    sbr_min: float = 0.1
    sbr_max: float = 100.0

    def __post_init__(self):
        if self.alpha_b <= 0:
            raise ValueError("alpha_b must be positive")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.d_mode not in ("laplacian", "identity"):
            raise ValueError("d_mode must be 'laplacian' or 'identity'")


@dataclass
class StrippedCounts:
    """Off-peak photon totals z_bar and remaining bin counts v, per pixel-band."""

    z_bar: np.ndarray
    v: np.ndarray


def strip_signal_photons(cube: LidarCube, cloud: PointCloud, irf: ImpulseResponse,
                         mask: SamplingMask) -> StrippedCounts:
    """Remove photons inside the impulse-response support around each point.

    Bins within the (shifted) compact support of any point in the pixel are
    excluded; ``z_bar`` integrates the remaining photons and ``v`` counts
    the remaining bins.  Pixels whose histogram is fully covered (v = 0)
    trigger a warning and are treated as prior-only downstream.
    """
    d = cube.dims
    z_bar = np.zeros((d.n_rows, d.n_cols, d.n_bands), dtype=float)
    v = np.full((d.n_rows, d.n_cols, d.n_bands), float(d.n_bins))
    excluded: dict[tuple[int, int, int], list[tuple[int, int]]] = {}
    for n in cloud.ids():
        x, y = cloud.x(n), cloud.y(n)
        for l in range(d.n_bands):
            lo_f, hi_f = irf.support_interval(l, cloud.t(n))
            lo = max(1, int(math.ceil(lo_f)))
            hi = min(d.n_bins, int(math.floor(hi_f)))
            if lo <= hi:
                excluded.setdefault((x, y, l), []).append((lo, hi))
    merged: dict[tuple[int, int, int], list[tuple[int, int]]] = {}
    for key, ivs in excluded.items():
        ivs = sorted(ivs)
        out = [ivs[0]]
        for lo, hi in ivs[1:]:
            if lo <= out[-1][1] + 1:
                out[-1] = (out[-1][0], max(out[-1][1], hi))
            else:
                out.append((lo, hi))
        merged[key] = out
        v[key] = d.n_bins - sum(hi - lo + 1 for lo, hi in out)
    for (i, j, l), (bins, counts) in cube.events.items():
        ivs = merged.get((i, j, l))
        if ivs is None:
            z_bar[i, j, l] = counts.sum()
            continue
        keep = np.ones(bins.size, dtype=bool)
        for lo, hi in ivs:
            keep &= ~((bins >= lo) & (bins <= hi))
        z_bar[i, j, l] = counts[keep].sum()
    if (v[mask.bits > 0] == 0).any():
        warnings.warn("some histograms are entirely covered by signal supports (v=0)")
    return StrippedCounts(z_bar=z_bar, v=v)


# -- latent correlated background model ------------------------------------

def _laplacian_operator(n_rows: int, n_cols: int, ridge: float):
    """4-neighbour graph Laplacian plus ridge, with its edge incidence."""
    npix = n_rows * n_cols
    rows, cols = [], []
    idx = np.arange(npix).reshape(n_rows, n_cols)
    for a, b in ((idx[:-1, :], idx[1:, :]), (idx[:, :-1], idx[:, 1:])):
        rows.append(a.ravel())
        cols.append(b.ravel())
    e_from = np.concatenate(rows)
    e_to = np.concatenate(cols)
    n_edges = e_from.size
    data = np.concatenate([np.ones(n_edges), -np.ones(n_edges)])
    A = sp.csr_matrix((data, (np.concatenate([np.arange(n_edges)] * 2),
                              np.concatenate([e_from, e_to]))), shape=(n_edges, npix))
    D = (A.T @ A + ridge * sp.identity(npix)).tocsc()
    return D, A


def latent_center(z_bar_l: np.ndarray, v_l: np.ndarray, g_l: np.ndarray) -> float:
    """Per-band centering mu = log of the mean observed off-peak rate."""
    z = np.asarray(z_bar_l, dtype=float).ravel()
    v = np.asarray(v_l, dtype=float).ravel()
    g = np.asarray(g_l, dtype=float).ravel()
    rate = np.where(v > 0, z * g / np.maximum(v, 1.0), 0.0)
    mean_rate = rate.sum() / z.size
    if mean_rate <= 0:
        # all-zero band: fall back to half a photon per histogram
        return math.log(0.5 / max(np.mean(np.where(v > 0, v, 1.0)), 1.0))
    return math.log(mean_rate)


def sample_latent_background(z_bar_l: np.ndarray, v_l: np.ndarray, cfg: EmpiricalBayesConfig,
                             g_l: np.ndarray, rng: np.random.Generator,
                             mu: float | None = None):
    """Sample the Poisson log-Gaussian surrogate posterior of one band.

    The target couples integrated off-peak counts z_bar ~ Poisson(g v b)
    with b = exp(b_tilde + mu) and a Gaussian prior of precision
    alpha_b * D on b_tilde.  Pixels are updated in checkerboard blocks:
    conditioned on the opposite colour, the Laplacian coupling leaves each
    pixel's conditional independent, so a whole colour is proposed at once
    from the scalar Gaussian approximations (second-order expansion of the
    Poisson log likelihood at the current point) and corrected per pixel
    by the Metropolis-Hastings rule; the chain is exact.

    Returns (b_samples, acceptance_rate, mu) where b_samples has shape
    (n_samples, n_rows, n_cols).
    """
    shape2d = np.asarray(z_bar_l).shape
    z = np.asarray(z_bar_l, dtype=float).ravel()
    v = np.asarray(v_l, dtype=float).ravel()
    g = np.asarray(g_l, dtype=float).ravel()
    npix = z.size
    if mu is None:
        mu = latent_center(z_bar_l, v_l, g_l)
    c = g * v * math.exp(mu)

    nr, nc = shape2d if len(shape2d) == 2 else (npix, 1)
    ii, jj = np.meshgrid(np.arange(nr), np.arange(nc), indexing="ij")
    colors = ((ii + jj) % 2 == 0).ravel()
    if cfg.d_mode == "laplacian":
        deg = np.full((nr, nc), 4.0)
        deg[0, :] -= 1
        deg[-1, :] -= 1
        deg[:, 0] -= 1
        deg[:, -1] -= 1
        q_prior = cfg.alpha_b * (deg.ravel() + cfg.ridge)
    else:
        q_prior = np.full(npix, cfg.alpha_b)

    def neighbor_sum(x_flat):
        if cfg.d_mode != "laplacian":
            return np.zeros(npix)
        img = x_flat.reshape(nr, nc)
        s = np.zeros_like(img)
        s[1:, :] += img[:-1, :]
        s[:-1, :] += img[1:, :]
        s[:, 1:] += img[:, :-1]
        s[:, :-1] += img[:, 1:]
        return s.ravel()

    x = np.zeros(npix)
    samples = np.empty((cfg.n_samples, npix))
    accepted = 0
    total = 0
    for s in range(-cfg.n_burnin, cfg.n_samples):
        for color in (colors, ~colors):
            idx = np.flatnonzero(color)
            x0 = x[idx]
            cc = c[idx]
            zz = z[idx]
            qp = q_prior[idx]
            # conditional prior mean: alpha_b * neighbour sum / conditional precision
            prior_mean = cfg.alpha_b * neighbor_sum(x)[idx] / qp if cfg.d_mode == "laplacian" \
                else np.zeros(idx.size)
            curv0 = cc * np.exp(x0)
            rho0 = qp + curv0
            mean0 = x0 + (zz - curv0 - qp * (x0 - prior_mean)) / rho0
            prop = mean0 + rng.standard_normal(idx.size) / np.sqrt(rho0)
            curv1 = cc * np.exp(prop)
            rho1 = qp + curv1
            mean1 = prop + (zz - curv1 - qp * (prop - prior_mean)) / rho1
            d_target = (zz * (prop - x0) - cc * (np.exp(prop) - np.exp(x0))
                        - 0.5 * qp * ((prop - prior_mean) ** 2 - (x0 - prior_mean) ** 2))
            d_prop = (-0.5 * rho1 * (x0 - mean1) ** 2 + 0.5 * np.log(rho1)) \
                - (-0.5 * rho0 * (prop - mean0) ** 2 + 0.5 * np.log(rho0))
            acc = np.log(rng.uniform(size=idx.size)) < d_target + d_prop
            x[idx[acc]] = prop[acc]
            accepted += int(acc.sum())
            total += idx.size
        if s >= 0:
            samples[s] = x
    b = np.exp(samples + mu).reshape(cfg.n_samples, *shape2d)
    return b, accepted / total, mu


# -- KL projection onto independent gammas ----------------------------------

def fit_gamma_hyper(mean_b, mean_log_b):
    """Gamma (shape, scale) minimising the KL projection of the surrogate.

    The shape solves the stationarity condition
    log(k) - psi(k) = log(E[b]) - E[log b] by a Newton iteration with a
    bisection safeguard, and the scale matches the surrogate mean,
    theta = E[b] / k (the fitted prior mean equals E[b] exactly).  Near
    the Jensen boundary (E[log b] -> log E[b]) the shape diverges and is
    capped at ``K_CEILING`` with a warning.  Accepts scalars or arrays.
    """
    mean_b = np.asarray(mean_b, dtype=float)
    mean_log_b = np.asarray(mean_log_b, dtype=float)
    if (mean_b <= 0).any():
        raise ValueError("mean_b must be positive")
    gap = np.log(mean_b) - mean_log_b
    if (gap < -1e-9).any():
        raise ValueError("mean_log_b exceeds log(mean_b); violates Jensen's inequality")
    gap = np.maximum(gap, 1e-12)
    # classic closed-form initialisation for the same equation
    k = (3.0 - gap + np.sqrt((gap - 3.0) ** 2 + 24.0 * gap)) / (12.0 * gap)
    k = np.clip(k, 1e-8, K_CEILING)
    lo = np.full_like(k, 1e-12)
    hi = np.full_like(k, K_CEILING * 10.0)
    for _ in range(200):
        f = np.log(k) - psi(k) - gap  # strictly decreasing in k
        shrink_lo = f > 0
        lo = np.where(shrink_lo, np.maximum(lo, k), lo)
        hi = np.where(~shrink_lo, np.minimum(hi, k), hi)
        step = f / (1.0 / k - polygamma(1, k))
        nxt = k - step
        bad = (nxt <= lo) | (nxt >= hi) | ~np.isfinite(nxt)
        nxt = np.where(bad, np.sqrt(lo * np.minimum(hi, K_CEILING * 10.0)), nxt)
        if np.max(np.abs(nxt - k) / np.maximum(1.0, np.abs(k))) < 1e-15:
            k = nxt
            break
        k = nxt
    capped = k >= K_CEILING
    if capped.any():
        warnings.warn("gamma shape capped at ceiling for near-degenerate moments")
        k = np.where(capped, K_CEILING, k)
    theta = mean_b / k
    if k.ndim == 0:
        return float(k), float(theta)
    return k, theta


@dataclass
class EmpiricalBayesResult:
    hyper: GammaHyper
    mean_b: np.ndarray
    acceptance_rates: np.ndarray = field(default=None)


def empirical_bayes_refresh(cube: LidarCube, cloud: PointCloud, irf: ImpulseResponse,
                            mask: SamplingMask, cfg: EmpiricalBayesConfig,
                            rng: np.random.Generator) -> EmpiricalBayesResult:
    """Full pipeline: strip signal, sample the surrogate, fit gamma priors.

    Bands are mutually independent in the surrogate and could be processed
    in parallel; they run sequentially here.
    """
    d = cube.dims
    stripped = strip_signal_photons(cube, cloud, irf, mask)
    K = np.empty((d.n_rows, d.n_cols, d.n_bands))
    TH = np.empty_like(K)
    mean_b_all = np.empty_like(K)
    acc = np.empty(d.n_bands)
    for l in range(d.n_bands):
        b, acc[l], _ = sample_latent_background(
            stripped.z_bar[:, :, l], stripped.v[:, :, l], cfg, mask.bits[:, :, l], rng)
        mean_b = b.mean(axis=0)
        mean_log_b = np.log(b).mean(axis=0)
        k, theta = fit_gamma_hyper(mean_b, mean_log_b)
        K[:, :, l] = k
        TH[:, :, l] = theta
        mean_b_all[:, :, l] = mean_b
    return EmpiricalBayesResult(GammaHyper(K, TH), mean_b_all, acc)


# -- SBR ---------------------------------------------------------------------

def estimate_sbr(cloud: PointCloud, B: np.ndarray, irf: ImpulseResponse, mask: SamplingMask,
                 n_bins: int, w_min: float = 0.1, w_max: float = 100.0) -> np.ndarray:
    """Per-band signal-to-background ratio, clamped to [w_min, w_max].

    Signal photons are estimated as sum_n exp(m_nl) * sum_t h_l(t); the
    background as sum_ij b * T * g.
    """
    n_bands = irf.n_bands
    signal = np.zeros(n_bands)
    for n in cloud.ids():
        signal += np.exp(cloud.m(n)) * irf.band_sums
    bkg = (np.asarray(B) * mask.bits).sum(axis=(0, 1)) * n_bins
    w = np.empty(n_bands)
    for l in range(n_bands):
        if bkg[l] <= 0:
            w[l] = w_max if signal[l] > 0 else w_min
        else:
            w[l] = min(max(signal[l] / bkg[l], w_min), w_max)
    return w


# -- data augmentation Gibbs ---------------------------------------------------

class GibbsWorkspace:
    """Flattened photon arrays reused across Gibbs sweeps.

    ``signal`` holds the current surface intensity at every photon bin and
    may be maintained externally (the chain keeps it in sync with its own
    caches); :func:`gibbs_background_step` recomputes it from the cloud
    when no workspace is supplied.
    """

    def __init__(self, cube: LidarCube, mask: SamplingMask):
        d = cube.dims
        self.dims = d
        keys = sorted(cube.events)
        parts_t, parts_z, parts_pb = [], [], []
        self.slices: dict[tuple[int, int, int], slice] = {}
        pos = 0
        for key in keys:
            bins, counts = cube.events[key]
            n = bins.size
            self.slices[key] = slice(pos, pos + n)
            parts_t.append(bins.astype(float))
            parts_z.append(counts.astype(float))
            i, j, l = key
            parts_pb.append(np.full(n, (i * d.n_cols + j) * d.n_bands + l, dtype=np.int64))
            pos += n
        self.t = np.concatenate(parts_t) if parts_t else np.empty(0)
        self.z = np.concatenate(parts_z) if parts_z else np.empty(0)
        self.pb = np.concatenate(parts_pb) if parts_pb else np.empty(0, np.int64)
        self.signal = np.zeros_like(self.t)
        self.g_flat = mask.bits.astype(float).ravel()

    def pixel_band_slice(self, i: int, j: int, l: int) -> slice:
        return self.slices.get((i, j, l), slice(0, 0))

    def refresh_signal(self, cloud: PointCloud, irf: ImpulseResponse) -> None:
        self.signal[:] = 0.0
        d = self.dims
        for n in cloud.ids():
            x, y = cloud.x(n), cloud.y(n)
            r = np.exp(cloud.m(n))
            for l in range(d.n_bands):
                sl = self.pixel_band_slice(x, y, l)
                if sl.stop > sl.start:
                    self.signal[sl] += r[l] * irf.eval(l, self.t[sl] - cloud.t(n))


def gibbs_background_step(cube: LidarCube, cloud: PointCloud, B: np.ndarray,
                          hyper: GammaHyper, mask: SamplingMask, irf: ImpulseResponse,
                          rng: np.random.Generator,
                          workspace: GibbsWorkspace | None = None) -> np.ndarray:
    """One data-augmentation sweep over all pixel-bands.

    Each photon count is thinned into background vs surface components with
    probability b / (signal + b); the background level is then redrawn from
    Gamma(k + background count, theta / (g T theta + 1)).  Unobserved
    pixel-bands (g = 0) draw from their prior.  Leaves the conditional
    posterior of B invariant; returns the new background array.
    """
    d = cube.dims
    if workspace is None:
        workspace = GibbsWorkspace(cube, mask)
        workspace.refresh_signal(cloud, irf)
    B = np.asarray(B, dtype=float)
    b_at_photon = B.ravel()[workspace.pb]
    zb = workspace.z.copy()
    has_signal = workspace.signal > 0
    if has_signal.any():
        p = b_at_photon[has_signal] / (workspace.signal[has_signal] + b_at_photon[has_signal])
        zb[has_signal] = rng.binomial(workspace.z[has_signal].astype(np.int64), p)
    counts = np.bincount(workspace.pb, weights=zb, minlength=d.n_rows * d.n_cols * d.n_bands)
    shape = hyper.k.ravel() + counts
    scale = hyper.theta.ravel() / (workspace.g_flat * d.n_bins * hyper.theta.ravel() + 1.0)
    new_b = rng.gamma(shape, scale)
    return np.maximum(new_b, _B_FLOOR).reshape(d.n_rows, d.n_cols, d.n_bands)


# -- rejected alternative prior, kept as a documented diagnostic --------------

def gamma_mrf_log_marginal(B: np.ndarray, alpha_b: float) -> float:
    """Log marginal density (up to a constant) of the 2-D gamma MRF prior.

    Used only in tests and documentation: on a constant image of level c
    the density scales as c^(-L * n_pixels), i.e. the prior penalises the
    mean intensity, which is why independent empirically-fitted gammas are
    used instead.  Neighbourhoods are the 4-adjacent pixels plus the pixel
    itself, clipped at the border.
    """
    B = np.asarray(B, dtype=float)
    nr, nc, nl = B.shape
    total = 0.0
    for l in range(nl):
        img = B[:, :, l]
        nbr_sum = img.copy()
        nbr_sum[1:, :] += img[:-1, :]
        nbr_sum[:-1, :] += img[1:, :]
        nbr_sum[:, 1:] += img[:, :-1]
        nbr_sum[:, :-1] += img[:, 1:]
        total += float(((alpha_b - 1.0) * np.log(img) - alpha_b * np.log(nbr_sum)).sum())
    return total
