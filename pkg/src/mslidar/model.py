"""Observation model and priors: Poisson likelihood, hard-core + area
interaction point process, and the GMRF on per-band log-intensities.

The Poisson ``log z!`` terms are dropped from every likelihood value; all
acceptance ratios are likelihood ratios at fixed data, so the omitted
constant cancels everywhere.  Interaction regions are discrete boxes of
3 x 3 pixels (clipped at the image border) by ``2*n_b + 1`` integer bins,
and the area measure is the voxel count of their union.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import gammaln

from .cube import CubeDims, ImpulseResponse, LidarCube, SamplingMask
from .pointcloud import PointCloud

_DENSE_LOGDET_MAX = 400


@dataclass
class ModelHyper:
    """Point-process and reflectivity-prior hyperparameters.

    ``pixel_pitch`` and ``bin_pitch`` convert pixel and bin offsets to a
    common metric for the neighbour distance d(.;.); both default to 1.
    """

    gamma_a: float
    lambda_a: float
    sigma2: float
    beta: float
    d_min: float
    n_b: float
    pixel_pitch: float = 1.0
    bin_pitch: float = 1.0

    def __post_init__(self):
        if self.gamma_a <= 0 or self.lambda_a <= 0:
            raise ValueError("gamma_a and lambda_a must be positive")
        if self.sigma2 <= 0 or self.beta <= 0:
            raise ValueError("sigma2 and beta must be positive")
        if self.d_min < 1:
            raise ValueError("d_min must be >= 1")
        if self.n_b <= 0:
            raise ValueError("n_b must be positive")
        if self.pixel_pitch <= 0 or self.bin_pitch < 0:
            raise ValueError("pixel_pitch must be positive, bin_pitch nonnegative")

    def distance(self, dx: float, dy: float, dt: float) -> float:
        """Scaled Euclidean distance between two point coordinates."""
        return math.sqrt((dx * self.pixel_pitch) ** 2 + (dy * self.pixel_pitch) ** 2
                         + (dt * self.bin_pitch) ** 2)


# -- neighbourhood graph ---------------------------------------------------

def neighbors_at(cloud: PointCloud, x: int, y: int, t: float, hyper: ModelHyper,
                 exclude=()) -> list[tuple[int, float]]:
    """Points in the 8 surrounding pixels with |dt| <= n_b, with distances."""
    out = []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            for n in cloud.points_in_pixel(x + dx, y + dy):
                if n in exclude:
                    continue
                dt = cloud.t(n) - t
                if abs(dt) <= hyper.n_b:
                    out.append((n, hyper.distance(dx, dy, dt)))
    return out


def build_graph(cloud: PointCloud, hyper: ModelHyper) -> dict[int, dict[int, float]]:
    """Symmetric adjacency: id -> {neighbour id: scaled distance}."""
    graph: dict[int, dict[int, float]] = {n: {} for n in cloud.ids()}
    for n in cloud.ids():
        for nb, d in neighbors_at(cloud, cloud.x(n), cloud.y(n), cloud.t(n), hyper, exclude=(n,)):
            graph[n][nb] = d
    return graph


# -- hard-core and area interaction ----------------------------------------

def strauss_valid(cloud: PointCloud, d_min: float) -> int:
    """0 iff two same-pixel points are strictly closer than d_min bins."""
    return 1 if cloud.strauss_valid(d_min) else 0


def point_bins_interval(t: float, n_b: float, n_bins: int) -> tuple[int, int]:
    """Integer bins covered by the interaction box around depth ``t``.

    Returns an inclusive (lo, hi) clipped to [1, n_bins]; lo > hi means the
    box lies outside the histogram.
    """
    lo = max(1, int(math.ceil(t - n_b)))
    hi = min(n_bins, int(math.floor(t + n_b)))
    return lo, hi


def union_count(intervals: list[tuple[int, int]]) -> int:
    """Total integer count covered by a union of inclusive intervals."""
    ivs = sorted(iv for iv in intervals if iv[0] <= iv[1])
    total = 0
    cur_lo, cur_hi = None, None
    for lo, hi in ivs:
        if cur_hi is None or lo > cur_hi + 1:
            if cur_hi is not None:
                total += cur_hi - cur_lo + 1
            cur_lo, cur_hi = lo, hi
        else:
            cur_hi = max(cur_hi, hi)
    if cur_hi is not None:
        total += cur_hi - cur_lo + 1
    return total


def area_measure(cloud: PointCloud, hyper: ModelHyper, dims: CubeDims) -> int:
    """Voxel count of the union of interaction boxes over the whole cloud."""
    columns: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for n in cloud.ids():
        iv = point_bins_interval(cloud.t(n), hyper.n_b, dims.n_bins)
        if iv[0] > iv[1]:
            continue
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                cx, cy = cloud.x(n) + dx, cloud.y(n) + dy
                if 0 <= cx < dims.n_rows and 0 <= cy < dims.n_cols:
                    columns.setdefault((cx, cy), []).append(iv)
    return sum(union_count(ivs) for ivs in columns.values())


def area_interaction_logdensity(cloud: PointCloud, gamma_a: float, lambda_a: float,
                                hyper: ModelHyper, dims: CubeDims) -> float:
    """N log(lambda_a) - m(union of boxes) log(gamma_a)."""
    return cloud.n_points * math.log(lambda_a) - area_measure(cloud, hyper, dims) * math.log(gamma_a)


# -- GMRF -------------------------------------------------------------------

def build_precision(cloud: PointCloud, beta: float, hyper: ModelHyper,
                    graph: dict[int, dict[int, float]] | None = None):
    """Sparse precision over live points.

    Returns (P, ids) where ``ids`` maps matrix row -> point id.  Diagonal
    entries are beta + sum of inverse neighbour distances; off-diagonals
    are -1/d for connected pairs.  P is symmetric positive definite for
    beta > 0 (it is beta*I plus a weighted graph Laplacian).
    """
    if graph is None:
        graph = build_graph(cloud, hyper)
    ids = cloud.ids()
    pos = {n: k for k, n in enumerate(ids)}
    n = len(ids)
    rows, cols, vals = [], [], []
    for a in ids:
        ka = pos[a]
        diag = beta
        for b, d in graph[a].items():
            diag += 1.0 / d
            rows.append(ka)
            cols.append(pos[b])
            vals.append(-1.0 / d)
        rows.append(ka)
        cols.append(ka)
        vals.append(diag)
    P = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return P, ids


def spd_logdet(P) -> float:
    """log-determinant of a sparse SPD matrix (dense below a size cutoff)."""
    n = P.shape[0]
    if n == 0:
        return 0.0
    if n <= _DENSE_LOGDET_MAX:
        sign, val = np.linalg.slogdet(P.toarray() if sp.issparse(P) else np.asarray(P))
        if sign <= 0:
            raise np.linalg.LinAlgError("matrix is not positive definite")
        return float(val)
    lu = spla.splu(sp.csc_matrix(P), permc_spec="MMD_AT_PLUS_A")
    # P is SPD so det > 0; permutation signs cancel in |.|
    return float(np.log(np.abs(lu.U.diagonal())).sum())


def gmrf_logdensity(m_vec: np.ndarray, P, sigma2: float, logdet_p: float | None = None) -> float:
    """Log density of N(0, sigma2 * P^{-1}) at ``m_vec``."""
    m_vec = np.asarray(m_vec, dtype=float)
    n = m_vec.size
    if n == 0:
        return 0.0
    if logdet_p is None:
        logdet_p = spd_logdet(P)
    quad = float(m_vec @ (P @ m_vec))
    return -0.5 * quad / sigma2 + 0.5 * logdet_p - 0.5 * n * math.log(2.0 * math.pi * sigma2)


# -- likelihood ---------------------------------------------------------------

def pixel_intensity(cloud: PointCloud, b: float, irf: ImpulseResponse,
                    i: int, j: int, l: int, t: float, g: int) -> float:
    """Poisson intensity g * (sum_n exp(m_nl) h_l(t - t_n) + b) at one voxel."""
    if g == 0:
        return 0.0
    s = 0.0
    for n in cloud.points_in_pixel(i, j):
        s += math.exp(cloud.m(n)[l]) * float(irf.eval(l, t - cloud.t(n)))
    return s + b


def log_likelihood(cube: LidarCube, cloud: PointCloud, B: np.ndarray,
                   mask: SamplingMask, irf: ImpulseResponse) -> float:
    """Full Poisson log likelihood with log z! terms dropped.

    Raises CubeError (via validate_against_mask) if a masked-out pixel-band
    carries photons.  Returns -inf only if some photon sits at a bin of
    zero intensity.
    """
    cube.validate_against_mask(mask)
    d = cube.dims
    B = np.asarray(B, dtype=float)
    g = mask.bits.astype(float)
    total = -d.n_bins * float((B * g).sum())
    for n in cloud.ids():
        x, y = cloud.x(n), cloud.y(n)
        r = cloud.r(n)
        for l in range(d.n_bands):
            if mask.bits[x, y, l]:
                total -= r[l] * irf.truncated_sum(l, cloud.t(n), d.n_bins)
    for (i, j, l), (bins, counts) in cube.events.items():
        lam = np.full(bins.size, B[i, j, l])
        for n in cloud.points_in_pixel(i, j):
            lam = lam + math.exp(cloud.m(n)[l]) * irf.eval(l, bins.astype(float) - cloud.t(n))
        if (lam <= 0).any():
            return -math.inf
        total += float(counts @ np.log(lam))
    return total


def gamma_logpdf_sum(B: np.ndarray, k: np.ndarray, theta: np.ndarray) -> float:
    """Sum of independent Gamma(shape k, scale theta) log densities."""
    B, k, theta = (np.asarray(a, dtype=float) for a in (B, k, theta))
    if (B <= 0).any():
        return -math.inf
    return float(((k - 1.0) * np.log(B) - B / theta - k * np.log(theta) - gammaln(k)).sum())


def log_posterior(cloud: PointCloud, B: np.ndarray, cube: LidarCube, hyper: ModelHyper,
                  mask: SamplingMask, irf: ImpulseResponse,
                  gamma_k: np.ndarray, gamma_theta: np.ndarray) -> float:
    """Unnormalised log posterior: likelihood + GMRF + area interaction + gamma priors.

    Returns -inf for hard-core violations.  The Poisson point-process
    reference measure contributes a configuration-volume constant that is
    absorbed into lambda_a; move kernels carry the corresponding proposal
    volume explicitly.
    """
    if not cloud.strauss_valid(hyper.d_min):
        return -math.inf
    total = log_likelihood(cube, cloud, B, mask, irf)
    if cloud.n_points > 0:
        P, ids = build_precision(cloud, hyper.beta, hyper)
        ld = spd_logdet(P)
        m = np.array([cloud.m(n) for n in ids])
        for l in range(cloud.n_bands):
            total += gmrf_logdensity(m[:, l], P, hyper.sigma2, logdet_p=ld)
    total += area_interaction_logdensity(cloud, hyper.gamma_a, hyper.lambda_a, hyper, cube.dims)
    total += gamma_logpdf_sum(B, gamma_k, gamma_theta)
    return total
