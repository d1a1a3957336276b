"""Shared test utilities: random scene generation and the move-kernel
acceptance-ratio oracle (brute-force posterior x proposal x Jacobian)."""

from __future__ import annotations

import math

import numpy as np

from mslidar.background import GammaHyper
from mslidar.cube import CubeDims, SamplingMask
from mslidar.model import ModelHyper
from mslidar.pointcloud import PointCloud
from mslidar.rjmcmc import ChainState, MoveProbabilities, ProposalScales
from mslidar.rjmcmc import moves as mv
from mslidar.simulator import gaussian_irf, render_cube

import oracles


def random_chain_state(rng, n_rows=None, n_cols=None, n_bands=None, n_bins=None,
                       force_pair=False):
    """A small random scene with photons, points, masks and hyperparameters."""
    nr = int(n_rows if n_rows is not None else rng.integers(1, 4))
    nc = int(n_cols if n_cols is not None else rng.integers(1, 4))
    L = int(n_bands if n_bands is not None else rng.integers(1, 3))
    T = int(n_bins if n_bins is not None else rng.integers(16, 31))
    sigmas = rng.uniform(0.8, 1.5, size=L)
    irf = gaussian_irf(L, sigma=list(sigmas), radius=int(rng.integers(3, 5)))
    bits = (rng.uniform(size=(nr, nc, L)) < 0.85).astype(np.uint8)
    mask = SamplingMask(bits)
    n_b = float(rng.integers(1, 3))
    hyper = ModelHyper(
        gamma_a=float(np.exp(rng.uniform(0.1, 0.5))),
        lambda_a=float(rng.uniform(2.0, 20.0)),
        sigma2=float(rng.uniform(0.2, 0.8)),
        beta=float(rng.uniform(0.005, 0.05)),
        d_min=2.0 * n_b + 1.0,
        n_b=n_b,
        pixel_pitch=1.0,
        bin_pitch=float(rng.choice([0.0, 0.3, 1.0])),
    )
    cloud = PointCloud(L)
    n_try = int(rng.integers(0, 6))
    for _ in range(n_try):
        x, y = int(rng.integers(nr)), int(rng.integers(nc))
        t = float(rng.uniform(3.0, T - 2.0))
        if rng.uniform() < 0.5:
            t = float(round(t))
        if cloud.hardcore_ok(x, y, t, hyper.d_min):
            cloud.add(x, y, t, rng.normal(math.log(3.0), 0.5, size=L))
    # grow small connected patches (adjacent pixel, integer bin offset) so the
    # dilation/erosion pair is exercised with nonzero reverse densities
    for _ in range(int(rng.integers(0, 3))):
        if cloud.n_points == 0 or (nr == 1 and nc == 1):
            break
        donor = cloud.ids()[int(rng.integers(cloud.n_points))]
        x = cloud.x(donor) + int(rng.integers(-1, 2))
        y = cloud.y(donor) + int(rng.integers(-1, 2))
        t = cloud.t(donor) + float(rng.integers(-int(n_b), int(n_b) + 1))
        if (x, y) == (cloud.x(donor), cloud.y(donor)):
            continue
        if 0 <= x < nr and 0 <= y < nc and 1.0 <= t <= T \
                and cloud.hardcore_ok(x, y, t, hyper.d_min):
            cloud.add(x, y, t, rng.normal(math.log(3.0), 0.5, size=L))
    lh = float(irf.max_support_len)
    if force_pair and cloud.n_points and lh > hyper.d_min + 0.5:
        n0 = cloud.ids()[0]
        dt = float(rng.uniform(hyper.d_min + 0.2, lh - 0.1))
        t2 = cloud.t(n0) + dt if cloud.t(n0) + dt <= T - 1 else cloud.t(n0) - dt
        if 1.0 <= t2 <= T and cloud.hardcore_ok(cloud.x(n0), cloud.y(n0), t2, hyper.d_min):
            cloud.add(cloud.x(n0), cloud.y(n0), t2, rng.normal(math.log(2.0), 0.5, size=L))
    B_true = rng.uniform(0.02, 0.2, size=(nr, nc, L))
    cube = render_cube(cloud, B_true, irf, mask, rng, dims=CubeDims(nr, nc, L, T))
    gamma_h = GammaHyper(rng.uniform(0.5, 3.0, size=(nr, nc, L)),
                         rng.uniform(0.05, 0.5, size=(nr, nc, L)))
    sbr = rng.uniform(0.5, 5.0, size=L)
    B0 = rng.uniform(0.02, 0.25, size=(nr, nc, L))
    state = ChainState(cube, cloud, B0, hyper, mask, irf, gamma_h, sbr)
    return state


def apply_proposal(cloud: PointCloud, B: np.ndarray, proposal):
    """Materialise the proposed state on plain copies."""
    cl = cloud.copy()
    BB = B.copy()
    for nid in proposal.remove_ids:
        cl.remove(nid)
    for (x, y, t, m_vec), expect in zip(proposal.add_points, proposal.expected_ids):
        got = cl.add(x, y, t, np.asarray(m_vec, dtype=float))
        assert got == expect
    for nid, t in proposal.set_t:
        cl.set_t(nid, t)
    for nid, band, val in proposal.set_m:
        cl.set_m(nid, band, val)
    for (x, y, l), val in proposal.new_b.items():
        BB[x, y, l] = val
    return cl, BB


def oracle_log_ratio(state, kind, proposal, probs, scales, cloud_a, B_a):
    """First-principles log acceptance ratio for a fully specified proposal."""
    cube, mask, irf, hyper = state.cube, state.mask, state.irf, state.hyper
    gh = state.gamma
    cloud_b, B_b = apply_proposal(cloud_a, B_a, proposal)
    lp_a = oracles.dense_log_posterior(cube, cloud_a, B_a, mask, irf, hyper, gh.k, gh.theta)
    lp_b = oracles.dense_log_posterior(cube, cloud_b, B_b, mask, irf, hyper, gh.k, gh.theta)
    if lp_b == -math.inf:
        return -math.inf
    base = lp_b - lp_a
    d = cube.dims
    volume = d.n_rows * d.n_cols * max(d.n_bins - 1, 1)
    n_a = cloud_a.n_points
    lh = float(irf.max_support_len)

    if kind == "birth":
        u = proposal.aux["u"]
        return (base + math.log((1.0 - probs.p_birth) / probs.p_birth)
                + math.log(volume) - math.log(n_a + 1)
                - float(np.log(1.0 - u).sum()))
    if kind == "death":
        nid = proposal.aux["nid"]
        r = np.exp(cloud_a.m(nid))
        b_new = np.array([proposal.new_b[(cloud_a.x(nid), cloud_a.y(nid), l)]
                          for l in range(cloud_a.n_bands)])
        log1mu = np.log(r * irf.band_sums / (state.sbr * d.n_bins)) - np.log(b_new)
        return (base + math.log(probs.p_birth / (1.0 - probs.p_birth))
                + math.log(n_a) - math.log(volume) + float(log1mu.sum()))
    if kind == "dilation":
        u = proposal.aux["u"]
        x, y, t = proposal.aux["x"], proposal.aux["y"], proposal.aux["t"]
        q_fwd = oracles.dilation_density(cloud_a, x, y, t, hyper, d)
        n_conn_b = oracles.count_connected(cloud_b, hyper)
        return (base + math.log((1.0 - probs.p_dilation) / probs.p_dilation)
                - math.log(n_conn_b) - math.log(q_fwd)
                - float(np.log(1.0 - u).sum()))
    if kind == "erosion":
        nid = proposal.aux["nid"]
        x, y, t = cloud_a.x(nid), cloud_a.y(nid), cloud_a.t(nid)
        q_rev = oracles.dilation_density(cloud_b, x, y, t, hyper, d)
        if q_rev <= 0.0:
            return -math.inf
        r = np.exp(cloud_a.m(nid))
        b_new = np.array([proposal.new_b[(x, y, l)] for l in range(cloud_a.n_bands)])
        log1mu = np.log(r * irf.band_sums / (state.sbr * d.n_bins)) - np.log(b_new)
        n_conn_a = oracles.count_connected(cloud_a, hyper)
        return (base + math.log(probs.p_dilation / (1.0 - probs.p_dilation))
                + math.log(n_conn_a) + math.log(q_rev) + float(log1mu.sum()))
    if kind in ("shift", "mark"):
        return base
    if kind == "split":
        u = proposal.aux["u"]
        pairs_b = len(oracles.merge_pairs(cloud_b, hyper.d_min, lh))
        return (base + math.log((1.0 - probs.p_split) / probs.p_split)
                + math.log(n_a) - math.log(pairs_b)
                + math.log(2.0) + math.log(lh - hyper.d_min)
                - oracles.log_beta_pdf(u, scales.eta)
                - float((np.log(u) + np.log(1.0 - u)).sum()))
    if kind == "merge":
        k1, k2 = proposal.aux["k1"], proposal.aux["k2"]
        r1, r2 = np.exp(cloud_a.m(k1)), np.exp(cloud_a.m(k2))
        u = r1 / (r1 + r2)
        pairs_a = len(oracles.merge_pairs(cloud_a, hyper.d_min, lh))
        return (base + math.log(probs.p_split / (1.0 - probs.p_split))
                - math.log(n_a - 1) + math.log(pairs_a)
                - math.log(2.0) - math.log(lh - hyper.d_min)
                + oracles.log_beta_pdf(u, scales.eta)
                + float((np.log(u) + np.log(1.0 - u)).sum()))
    raise ValueError(kind)


MOVE_FNS = {
    "birth": mv.propose_birth,
    "death": mv.propose_death,
    "dilation": mv.propose_dilation,
    "erosion": mv.propose_erosion,
    "shift": mv.propose_shift,
    "mark": mv.propose_mark,
    "split": mv.propose_split,
    "merge": mv.propose_merge,
}


def run_move_oracle_suite(n_scenes: int, seed: int = 20240901, tol: float = 1e-8):
    """Compare kernel log ratios against the brute-force oracle.

    Returns (checked counts per move, worst relative error per move).
    """
    rng = np.random.default_rng(seed)
    probs = MoveProbabilities(p_birth=0.4, p_dilation=0.55, p_split=0.45)
    scales = ProposalScales(delta_mark=0.3, delta_shift=6.0, eta=2.0)
    checked = {k: 0 for k in MOVE_FNS}
    worst = {k: 0.0 for k in MOVE_FNS}
    for s in range(n_scenes):
        state = random_chain_state(rng, force_pair=(s % 2 == 0))
        cloud_a = state.cloud.copy()
        B_a = state.B.copy()
        for kind, fn in MOVE_FNS.items():
            result = fn(state, probs, scales, rng)
            if result is None:
                continue
            subs = result if isinstance(result, list) else [result]
            for p in subs:
                got = p.log_ratio
                if got == -math.inf:
                    # invalid proposals must be invalid from first principles too
                    if p.add_points or p.remove_ids or p.set_t or p.set_m:
                        ref = oracle_log_ratio(state, kind, p, probs, scales, cloud_a, B_a)
                        assert ref == -math.inf, f"{kind}: kernel -inf but oracle {ref}"
                    continue
                ref = oracle_log_ratio(state, kind, p, probs, scales, cloud_a, B_a)
                err = abs(got - ref) / max(1.0, abs(ref))
                assert err <= tol, f"{kind}: kernel {got!r} vs oracle {ref!r} (rel err {err:.3e})"
                checked[kind] += 1
                worst[kind] = max(worst[kind], err)
    return checked, worst
