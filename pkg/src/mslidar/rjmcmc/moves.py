"""The eight reversible-jump move kernels.

Every kernel returns a :class:`Proposal` holding the full acceptance log
ratio (posterior ratio x proposal ratio x Jacobian) and the commit deltas,
or ``None`` when the move is not available from the current state (no
points, no connected points, no admissible position, no eligible pair).
Invalid proposals (hard-core violations, out-of-range positions, negative
background) come back with ``log_ratio = -inf`` and count as rejections.

Birth/death conventions: the new position is uniform over pixels and a
continuous bin coordinate in [1, T], so the position proposal density is
1 / (n_pixels * (T - 1)); that volume appears explicitly in the ratio
while the point-process reference measure stays absorbed in lambda_a.
Per band, the background split u_l ~ U(0,1) maps (b, u) -> (b', m') with
Jacobian 1/(1-u_l).  Dilation proposes integer bin offsets within +-n_b
of a uniformly chosen donor point and one of its 8 adjacent pixels;
erosion removes a uniformly chosen connected point.  The mark move
exchanges intensity with the pixel background through the per-band
signal-to-background ratio, which keeps the expected photon count stable
and is what makes its acceptance ratio close despite changing b.  Split
displacements draw Delta ~ U(d_min, L_h) with a fair sign, giving the
2 (L_h - d_min) proposal factor, and the per-band Beta(eta, eta) split
fractions contribute both their densities and the u(1-u) Jacobian.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import gammaln

from ..model import neighbors_at
from .state import ChainState, GraphPatch, Proposal

_U_EPS = 1e-12


def _log_beta_pdf(u: np.ndarray, eta: float) -> float:
    const = 2.0 * gammaln(eta) - gammaln(2.0 * eta)
    return float(((eta - 1.0) * (np.log(u) + np.log1p(-u)) - const).sum())


def _gmrf_const(state: ChainState) -> float:
    """Per-point GMRF normalisation: log lambda_a - (L/2) log(2 pi sigma2)."""
    return math.log(state.hyper.lambda_a) \
        - 0.5 * state.n_bands * math.log(2.0 * math.pi * state.hyper.sigma2)


def _insert_terms(state: ChainState, x: int, y: int, t: float, m_vec: np.ndarray,
                  b_new: np.ndarray, new_id: int, exclude=()):
    """Posterior delta and commit data for inserting one point.

    Returns None if the likelihood degenerates (zero intensity at a photon).
    """
    r_vec = np.exp(m_vec)
    d_loglik, sig = state.pixel_loglik_delta(x, y, [(+1, t, r_vec)], b_new)
    if d_loglik == -math.inf:
        return None
    patch, nbrs = state.insertion_patch(x, y, t, new_id, exclude=exclude)
    d_quad = state.quad_insert_delta(m_vec, nbrs)
    d_area = state.area_delta([(x, y, t)], [])
    new_logdet = state.pmat.logdet_with(patch)
    d_gamma = state.gamma_prior_delta(x, y, b_new)
    d_post = (d_loglik
              - float(d_quad.sum()) / (2.0 * state.hyper.sigma2)
              + 0.5 * state.n_bands * (new_logdet - state.logdet)
              + _gmrf_const(state)
              - d_area * math.log(state.hyper.gamma_a)
              + d_gamma)
    return {
        "d_post": d_post, "d_loglik": d_loglik, "sig": sig, "patch": patch,
        "d_quad": d_quad, "d_area": d_area, "new_logdet": new_logdet,
        "d_gamma": d_gamma, "nbrs": nbrs,
    }


def _remove_terms(state: ChainState, nid: int, b_new: np.ndarray):
    """Posterior delta and commit data for removing one point."""
    x, y, t = state.cloud.x(nid), state.cloud.y(nid), state.cloud.t(nid)
    r_vec = state.cloud.r(nid)
    d_loglik, sig = state.pixel_loglik_delta(x, y, [(-1, t, r_vec)], b_new)
    if d_loglik == -math.inf:
        return None
    patch, nbrs = state.removal_patch(nid)
    d_quad = -state.quad_insert_delta(state.cloud.m(nid), nbrs)
    d_area = state.area_delta([], [nid])
    new_logdet = state.pmat.logdet_with(patch)
    d_gamma = state.gamma_prior_delta(x, y, b_new)
    d_post = (d_loglik
              - float(d_quad.sum()) / (2.0 * state.hyper.sigma2)
              + 0.5 * state.n_bands * (new_logdet - state.logdet)
              - _gmrf_const(state)
              - d_area * math.log(state.hyper.gamma_a)
              + d_gamma)
    return {
        "d_post": d_post, "d_loglik": d_loglik, "sig": sig, "patch": patch,
        "d_quad": d_quad, "d_area": d_area, "new_logdet": new_logdet,
        "d_gamma": d_gamma, "nbrs": nbrs, "pos": (x, y, t),
    }


def _birth_split(state: ChainState, x: int, y: int, u: np.ndarray):
    """Background split of the birth rule: b' = u b, r = w (1-u) b T / S."""
    b_old = state.B[x, y].copy()
    b_new = u * b_old
    r_new = state.sbr * (1.0 - u) * b_old * state.dims.n_bins / state.irf.band_sums
    return b_old, b_new, np.log(r_new)


def propose_birth(state: ChainState, probs, scales, rng) -> Proposal | None:
    d = state.dims
    if d.n_bins < 2:
        return None
    n = state.n_points
    x = int(rng.integers(d.n_rows))
    y = int(rng.integers(d.n_cols))
    t = float(rng.uniform(1.0, d.n_bins))
    if not state.cloud.hardcore_ok(x, y, t, state.hyper.d_min):
        return Proposal(kind="birth", log_ratio=-math.inf, aux={"x": x, "y": y, "t": t})
    u = np.clip(rng.uniform(size=state.n_bands), _U_EPS, 1.0 - _U_EPS)
    _, b_new, m_new = _birth_split(state, x, y, u)
    new_id = state.peek_ids(1)[0]
    terms = _insert_terms(state, x, y, t, m_new, b_new, new_id)
    if terms is None:
        return Proposal(kind="birth", log_ratio=-math.inf, aux={"x": x, "y": y, "t": t})
    log_ratio = (terms["d_post"]
                 + math.log((1.0 - probs.p_birth) / probs.p_birth)
                 + math.log(state.domain_volume)
                 - math.log(n + 1)
                 - float(np.log1p(-u).sum()))
    return Proposal(
        kind="birth", log_ratio=log_ratio,
        add_points=[(x, y, t, m_new)], expected_ids=[new_id],
        new_b={(x, y, l): float(b_new[l]) for l in range(state.n_bands)},
        signal_deltas=terms["sig"], d_loglik=terms["d_loglik"], d_quad=terms["d_quad"],
        d_area=terms["d_area"], d_gamma=terms["d_gamma"], new_logdet=terms["new_logdet"],
        patch=terms["patch"],
        aux={"x": x, "y": y, "t": t, "u": u, "new_id": new_id},
    )


def _death_restore(state: ChainState, nid: int):
    """Background restoration b' = b + r S / (w T) and the implied 1 - u."""
    x, y = state.cloud.x(nid), state.cloud.y(nid)
    r_vec = state.cloud.r(nid)
    gain = r_vec * state.irf.band_sums / (state.sbr * state.dims.n_bins)
    b_new = state.B[x, y] + gain
    log_one_minus_u = np.log(gain) - np.log(b_new)
    return b_new, log_one_minus_u


def propose_death(state: ChainState, probs, scales, rng) -> Proposal | None:
    n = state.n_points
    if n == 0:
        return None
    ids = state.cloud.ids()
    nid = ids[int(rng.integers(n))]
    b_new, log1mu = _death_restore(state, nid)
    terms = _remove_terms(state, nid, b_new)
    if terms is None:
        return Proposal(kind="death", log_ratio=-math.inf, aux={"nid": nid})
    x, y, _ = terms["pos"]
    log_ratio = (terms["d_post"]
                 + math.log(probs.p_birth / (1.0 - probs.p_birth))
                 + math.log(n)
                 - math.log(state.domain_volume)
                 + float(log1mu.sum()))
    return Proposal(
        kind="death", log_ratio=log_ratio,
        remove_ids=[nid],
        new_b={(x, y, l): float(b_new[l]) for l in range(state.n_bands)},
        signal_deltas=terms["sig"], d_loglik=terms["d_loglik"], d_quad=terms["d_quad"],
        d_area=terms["d_area"], d_gamma=terms["d_gamma"], new_logdet=terms["new_logdet"],
        patch=terms["patch"],
        aux={"nid": nid},
    )


# -- dilation / erosion --------------------------------------------------------

def _dilation_candidates(state: ChainState, dx_: int, dy_: int, dt_: float,
                         exclude=()) -> list[tuple[int, int, float]]:
    """Admissible positions around one donor: 8-adjacent pixels, integer
    offsets within +-floor(n_b) bins, inside the domain, hard-core free."""
    d = state.dims
    nbi = int(math.floor(state.hyper.n_b))
    out = []
    for ddx in (-1, 0, 1):
        for ddy in (-1, 0, 1):
            if ddx == 0 and ddy == 0:
                continue
            px, py = dx_ + ddx, dy_ + ddy
            if not (0 <= px < d.n_rows and 0 <= py < d.n_cols):
                continue
            for off in range(-nbi, nbi + 1):
                tt = dt_ + off
                if 1.0 <= tt <= d.n_bins and state.cloud.hardcore_ok(
                        px, py, tt, state.hyper.d_min, exclude=exclude):
                    out.append((px, py, tt))
    return out


def _dilation_density(state: ChainState, x: int, y: int, t: float, n_points: int,
                      exclude=()) -> float:
    """Probability that a dilation sweep proposes exactly (x, y, t)."""
    nbi = int(math.floor(state.hyper.n_b))
    total = 0.0
    for ddx in (-1, 0, 1):
        for ddy in (-1, 0, 1):
            if ddx == 0 and ddy == 0:
                continue
            for donor in state.cloud.points_in_pixel(x + ddx, y + ddy):
                if donor in exclude:
                    continue
                off = t - state.cloud.t(donor)
                k = round(off)
                if abs(off - k) > 1e-9 or abs(k) > nbi:
                    continue
                cands = _dilation_candidates(state, state.cloud.x(donor), state.cloud.y(donor),
                                             state.cloud.t(donor), exclude=exclude)
                if cands:
                    total += 1.0 / len(cands)
    return total / n_points if n_points else 0.0


def propose_dilation(state: ChainState, probs, scales, rng) -> Proposal | None:
    n = state.n_points
    if n == 0:
        return None
    ids = state.cloud.ids()
    donor = ids[int(rng.integers(n))]
    cands = _dilation_candidates(state, state.cloud.x(donor), state.cloud.y(donor),
                                 state.cloud.t(donor))
    if not cands:
        return None
    x, y, t = cands[int(rng.integers(len(cands)))]
    u = np.clip(rng.uniform(size=state.n_bands), _U_EPS, 1.0 - _U_EPS)
    _, b_new, m_new = _birth_split(state, x, y, u)
    new_id = state.peek_ids(1)[0]
    terms = _insert_terms(state, x, y, t, m_new, b_new, new_id)
    if terms is None:
        return Proposal(kind="dilation", log_ratio=-math.inf, aux={"x": x, "y": y, "t": t})
    q_fwd = _dilation_density(state, x, y, t, n)
    n_conn_after = state.pmat.n_connected_with(terms["patch"])
    log_ratio = (terms["d_post"]
                 + math.log((1.0 - probs.p_dilation) / probs.p_dilation)
                 - math.log(n_conn_after)
                 - math.log(q_fwd)
                 - float(np.log1p(-u).sum()))
    return Proposal(
        kind="dilation", log_ratio=log_ratio,
        add_points=[(x, y, t, m_new)], expected_ids=[new_id],
        new_b={(x, y, l): float(b_new[l]) for l in range(state.n_bands)},
        signal_deltas=terms["sig"], d_loglik=terms["d_loglik"], d_quad=terms["d_quad"],
        d_area=terms["d_area"], d_gamma=terms["d_gamma"], new_logdet=terms["new_logdet"],
        patch=terms["patch"],
        aux={"x": x, "y": y, "t": t, "u": u, "donor": donor, "q_fwd": q_fwd,
             "n_conn_after": n_conn_after, "new_id": new_id},
    )


def propose_erosion(state: ChainState, probs, scales, rng) -> Proposal | None:
    connected = [nid for nid in state.cloud.ids() if state.pmat.degree[nid] > 0]
    if not connected:
        return None
    nid = connected[int(rng.integers(len(connected)))]
    b_new, log1mu = _death_restore(state, nid)
    terms = _remove_terms(state, nid, b_new)
    if terms is None:
        return Proposal(kind="erosion", log_ratio=-math.inf, aux={"nid": nid})
    x, y, t = terms["pos"]
    q_rev = _dilation_density(state, x, y, t, state.n_points - 1, exclude=(nid,))
    if q_rev <= 0.0:
        # the point sits off the integer-offset grid of every remaining donor
        return Proposal(kind="erosion", log_ratio=-math.inf, aux={"nid": nid})
    log_ratio = (terms["d_post"]
                 + math.log(probs.p_dilation / (1.0 - probs.p_dilation))
                 + math.log(len(connected))
                 + math.log(q_rev)
                 + float(log1mu.sum()))
    return Proposal(
        kind="erosion", log_ratio=log_ratio,
        remove_ids=[nid],
        new_b={(x, y, l): float(b_new[l]) for l in range(state.n_bands)},
        signal_deltas=terms["sig"], d_loglik=terms["d_loglik"], d_quad=terms["d_quad"],
        d_area=terms["d_area"], d_gamma=terms["d_gamma"], new_logdet=terms["new_logdet"],
        patch=terms["patch"],
        aux={"nid": nid, "q_rev": q_rev, "n_conn": len(connected)},
    )


# -- shift / mark ----------------------------------------------------------------

def propose_shift(state: ChainState, probs, scales, rng) -> Proposal | None:
    n = state.n_points
    if n == 0:
        return None
    ids = state.cloud.ids()
    nid = ids[int(rng.integers(n))]
    x, y, t_old = state.cloud.x(nid), state.cloud.y(nid), state.cloud.t(nid)
    t_new = t_old + float(rng.normal(0.0, math.sqrt(scales.delta_shift)))
    aux = {"nid": nid, "t_new": t_new}
    if not (1.0 <= t_new <= state.dims.n_bins):
        return Proposal(kind="shift", log_ratio=-math.inf, aux=aux)
    if not state.cloud.hardcore_ok(x, y, t_new, state.hyper.d_min, exclude=(nid,)):
        return Proposal(kind="shift", log_ratio=-math.inf, aux=aux)
    r_vec = state.cloud.r(nid)
    m_vec = state.cloud.m(nid)
    d_loglik, sig = state.pixel_loglik_delta(
        x, y, [(-1, t_old, r_vec), (+1, t_new, r_vec)], None)
    if d_loglik == -math.inf:
        return Proposal(kind="shift", log_ratio=-math.inf, aux=aux)
    old_nbrs = state._row_of(nid)
    new_nbrs = neighbors_at(state.cloud, x, y, t_new, state.hyper, exclude=(nid,))
    d_quad = state.quad_insert_delta(m_vec, new_nbrs) - state.quad_insert_delta(m_vec, old_nbrs)
    d_area = state.area_delta([(x, y, t_new)], [nid])
    if sorted(old_nbrs) == sorted(new_nbrs):
        patch, new_logdet = None, None
        d_logdet = 0.0
    else:
        affected = {nid} | {a for a, _ in old_nbrs} | {a for a, _ in new_nbrs}
        rows = {nid: list(new_nbrs)}
        new_map = dict(new_nbrs)
        for e in affected - {nid}:
            row = state._row_of(e, exclude=(nid,))
            if e in new_map:
                row.append((nid, new_map[e]))
            rows[e] = row
        patch = GraphPatch(rows=rows)
        new_logdet = state.pmat.logdet_with(patch)
        d_logdet = new_logdet - state.logdet
    log_ratio = (d_loglik
                 - float(d_quad.sum()) / (2.0 * state.hyper.sigma2)
                 + 0.5 * state.n_bands * d_logdet
                 - d_area * math.log(state.hyper.gamma_a))
    return Proposal(
        kind="shift", log_ratio=log_ratio,
        set_t=[(nid, t_new)],
        signal_deltas=sig, d_loglik=d_loglik, d_quad=d_quad, d_area=d_area,
        new_logdet=new_logdet, patch=patch, aux=aux,
    )


def propose_mark(state: ChainState, probs, scales, rng) -> list[Proposal] | None:
    """Per-band log-intensity updates; each band accepts independently."""
    n = state.n_points
    if n == 0:
        return None
    ids = state.cloud.ids()
    nid = ids[int(rng.integers(n))]
    x, y = state.cloud.x(nid), state.cloud.y(nid)
    t = state.cloud.t(nid)
    nbrs = state._row_of(nid)
    h = state.hyper
    out = []
    for l in range(state.n_bands):
        m_old = float(state.cloud.m(nid)[l])
        m_new = m_old + float(rng.normal(0.0, math.sqrt(scales.delta_mark)))
        r_old, r_new = math.exp(m_old), math.exp(m_new)
        db = -(r_new - r_old) * state.irf.band_sums[l] / (state.sbr[l] * state.dims.n_bins)
        b_new_l = state.B[x, y, l] + db
        aux = {"nid": nid, "band": l, "m_new": m_new}
        if b_new_l <= 0.0:
            out.append(Proposal(kind="mark", log_ratio=-math.inf, aux=aux))
            continue
        rv_old = np.zeros(state.n_bands)
        rv_new = np.zeros(state.n_bands)
        rv_old[l], rv_new[l] = r_old, r_new
        b_vec = state.B[x, y].copy()
        b_vec[l] = b_new_l
        d_loglik, sig = state.pixel_loglik_delta(
            x, y, [(-1, t, rv_old), (+1, t, rv_new)], b_vec)
        if d_loglik == -math.inf:
            out.append(Proposal(kind="mark", log_ratio=-math.inf, aux=aux))
            continue
        quad_old = h.beta * m_old ** 2
        quad_new = h.beta * m_new ** 2
        for nb, dist in nbrs:
            mn = float(state.cloud.m(nb)[l])
            quad_old += (m_old - mn) ** 2 / dist
            quad_new += (m_new - mn) ** 2 / dist
        d_quad = np.zeros(state.n_bands)
        d_quad[l] = quad_new - quad_old
        k = state.gamma.k[x, y, l]
        th = state.gamma.theta[x, y, l]
        b_old_l = state.B[x, y, l]
        d_gamma = (k - 1.0) * (math.log(b_new_l) - math.log(b_old_l)) + (b_old_l - b_new_l) / th
        log_ratio = d_loglik - d_quad[l] / (2.0 * h.sigma2) + d_gamma
        out.append(Proposal(
            kind="mark", log_ratio=log_ratio,
            set_m=[(nid, l, m_new)],
            new_b={(x, y, l): float(b_new_l)},
            signal_deltas=sig, d_loglik=d_loglik, d_quad=d_quad, d_gamma=d_gamma,
            aux=aux,
        ))
    return out


# -- split / merge -----------------------------------------------------------------

def _merge_pairs(state: ChainState) -> list[tuple[int, int]]:
    lh = state.irf.max_support_len
    pairs = []
    for pix, ids in state.cloud.pixel_index.items():
        if len(ids) < 2:
            continue
        for a in range(len(ids)):
            for b in range(a + 1, len(ids)):
                dt = abs(state.cloud.t(ids[a]) - state.cloud.t(ids[b]))
                if state.hyper.d_min < dt <= lh:
                    pairs.append((min(ids[a], ids[b]), max(ids[a], ids[b])))
    return sorted(pairs)


def _split_merge_patch(state: ChainState, removed_ids, inserts):
    """Graph patch replacing ``removed_ids`` by ``inserts`` = [(id, x, y, t)]."""
    rows = {}
    nbr_maps = {}
    for new_id, x, y, t in inserts:
        nbrs = neighbors_at(state.cloud, x, y, t, state.hyper, exclude=removed_ids)
        rows[new_id] = list(nbrs)
        nbr_maps[new_id] = dict(nbrs)
    affected = set()
    for rid in removed_ids:
        affected |= {a for a, _ in state._row_of(rid)}
    for new_id, _, _, _ in inserts:
        affected |= set(nbr_maps[new_id])
    affected -= set(removed_ids)
    for e in affected:
        row = state._row_of(e, exclude=removed_ids)
        for new_id, _, _, _ in inserts:
            if e in nbr_maps[new_id]:
                row.append((new_id, nbr_maps[new_id][e]))
        rows[e] = row
    return GraphPatch(rows=rows, removed=set(removed_ids)), \
        {new_id: list(nbr_maps[new_id].items()) for new_id, _, _, _ in inserts}


def propose_split(state: ChainState, probs, scales, rng) -> Proposal | None:
    n = state.n_points
    lh = float(state.irf.max_support_len)
    if n == 0 or lh <= state.hyper.d_min:
        return None
    ids = state.cloud.ids()
    nid = ids[int(rng.integers(n))]
    x, y, t = state.cloud.x(nid), state.cloud.y(nid), state.cloud.t(nid)
    u = np.clip(rng.beta(scales.eta, scales.eta, size=state.n_bands), _U_EPS, 1.0 - _U_EPS)
    sgn = 1.0 if int(rng.integers(2)) == 0 else -1.0
    delta = float(rng.uniform(state.hyper.d_min, lh))
    r = state.cloud.r(nid)
    sum_r = float(r.sum())
    frac1 = float(((1.0 - u) * r).sum()) / sum_r
    t1 = t + sgn * delta * frac1
    t2 = t - sgn * delta * (1.0 - frac1)
    aux = {"nid": nid, "u": u, "delta": delta, "sgn": sgn, "t1": t1, "t2": t2}
    d = state.dims
    if not (1.0 <= t1 <= d.n_bins and 1.0 <= t2 <= d.n_bins) or delta <= state.hyper.d_min:
        return Proposal(kind="split", log_ratio=-math.inf, aux=aux)
    if not (state.cloud.hardcore_ok(x, y, t1, state.hyper.d_min, exclude=(nid,))
            and state.cloud.hardcore_ok(x, y, t2, state.hyper.d_min, exclude=(nid,))):
        return Proposal(kind="split", log_ratio=-math.inf, aux=aux)
    m = state.cloud.m(nid)
    m1 = m + np.log(u)
    m2 = m + np.log1p(-u)
    id1, id2 = state.peek_ids(2, removals=(nid,))
    d_loglik, sig = state.pixel_loglik_delta(
        x, y, [(-1, t, r), (+1, t1, np.exp(m1)), (+1, t2, np.exp(m2))], None)
    if d_loglik == -math.inf:
        return Proposal(kind="split", log_ratio=-math.inf, aux=aux)
    patch, ins_nbrs = _split_merge_patch(state, (nid,), [(id1, x, y, t1), (id2, x, y, t2)])
    old_nbrs = state._row_of(nid)
    d_quad = (state.quad_insert_delta(m1, ins_nbrs[id1])
              + state.quad_insert_delta(m2, ins_nbrs[id2])
              - state.quad_insert_delta(m, old_nbrs))
    d_area = state.area_delta([(x, y, t1), (x, y, t2)], [nid])
    new_logdet = state.pmat.logdet_with(patch)
    pix_ids = state.cloud.points_in_pixel(x, y)
    pairs_before_pix = state._pixel_merge_pairs(pix_ids)
    after_ids = [p for p in pix_ids if p != nid] + [id1, id2]
    t_over = {id1: t1, id2: t2}
    pairs_after_pix = state._pixel_merge_pairs(after_ids, t_override=t_over)
    n_pairs_after = state.n_merge_pairs - pairs_before_pix + pairs_after_pix
    d_post = (d_loglik
              - float(d_quad.sum()) / (2.0 * state.hyper.sigma2)
              + 0.5 * state.n_bands * (new_logdet - state.logdet)
              + _gmrf_const(state)
              - d_area * math.log(state.hyper.gamma_a))
    log_ratio = (d_post
                 + math.log((1.0 - probs.p_split) / probs.p_split)
                 + math.log(n) - math.log(n_pairs_after)
                 + math.log(2.0) + math.log(lh - state.hyper.d_min)
                 - _log_beta_pdf(u, scales.eta)
                 - float((np.log(u) + np.log1p(-u)).sum()))
    aux.update({"id1": id1, "id2": id2, "n_pairs_after": n_pairs_after})
    return Proposal(
        kind="split", log_ratio=log_ratio,
        remove_ids=[nid], add_points=[(x, y, t1, m1), (x, y, t2, m2)],
        expected_ids=[id1, id2],
        signal_deltas=sig, d_loglik=d_loglik, d_quad=d_quad, d_area=d_area,
        new_logdet=new_logdet, patch=patch, aux=aux,
    )


def propose_merge(state: ChainState, probs, scales, rng) -> Proposal | None:
    pairs = _merge_pairs(state)
    if not pairs:
        return None
    k1, k2 = pairs[int(rng.integers(len(pairs)))]
    x, y = state.cloud.x(k1), state.cloud.y(k1)
    t1, t2 = state.cloud.t(k1), state.cloud.t(k2)
    r1, r2 = state.cloud.r(k1), state.cloud.r(k2)
    r_new = r1 + r2
    m_new = np.log(r_new)
    w1 = float(r1.sum()) / float(r_new.sum())
    t_new = t1 * w1 + t2 * (1.0 - w1)
    aux = {"k1": k1, "k2": k2, "t_new": t_new, "n_pairs": len(pairs)}
    if not state.cloud.hardcore_ok(x, y, t_new, state.hyper.d_min, exclude=(k1, k2)):
        return Proposal(kind="merge", log_ratio=-math.inf, aux=aux)
    u = r1 / r_new
    delta = abs(t1 - t2)
    new_id = state.peek_ids(1, removals=(k1, k2))[0]
    d_loglik, sig = state.pixel_loglik_delta(
        x, y, [(-1, t1, r1), (-1, t2, r2), (+1, t_new, r_new)], None)
    if d_loglik == -math.inf:
        return Proposal(kind="merge", log_ratio=-math.inf, aux=aux)
    patch, ins_nbrs = _split_merge_patch(state, (k1, k2), [(new_id, x, y, t_new)])
    d_quad = (state.quad_insert_delta(m_new, ins_nbrs[new_id])
              - state.quad_insert_delta(state.cloud.m(k1), state._row_of(k1))
              - state.quad_insert_delta(state.cloud.m(k2), state._row_of(k2)))
    d_area = state.area_delta([(x, y, t_new)], [k1, k2])
    new_logdet = state.pmat.logdet_with(patch)
    lh = float(state.irf.max_support_len)
    n_after = state.n_points - 1
    d_post = (d_loglik
              - float(d_quad.sum()) / (2.0 * state.hyper.sigma2)
              + 0.5 * state.n_bands * (new_logdet - state.logdet)
              - _gmrf_const(state)
              - d_area * math.log(state.hyper.gamma_a))
    log_ratio = (d_post
                 + math.log(probs.p_split / (1.0 - probs.p_split))
                 - math.log(n_after) + math.log(len(pairs))
                 - math.log(2.0) - math.log(lh - state.hyper.d_min)
                 + _log_beta_pdf(u, scales.eta)
                 + float((np.log(u) + np.log1p(-u)).sum()))
    aux.update({"u": u, "delta": delta, "new_id": new_id})
    return Proposal(
        kind="merge", log_ratio=log_ratio,
        remove_ids=[k1, k2], add_points=[(x, y, t_new, m_new)], expected_ids=[new_id],
        signal_deltas=sig, d_loglik=d_loglik, d_quad=d_quad, d_area=d_area,
        new_logdet=new_logdet, patch=patch, aux=aux,
    )
