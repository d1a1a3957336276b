"""Chain state with incremental caches.

The sampler state is (point cloud, background field) plus caches that make
every move kernel local: surface intensity at each photon bin, the total
log likelihood, per-band GMRF quadratic forms, the precision log
determinant, the area-interaction measure, point degrees and the count of
merge-eligible pairs.  Moves build a :class:`Proposal` carrying both the
acceptance log ratio and the exact cache deltas needed to commit it.

All caches are single-writer; ``consistency_error`` recomputes everything
from scratch for the fuzz tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ..background import GammaHyper, GibbsWorkspace, gibbs_background_step
from ..cube import ImpulseResponse, LidarCube, SamplingMask
from ..model import (
    ModelHyper,
    area_measure,
    build_precision,
    gamma_logpdf_sum,
    neighbors_at,
    point_bins_interval,
    spd_logdet,
    union_count,
)
from ..pointcloud import PointCloud

_DENSE_MAX = 150


@dataclass
class GraphPatch:
    """Replacement adjacency rows for every point whose row changes.

    ``rows`` maps point id -> list of (neighbour id, distance); removed
    points appear in ``removed`` and not in ``rows``.
    """

    rows: dict[int, list[tuple[int, float]]] = field(default_factory=dict)
    removed: set[int] = field(default_factory=set)

    @property
    def affected(self) -> set[int]:
        return set(self.rows) | self.removed


@dataclass
class Proposal:
    """A fully specified move: acceptance ratio plus commit instructions."""

    kind: str
    log_ratio: float
    add_points: list[tuple[int, int, float, np.ndarray]] = field(default_factory=list)
    expected_ids: list[int] = field(default_factory=list)
    remove_ids: list[int] = field(default_factory=list)
    set_t: list[tuple[int, float]] = field(default_factory=list)
    set_m: list[tuple[int, int, float]] = field(default_factory=list)
    new_b: dict[tuple[int, int, int], float] = field(default_factory=dict)
    signal_deltas: list[tuple[slice, np.ndarray]] = field(default_factory=list)
    d_loglik: float = 0.0
    d_quad: np.ndarray | None = None
    d_area: int = 0
    d_gamma: float = 0.0
    new_logdet: float | None = None
    patch: GraphPatch | None = None
    aux: dict = field(default_factory=dict)


class _PrecisionCache:
    """Undirected weighted edges + diagonal of the GMRF precision matrix.

    Proposal log determinants use a dense path for small clouds and, for
    large ones, a low-rank update formula against a factorisation of the
    current matrix: deleting rows R and appending rows A gives

        log|P'| = log|P| + log|(P^{-1})_RR| + log|C - V' Pkk^{-1} V|

    where C and V are the new rows' blocks and Pkk^{-1} products come from
    one batched solve with the cached factor.  The factor is invalidated
    on commits and rebuilt lazily, re-anchoring the exact log determinant.
    """

    def __init__(self, state: "ChainState"):
        self.state = state
        self._factor = None
        self._factor_ids = None
        self._factor_logdet = None
        self.rebuild()

    def rebuild(self) -> None:
        self._factor = None
        st = self.state
        ea, eb, ew = [], [], []
        max_id = (max(st.cloud.ids()) + 1) if st.cloud.n_points else 0
        self.diag = np.zeros(max_id + 64, dtype=float)
        self.degree = np.zeros(max_id + 64, dtype=np.int64)
        seen = set()
        for n in st.cloud.ids():
            nbrs = neighbors_at(st.cloud, st.cloud.x(n), st.cloud.y(n), st.cloud.t(n),
                                st.hyper, exclude=(n,))
            self.diag[n] = st.hyper.beta + sum(1.0 / d for _, d in nbrs)
            self.degree[n] = len(nbrs)
            for nb, d in nbrs:
                key = (min(n, nb), max(n, nb))
                if key not in seen:
                    seen.add(key)
                    ea.append(key[0])
                    eb.append(key[1])
                    ew.append(1.0 / d)
        self.edge_a = np.array(ea, dtype=np.int64)
        self.edge_b = np.array(eb, dtype=np.int64)
        self.edge_w = np.array(ew, dtype=float)

    def _grow(self, nid: int) -> None:
        if nid >= self.diag.size:
            extra = max(64, nid + 1 - self.diag.size)
            self.diag = np.concatenate([self.diag, np.zeros(extra)])
            self.degree = np.concatenate([self.degree, np.zeros(extra, np.int64)])

    def _patched_edges(self, patch: GraphPatch):
        aff = patch.affected
        if self.edge_a.size:
            aff_arr = np.fromiter(aff, dtype=np.int64, count=len(aff))
            touch = np.isin(self.edge_a, aff_arr) | np.isin(self.edge_b, aff_arr)
            ea, eb, ew = self.edge_a[~touch], self.edge_b[~touch], self.edge_w[~touch]
        else:
            ea, eb, ew = self.edge_a, self.edge_b, self.edge_w
        add_a, add_b, add_w = [], [], []
        for n, row in patch.rows.items():
            for nb, d in row:
                if nb in patch.rows and nb < n:
                    continue  # the lower id's row contributes this edge
                add_a.append(min(n, nb))
                add_b.append(max(n, nb))
                add_w.append(1.0 / d)
        if add_a:
            ea = np.concatenate([ea, np.array(add_a, np.int64)])
            eb = np.concatenate([eb, np.array(add_b, np.int64)])
            ew = np.concatenate([ew, np.array(add_w)])
        return ea, eb, ew

    def _logdet_dense(self, patch: GraphPatch, ids: np.ndarray) -> float:
        st = self.state
        n = ids.size
        ea, eb, ew = self._patched_edges(patch)
        diag = self.diag[: max(int(ids.max()) + 1, self.diag.size)].copy()
        for pid, row in patch.rows.items():
            if pid >= diag.size:
                diag = np.concatenate([diag, np.zeros(pid + 64 - diag.size)])
            diag[pid] = st.hyper.beta + sum(1.0 / d for _, d in row)
        pos = {int(p): k for k, p in enumerate(ids)}
        P = np.zeros((n, n))
        P[np.arange(n), np.arange(n)] = diag[ids]
        for a, b, w in zip(ea, eb, ew):
            ka, kb = pos[int(a)], pos[int(b)]
            P[ka, kb] -= w
            P[kb, ka] -= w
        sign, val = np.linalg.slogdet(P)
        if sign <= 0:
            raise np.linalg.LinAlgError("precision not positive definite")
        return float(val)

    def _ensure_factor(self):
        if self._factor is not None:
            return self._factor, self._factor_ids, self._factor_logdet
        st = self.state
        ids = np.fromiter(sorted(st.cloud.ids()), dtype=np.int64, count=st.cloud.n_points)
        pos = np.searchsorted(ids, self.edge_a), np.searchsorted(ids, self.edge_b)
        n = ids.size
        rows = np.concatenate([pos[0], pos[1], np.arange(n)])
        cols = np.concatenate([pos[1], pos[0], np.arange(n)])
        vals = np.concatenate([-self.edge_w, -self.edge_w, self.diag[ids]])
        P = sp.csc_matrix((vals, (rows, cols)), shape=(n, n))
        lu = spla.splu(P, permc_spec="MMD_AT_PLUS_A")
        self._factor = lu
        self._factor_ids = ids
        self._factor_logdet = float(np.log(np.abs(lu.U.diagonal())).sum())
        return self._factor, self._factor_ids, self._factor_logdet

    def logdet_with(self, patch: GraphPatch) -> float:
        """log det of the precision after applying ``patch`` (not committed)."""
        st = self.state
        live = set(st.cloud.ids()) - patch.removed | set(patch.rows)
        n_after = len(live)
        if n_after == 0:
            return 0.0
        if n_after <= _DENSE_MAX:
            ids = np.fromiter(sorted(live), dtype=np.int64, count=n_after)
            return self._logdet_dense(patch, ids)
        lu, old_ids, base_logdet = self._ensure_factor()
        pos_of = {int(p): k for k, p in enumerate(old_ids)}
        removed_rows = sorted(patch.affected & set(pos_of))
        r_pos = np.array([pos_of[p] for p in removed_rows], dtype=np.int64)
        new_rows = sorted(patch.rows)
        a_index = {p: k for k, p in enumerate(new_rows)}
        q, m = len(new_rows), len(removed_rows)
        n_old = old_ids.size
        beta = st.hyper.beta
        V = np.zeros((n_old, q))
        C = np.zeros((q, q))
        for pid, row in patch.rows.items():
            j = a_index[pid]
            C[j, j] = beta + sum(1.0 / d for _, d in row)
            for nb, d in row:
                if nb in a_index:
                    C[a_index[nb], j] = -1.0 / d
                else:
                    V[pos_of[nb], j] = -1.0 / d
        rhs = np.zeros((n_old, q + m))
        rhs[:, :q] = V
        rhs[np.arange(n_old)[r_pos], q + np.arange(m)] = 1.0
        X = lu.solve(rhs) if q + m else np.zeros((n_old, 0))
        G = V.T @ X[:, :q]
        H = X[r_pos, :q] if m else np.zeros((0, q))
        W = X[r_pos, q:] if m else np.zeros((0, 0))
        delta = 0.0
        if m:
            sign_w, logdet_w = np.linalg.slogdet(W)
            if sign_w <= 0:
                raise np.linalg.LinAlgError("deleted block not positive definite")
            delta += logdet_w
        if q:
            inner = C - G
            if m:
                inner = inner + H.T @ np.linalg.solve(W, H)
            sign_i, logdet_i = np.linalg.slogdet(inner)
            if sign_i <= 0:
                raise np.linalg.LinAlgError("bordered block not positive definite")
            delta += logdet_i
        return float(base_logdet + delta)

    def commit(self, patch: GraphPatch) -> None:
        self._factor = None
        ea, eb, ew = self._patched_edges(patch)
        self.edge_a, self.edge_b, self.edge_w = ea, eb, ew
        # rows win over removals: a freed id may be reused by the same move
        for pid in patch.removed - set(patch.rows):
            self.diag[pid] = 0.0
            self.degree[pid] = 0
        for pid in patch.rows:
            self._grow(pid)
        for pid, row in patch.rows.items():
            self.diag[pid] = self.state.hyper.beta + sum(1.0 / d for _, d in row)
            self.degree[pid] = len(row)

    def n_connected_with(self, patch: GraphPatch | None = None) -> int:
        base = int((self.degree > 0).sum())
        if patch is None:
            return base
        n = base
        for pid in patch.affected:
            if pid < self.degree.size and self.degree[pid] > 0:
                n -= 1
        for pid, row in patch.rows.items():
            if len(row) > 0:
                n += 1
        return n


class ChainState:
    """Mutable sampler state: (cloud, background) plus consistent caches."""

    def __init__(self, cube: LidarCube, cloud: PointCloud, B: np.ndarray,
                 hyper: ModelHyper, mask: SamplingMask, irf: ImpulseResponse,
                 gamma_hyper: GammaHyper, sbr: np.ndarray):
        d = cube.dims
        if not cloud.strauss_valid(hyper.d_min):
            raise ValueError("initial cloud violates the hard-core constraint")
        cube.validate_against_mask(mask)
        self.cube = cube
        self.dims = d
        self.cloud = cloud
        self.B = np.asarray(B, dtype=float).copy()
        if (self.B <= 0).any():
            raise ValueError("background levels must be positive")
        self.hyper = hyper
        self.mask = mask
        self.irf = irf
        self.gamma = gamma_hyper
        self.sbr = np.asarray(sbr, dtype=float)
        self.n_bands = d.n_bands
        self.domain_volume = d.n_rows * d.n_cols * max(d.n_bins - 1, 1)

        self.ws = GibbsWorkspace(cube, mask)
        self.ws.refresh_signal(cloud, irf)
        self._g = mask.bits.astype(float)
        self._gT_sum_cache = float(self._g.sum()) * d.n_bins
        self.loglik = self._loglik_from_scratch()
        self.quad = self._quad_from_scratch()
        self.logdet = self._logdet_from_scratch()
        self.area = area_measure(cloud, hyper, d)
        self.gamma_total = gamma_logpdf_sum(self.B, gamma_hyper.k, gamma_hyper.theta)
        self.pmat = _PrecisionCache(self)
        self.n_merge_pairs = self._count_merge_pairs()

    # -- scratch computations (init and consistency checks) -----------------

    def _loglik_from_scratch(self) -> float:
        d = self.dims
        b_ph = self.B.ravel()[self.ws.pb]
        lam = self.ws.signal + b_ph
        if (lam <= 0).any():
            return -math.inf
        total = float(self.ws.z @ np.log(lam))
        total -= d.n_bins * float((self.B * self._g).sum())
        for n in self.cloud.ids():
            x, y = self.cloud.x(n), self.cloud.y(n)
            r = self.cloud.r(n)
            for l in range(d.n_bands):
                if self.mask.bits[x, y, l]:
                    total -= r[l] * self.irf.truncated_sum(l, self.cloud.t(n), d.n_bins)
        return total

    def _quad_from_scratch(self) -> np.ndarray:
        if self.cloud.n_points == 0:
            return np.zeros(self.n_bands)
        P, ids = build_precision(self.cloud, self.hyper.beta, self.hyper)
        m = np.array([self.cloud.m(n) for n in ids])
        return np.array([float(m[:, l] @ (P @ m[:, l])) for l in range(self.n_bands)])

    def _logdet_from_scratch(self) -> float:
        if self.cloud.n_points == 0:
            return 0.0
        P, _ = build_precision(self.cloud, self.hyper.beta, self.hyper)
        return spd_logdet(P)

    def _count_merge_pairs(self) -> int:
        return sum(self._pixel_merge_pairs(self.cloud.points_in_pixel(*pix))
                   for pix in self.cloud.pixel_index)

    def _pixel_merge_pairs(self, ids, t_override: dict[int, float] | None = None) -> int:
        lh = self.irf.max_support_len
        ts = [t_override[n] if t_override and n in t_override else self.cloud.t(n)
              for n in ids]
        count = 0
        for a in range(len(ts)):
            for b in range(a + 1, len(ts)):
                dt = abs(ts[a] - ts[b])
                if self.hyper.d_min < dt <= lh:
                    count += 1
        return count

    # -- cached posterior ----------------------------------------------------

    def log_posterior(self) -> float:
        n = self.cloud.n_points
        L = self.n_bands
        h = self.hyper
        gmrf = (-float(self.quad.sum()) / (2.0 * h.sigma2)
                + 0.5 * L * self.logdet
                - 0.5 * n * L * math.log(2.0 * math.pi * h.sigma2))
        area_term = n * math.log(h.lambda_a) - self.area * math.log(h.gamma_a)
        return self.loglik + gmrf + area_term + self.gamma_total

    @property
    def n_points(self) -> int:
        return self.cloud.n_points

    # -- local likelihood / prior deltas ------------------------------------

    def pixel_loglik_delta(self, x: int, y: int, point_changes, new_b: np.ndarray | None):
        """Delta of the log likelihood at pixel (x, y).

        ``point_changes`` is a list of (sign, t, r_vec) insertions (+1) and
        removals (-1); ``new_b`` optionally replaces the pixel's per-band
        background.  Returns (delta, [(slice, ds array)]).
        """
        d = self.dims
        total = 0.0
        deltas = []
        for l in range(self.n_bands):
            if self.mask.bits[x, y, l] == 0:
                continue
            b_old = self.B[x, y, l]
            b_new = b_old if new_b is None else float(new_b[l])
            sl = self.ws.pixel_band_slice(x, y, l)
            ds = None
            d_lam_sum = d.n_bins * (b_new - b_old)
            for sign, t, r_vec in point_changes:
                r = float(r_vec[l])
                if sl.stop > sl.start:
                    h_vals = self.irf.eval(l, self.ws.t[sl] - t)
                    ds = sign * r * h_vals if ds is None else ds + sign * r * h_vals
                d_lam_sum += sign * r * self.irf.truncated_sum(l, t, d.n_bins)
            if sl.stop > sl.start:
                s_old = self.ws.signal[sl]
                lam_old = s_old + b_old
                lam_new = (s_old if ds is None else s_old + ds) + b_new
                if (lam_new <= 0.0).any():
                    return -math.inf, []
                total += float(self.ws.z[sl] @ (np.log(lam_new) - np.log(lam_old)))
                if ds is not None:
                    deltas.append((sl, ds))
            total -= d_lam_sum
        return total, deltas

    def gamma_prior_delta(self, x: int, y: int, new_b: np.ndarray) -> float:
        k = self.gamma.k[x, y]
        th = self.gamma.theta[x, y]
        b_old = self.B[x, y]
        b_new = np.asarray(new_b, dtype=float)
        return float(((k - 1.0) * (np.log(b_new) - np.log(b_old))
                      + (b_old - b_new) / th).sum())

    def quad_insert_delta(self, m_vec: np.ndarray, nbrs: list[tuple[int, float]]) -> np.ndarray:
        """Per-band change of m' P m when inserting marks with given neighbours."""
        h = self.hyper
        dq = h.beta * np.asarray(m_vec, dtype=float) ** 2
        for nb, dist in nbrs:
            dq = dq + (m_vec - self.cloud.m(nb)) ** 2 / dist
        return dq

    def area_delta(self, inserts: list[tuple[int, int, float]],
                   removes: list[int]) -> int:
        """Change of the union interaction measure for local edits."""
        d = self.dims
        h = self.hyper
        cols: set[tuple[int, int]] = set()
        for (x, y, _) in inserts:
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    cx, cy = x + dx, y + dy
                    if 0 <= cx < d.n_rows and 0 <= cy < d.n_cols:
                        cols.add((cx, cy))
        for n in removes:
            x, y = self.cloud.x(n), self.cloud.y(n)
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    cx, cy = x + dx, y + dy
                    if 0 <= cx < d.n_rows and 0 <= cy < d.n_cols:
                        cols.add((cx, cy))
        removed = set(removes)
        delta = 0
        for cx, cy in cols:
            before, after = [], []
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    for n in self.cloud.points_in_pixel(cx + dx, cy + dy):
                        iv = point_bins_interval(self.cloud.t(n), h.n_b, d.n_bins)
                        before.append(iv)
                        if n not in removed:
                            after.append(iv)
            for (x, y, t) in inserts:
                if abs(x - cx) <= 1 and abs(y - cy) <= 1:
                    after.append(point_bins_interval(t, h.n_b, d.n_bins))
            delta += union_count(after) - union_count(before)
        return delta

    # -- graph patches -------------------------------------------------------

    def insertion_patch(self, x: int, y: int, t: float, new_id: int,
                        exclude=()) -> tuple[GraphPatch, list[tuple[int, float]]]:
        nbrs = neighbors_at(self.cloud, x, y, t, self.hyper, exclude=exclude)
        patch = GraphPatch(rows={new_id: list(nbrs)})
        for nb, dist in nbrs:
            row = self._row_of(nb, exclude=exclude)
            row.append((new_id, dist))
            patch.rows[nb] = row
        return patch, nbrs

    def removal_patch(self, nid: int) -> tuple[GraphPatch, list[tuple[int, float]]]:
        nbrs = neighbors_at(self.cloud, self.cloud.x(nid), self.cloud.y(nid),
                            self.cloud.t(nid), self.hyper, exclude=(nid,))
        patch = GraphPatch(removed={nid})
        for nb, _ in nbrs:
            patch.rows[nb] = [e for e in self._row_of(nb) if e[0] != nid]
        return patch, nbrs

    def _row_of(self, nid: int, exclude=()) -> list[tuple[int, float]]:
        return neighbors_at(self.cloud, self.cloud.x(nid), self.cloud.y(nid),
                            self.cloud.t(nid), self.hyper, exclude=(nid, *exclude))

    @staticmethod
    def merge_patches(*patches: GraphPatch) -> GraphPatch:
        """Sequential composition: later rows override earlier ones."""
        out = GraphPatch()
        for p in patches:
            for pid in p.removed:
                out.rows.pop(pid, None)
                out.removed.add(pid)
            for pid, row in p.rows.items():
                out.removed.discard(pid)
                out.rows[pid] = row
        return out

    # -- commit ---------------------------------------------------------------

    def apply(self, p: Proposal) -> None:
        touched = {(x, y) for (x, y, _, _) in p.add_points}
        touched |= {(self.cloud.x(n), self.cloud.y(n)) for n in p.remove_ids}
        touched |= {(self.cloud.x(n), self.cloud.y(n)) for n, _ in p.set_t}
        pairs_before = sum(self._pixel_merge_pairs(self.cloud.points_in_pixel(*pix))
                           for pix in touched)
        for (sl, ds) in p.signal_deltas:
            self.ws.signal[sl] += ds
        for nid in p.remove_ids:
            self.cloud.remove(nid)
        for (x, y, t, m_vec), expect in zip(p.add_points, p.expected_ids):
            got = self.cloud.add(x, y, t, m_vec)
            if got != expect:
                raise RuntimeError("point id allocation mismatch")
        for nid, t in p.set_t:
            self.cloud.set_t(nid, t)
        for nid, band, val in p.set_m:
            self.cloud.set_m(nid, band, val)
        for (x, y, l), val in p.new_b.items():
            self.B[x, y, l] = val
        self.loglik += p.d_loglik
        if p.d_quad is not None:
            self.quad = self.quad + p.d_quad
        self.area += p.d_area
        self.gamma_total += p.d_gamma
        if p.new_logdet is not None:
            self.logdet = p.new_logdet
        if p.patch is not None:
            self.pmat.commit(p.patch)
        if touched:
            pairs_after = sum(self._pixel_merge_pairs(self.cloud.points_in_pixel(*pix))
                              for pix in touched)
            self.n_merge_pairs += pairs_after - pairs_before

    def peek_ids(self, count: int, removals=()) -> list[int]:
        """Ids the next ``count`` insertions will receive after ``removals``.

        ``removals`` must list the ids in the order they will be removed;
        the free list is last-in-first-out.
        """
        out = []
        free = list(self.cloud._free) + list(removals)
        nxt = self.cloud._x.size
        for _ in range(count):
            if free:
                out.append(free.pop())
            else:
                out.append(nxt)
                nxt += 1
        return out

    # -- gibbs sweep -----------------------------------------------------------

    def gibbs_sweep(self, rng: np.random.Generator) -> None:
        """One background data-augmentation sweep; keeps caches in sync."""
        old_flat = self.B.ravel().copy()
        new_B = gibbs_background_step(self.cube, self.cloud, self.B, self.gamma,
                                      self.mask, self.irf, rng, workspace=self.ws)
        new_flat = new_B.ravel()
        if self.ws.pb.size:
            b_old_ph = old_flat[self.ws.pb]
            b_new_ph = new_flat[self.ws.pb]
            self.loglik += float(self.ws.z @ (np.log(self.ws.signal + b_new_ph)
                                              - np.log(self.ws.signal + b_old_ph)))
        self.loglik -= self.dims.n_bins * float(((new_B - self.B) * self._g).sum())
        self.B = new_B
        self.gamma_total = gamma_logpdf_sum(self.B, self.gamma.k, self.gamma.theta)

    # -- consistency (fuzz tests) ----------------------------------------------

    def consistency_error(self) -> dict[str, float]:
        """Relative cache drift against from-scratch recomputation."""
        ref_ll = self._loglik_from_scratch()
        ref_q = self._quad_from_scratch()
        ref_ld = self._logdet_from_scratch()
        ref_area = area_measure(self.cloud, self.hyper, self.dims)
        ref_gamma = gamma_logpdf_sum(self.B, self.gamma.k, self.gamma.theta)
        ws2 = GibbsWorkspace(self.cube, self.mask)
        ws2.refresh_signal(self.cloud, self.irf)
        sig_err = float(np.max(np.abs(ws2.signal - self.ws.signal))) if ws2.signal.size else 0.0

        def rel(a, b):
            return abs(a - b) / max(1.0, abs(b))

        return {
            "loglik": rel(self.loglik, ref_ll),
            "quad": float(np.max(np.abs(self.quad - ref_q)) / max(1.0, float(np.max(np.abs(ref_q))) )),
            "logdet": rel(self.logdet, ref_ld),
            "area": abs(self.area - ref_area),
            "gamma": rel(self.gamma_total, ref_gamma),
            "signal": sig_err,
            "pairs": abs(self.n_merge_pairs - self._count_merge_pairs()),
        }
