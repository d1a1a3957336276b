"""Chain driver: move scheduling, adaptation, MAP/MMSE tracking, diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..background import GammaHyper
from ..cube import ImpulseResponse, LidarCube, SamplingMask
from ..model import ModelHyper
from ..pointcloud import PointCloud
from . import moves as _moves
from .state import ChainState

MOVE_KINDS = ("birth", "death", "dilation", "erosion", "shift", "mark", "split", "merge")


@dataclass
class MoveProbabilities:
    """Family probabilities (must sum to 1) and within-family conditionals.

    Birth proposals have a low acceptance ratio compared to dilation, so
    the defaults favour the dilation/erosion family.
    """

    birth_family: float = 0.2
    dilation_family: float = 0.3
    shift: float = 0.2
    mark: float = 0.2
    split_family: float = 0.1
    p_birth: float = 0.5
    p_dilation: float = 0.5
    p_split: float = 0.5

    def __post_init__(self):
        fam = self.birth_family + self.dilation_family + self.shift + self.mark + self.split_family
        if abs(fam - 1.0) > 1e-9:
            raise ValueError("family probabilities must sum to 1")
        for p in (self.p_birth, self.p_dilation, self.p_split):
            if not (0.0 < p < 1.0):
                raise ValueError("within-family probabilities must lie in (0, 1)")

    def family_cdf(self) -> np.ndarray:
        return np.cumsum([self.birth_family, self.dilation_family, self.shift,
                          self.mark, self.split_family])


@dataclass
class ProposalScales:
    """Random-walk variances and the beta split parameter."""

    delta_mark: float = 0.25
    delta_shift: float = 4.0
    eta: float = 2.0

    def __post_init__(self):
        if self.delta_mark <= 0 or self.delta_shift <= 0 or self.eta <= 0:
            raise ValueError("proposal scales must be positive")


@dataclass
class ChainConfig:
    n_iter: int
    n_burnin: int = 0
    gibbs_stride: int = 1
    autotune: bool = True
    target_accept: float = 0.41
    tune_rate: float = 1.0
    track_trace: bool = True

    def __post_init__(self):
        if self.n_iter < 0 or not (0 <= self.n_burnin <= max(self.n_iter, 1)):
            raise ValueError("need 0 <= n_burnin <= n_iter")
        if self.gibbs_stride < 1:
            raise ValueError("gibbs_stride must be >= 1")


@dataclass
class ChainDiagnostics:
    proposed: dict[str, int] = field(default_factory=lambda: {k: 0 for k in MOVE_KINDS})
    accepted: dict[str, int] = field(default_factory=lambda: {k: 0 for k in MOVE_KINDS})
    skipped: dict[str, int] = field(default_factory=lambda: {k: 0 for k in MOVE_KINDS})
    post_proposed: dict[str, int] = field(default_factory=lambda: {k: 0 for k in MOVE_KINDS})
    post_accepted: dict[str, int] = field(default_factory=lambda: {k: 0 for k in MOVE_KINDS})
    log_post_trace: list[float] = field(default_factory=list)
    n_points_trace: list[int] = field(default_factory=list)
    tuned_delta_shift: float | None = None
    tuned_delta_mark: float | None = None

    def acceptance_rates(self) -> dict[str, float]:
        return {k: (self.accepted[k] / self.proposed[k] if self.proposed[k] else float("nan"))
                for k in MOVE_KINDS}

    def post_burnin_acceptance(self, kind: str) -> float:
        n = self.post_proposed[kind]
        return self.post_accepted[kind] / n if n else float("nan")

    def save_trace_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("iteration,log_posterior,n_points\n")
            for it, (lp, n) in enumerate(zip(self.log_post_trace, self.n_points_trace)):
                f.write(f"{it},{lp:.8f},{n}\n")

    def save_moves_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("move,proposed,accepted,skipped\n")
            for k in MOVE_KINDS:
                f.write(f"{k},{self.proposed[k]},{self.accepted[k]},{self.skipped[k]}\n")


@dataclass
class ChainResult:
    map_cloud: PointCloud
    map_B: np.ndarray
    map_log_posterior: float
    mmse_B: np.ndarray
    final_cloud: PointCloud
    final_B: np.ndarray
    diagnostics: ChainDiagnostics


_FAMILY_MOVES = {
    0: ("birth", "death"),
    1: ("dilation", "erosion"),
    2: ("shift", None),
    3: ("mark", None),
    4: ("split", "merge"),
}

_KERNELS = {
    "birth": _moves.propose_birth,
    "death": _moves.propose_death,
    "dilation": _moves.propose_dilation,
    "erosion": _moves.propose_erosion,
    "shift": _moves.propose_shift,
    "mark": _moves.propose_mark,
    "split": _moves.propose_split,
    "merge": _moves.propose_merge,
}


def run_chain(cube: LidarCube, init_cloud: PointCloud, init_B: np.ndarray,
              hyper: ModelHyper, mask: SamplingMask, irf: ImpulseResponse,
              gamma_hyper: GammaHyper, sbr: np.ndarray, config: ChainConfig,
              rng: np.random.Generator,
              move_probs: MoveProbabilities | None = None,
              scales: ProposalScales | None = None) -> ChainResult:
    """Run one reversible-jump chain and return MAP / MMSE estimates.

    Each iteration draws one move from the family categorical, applies the
    Metropolis-Hastings test, and (every ``gibbs_stride`` iterations) runs
    one background Gibbs sweep.  The point-cloud estimate is the visited
    state of highest log posterior; the background estimate is the
    post-burn-in mean.  A fixed generator seed fully determines the run.
    """
    probs = move_probs or MoveProbabilities()
    scales = replace(scales) if scales is not None else ProposalScales()
    diag = ChainDiagnostics()
    state = ChainState(cube, init_cloud.copy(), init_B, hyper, mask, irf, gamma_hyper, sbr)

    if config.n_iter == 0:
        lp = state.log_posterior()
        return ChainResult(state.cloud.copy(), state.B.copy(), lp, state.B.copy(),
                           state.cloud.copy(), state.B.copy(), diag)

    cdf = probs.family_cdf()
    best_lp = state.log_posterior()
    best_cloud = state.cloud.copy()
    best_B = state.B.copy()
    b_sum = np.zeros_like(state.B)
    b_count = 0
    log_d_shift = math.log(scales.delta_shift)
    log_d_mark = math.log(scales.delta_mark)
    n_tuned_shift = 0
    n_tuned_mark = 0

    def decide(proposal) -> bool:
        if proposal.log_ratio == -math.inf:
            return False
        return proposal.log_ratio >= 0.0 or math.log(rng.uniform()) < proposal.log_ratio

    for it in range(config.n_iter):
        fam = int(np.searchsorted(cdf, rng.uniform()))
        first, second = _FAMILY_MOVES[fam]
        if second is None:
            kind = first
        else:
            within = {"birth": probs.p_birth, "dilation": probs.p_dilation,
                      "split": probs.p_split}[first]
            kind = first if rng.uniform() < within else second
        result = _KERNELS[kind](state, probs, scales, rng)
        changed = False
        if result is None:
            diag.skipped[kind] += 1
        elif isinstance(result, list):  # mark: per-band independent decisions
            for sub in result:
                diag.proposed[kind] += 1
                if it >= config.n_burnin:
                    diag.post_proposed[kind] += 1
                acc = decide(sub)
                if acc:
                    state.apply(sub)
                    diag.accepted[kind] += 1
                    if it >= config.n_burnin:
                        diag.post_accepted[kind] += 1
                    changed = True
                if config.autotune and it < config.n_burnin:
                    n_tuned_mark += 1
                    step = config.tune_rate / (1.0 + n_tuned_mark) ** 0.6
                    log_d_mark += step * ((1.0 if acc else 0.0) - config.target_accept)
                    scales.delta_mark = math.exp(log_d_mark)
        else:
            diag.proposed[kind] += 1
            if it >= config.n_burnin:
                diag.post_proposed[kind] += 1
            acc = decide(result)
            if acc:
                state.apply(result)
                diag.accepted[kind] += 1
                if it >= config.n_burnin:
                    diag.post_accepted[kind] += 1
                changed = True
            if config.autotune and it < config.n_burnin and kind == "shift":
                n_tuned_shift += 1
                step = config.tune_rate / (1.0 + n_tuned_shift) ** 0.6
                log_d_shift += step * ((1.0 if acc else 0.0) - config.target_accept)
                scales.delta_shift = math.exp(log_d_shift)

        if (it + 1) % config.gibbs_stride == 0:
            state.gibbs_sweep(rng)
            changed = True

        if changed or config.track_trace:
            lp = state.log_posterior()
            if changed and lp > best_lp:
                best_lp = lp
                best_cloud = state.cloud.copy()
                best_B = state.B.copy()
            if config.track_trace:
                diag.log_post_trace.append(lp)
                diag.n_points_trace.append(state.n_points)
        if it >= config.n_burnin:
            b_sum += state.B
            b_count += 1

    diag.tuned_delta_shift = scales.delta_shift
    diag.tuned_delta_mark = scales.delta_mark
    mmse_B = b_sum / b_count if b_count else state.B.copy()
    return ChainResult(best_cloud, best_B, best_lp, mmse_B,
                       state.cloud.copy(), state.B.copy(), diag)
