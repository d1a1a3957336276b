"""Reversible-jump MCMC sampler: chain state, move kernels and driver."""

from .state import ChainState
from .chain import ChainConfig, ChainDiagnostics, ChainResult, MoveProbabilities, ProposalScales, run_chain
from . import moves

__all__ = [
    "ChainState",
    "ChainConfig",
    "ChainDiagnostics",
    "ChainResult",
    "MoveProbabilities",
    "ProposalScales",
    "run_chain",
    "moves",
]
