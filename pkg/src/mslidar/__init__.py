"""Multi-surface 3D reconstruction of subsampled multispectral single-photon lidar data.

The package is organised around a sparse photon-count cube (`cube`), a
marked spatial point cloud (`pointcloud`), the Bayesian observation model
and priors (`model`), background-level inference (`background`), a
reversible-jump MCMC sampler (`rjmcmc`), a coarse-to-fine driver
(`multires`), spectral subsampling mask design (`codes`), a synthetic
scene simulator (`simulator`) and evaluation metrics (`metrics`).
"""

from .cube import (
    CubeDims,
    ImpulseResponse,
    LidarCube,
    SamplingMask,
    bin_pixels,
    integrate_wavelengths,
    load_cube,
    store_cube,
)
from .pointcloud import PointCloud
from .model import ModelHyper, log_likelihood, log_posterior
from .background import EmpiricalBayesConfig, GammaHyper, fit_gamma_hyper, gibbs_background_step
from .rjmcmc import ChainConfig, MoveProbabilities, ProposalScales, run_chain
from .multires import ScaleSchedule, run_multires, upsample
from .codes import CodeDesignSpec, design_blue_noise, local_variance, random_code_per_band, random_code_per_pixel
from .simulator import SceneSpec, make_scene, render_cube
from .metrics import EvalReport, evaluate, match_points

__version__ = "0.1.0"

__all__ = [
    "CubeDims",
    "ImpulseResponse",
    "LidarCube",
    "SamplingMask",
    "bin_pixels",
    "integrate_wavelengths",
    "load_cube",
    "store_cube",
    "PointCloud",
    "ModelHyper",
    "log_likelihood",
    "log_posterior",
    "EmpiricalBayesConfig",
    "GammaHyper",
    "fit_gamma_hyper",
    "gibbs_background_step",
    "ChainConfig",
    "MoveProbabilities",
    "ProposalScales",
    "run_chain",
    "ScaleSchedule",
    "run_multires",
    "upsample",
    "CodeDesignSpec",
    "design_blue_noise",
    "local_variance",
    "random_code_per_band",
    "random_code_per_pixel",
    "SceneSpec",
    "make_scene",
    "render_cube",
    "EvalReport",
    "evaluate",
    "match_points",
]
