"""Variational Bayesian imaging with score-based diffusion priors.

The package evaluates image log-priors from a score model either through the
evidence lower bound of the diffusion (cheap, stochastic) or through the
probability-flow ODE (exact up to solver and trace-estimation error), and
plugs either into variational inference for inverse problems.

Importing the package switches JAX to double precision; every numerical
tolerance in the test-suite assumes it.
"""

import jax

jax.config.update("jax_enable_x64", True)

from spvi.diffusion import VPSDE, TimeProposal  # noqa: E402
from spvi.scores import (  # noqa: E402
    GaussianPrior,
    GmmPrior,
    ScoreField,
    ScoreNet,
    train_dsm,
)
from spvi.priors import (  # noqa: E402
    bound_gap_probe,
    elbo_estimate,
    ode_logprob,
    tv_penalty,
)
from spvi.variational import DiagGaussian, RealNVP, init_family  # noqa: E402
from spvi.vi import Problem, ScorePrior, ViConfig, converged, fit, objective  # noqa: E402
from spvi.forward import Measurement, make_forward, simulate  # noqa: E402
from spvi.evaluation import fit_gmm2, psnr, reverse_kl, ssim  # noqa: E402
from spvi.io import read_tensor, write_tensor  # noqa: E402

__all__ = [
    "VPSDE",
    "TimeProposal",
    "GaussianPrior",
    "GmmPrior",
    "ScoreField",
    "ScoreNet",
    "train_dsm",
    "elbo_estimate",
    "ode_logprob",
    "tv_penalty",
    "bound_gap_probe",
    "DiagGaussian",
    "RealNVP",
    "init_family",
    "Problem",
    "ScorePrior",
    "ViConfig",
    "objective",
    "converged",
    "fit",
    "Measurement",
    "make_forward",
    "simulate",
    "fit_gmm2",
    "reverse_kl",
    "psnr",
    "ssim",
    "read_tensor",
    "write_tensor",
]

__version__ = "0.1.0"
