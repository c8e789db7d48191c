"""Measurement operators and likelihoods."""

from spvi.forward.linear import (
    deinterleave,
    denoise_forward,
    interleave,
    lowfreq_forward,
    lowfreq_indices,
    mri_forward,
    zero_filled,
)
from spvi.forward.masks import poisson_disc_mask
from spvi.forward.measurement import (
    Measurement,
    dense_matrix,
    log_likelihood,
    make_forward,
    make_log_likelihood,
    simulate,
)
from spvi.forward.vlbi import (
    ClosureDesign,
    UvCoverage,
    closure_design,
    closure_phases,
    closure_quantities,
    closure_sigmas,
    flux_penalty,
    log_closure_amplitudes,
    read_coverage,
    select_nonredundant,
    vlbi_visibilities,
    write_coverage,
)

__all__ = [
    "ClosureDesign", "Measurement", "UvCoverage", "closure_design", "closure_phases",
    "closure_quantities", "closure_sigmas", "deinterleave", "denoise_forward", "dense_matrix",
    "flux_penalty", "interleave", "log_closure_amplitudes", "log_likelihood", "lowfreq_forward",
    "lowfreq_indices", "make_forward", "make_log_likelihood", "mri_forward", "poisson_disc_mask",
    "read_coverage", "select_nonredundant", "simulate", "vlbi_visibilities", "write_coverage",
    "zero_filled",
]
