"""Threshold feedback policies for opportunistic beamforming.

Simulation of the n-user, M-beam SINR model, feedback rules and max-SINR
scheduling, quantile-matched threshold constructions with their rate
checks, and threshold selection under a feedback budget.
"""

__version__ = "0.1.0"

from .exceptions import (
    ConfigurationError,
    ContractError,
    DomainError,
    PolicyKindError,
    ShapeError,
    SymmetryError,
)
from .fading import ChannelModel, FadingKind, SinrMatrix, SinrVector, marginal_cdf, upper_quantile
from .optimizer import (
    OptimizationResult,
    RateOracle,
    ThresholdVector,
    coordinate_ascent,
    homogeneous_search,
    simplex_grid,
)
from .policy import (
    BoxUnion,
    GeneralThreshold,
    MaxSinrBoxUnion,
    MaxSinrThreshold,
    PolicySpec,
    Predicate,
    beam1_feedback_region_probability,
    check_beam_symmetry,
    evaluate_rule,
)
from .scheduler import ergodic_rate, feedback_load, instantaneous_rate, paired_difference
from .threshold import (
    match_gtfp,
    match_mtfp,
    one_user_switch,
    verify_monotone_chain,
    verify_theorem1,
)
