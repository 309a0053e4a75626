"""First-come-first-served infinite bipartite matching."""
from .model import (
    CrpReport,
    MatchingModel,
    ModelError,
    check_crp,
    load_model,
    model_from_dict,
    nn_model,
    random_model,
    validate_model,
)
from .fcfs import ItemSequence, Matching, exchange_transform, fcfs_match_finite, reversed_rematch_check, verify_fcfs
from .analytic import (
    DivergenceError,
    SignedGeometricMixture,
    StationaryEvaluator,
    link_length_distribution,
    matching_rates,
    normalizing_constant,
    pgf_eval,
    pi_detailed,
    pi_natural,
)

__version__ = "0.1.0"
