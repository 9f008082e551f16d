"""conmix: generalized linear models for repeated measures combining
conjugate overdispersion random effects with normal random effects in the
linear predictor.

The package covers model specification and validation, seeded simulation,
closed-form marginal densities/moments/correlation functions, and maximum
likelihood via analytic integration of the conjugate effects plus adaptive
Gauss-Hermite quadrature over the normal effects.
"""

from .estimate import (
    FitOptions,
    FitResult,
    boundary_variance_test,
    compare_models,
    fit,
    standard_errors,
    wald_test,
)
from .estimator import CombinedModel
from .exceptions import (
    ConmixError,
    DataError,
    DomainError,
    FitError,
    InitializationError,
    MomentExistenceError,
    NumericError,
    StrongConjugacyError,
    UnsupportedModelError,
)
from .families import (
    ConjugatePair,
    FamilyMember,
    conjugate_marginal,
    density,
    get_family,
    get_pair,
    marginal_moments,
    mean_variance,
    strong_conjugate_marginal,
)
from .io import RunConfig, load_result, params_from_mapping, read_dataset, save_result, write_dataset
from .likelihood import (
    QuadratureRule,
    cond_density,
    cond_density_shared,
    subject_loglik,
    total_loglik,
)
from .model import Dataset, ModelSpec, Params, build_designs, pack, unpack, validate
from .moments import (
    LOGIT_PROBIT_SCALE,
    MomentSet,
    approx_moments_delta,
    bernoulli_beta_moments,
    betabinomial_aggregate,
    correlation_grid,
    logit_moments_via_probit,
    marginal_correlation,
    marginal_fixed_effect,
    moment_set,
    poisson_combined_moments,
    poisson_marginal_moment,
    probit_joint_prob,
)
from .simulate import SimDesign, simulate
from .special import CorrelationMatrix, gh_nodes, log_gamma, mvn_cdf, std_normal_cdf, stirling2

__version__ = "0.1.0"
