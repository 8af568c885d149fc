"""Maximum-likelihood estimation of logit-family choice models via conic optimization."""

from .cones import ConeBlock, ConeLayout, exp_cone_barrier
from .data import (
    ChoiceDataset,
    InvalidInputError,
    LogLikelihoodReport,
    NestPartition,
    TaxonomyTree,
)
from .datagen import (
    SIZE_TABLE,
    Instance,
    InstanceSpec,
    gen_instance,
    gen_lambda,
    load_instance,
    save_instance,
)
from .estimate import (
    EstimationResult,
    TwoStageConfig,
    fit_baseline_quasi_newton,
    fit_mnl,
    fit_nl_fixed_lambda,
    fit_nl_joint,
    fit_tnl_fixed_lambda,
    fit_tnl_joint,
)
from .likelihood import (
    finite_difference_gradient,
    mnl_choice_probs,
    mnl_log_likelihood,
    nl_choice_probs,
    nl_inclusive_values,
    nl_log_likelihood,
    tnl_log_likelihood,
    tnl_value_functions,
)
from .program import ConicProgram, program_from_json, program_to_json, validate
from .reformulate import (
    EcpBuild,
    Extraction,
    ExtractionRefused,
    SizingReport,
    VarMap,
    extract_solution,
    mnl_to_ecp,
    nl_to_ecp,
    tnl_to_ecp,
)
from .solver import ConicSolution, SolverConfig, residuals, solve

__version__ = "0.1.0"
