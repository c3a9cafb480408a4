"""Risk-aware signal temporal logic over stochastic linear systems.

Evaluate risk measures of STL robustness over trajectory ensembles,
turn risk constraints into tightened deterministic constraints on the
mean dynamics, and synthesize controls by MILP-based MPC.
"""

from .formulas import (
    AffinePredicate,
    And,
    Atom,
    FalseLiteral,
    Formula,
    FormulaError,
    NegAtom,
    Not,
    Or,
    Release,
    Run,
    TrueLiteral,
    Until,
    always,
    conj,
    disj,
    eventually,
    format_formula,
    horizon,
    is_nnf,
    parse,
    robustness,
    same_formula,
    satisfies,
    to_nnf,
)
from .risk import MEASURES, RiskError, RiskSpec, drvar_violation_prob, eval_risk
from .semantics import (
    Ensemble,
    RiskAnd,
    RiskLeaf,
    RiskOr,
    decompose,
    evaluate_tree,
    stl_risk,
    tree_leaves,
)
from .tightening import (
    LtvSystem,
    PredicateSchedule,
    TightenedPredicate,
    mean_rollout,
    prediction_covariance,
    prediction_covariances,
    stacked_dynamics,
    tighten_formula,
    tighten_predicate,
    transition_matrix,
)
from .milp import (
    EncodedStl,
    LpResult,
    MilpError,
    MilpModel,
    MilpSolution,
    ModelBuilder,
    StlEncoder,
    encode_deterministic_stl,
    lp_string,
    parse_lp,
    solve_lp,
    solve_milp,
    write_lp,
)
from .config import ConfigError, ExperimentConfig, load_experiment_config, load_system
from .mpc import (
    RunRecord,
    mission_formula,
    plan_window,
    run_experiment,
    shift_formula,
    simulate_closed_loop,
)

__version__ = "0.1.0"

__all__ = [
    "AffinePredicate",
    "And",
    "Atom",
    "FalseLiteral",
    "Formula",
    "FormulaError",
    "NegAtom",
    "Not",
    "Or",
    "Release",
    "Run",
    "TrueLiteral",
    "Until",
    "always",
    "conj",
    "disj",
    "eventually",
    "format_formula",
    "horizon",
    "is_nnf",
    "parse",
    "robustness",
    "same_formula",
    "satisfies",
    "to_nnf",
    "MEASURES",
    "RiskError",
    "RiskSpec",
    "drvar_violation_prob",
    "eval_risk",
    "Ensemble",
    "RiskAnd",
    "RiskLeaf",
    "RiskOr",
    "decompose",
    "evaluate_tree",
    "stl_risk",
    "tree_leaves",
    "LtvSystem",
    "PredicateSchedule",
    "TightenedPredicate",
    "mean_rollout",
    "prediction_covariance",
    "prediction_covariances",
    "stacked_dynamics",
    "tighten_formula",
    "tighten_predicate",
    "transition_matrix",
    "EncodedStl",
    "LpResult",
    "MilpError",
    "MilpModel",
    "MilpSolution",
    "ModelBuilder",
    "StlEncoder",
    "encode_deterministic_stl",
    "lp_string",
    "parse_lp",
    "solve_lp",
    "solve_milp",
    "write_lp",
    "ConfigError",
    "ExperimentConfig",
    "load_experiment_config",
    "load_system",
    "RunRecord",
    "mission_formula",
    "plan_window",
    "run_experiment",
    "shift_formula",
    "simulate_closed_loop",
    "__version__",
]
