"""Recursive, adaptive and cautious iterative learning control."""
from .ltv import (CostWeights, Dimensions, Horizon, LiftedModel, LtvModel, StructuralError, Trajectory,
                  TrialRecord, build_lifted, discretize_euler, error_norm, zero_phase_filter)
from .adapt import ModelBelief, RegressionDatum, LinkParams, broyden_update, lbr_update
from .cautious import CautiousPolicy, ExpectationTerms, cautious_backward_pass, expectation_terms, replay_update
from .experiment import ExperimentManifest, RunLog, compare_laws, emit_csv, run_experiment

__version__ = "0.1.0"

__all__ = [
    "CostWeights", "Dimensions", "Horizon", "LiftedModel", "LtvModel", "StructuralError", "Trajectory",
    "TrialRecord", "build_lifted", "discretize_euler", "error_norm", "zero_phase_filter",
    "ModelBelief", "RegressionDatum", "LinkParams", "broyden_update", "lbr_update",
    "CautiousPolicy", "ExpectationTerms", "cautious_backward_pass", "expectation_terms", "replay_update",
    "ExperimentManifest", "RunLog", "compare_laws", "emit_csv", "run_experiment",
]
