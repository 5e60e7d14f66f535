"""Expectation-constrained training of log-linear models.

Log-linear classifiers and linear-chain CRFs trained from labeled data,
unlabeled data, and expectation constraints (target values or bounds on
auxiliary feature expectations), by alternating an information projection
of an auxiliary distribution onto the constraint set with a moment
projection of the model onto that distribution.  A generalized-expectation
penalty trainer and a purely supervised trainer are included as baselines.
"""
from .constraints import (AuxParams, BoundConstraint, ConstraintFeature,
                          ConstraintSpec, CustomCountFeature, PenaltyFamily,
                          RepetitionCountFeature, SelfTransitionFeature,
                          StartLabelFeature, TokenLabelFeature,
                          TransitionPredicateFeature, WordLabelFeature,
                          scale_targets)
from .data import (FeatureLayout, Instance, LabelSpace, ParamVector,
                   SequenceInstance, SparseFeatures)
from .dataio import (CLASSIFICATION, SEQUENCE, ChainSynthSpec, ClfSynthSpec,
                     Dataset, ExperimentReport, decode, evaluate,
                     load_checkpoint, parse_classification_file,
                     parse_constraints, parse_sequence_file,
                     report_from_pairs, save_checkpoint, synth_generate,
                     vote_predict, write_classification_file,
                     write_constraint_file, write_sequence_file)
from .errors import (AltprojError, ConfigError, DataError, InvariantError,
                     OptimizationError, RoutingError, StateSpaceError)
from .ge import GETerm, ge_objective, ge_train, terms_from_bounds
from .gibbs import SampleEstimate, SamplerConfig, gibbs_expectations
from .kernels import BACKEND
from .models import (chain_posterior, classify_posterior,
                     supervised_loss_and_gradient, viterbi)
from .projections import (APState, TrainConfig, ap_train, i_projection,
                          joint_objective, m_projection, supervised_train)
from .timing import gradient_time_slope, per_sequence_gradient_seconds

__version__ = "0.1.0"

__all__ = [
    "APState", "AltprojError", "AuxParams", "BACKEND", "BoundConstraint",
    "CLASSIFICATION", "ChainSynthSpec", "ClfSynthSpec", "ConfigError",
    "ConstraintFeature", "ConstraintSpec", "CustomCountFeature", "DataError",
    "Dataset", "ExperimentReport", "FeatureLayout", "GETerm", "Instance",
    "InvariantError", "LabelSpace", "OptimizationError", "ParamVector",
    "PenaltyFamily", "RepetitionCountFeature", "RoutingError",
    "SEQUENCE", "SampleEstimate", "SamplerConfig", "SelfTransitionFeature",
    "SequenceInstance", "SparseFeatures", "StartLabelFeature",
    "StateSpaceError", "TokenLabelFeature", "TrainConfig",
    "TransitionPredicateFeature", "WordLabelFeature", "__version__",
    "ap_train", "chain_posterior", "classify_posterior", "decode",
    "evaluate", "ge_objective", "ge_train", "gibbs_expectations",
    "gradient_time_slope", "i_projection", "joint_objective",
    "load_checkpoint", "m_projection", "parse_classification_file",
    "parse_constraints", "parse_sequence_file",
    "per_sequence_gradient_seconds", "report_from_pairs", "save_checkpoint",
    "scale_targets", "supervised_loss_and_gradient", "supervised_train",
    "synth_generate", "terms_from_bounds", "viterbi", "vote_predict",
    "write_classification_file", "write_constraint_file",
    "write_sequence_file",
]
