"""Constraint features, penalty families, and target scaling.

A constraint couples an auxiliary feature f'(x, y) with a target value u and
a penalty family.  Most feature kinds decompose over nodes/edges of a label
chain (or over the single label of a classification instance), so their
expectations come straight from exact marginals; the segment-repetition and
custom kinds do not decompose and must be estimated by sampling.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, ClassVar, Sequence

import numpy as np

from .data import Instance, SequenceInstance, as_label_array
from .errors import ConfigError, DataError, InvariantError, RoutingError

log = logging.getLogger(__name__)

PENALTY_KINDS = ("l2", "l1box", "affine")
TARGET_MODES = ("proportion", "count")
SCOPES = ("per-dataset", "per-instance")


@dataclass(frozen=True)
class PenaltyFamily:
    """Penalty U on the constraint expectation, named by its kind.

    l2:     U(v) = (u - v)^2 / (2 beta)
    l1box:  U(v) = 0 if |u - v| <= beta else infinity (box half-width beta)
    affine: U(v) = 0 if v <= u else infinity (one-sided bound; beta unused)
    """

    kind: str
    beta: float = 0.0

    def __post_init__(self):
        if self.kind not in PENALTY_KINDS:
            raise ConfigError(f"unknown penalty kind {self.kind!r}")
        if self.kind == "l2" and self.beta <= 0:
            raise ConfigError("l2 penalty needs beta > 0")
        if self.kind == "l1box" and self.beta < 0:
            raise ConfigError("l1box penalty needs beta >= 0")


def conjugate_value_and_subgradient(penalty: PenaltyFamily, mu: float,
                                    u: float):
    """Convex conjugate U*(-mu) of the penalty and d/dmu U*(-mu).

    l2:     U*(-mu) = -mu u + (beta/2) mu^2
    l1box:  U*(-mu) = -mu u + beta |mu|   (at mu=0 the minimum-norm
            subgradient element of [-u-beta, -u+beta] is returned)
    affine: U*(-mu) = -mu u on the admissible half-line
    """
    mu = float(mu)
    u = float(u)
    if penalty.kind == "l2":
        return (-mu * u + 0.5 * penalty.beta * mu * mu,
                -u + penalty.beta * mu)
    if penalty.kind == "l1box":
        value = -mu * u + penalty.beta * abs(mu)
        if mu > 0:
            sub = -u + penalty.beta
        elif mu < 0:
            sub = -u - penalty.beta
        else:
            sub = float(np.clip(0.0, -u - penalty.beta, -u + penalty.beta))
        return value, sub
    # affine
    return -mu * u, -u


# ---------------------------------------------------------------------------
# feature kinds


@dataclass(frozen=True)
class ConstraintFeature:
    """Base auxiliary feature; subclasses define the actual value."""

    fid: int
    scope: str = "per-dataset"

    kind: ClassVar[str] = "abstract"
    factored: ClassVar[bool] = True      # expectation exact from marginals
    for_sequences: ClassVar[bool] = True

    def __post_init__(self):
        if self.fid < 0:
            raise DataError("constraint feature id must be non-negative")
        if self.scope not in SCOPES:
            raise DataError(f"unknown scope {self.scope!r}")

    # -- interface ---------------------------------------------------------
    def supports(self, inst) -> bool:
        if isinstance(inst, SequenceInstance):
            return self.for_sequences
        return not self.for_sequences

    def check_instance(self, inst):
        if not self.supports(inst):
            raise DataError(
                f"{self.kind} feature does not apply to {type(inst).__name__}")

    def is_exact_for(self, inst) -> bool:
        """True when marginals determine the expectation exactly."""
        return self.factored or isinstance(inst, Instance)

    def applies_to(self, inst) -> bool:
        return self.unit_count(inst) > 0

    def unit_count(self, inst) -> float:
        """Number of applicable units this instance contributes (scaling)."""
        raise NotImplementedError

    def value(self, inst, y) -> float:
        raise NotImplementedError

    def expectation(self, post, inst) -> float:
        raise RoutingError(
            f"{self.kind} feature has no closed-form expectation; "
            "use the sampling estimator")

    def contribute_scores(self, inst, weight, node, edge):
        """Add weight * f' contributions to factored score tables.

        Classification instances pass their (K,) score vector as ``node``
        with ``edge=None``.
        """
        raise RoutingError(f"{self.kind} feature is not factored")


@dataclass(frozen=True)
class WordLabelFeature(ConstraintFeature):
    """Fires when a trigger input feature occurs with a particular label.

    With ``normalize`` the value is 1/c where c is the trigger's count in
    the instance, keeping the per-instance value in [0, 1].
    """

    trigger: int = 0
    label: int = 0
    normalize: bool = True

    kind: ClassVar[str] = "word-label"
    for_sequences: ClassVar[bool] = False

    def trigger_value(self, inst: Instance) -> float:
        c = inst.features.get(self.trigger)
        if c <= 0:
            return 0.0
        return 1.0 / c if self.normalize else 1.0

    def unit_count(self, inst) -> float:
        return 1.0 if inst.features.get(self.trigger) > 0 else 0.0

    def value(self, inst, y) -> float:
        self.check_instance(inst)
        return self.trigger_value(inst) if int(y) == self.label else 0.0

    def expectation(self, post, inst) -> float:
        return float(post.probs[self.label]) * self.trigger_value(inst)

    def contribute_scores(self, inst, weight, node, edge):
        node[self.label] += weight * self.trigger_value(inst)


@dataclass(frozen=True)
class CustomCountFeature(ConstraintFeature):
    """User-supplied value function over a full assignment.

    Exact for classification (K terms); sampled for sequences.
    """

    fn: Callable = None
    name: str = "custom"

    kind: ClassVar[str] = "custom-count"
    factored: ClassVar[bool] = False

    def supports(self, inst) -> bool:
        return True

    def unit_count(self, inst) -> float:
        return 1.0

    def value(self, inst, y) -> float:
        return float(self.fn(inst, y))

    def expectation(self, post, inst) -> float:
        if isinstance(inst, SequenceInstance):
            raise RoutingError("custom-count over sequences needs sampling")
        return float(sum(post.probs[k] * self.fn(inst, k)
                         for k in range(post.probs.size)))

    def contribute_scores(self, inst, weight, node, edge):
        if isinstance(inst, SequenceInstance):
            raise RoutingError("custom-count over sequences is not factored")
        for k in range(node.size):
            node[k] += weight * self.fn(inst, k)


@dataclass(frozen=True)
class TokenLabelFeature(ConstraintFeature):
    """Counts positions where a trigger feature occurs with a given label."""

    trigger: int = 0
    label: int = 0

    kind: ClassVar[str] = "token-label"

    def positions(self, inst: SequenceInstance):
        return [t for t, f in enumerate(inst.positions)
                if f.get(self.trigger) != 0.0]

    def unit_count(self, inst) -> float:
        return float(len(self.positions(inst)))

    def value(self, inst, y) -> float:
        self.check_instance(inst)
        y = as_label_array(y)
        return float(sum(1 for t in self.positions(inst)
                         if y[t] == self.label))

    def expectation(self, post, inst) -> float:
        return float(sum(post.node_marginals[t, self.label]
                         for t in self.positions(inst)))

    def contribute_scores(self, inst, weight, node, edge):
        for t in self.positions(inst):
            node[t, self.label] += weight


@dataclass(frozen=True)
class StartLabelFeature(ConstraintFeature):
    """Indicator that a sequence starts with a given label."""

    label: int = 0

    kind: ClassVar[str] = "start-label"

    def unit_count(self, inst) -> float:
        return 1.0

    def value(self, inst, y) -> float:
        self.check_instance(inst)
        return 1.0 if as_label_array(y)[0] == self.label else 0.0

    def expectation(self, post, inst) -> float:
        return float(post.node_marginals[0, self.label])

    def contribute_scores(self, inst, weight, node, edge):
        node[0, self.label] += weight


@dataclass(frozen=True)
class SelfTransitionFeature(ConstraintFeature):
    """Counts adjacent positions sharing a label."""

    kind: ClassVar[str] = "self-transition"

    def unit_count(self, inst) -> float:
        return float(len(inst) - 1)

    def value(self, inst, y) -> float:
        self.check_instance(inst)
        y = as_label_array(y)
        return float((y[1:] == y[:-1]).sum())

    def expectation(self, post, inst) -> float:
        em = post.edge_marginals
        return float(np.trace(em, axis1=1, axis2=2).sum()) if em.size else 0.0

    def contribute_scores(self, inst, weight, node, edge):
        if edge is not None and edge.size:
            K = node.shape[1]
            idx = np.arange(K)
            edge[:, idx, idx] += weight


@dataclass(frozen=True)
class TransitionPredicateFeature(ConstraintFeature):
    """Counts label changes entering positions where a predicate holds.

    The predicate is the presence (or, with ``holds=False``, the absence)
    of a named input feature at the target position t >= 1; the feature
    counts those t with y[t-1] != y[t].
    """

    predicate: int = 0
    holds: bool = True

    kind: ClassVar[str] = "transition-on-predicate"

    def positions(self, inst: SequenceInstance):
        return [t for t in range(1, len(inst))
                if (inst.positions[t].get(self.predicate) != 0.0) == self.holds]

    def unit_count(self, inst) -> float:
        return float(len(self.positions(inst)))

    def value(self, inst, y) -> float:
        self.check_instance(inst)
        y = as_label_array(y)
        return float(sum(1 for t in self.positions(inst) if y[t - 1] != y[t]))

    def expectation(self, post, inst) -> float:
        em = post.edge_marginals
        total = 0.0
        for t in self.positions(inst):
            total += 1.0 - float(np.trace(em[t - 1]))
        return total

    def contribute_scores(self, inst, weight, node, edge):
        K = node.shape[1]
        idx = np.arange(K)
        for t in self.positions(inst):
            edge[t - 1] += weight
            edge[t - 1, idx, idx] -= weight


@dataclass(frozen=True)
class RepetitionCountFeature(ConstraintFeature):
    """Segment re-entries: (#maximal constant segments) - (#distinct labels).

    Zero exactly when no label occurs in two separate segments; not
    factored, so expectations go through the sampling estimator.
    """

    kind: ClassVar[str] = "repetition-count"
    factored: ClassVar[bool] = False

    def unit_count(self, inst) -> float:
        return 1.0

    def value(self, inst, y) -> float:
        self.check_instance(inst)
        y = as_label_array(y)
        segments = 1 + int((y[1:] != y[:-1]).sum())
        return float(segments - np.unique(y).size)


FEATURE_KINDS = {cls.kind: cls for cls in
                 (WordLabelFeature, TokenLabelFeature, StartLabelFeature,
                  SelfTransitionFeature, TransitionPredicateFeature,
                  RepetitionCountFeature, CustomCountFeature)}


# ---------------------------------------------------------------------------
# specs, scaling, bound constraints


@dataclass(frozen=True)
class ConstraintSpec:
    """A constraint as declared: feature, raw target, penalty."""

    feature: ConstraintFeature
    target: float
    target_mode: str = "proportion"
    penalty: PenaltyFamily = field(default_factory=lambda: PenaltyFamily("l2", 1.0))

    def __post_init__(self):
        if self.target_mode not in TARGET_MODES:
            raise ConfigError(f"unknown target mode {self.target_mode!r}")
        if self.target_mode == "proportion" and not (0.0 <= self.target <= 1.0):
            raise ConfigError("proportion targets must lie in [0, 1]")
        if not np.isfinite(self.target):
            raise ConfigError("constraint target must be finite")


@dataclass(frozen=True)
class BoundConstraint:
    """A constraint bound to its data: scaled target, resolved scope.

    ``instance_index`` is None for per-dataset constraints; per-instance
    constraints expand into one bound constraint per applicable instance,
    each carrying its own dual coordinate.
    """

    feature: ConstraintFeature
    penalty: PenaltyFamily
    u: float
    instance_index: int | None = None

    @property
    def is_affine(self) -> bool:
        return self.penalty.kind == "affine"


@dataclass
class AuxParams:
    """Dual coordinates of the auxiliary distribution, one per bound constraint.

    ``mu[g]`` multiplies constraint feature g inside the auxiliary
    distribution's exponent.  Entries for affine (upper-bound) penalties stay
    <= 0 at all times: they can only push the expectation down toward the
    bound, and the conventional non-negative multiplier is ``nu = -mu``.
    """

    mu: np.ndarray
    affine_mask: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.affine_mask = np.asarray(self.affine_mask, dtype=bool)
        if self.mu.shape != self.affine_mask.shape:
            raise ConfigError("dual vector and affine mask sizes disagree")
        self.check()

    @classmethod
    def zeros(cls, bounds: Sequence[BoundConstraint]) -> "AuxParams":
        mask = np.array([b.is_affine for b in bounds], dtype=bool)
        return cls(np.zeros(len(bounds)), mask)

    @property
    def size(self) -> int:
        return self.mu.size

    def copy(self) -> "AuxParams":
        return AuxParams(self.mu.copy(), self.affine_mask.copy())

    def check(self):
        if not np.all(np.isfinite(self.mu)):
            raise InvariantError("non-finite dual value")
        if np.any(self.mu[self.affine_mask] > 0):
            raise InvariantError("affine dual escaped its sign constraint")


def dual_vector(mu, n_bounds: int) -> np.ndarray:
    """Coerce AuxParams | array | None into a validated (n_bounds,) array."""
    if mu is None:
        return np.zeros(n_bounds)
    vec = np.asarray(getattr(mu, "mu", mu), dtype=np.float64)
    if vec.shape != (n_bounds,):
        raise ConfigError(
            f"dual vector has shape {vec.shape}, expected ({n_bounds},)")
    return vec


def aux_score_tables(params, weighted_features, inst):
    """Score tables of the auxiliary distribution q ∝ exp(lam·f + sum w·f').

    ``weighted_features`` is an iterable of (feature, weight) pairs whose
    factored contributions are added to the model's score tables.  For
    classification instances the result is a (K,) score vector with edge
    table None; unfactored features must be excluded by the caller (they
    are handled by sampling).
    """
    from .models import chain_score_tables, label_scores

    if isinstance(inst, Instance):
        node = label_scores(params, inst).copy()
        for feature, weight in weighted_features:
            if weight != 0.0:
                feature.contribute_scores(inst, weight, node, None)
        return node, None
    node, edge = chain_score_tables(params, inst)
    for feature, weight in weighted_features:
        if weight != 0.0:
            feature.contribute_scores(inst, weight, node, edge)
    return node, edge


def evaluate_constraint(feature: ConstraintFeature, inst, y) -> float:
    """f'(x, y) for a full assignment."""
    if not feature.supports(inst):
        raise DataError(
            f"{feature.kind} feature does not apply to {type(inst).__name__}")
    return feature.value(inst, y)


def expected_constraint(feature: ConstraintFeature, post, inst) -> float:
    """E[f'(x, y)] from exact marginals; RoutingError for unfactored kinds."""
    if not feature.supports(inst):
        raise DataError(
            f"{feature.kind} feature does not apply to {type(inst).__name__}")
    if not feature.is_exact_for(inst):
        raise RoutingError(
            f"{feature.kind} expectation is not marginal-computable; "
            "use the sampling estimator")
    return feature.expectation(post, inst)


def scale_targets(specs: Sequence[ConstraintSpec], instances) -> list[BoundConstraint]:
    """Resolve raw specs against a dataset into bound constraints.

    Proportion targets are multiplied by the number of applicable units in
    the data they bind to (documents containing the trigger, token
    occurrences, transition slots, ...); count targets pass through.
    l1box half-widths scale with proportion targets, since the box lives in
    target units.  Constraints with no applicable units are dropped with a
    warning.  Per-instance specs expand into one bound constraint per
    applicable instance.
    """
    instances = list(instances)
    bound: list[BoundConstraint] = []
    for spec in specs:
        feat = spec.feature
        if instances and not feat.supports(instances[0]):
            raise DataError(
                f"{feat.kind} feature does not apply to "
                f"{type(instances[0]).__name__} data")
        if feat.scope == "per-dataset":
            units = float(sum(feat.unit_count(inst) for inst in instances))
            if units <= 0:
                warnings.warn(
                    f"constraint {feat.kind}#{feat.fid} matches no data; "
                    "deactivated", stacklevel=2)
                continue
            if spec.target_mode == "proportion":
                u = spec.target * units
                penalty = (PenaltyFamily("l1box", spec.penalty.beta * units)
                           if spec.penalty.kind == "l1box" else spec.penalty)
            else:
                u = spec.target
                penalty = spec.penalty
            bound.append(BoundConstraint(feat, penalty, u, None))
        else:
            expanded = 0
            for j, inst in enumerate(instances):
                units = feat.unit_count(inst)
                if units <= 0:
                    continue
                if spec.target_mode == "proportion":
                    u = spec.target * units
                    penalty = (PenaltyFamily("l1box", spec.penalty.beta * units)
                               if spec.penalty.kind == "l1box" else spec.penalty)
                else:
                    u = spec.target
                    penalty = spec.penalty
                bound.append(BoundConstraint(feat, penalty, u, j))
                expanded += 1
            if expanded == 0:
                warnings.warn(
                    f"constraint {feat.kind}#{feat.fid} matches no data; "
                    "deactivated", stacklevel=2)
    return bound
