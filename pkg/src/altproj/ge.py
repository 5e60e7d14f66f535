"""Expectation-matching baseline trainer for the flat classifier.

Adds squared penalties ``weight * (u - sum_j E_p[f'])**2`` on model
expectations of auxiliary features to the supervised objective and fits the
weights by quasi-Newton descent.  The penalty gradient is assembled from
per-instance covariances between the penalized feature and every model
feature, computed in closed form from the label posteriors.

Only flat classification is supported.  The same covariance for a chain
model needs pairwise marginals over every (feature, constraint) position
pair -- cubic in the label count for node constraints and quartic for
transition constraints -- so structured tasks go through the
coordinate-descent trainer in ``projections`` instead.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .constraints import BoundConstraint, ConstraintFeature, WordLabelFeature
from .data import Instance, ParamVector
from .errors import ConfigError, DataError
from .models import dataset_matrix, softmax_rows, supervised_loss_and_gradient
from .projections import TrainConfig, _check_result

_EXACT_KINDS = ("word-label", "custom-count")


@dataclass(frozen=True)
class GETerm:
    """One squared expectation penalty: weight * (u - total expectation)^2.

    ``u`` is the target for the expectation summed over the whole unlabeled
    set, and ``weight`` multiplies the squared gap in the objective.
    """

    feature: ConstraintFeature
    u: float
    weight: float = 1.0

    def __post_init__(self):
        if self.feature.kind not in _EXACT_KINDS:
            raise ConfigError(
                f"{self.feature.kind!r} features need structured inference; "
                "expectation-matching handles word-label and custom-count "
                "features only")
        if not np.isfinite(self.u):
            raise ConfigError("target must be finite")
        if not np.isfinite(self.weight) or self.weight < 0:
            raise ConfigError("term weight must be finite and non-negative")


def terms_from_bounds(bounds, gamma: float = 1.0):
    """Map squared-penalty bound constraints onto GE terms.

    A bound with curvature ``beta`` contributes ``(u - E)^2 / (2 beta)`` to
    the constrained objective, so the matching term weight is
    ``gamma / (2 beta)``.  Interval and one-sided penalties have no squared
    counterpart and are rejected.
    """
    terms = []
    for b in bounds:
        if b.penalty.kind != "l2":
            raise ConfigError(
                f"cannot express a {b.penalty.kind!r} penalty as a "
                "squared expectation term")
        if b.instance_index is not None:
            raise ConfigError("per-instance bounds have no squared-term "
                              "equivalent over the full unlabeled set")
        terms.append(GETerm(b.feature, b.u, gamma / (2.0 * b.penalty.beta)))
    return terms


def _term_value_matrix(feature, instances, n_labels):
    """(n, K) matrix of the feature's value on each instance-label pair."""
    if isinstance(feature, WordLabelFeature):
        col = np.array([feature.trigger_value(i) for i in instances])
        out = np.zeros((len(instances), n_labels))
        out[:, feature.label] = col
        return out
    return np.array([[feature.value(inst, k) for k in range(n_labels)]
                     for inst in instances], dtype=float)


class _GEEvaluator:
    """Objective/gradient closure over cached design matrices."""

    def __init__(self, terms, labeled, unlabeled, layout, alpha):
        for inst in list(labeled) + list(unlabeled):
            if not isinstance(inst, Instance):
                raise DataError("expectation-matching training is defined "
                                "for classification instances only")
        self.terms = list(terms)
        self.labeled = list(labeled)
        self.layout = layout
        self.alpha = alpha
        self.n_unlabeled = len(unlabeled)
        if unlabeled:
            self.X = dataset_matrix(unlabeled, layout.n_inputs)
            self.F = [_term_value_matrix(t.feature, unlabeled,
                                         layout.n_labels)
                      for t in self.terms]

    def penalty_value_and_gradient(self, weights):
        K, V = self.layout.n_labels, self.layout.n_inputs
        val = 0.0
        grad = np.zeros(self.layout.size)
        if not self.terms or self.n_unlabeled == 0:
            return val, grad
        W = weights[:K * V].reshape(K, V)
        Q, _ = softmax_rows(np.asarray(self.X @ W.T))
        for term, F in zip(self.terms, self.F):
            e_inst = (Q * F).sum(axis=1)
            gap = term.u - float(e_inst.sum())
            val += term.weight * gap * gap
            # d(total expectation)/dw_{kv} is the summed per-instance
            # covariance between f' and the (k, v) conjunction
            M = Q * (F - e_inst[:, None])
            cov = np.asarray((self.X.T @ M).T)
            grad[:K * V] += (-2.0 * term.weight * gap) * cov.ravel()
        return val, grad

    def __call__(self, weights):
        lam = ParamVector(weights, self.layout)
        val, grad = supervised_loss_and_gradient(lam, self.labeled,
                                                 self.alpha)
        pval, pgrad = self.penalty_value_and_gradient(weights)
        return val + pval, grad + pgrad


def ge_objective(lam, terms, labeled, unlabeled, alpha) -> float:
    """Supervised loss plus the summed squared expectation penalties."""
    ev = _GEEvaluator(terms, labeled, unlabeled, lam.layout, alpha)
    return float(ev(lam.weights)[0])


def ge_gradient(lam, terms, unlabeled) -> np.ndarray:
    """Gradient of the penalty part alone, in covariance form."""
    ev = _GEEvaluator(terms, [], unlabeled, lam.layout, alpha=0.0)
    return ev.penalty_value_and_gradient(lam.weights)[1]


def ge_train(terms, labeled, unlabeled, layout, config: TrainConfig,
             lam0=None) -> ParamVector:
    """Fit classifier weights under expectation penalties by L-BFGS."""
    ev = _GEEvaluator(terms, labeled, unlabeled, layout, config.alpha)
    x0 = np.zeros(layout.size) if lam0 is None else lam0.weights.copy()
    res = minimize(ev, x0, jac=True, method="L-BFGS-B",
                   options={"maxiter": config.inner_max_iters,
                            "gtol": config.inner_tol, "ftol": 1e-15})
    _check_result(res, "expectation-matching fit", gtol=config.inner_tol)
    out = ParamVector(res.x.copy(), layout)
    out.check_finite()
    return out
