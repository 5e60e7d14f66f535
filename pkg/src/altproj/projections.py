"""Alternating-projections trainer.

The trainer minimizes one objective over two coordinate blocks: the model
weights lam and the constraint duals mu.  Each round first fits the duals so
the auxiliary distribution q ∝ p·exp(mu·f') meets the constraint targets
while staying close to the current model (the I-step, a concave dual
maximization), then refits the model weights against labeled data plus the
auxiliary expectations (the M-step, a convex fit).  Both steps run a smooth
bound-constrained quasi-Newton optimizer: l1-box duals are split into
differences of non-negative variables so their kink never meets the
optimizer, and upper-bound duals carry a (-inf, 0] box.

Objective bookkeeping: the recorded trace evaluates the joint objective with
q frozen at the distribution the last I-step produced.  Both step kinds then
minimize that same function over their own block, so the trace is
non-increasing by construction.  (Re-realizing q from (lam, mu) after a
model-weight update can move the value in either direction and is *not* the
coordinate-descent quantity; `joint_objective` still offers that
evaluation.)

A stochastic variant updates both blocks from one instance at a time with a
decaying step size; see `online_ap_step`.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from . import kernels
from .constraints import (AuxParams, BoundConstraint, ConstraintSpec,
                          CustomCountFeature, WordLabelFeature,
                          aux_score_tables, conjugate_value_and_subgradient,
                          dual_vector, scale_targets)
from .data import Instance, ParamVector, SequenceInstance, SparseFeatures
from .errors import (ConfigError, DataError, OptimizationError, RoutingError)
from .gibbs import (SamplerConfig, gibbs_expectations, path_feature_values,
                    split_constraint_terms)
from .models import (Posterior, add_expected_features, add_gold_features,
                     chain_score_tables, dataset_matrix, label_scores,
                     softmax_rows, softmax_with_logz)

log = logging.getLogger(__name__)

_SA_ITERS = 50          # inner iterations when the I-step runs on samples
_FEAS_TOL = 1e-9        # slack when scoring hard-constraint feasibility
_APPROX_SLACK = 0.05    # extra slack for sampled feasibility bookkeeping


@dataclass(frozen=True)
class TrainConfig:
    """Trainer settings shared by the batch and online modes.

    ``T`` counts alternating rounds in batch mode and full passes over the
    data in online mode.  ``n_total``/``n_labeled`` are only needed by
    online updates (they set the per-instance share of dataset-level
    targets and of the regularizers).  ``trace_every`` controls how often
    the online loop records the joint objective (0 = only once at the end).
    """

    alpha: float = 1.0
    gamma: float = 0.1
    T: int = 10
    inner_tol: float = 1e-6
    inner_max_iters: int = 500
    eta0: float = 0.1
    mode: str = "batch"
    seed: int = 0
    warm_start: bool = False
    n_total: int | None = None
    n_labeled: int | None = None
    sampler: SamplerConfig | None = None
    trace_every: int = 1

    def __post_init__(self):
        if self.alpha < 0 or self.gamma < 0:
            raise ConfigError("alpha and gamma must be non-negative")
        if self.T < 1:
            raise ConfigError("need at least one training round")
        if self.inner_tol <= 0:
            raise ConfigError("inner tolerance must be positive")
        if self.inner_max_iters < 1:
            raise ConfigError("inner iteration budget must be positive")
        if self.eta0 <= 0:
            raise ConfigError("initial learning rate must be positive")
        if self.mode not in ("batch", "online"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.trace_every < 0:
            raise ConfigError("trace_every must be non-negative")


@dataclass
class APState:
    """Trainer state: model weights, constraint duals, objective trace.

    In batch mode the trace holds two entries per round (one after each
    projection) of the frozen-q objective described in the module
    docstring; it never increases by more than 1e-8 per entry unless
    ``trace_approximate`` is set (sampled expectations break exactness).
    """

    lam: ParamVector
    mu: AuxParams
    iteration: int = 0
    objective_trace: list = field(default_factory=list)
    trace_approximate: bool = False


# ---------------------------------------------------------------------------
# auxiliary-distribution engines
#
# An engine caches everything about the unlabeled data that depends only on
# lam, and re-derives posteriors/estimates each time the duals move.  The
# classification engine is fully vectorized; the chain engine loops
# instances and routes those touched by non-factored constraints through the
# Gibbs estimator.


def _applicable_rows(bound: BoundConstraint, instances) -> list[int]:
    feat = bound.feature
    if bound.instance_index is not None:
        j = bound.instance_index
        if not 0 <= j < len(instances):
            raise ConfigError("bound constraint refers to a missing instance")
        inst = instances[j]
        return [j] if feat.supports(inst) and feat.applies_to(inst) else []
    return [j for j, inst in enumerate(instances)
            if feat.supports(inst) and feat.applies_to(inst)]


class _ClfEngine:
    """Vectorized auxiliary posteriors over a classification dataset."""

    approximate = False

    def __init__(self, lam, bounds, instances, clf_matrix=None):
        self.lam = lam
        self.bounds = list(bounds)
        self.instances = list(instances)
        layout = lam.layout
        self.K = layout.n_labels
        self.X = (clf_matrix if clf_matrix is not None
                  else dataset_matrix(self.instances, layout.n_inputs))
        self.S_base = np.asarray(self.X @ lam.node_matrix().T)
        _, self.log_z_base = softmax_rows(self.S_base)
        self.terms = []
        for b in self.bounds:
            rows = np.asarray(_applicable_rows(b, self.instances),
                              dtype=np.int64)
            feat = b.feature
            if rows.size == 0:
                self.terms.append(("word", rows, 0, np.zeros(0)))
            elif isinstance(feat, WordLabelFeature):
                tv = np.array([feat.trigger_value(self.instances[j])
                               for j in rows])
                self.terms.append(("word", rows, feat.label, tv))
            elif isinstance(feat, CustomCountFeature):
                vals = np.array([[float(feat.fn(self.instances[j], k))
                                  for k in range(self.K)] for j in rows])
                self.terms.append(("custom", rows, 0, vals))
            else:
                raise RoutingError(
                    f"{feat.kind} feature does not apply to classification")
        self.mu = None

    def set_duals(self, mu):
        self.mu = np.asarray(mu, dtype=np.float64).copy()
        S = self.S_base.copy()
        for g, (kind, rows, label, data) in enumerate(self.terms):
            w = self.mu[g]
            if w == 0.0 or rows.size == 0:
                continue
            if kind == "word":
                S[rows, label] += w * data
            else:
                S[rows] += w * data
        self.S = S
        self.Q, self.log_z_aux = softmax_rows(S)

    def expectations(self) -> np.ndarray:
        E = np.zeros(len(self.bounds))
        for g, (kind, rows, label, data) in enumerate(self.terms):
            if rows.size == 0:
                continue
            if kind == "word":
                E[g] = float(self.Q[rows, label] @ data)
            else:
                E[g] = float((self.Q[rows] * data).sum())
        return E

    def expectation_stderrs(self) -> np.ndarray:
        return np.zeros(len(self.bounds))

    def log_z_gap(self) -> float:
        return float(self.log_z_aux.sum() - self.log_z_base.sum())

    def kl_sum(self):
        value = float(self.mu @ self.expectations()) - self.log_z_gap()
        return value, False

    def sum_entropy(self) -> float:
        return float(self.log_z_aux.sum() - (self.Q * self.S).sum())

    def sum_q_features(self) -> np.ndarray:
        dense = np.zeros(self.lam.layout.size)
        node = np.asarray(self.X.T @ self.Q).T
        dense[: node.size] = node.ravel()
        return dense


class _ChainEngine:
    """Per-instance auxiliary posteriors over a sequence dataset."""

    def __init__(self, lam, bounds, instances, sampler=None, rngs=None):
        self.lam = lam
        self.bounds = list(bounds)
        self.instances = list(instances)
        self.sampler = sampler or SamplerConfig()
        self.base_tables = [chain_score_tables(lam, inst)
                            for inst in self.instances]
        self.base = [kernels.forward_backward(n_, e_)
                     for n_, e_ in self.base_tables]
        self.base_logz = np.array([b[2] for b in self.base])

        self.applicable = [[] for _ in self.instances]
        for g, b in enumerate(self.bounds):
            for j in _applicable_rows(b, self.instances):
                self.applicable[j].append(g)
        self.affected = [j for j, gs in enumerate(self.applicable) if gs]
        self.sampled_set = {
            j for j in self.affected
            if any(not self.bounds[g].feature.is_exact_for(self.instances[j])
                   for g in self.applicable[j])}
        # one persistent generator per sampled instance so repeated
        # re-realizations draw fresh sweeps deterministically
        self.rngs = rngs if rngs is not None else {}
        for j in self.sampled_set:
            self.rngs.setdefault(
                j, np.random.default_rng(self.sampler.seed ^ j))
        self.mu = None

    @property
    def approximate(self) -> bool:
        return bool(self.sampled_set)

    def set_duals(self, mu):
        self.mu = np.asarray(mu, dtype=np.float64).copy()
        self.posts = {}
        self.aux_tables = {}
        self.aux_logz = {}
        self.per_exp = {}
        self.ests = {}
        self._stats = {}
        for j in self.affected:
            inst = self.instances[j]
            if j in self.sampled_set:
                self.ests[j] = gibbs_expectations(
                    self.lam, self.mu, self.bounds, inst, self.sampler,
                    instance_index=j, rng=self.rngs[j])
                continue
            pairs = [(self.bounds[g].feature, self.mu[g])
                     for g in self.applicable[j]]
            node, edge = aux_score_tables(self.lam, pairs, inst)
            nm, em, lz = kernels.forward_backward(node, edge)
            post = Posterior(float(lz), node_marginals=nm, edge_marginals=em)
            self.posts[j] = post
            self.aux_tables[j] = (node, edge)
            self.aux_logz[j] = float(lz)
            self.per_exp[j] = {
                g: self.bounds[g].feature.expectation(post, inst)
                for g in self.applicable[j]}

    def expectations(self) -> np.ndarray:
        E = np.zeros(len(self.bounds))
        for j, exps in self.per_exp.items():
            for g, v in exps.items():
                E[g] += v
        for j, est in self.ests.items():
            for g in self.applicable[j]:
                E[g] += est.constraint_means[g]
        return E

    def expectation_stderrs(self) -> np.ndarray:
        """Monte Carlo noise of `expectations`, zero on exact coordinates."""
        var = np.zeros(len(self.bounds))
        for j, est in self.ests.items():
            for g in self.applicable[j]:
                var[g] += est.constraint_stderrs[g] ** 2
        return np.sqrt(var)

    def log_z_gap(self) -> float:
        if self.sampled_set:
            raise RoutingError("log-partition gap is exact only; this data "
                               "has sampled instances")
        return float(sum(self.aux_logz[j] - self.base_logz[j]
                         for j in self.affected))

    def _sampled_stats(self, j):
        """KL and entropy estimates for one sampled instance.

        Uses the identity E_q[exp(-(mu·f'))] = Z_base / Z_aux over the
        retained paths, so the log-partition ratio, the KL term, and the
        entropy all come from the same sample.
        """
        if j in self._stats:
            return self._stats[j]
        inst = self.instances[j]
        est = self.ests[j]
        paths = est.paths
        n, L = paths.shape
        factored, rep_w, customs, _ = split_constraint_terms(
            self.bounds, self.mu, inst, j)
        node, edge = aux_score_tables(self.lam, factored, inst)
        gather = node[np.arange(L)[None, :], paths].sum(axis=1)
        if L > 1:
            gather += edge[np.arange(L - 1)[None, :], paths[:, :-1],
                           paths[:, 1:]].sum(axis=1)
        delta = np.zeros(n)
        s_extra = np.zeros(n)
        for g in self.applicable[j]:
            w = self.mu[g]
            if w == 0.0:
                continue
            vals = path_feature_values(self.bounds[g].feature, inst, paths)
            delta += w * vals
            if not self.bounds[g].feature.is_exact_for(inst):
                s_extra += w * vals
        log_ratio = -(float(logsumexp(-delta)) - np.log(n))
        kl = float(delta.mean()) - log_ratio
        entropy = (self.base_logz[j] + log_ratio
                   - float((gather + s_extra).mean()))
        out = {"kl": kl, "entropy": entropy}
        self._stats[j] = out
        return out

    def kl_sum(self):
        total = 0.0
        for j, exps in self.per_exp.items():
            total += sum(self.mu[g] * v for g, v in exps.items())
            total -= self.aux_logz[j] - self.base_logz[j]
        for j in self.ests:
            total += self._sampled_stats(j)["kl"]
        return float(total), bool(self.sampled_set)

    def sum_entropy(self) -> float:
        total = 0.0
        for j, inst in enumerate(self.instances):
            if j in self.posts:
                post = self.posts[j]
                node, edge = self.aux_tables[j]
                e_score = float((post.node_marginals * node).sum()
                                + (post.edge_marginals * edge).sum())
                total += self.aux_logz[j] - e_score
            elif j in self.ests:
                total += self._sampled_stats(j)["entropy"]
            else:
                nm, em, lz = self.base[j]
                node, edge = self.base_tables[j]
                total += lz - float((nm * node).sum() + (em * edge).sum())
        return float(total)

    def sum_q_features(self) -> np.ndarray:
        layout = self.lam.layout
        dense = np.zeros(layout.size)
        for j, inst in enumerate(self.instances):
            if j in self.posts:
                add_expected_features(self.posts[j], inst, layout, dense)
            elif j in self.ests:
                feats = self.ests[j].model_features
                dense[feats.ids] += feats.values
            else:
                nm, em, lz = self.base[j]
                post = Posterior(float(lz), node_marginals=nm,
                                 edge_marginals=em)
                add_expected_features(post, inst, layout, dense)
        return dense


def _make_engine(lam, bounds, unlabeled, sampler, rngs=None, clf_matrix=None):
    if not unlabeled:
        raise ConfigError("no unlabeled instances to fit the duals against")
    chain = isinstance(unlabeled[0], SequenceInstance)
    for inst in unlabeled:
        if isinstance(inst, SequenceInstance) != chain:
            raise DataError("mixed instance types in one dataset")
    if chain:
        return _ChainEngine(lam, bounds, unlabeled, sampler, rngs)
    return _ClfEngine(lam, bounds, unlabeled, clf_matrix)


# ---------------------------------------------------------------------------
# auxiliary posterior (exact, factored path)


def aux_posterior(lam: ParamVector, mu, bounds, inst,
                  instance_index: int | None = None) -> Posterior:
    """Exact posterior of q ∝ exp(lam·f + mu·f') for one instance.

    Only constraints bound to ``instance_index`` (plus dataset-level ones)
    enter; with ``mu = 0`` or no applicable constraints this is exactly the
    model posterior.  Constraints whose feature does not decompose for this
    instance cannot be folded into score tables and raise RoutingError —
    use the sampling estimator instead.
    """
    mu = dual_vector(mu, len(bounds))
    pairs = []
    for g, b in enumerate(bounds):
        if b.instance_index is not None and b.instance_index != instance_index:
            continue
        if not b.feature.supports(inst) or not b.feature.applies_to(inst):
            continue
        if not b.feature.is_exact_for(inst):
            raise RoutingError(
                f"{b.feature.kind} feature does not decompose; use the "
                "sampling estimator")
        pairs.append((b.feature, mu[g]))
    node, edge = aux_score_tables(lam, pairs, inst)
    if isinstance(inst, Instance):
        probs, log_z = softmax_with_logz(node)
        return Posterior(log_z=log_z, probs=probs)
    nm, em, lz = kernels.forward_backward(node, edge)
    return Posterior(float(lz), node_marginals=nm, edge_marginals=em)


# ---------------------------------------------------------------------------
# I-projection


class _DualPack:
    """Maps duals onto smooth box-constrained optimizer variables.

    l2 duals pass through unconstrained; an l1-box dual splits into a
    difference of two non-negative variables so the |mu| kink never meets
    the smooth optimizer; affine duals carry a (-inf, 0] box.
    """

    def __init__(self, bounds):
        self.bounds = list(bounds)
        self.slots = []
        self.box = []
        n = 0
        for b in self.bounds:
            if b.penalty.kind == "l1box":
                self.slots.append((n, n + 1))
                self.box += [(0.0, None), (0.0, None)]
                n += 2
            elif b.penalty.kind == "affine":
                self.slots.append(n)
                self.box.append((None, 0.0))
                n += 1
            else:
                self.slots.append(n)
                self.box.append((None, None))
                n += 1
        self.n_vars = n

    def decode(self, x: np.ndarray) -> np.ndarray:
        mu = np.empty(len(self.bounds))
        for g, s in enumerate(self.slots):
            mu[g] = x[s[0]] - x[s[1]] if isinstance(s, tuple) else x[s]
        return mu

    def encode(self, mu: np.ndarray) -> np.ndarray:
        x = np.zeros(self.n_vars)
        for g, s in enumerate(self.slots):
            if isinstance(s, tuple):
                x[s[0]] = max(mu[g], 0.0)
                x[s[1]] = max(-mu[g], 0.0)
            else:
                x[s] = mu[g]
        return x


def _neg_dual(x, pack: _DualPack, engine):
    """Negated I-step dual objective and its gradient in packed variables.

    The dual maximizes sum_g psi_g(mu_g) - sum_j (log Z_aux - log Z_base);
    d(log-partition gap)/d(mu_g) is the auxiliary expectation of f'_g.
    """
    mu = pack.decode(x)
    engine.set_duals(mu)
    E = engine.expectations()
    val = engine.log_z_gap()
    gvars = np.zeros(pack.n_vars)
    for g, b in enumerate(pack.bounds):
        u, beta = b.u, b.penalty.beta
        s = pack.slots[g]
        if b.penalty.kind == "l1box":
            a_, b_ = x[s[0]], x[s[1]]
            val -= (a_ - b_) * u - beta * (a_ + b_)
            gvars[s[0]] = E[g] - (u - beta)
            gvars[s[1]] = -E[g] + (u + beta)
        elif b.penalty.kind == "affine":
            val -= mu[g] * u
            gvars[s] = E[g] - u
        else:
            val -= mu[g] * u - 0.5 * beta * mu[g] ** 2
            gvars[s] = E[g] - (u - beta * mu[g])
    return float(val), gvars


def _check_result(res, what: str, gtol: float | None = None):
    if not np.isfinite(res.fun):
        raise OptimizationError(f"{what} failed to converge: {res.message}")
    if res.status == 2:
        # a line-search stall at machine precision is convergence as long
        # as the gradient is already near the requested tolerance
        jmax = (float(np.max(np.abs(res.jac)))
                if getattr(res, "jac", None) is not None else np.inf)
        if gtol is None or not jmax <= 50 * gtol:
            raise OptimizationError(
                f"{what} failed to converge: {res.message}")
        log.info("%s stopped in the line search at max|grad| %.3g",
                 what, jmax)
    if res.status == 1:
        log.info("%s stopped at the inner iteration budget", what)


def _i_projection_exact(engine, bounds, config, mu0=None):
    pack = _DualPack(bounds)
    x0 = pack.encode(np.asarray(mu0, float)) if mu0 is not None \
        else np.zeros(pack.n_vars)
    res = minimize(_neg_dual, x0, args=(pack, engine), jac=True,
                   method="L-BFGS-B", bounds=pack.box,
                   options=dict(maxiter=config.inner_max_iters,
                                gtol=config.inner_tol, ftol=1e-15))
    _check_result(res, "dual fit", gtol=config.inner_tol)
    mu = pack.decode(res.x)
    engine.set_duals(mu)
    return AuxParams(mu, np.array([b.is_affine for b in bounds], dtype=bool))


def _i_projection_sampled(engine, bounds, config, mu0=None):
    """Projected stochastic ascent on the dual with decaying steps.

    Each iteration re-estimates the auxiliary expectations by Gibbs
    sampling (fresh sweeps from persistent per-instance generators), takes
    an ascent step, and projects affine duals back onto their half-line.
    """
    mu = np.zeros(len(bounds)) if mu0 is None else np.asarray(mu0, float).copy()
    affine = np.array([b.is_affine for b in bounds], dtype=bool)
    tail = []
    for k in range(_SA_ITERS):
        engine.set_duals(mu)
        E = engine.expectations()
        step = np.empty_like(mu)
        for g, b in enumerate(bounds):
            _, csub = conjugate_value_and_subgradient(b.penalty, mu[g], b.u)
            step[g] = -csub - E[g]
        mu += step / (k + 2.0)
        np.minimum(mu, 0.0, where=affine, out=mu)
        if k >= _SA_ITERS // 2:
            tail.append(mu.copy())
    mu = np.mean(tail, axis=0)      # tail averaging damps the sampling noise
    np.minimum(mu, 0.0, where=affine, out=mu)
    engine.set_duals(mu)
    return AuxParams(mu, affine)


def _fit_duals(lam, bounds, unlabeled, config, engine=None, mu0=None):
    if engine is None:
        engine = _make_engine(lam, bounds, unlabeled, config.sampler)
    if not bounds:
        engine.set_duals(np.zeros(0))
        return AuxParams.zeros(bounds), engine
    if engine.approximate:
        return _i_projection_sampled(engine, bounds, config, mu0), engine
    return _i_projection_exact(engine, bounds, config, mu0), engine


def i_projection(lam: ParamVector, bounds, unlabeled, config: TrainConfig,
                 mu0=None) -> AuxParams:
    """Fit the constraint duals at fixed model weights.

    Maximizes  sum_g psi_g(mu_g) - sum_j [log Z_aux(x_j) - log Z_lam(x_j)]
    where psi is mu·u - (beta/2)mu² for l2 penalties, mu·u - beta|mu| for
    l1-box penalties, and mu·u on mu ≤ 0 for upper bounds.  At the optimum
    the targets match the auxiliary expectations up to the penalty's slack.
    """
    bounds = list(bounds)
    mu0_vec = dual_vector(mu0, len(bounds)) if mu0 is not None else None
    duals, _ = _fit_duals(lam, bounds, list(unlabeled), config, mu0=mu0_vec)
    return duals


# ---------------------------------------------------------------------------
# M-projection


def _as_q_sum(q_expectations, layout) -> np.ndarray:
    if q_expectations is None:
        return np.zeros(layout.size)
    if isinstance(q_expectations, np.ndarray):
        if q_expectations.shape != (layout.size,):
            raise ConfigError("expectation vector does not match layout")
        return q_expectations
    dense = np.zeros(layout.size)
    for feats in q_expectations:
        dense[feats.ids] += feats.values
    return dense


class _MEvaluator:
    """Value and gradient of the (negated) M-step objective."""

    def __init__(self, labeled, unlabeled, layout, alpha, gamma, q_sum):
        self.layout = layout
        self.alpha = alpha
        self.gamma = gamma
        self.q_sum = q_sum
        self.labeled = list(labeled)
        self.unlabeled = list(unlabeled) if gamma > 0 else []
        self.clf = not layout.chain
        self.gold = np.zeros(layout.size)
        for inst in self.labeled:
            add_gold_features(inst, layout, self.gold)
        if self.clf:
            self.Xl = (dataset_matrix(self.labeled, layout.n_inputs)
                       if self.labeled else None)
            self.Xu = (dataset_matrix(self.unlabeled, layout.n_inputs)
                       if self.unlabeled else None)

    def __call__(self, w):
        layout = self.layout
        lam = ParamVector(w, layout)
        val = 0.5 * self.alpha * float(w @ w)
        grad = self.alpha * w - self.gold
        val -= float(w @ self.gold)
        if self.clf:
            W = lam.node_matrix()
            if self.labeled:
                S = np.asarray(self.Xl @ W.T)
                Q, lz = softmax_rows(S)
                val += float(lz.sum())
                grad += np.asarray(self.Xl.T @ Q).T.ravel()
            if self.unlabeled:
                S = np.asarray(self.Xu @ W.T)
                Q, lz = softmax_rows(S)
                val += self.gamma * (float(lz.sum()) - float(w @ self.q_sum))
                grad += self.gamma * (np.asarray(self.Xu.T @ Q).T.ravel()
                                      - self.q_sum)
        else:
            for inst in self.labeled:
                node, edge = chain_score_tables(lam, inst)
                nm, em, lz = kernels.forward_backward(node, edge)
                post = Posterior(float(lz), node_marginals=nm,
                                 edge_marginals=em)
                val += float(lz)
                add_expected_features(post, inst, layout, grad)
            if self.unlabeled:
                for inst in self.unlabeled:
                    node, edge = chain_score_tables(lam, inst)
                    nm, em, lz = kernels.forward_backward(node, edge)
                    post = Posterior(float(lz), node_marginals=nm,
                                     edge_marginals=em)
                    val += self.gamma * float(lz)
                    add_expected_features(post, inst, layout, grad,
                                          scale=self.gamma)
                val -= self.gamma * float(w @ self.q_sum)
                grad -= self.gamma * self.q_sum
        return val, grad


def m_projection(q_expectations, labeled, unlabeled, layout,
                 config: TrainConfig, lam0: ParamVector | None = None
                 ) -> ParamVector:
    """Fit model weights against gold features plus auxiliary expectations.

    Maximizes  sum_i [lam·f(x_i,y_i) - log Z(x_i)] - (alpha/2)||lam||²
             + gamma * sum_j [lam·E_q[f](x_j) - log Z(x_j)]
    so the model moves toward both the labeled data and the constraint-
    shaped expectations.  ``q_expectations`` is either a dense vector
    already summed over the unlabeled set or a sequence of per-instance
    sparse expectation vectors.
    """
    for inst in labeled:
        if (inst.label is None if isinstance(inst, Instance)
                else inst.labels is None):
            raise DataError("labeled set contains an unlabeled instance")
    q_sum = _as_q_sum(q_expectations, layout)
    ev = _MEvaluator(labeled, unlabeled, layout, config.alpha, config.gamma,
                     q_sum)
    x0 = lam0.weights.copy() if lam0 is not None else np.zeros(layout.size)
    res = minimize(ev, x0, jac=True, method="L-BFGS-B",
                   options=dict(maxiter=config.inner_max_iters,
                                gtol=config.inner_tol, ftol=1e-15))
    _check_result(res, "weight fit", gtol=config.inner_tol)
    return ParamVector(res.x.copy(), layout)


def supervised_train(labeled, layout, config: TrainConfig,
                     lam0: ParamVector | None = None) -> ParamVector:
    """Penalized conditional likelihood fit on labeled data alone."""
    return m_projection(None, labeled, [], layout,
                        replace(config, gamma=0.0), lam0)


# ---------------------------------------------------------------------------
# joint objective


def _labeled_loss(lam: ParamVector, labeled) -> float:
    """sum_i -log p(y_i | x_i) without any regularizer."""
    total = 0.0
    for inst in labeled:
        if isinstance(inst, Instance):
            if inst.label is None:
                raise DataError("labeled set contains an unlabeled instance")
            scores = label_scores(lam, inst)
            _, lz = softmax_with_logz(scores)
            total += lz - float(scores[inst.label])
        else:
            if inst.labels is None:
                raise DataError("labeled set contains an unlabeled sequence")
            node, edge = chain_score_tables(lam, inst)
            _, _, lz = kernels.forward_backward(node, edge)
            labels = np.asarray(inst.labels, dtype=np.int64)
            gold = float(node[np.arange(len(inst)), labels].sum())
            if len(inst) > 1:
                gold += float(lam.trans_matrix()[labels[:-1],
                                                 labels[1:]].sum())
            total += lz - gold
    return float(total)


def _sum_log_z(lam: ParamVector, instances, clf_matrix=None) -> float:
    if not instances:
        return 0.0
    if isinstance(instances[0], SequenceInstance):
        total = 0.0
        for inst in instances:
            node, edge = chain_score_tables(lam, inst)
            total += kernels.forward_backward(node, edge)[2]
        return float(total)
    X = (clf_matrix if clf_matrix is not None
         else dataset_matrix(instances, lam.layout.n_inputs))
    S = np.asarray(X @ lam.node_matrix().T)
    return float(softmax_rows(S)[1].sum())


def _penalty_value(bound: BoundConstraint, e: float, slack: float) -> float:
    u, beta = bound.u, bound.penalty.beta
    if bound.penalty.kind == "l2":
        return (u - e) ** 2 / (2.0 * beta)
    if bound.penalty.kind == "l1box":
        return 0.0 if abs(u - e) <= beta + slack else float("inf")
    return 0.0 if e <= u + slack else float("inf")


def _hard_penalty_sum(engine, bounds) -> float:
    """Sum of hard-family penalty values at the engine's expectations.

    Sampled expectations get a feasibility slack of three standard errors
    plus a floor — a sampled mean a fraction of a stderr past a hard bound
    is consistent with the bound holding.
    """
    if not bounds:
        return 0.0
    E = engine.expectations()
    if engine.approximate:
        slacks = (_FEAS_TOL + _APPROX_SLACK
                  + 3.0 * engine.expectation_stderrs())
    else:
        slacks = np.full(len(bounds), _FEAS_TOL)
    return float(sum(_penalty_value(b, E[g], slacks[g])
                     for g, b in enumerate(bounds)))


def joint_objective_flagged(lam: ParamVector, mu, bounds, labeled, unlabeled,
                            config: TrainConfig, engine=None):
    """Joint objective value plus a flag marking sampled (inexact) terms.

    Realizes q from (lam, mu), then returns
      sum_i -log p(y_i|x_i) + (alpha/2)||lam||²
      + gamma [ sum_j KL(q_j || p_j) + sum_g U_g(E_q[f'_g]) ]
    where hard penalty families contribute 0 when satisfied (within a tiny
    feasibility slack) and +inf when violated.
    """
    bounds = list(bounds)
    mu_vec = dual_vector(mu, len(bounds))
    val = _labeled_loss(lam, labeled) \
        + 0.5 * config.alpha * float(lam.weights @ lam.weights)
    approx = False
    if config.gamma > 0 and unlabeled:
        if engine is None:
            engine = _make_engine(lam, bounds, list(unlabeled),
                                  config.sampler)
        engine.set_duals(mu_vec)
        kl, approx = engine.kl_sum()
        u_sum = _hard_penalty_sum(engine, bounds)
        val += config.gamma * (kl + u_sum)
    return float(val), approx


def joint_objective(lam: ParamVector, mu, bounds, labeled, unlabeled,
                    config: TrainConfig) -> float:
    """See `joint_objective_flagged`; returns only the value."""
    return joint_objective_flagged(lam, mu, bounds, labeled, unlabeled,
                                   config)[0]


# ---------------------------------------------------------------------------
# batch trainer


@dataclass
class _Snapshot:
    """Everything the trace and the M-step need about a frozen q."""

    q_sum: np.ndarray
    e_vals: np.ndarray
    sum_entropy: float
    u_sum: float
    approximate: bool
    clf_matrix: object = None


def _take_snapshot(engine, bounds) -> _Snapshot:
    return _Snapshot(engine.sum_q_features(), engine.expectations(),
                     engine.sum_entropy(), _hard_penalty_sum(engine, bounds),
                     engine.approximate, getattr(engine, "X", None))


def _frozen_objective(lam: ParamVector, snap: _Snapshot | None, labeled,
                      unlabeled, config: TrainConfig) -> float:
    """Joint objective with q held at the last I-step's distribution."""
    val = _labeled_loss(lam, labeled) \
        + 0.5 * config.alpha * float(lam.weights @ lam.weights)
    if snap is not None:
        val += config.gamma * (
            -snap.sum_entropy - float(lam.weights @ snap.q_sum)
            + _sum_log_z(lam, unlabeled, snap.clf_matrix) + snap.u_sum)
    return float(val)


def ap_train(labeled, unlabeled, specs: Sequence[ConstraintSpec], layout,
             config: TrainConfig) -> APState:
    """Train by alternating projections (batch) or stochastic steps (online).

    Starts from zero weights and zero duals (or a supervised fit when
    ``config.warm_start`` is set), scales constraint targets against the
    unlabeled set, and runs ``config.T`` rounds.  Batch rounds append the
    frozen-q objective to the trace after each projection; the trace never
    increases unless sampled expectations are in play (then
    ``trace_approximate`` is set).  Works with an empty labeled set (the
    log-loss term drops) and, when ``gamma == 0``, reduces to supervised
    training with untouched duals.
    """
    labeled = list(labeled)
    unlabeled = list(unlabeled)
    if config.gamma > 0 and not unlabeled:
        raise ConfigError("gamma > 0 needs unlabeled data")
    bounds = scale_targets(specs, unlabeled) if unlabeled else []
    if config.mode == "online":
        return _ap_train_online(labeled, unlabeled, bounds, layout, config)

    lam = (supervised_train(labeled, layout, config)
           if config.warm_start and labeled else ParamVector.zeros(layout))
    mu = AuxParams.zeros(bounds)
    state = APState(lam, mu, 0, [])
    use_unlabeled = config.gamma > 0
    rngs: dict = {}
    clf_matrix = None
    if use_unlabeled and not isinstance(unlabeled[0], SequenceInstance):
        clf_matrix = dataset_matrix(unlabeled, layout.n_inputs)

    for t in range(1, config.T + 1):
        snap = None
        if use_unlabeled:
            engine = _make_engine(lam, bounds, unlabeled, config.sampler,
                                  rngs=rngs, clf_matrix=clf_matrix)
            if bounds:
                mu, engine = _fit_duals(lam, bounds, unlabeled, config,
                                        engine=engine, mu0=state.mu.mu)
            else:
                engine.set_duals(np.zeros(0))
            state.mu = mu
            snap = _take_snapshot(engine, bounds)
            state.trace_approximate |= snap.approximate
        state.objective_trace.append(
            _frozen_objective(lam, snap, labeled, unlabeled, config))

        lam = m_projection(snap.q_sum if snap is not None else None,
                           labeled, unlabeled if use_unlabeled else [],
                           layout, config, lam0=lam)
        state.lam = lam
        state.objective_trace.append(
            _frozen_objective(lam, snap, labeled, unlabeled, config))
        state.iteration = t
    return state


# ---------------------------------------------------------------------------
# online trainer


def online_ap_step(state: APState, inst, bounds, config: TrainConfig,
                   t: int, *, instance_index: int | None = None,
                   rng=None) -> APState:
    """One stochastic update at learning rate 1/(t + 1/eta0).

    A labeled instance moves the weights toward its gold features
    (f - E_p[f] - (alpha/n)·lam).  An unlabeled instance first updates the
    duals of the constraints it touches — dataset-level targets and their
    regularizers are allocated uniformly as u/(n-m) and beta·mu/(n-m),
    per-instance targets used whole — then moves the weights along
    gamma·(E_q[f] - E_p[f]) - (alpha/n)·lam, with q evaluated at the
    pre-update duals.  Mutates ``state`` in place and returns it.
    """
    if config.n_total is None or config.n_labeled is None:
        raise ConfigError("online updates need n_total and n_labeled")
    if t < 1:
        raise ConfigError("step index starts at 1")
    n, m = config.n_total, config.n_labeled
    eta = 1.0 / (t + 1.0 / config.eta0)
    lam = state.lam
    layout = lam.layout
    shrink = 1.0 - eta * config.alpha / n

    is_labeled = (inst.label is not None if isinstance(inst, Instance)
                  else inst.labels is not None)
    if is_labeled:
        direction = np.zeros(layout.size)
        add_gold_features(inst, layout, direction)
        post = _model_posterior(lam, inst)
        add_expected_features(post, inst, layout, direction, scale=-1.0)
        lam.weights *= shrink
        lam.weights += eta * direction
        return state

    mu = state.mu.mu
    factored, _, _, applicable = split_constraint_terms(
        bounds, mu, inst, instance_index)
    sampled = any(not bounds[g].feature.is_exact_for(inst)
                  for g in applicable)
    direction = np.zeros(layout.size)
    if sampled:
        est = gibbs_expectations(lam, mu, bounds, inst,
                                 config.sampler or SamplerConfig(),
                                 instance_index=instance_index or 0, rng=rng)
        e_inst = est.constraint_means
        direction[est.model_features.ids] += est.model_features.values
    else:
        pairs = [(bounds[g].feature, mu[g]) for g in applicable]
        node, edge = aux_score_tables(lam, pairs, inst)
        if isinstance(inst, Instance):
            probs, lz = softmax_with_logz(node)
            q_post = Posterior(lz, probs=probs)
        else:
            nm, em, lz = kernels.forward_backward(node, edge)
            q_post = Posterior(float(lz), node_marginals=nm,
                               edge_marginals=em)
        e_inst = np.zeros(len(bounds))
        for g in applicable:
            e_inst[g] = bounds[g].feature.expectation(q_post, inst)
        add_expected_features(q_post, inst, layout, direction)
    post = _model_posterior(lam, inst)
    add_expected_features(post, inst, layout, direction, scale=-1.0)

    # dataset-level duals move on every unlabeled visit (their target and
    # regularizer are spread as u/(n-m) and beta*mu/(n-m), with E_q = 0 when
    # the feature does not fire here); per-instance duals only on their own
    # instance, with the whole target.
    applicable = set(applicable)
    for g, b in enumerate(bounds):
        if b.instance_index is None:
            if not b.feature.supports(inst):
                continue
            denom = n - m
            if denom < 1:
                raise ConfigError("dataset-level constraint with no "
                                  "unlabeled share (n - m < 1)")
        else:
            if g not in applicable:
                continue
            denom = 1.0
        _, csub = conjugate_value_and_subgradient(b.penalty, mu[g], b.u)
        mu[g] += eta * (-csub / denom - e_inst[g])
        if b.is_affine and mu[g] > 0.0:
            mu[g] = 0.0

    lam.weights *= shrink
    lam.weights += eta * config.gamma * direction
    return state


def _model_posterior(lam: ParamVector, inst) -> Posterior:
    if isinstance(inst, Instance):
        probs, lz = softmax_with_logz(label_scores(lam, inst))
        return Posterior(lz, probs=probs)
    node, edge = chain_score_tables(lam, inst)
    nm, em, lz = kernels.forward_backward(node, edge)
    return Posterior(float(lz), node_marginals=nm, edge_marginals=em)


def _ap_train_online(labeled, unlabeled, bounds, layout,
                     config: TrainConfig) -> APState:
    n_total = config.n_total if config.n_total is not None \
        else len(labeled) + len(unlabeled)
    n_labeled = config.n_labeled if config.n_labeled is not None \
        else len(labeled)
    config = replace(config, n_total=n_total, n_labeled=n_labeled)

    lam = (supervised_train(labeled, layout, config)
           if config.warm_start and labeled else ParamVector.zeros(layout))
    state = APState(lam, AuxParams.zeros(bounds), 0, [])
    stream = [(inst, None) for inst in labeled] \
        + [(inst, j) for j, inst in enumerate(unlabeled)]
    order_rng = np.random.default_rng(config.seed)
    sampler = config.sampler or SamplerConfig()
    sample_rngs: dict = {}

    # the step index fed to the rate schedule advances per epoch, so one
    # pass sees a constant rate and 1/(t + 1/eta0) decays across passes
    for epoch in range(1, config.T + 1):
        for idx in order_rng.permutation(len(stream)):
            inst, j = stream[idx]
            rng = None
            if j is not None and any(
                    not b.feature.is_exact_for(inst) for g, b in
                    enumerate(bounds)
                    if (b.instance_index is None or b.instance_index == j)
                    and b.feature.supports(inst) and b.feature.applies_to(inst)):
                rng = sample_rngs.setdefault(
                    j, np.random.default_rng(sampler.seed ^ j))
            online_ap_step(state, inst, bounds, config, epoch,
                           instance_index=j, rng=rng)
        state.iteration = epoch
        if config.trace_every and epoch % config.trace_every == 0:
            val, approx = joint_objective_flagged(
                state.lam, state.mu, bounds, labeled, unlabeled, config)
            state.objective_trace.append(val)
            state.trace_approximate |= approx
    if not state.objective_trace:
        val, approx = joint_objective_flagged(
            state.lam, state.mu, bounds, labeled, unlabeled, config)
        state.objective_trace.append(val)
        state.trace_approximate |= approx
    return state
