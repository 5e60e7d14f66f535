"""Sampled expectations for auxiliary distributions with global features.

Most constraint features decompose over chain nodes/edges, so their
expectations come straight from forward-backward marginals.  The
segment-repetition and custom count features do not decompose; this module
estimates their expectations — and the model-feature expectations under the
same distribution — with a single-site Gibbs sampler that sweeps positions
left to right.  Seeds fully determine the output, so estimates are
bit-reproducible across runs and across the compiled/pure kernel backends.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .constraints import (CustomCountFeature, RepetitionCountFeature,
                          SelfTransitionFeature, StartLabelFeature,
                          TokenLabelFeature, TransitionPredicateFeature,
                          aux_score_tables, dual_vector)
from .data import ParamVector, SequenceInstance, SparseFeatures
from .errors import ConfigError, DataError
from .models import Posterior, add_expected_features, softmax_with_logz


@dataclass(frozen=True)
class SamplerConfig:
    """Gibbs sweep schedule; ``sample_sweeps`` counts post-burn-in sweeps."""

    burn_in: int = 100
    sample_sweeps: int = 1000
    thinning: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.burn_in < 0:
            raise ConfigError("burn-in must be non-negative")
        if self.sample_sweeps < 1:
            raise ConfigError("need at least one sample sweep")
        if self.thinning < 1:
            raise ConfigError("thinning must be a positive integer")
        if self.sample_sweeps % self.thinning:
            raise ConfigError(
                f"{self.sample_sweeps} sample sweeps do not divide evenly "
                f"by thinning {self.thinning}")

    @property
    def n_retained(self) -> int:
        return self.sample_sweeps // self.thinning


@dataclass(frozen=True)
class SampleEstimate:
    """Monte-Carlo expectations from one Gibbs chain.

    ``constraint_means[g]`` estimates E_q[f'] for the g-th constraint the
    caller passed (zero where the constraint does not touch this instance);
    ``constraint_stderrs[g]`` is the matching standard error (sample std,
    ddof=1, over retained paths divided by sqrt(n)).  ``model_features``
    averages the model feature vector f(x, y) over the retained paths.  The
    marginals are empirical label frequencies, and ``paths`` keeps the
    retained label paths so callers can form further path statistics
    without re-running the chain.
    """

    model_features: SparseFeatures
    constraint_means: np.ndarray
    constraint_stderrs: np.ndarray
    sample_count: int
    node_marginals: np.ndarray
    edge_marginals: np.ndarray
    paths: np.ndarray


def split_constraint_terms(bounds, mu, inst, instance_index):
    """Partition the constraint terms touching one instance.

    Returns (factored pairs, repetition weight, custom pairs, applicable
    bound indices).  Factored pairs feed score tables; the repetition
    weight and custom callbacks are handled inside the sampler itself.
    """
    factored = []
    rep_weight = 0.0
    customs = []
    applicable = []
    for g, b in enumerate(bounds):
        if b.instance_index is not None and b.instance_index != instance_index:
            continue
        if not b.feature.supports(inst) or not b.feature.applies_to(inst):
            continue
        applicable.append(g)
        w = float(mu[g])
        if isinstance(b.feature, RepetitionCountFeature):
            rep_weight += w
        elif isinstance(b.feature, CustomCountFeature):
            customs.append((b.feature, w))
        else:
            factored.append((b.feature, w))
    return factored, rep_weight, customs, applicable


def _custom_callback(customs, inst, K):
    if not customs:
        return None

    def extra(y, t):
        out = np.zeros(K)
        trial = y.copy()
        for k in range(K):
            trial[t] = k
            s = 0.0
            for feature, w in customs:
                if w != 0.0:
                    s += w * feature.value(inst, trial)
            out[k] = s
        return out

    return extra


def empirical_marginals(paths: np.ndarray, K: int):
    """Label and label-pair frequencies over retained paths."""
    n, L = paths.shape
    node = np.zeros((L, K))
    for k in range(K):
        node[:, k] = (paths == k).mean(axis=0)
    if L > 1:
        pair = paths[:, :-1] * K + paths[:, 1:]
        flat = np.bincount((pair + np.arange(L - 1) * K * K).ravel(),
                           minlength=(L - 1) * K * K)
        edge = flat.reshape(L - 1, K, K) / n
    else:
        edge = np.zeros((0, K, K))
    return node, edge


def path_feature_values(feature, inst, paths: np.ndarray) -> np.ndarray:
    """f'(x, y) evaluated on every retained path, batched over the rows."""
    if isinstance(feature, RepetitionCountFeature):
        seg = 1 + (paths[:, 1:] != paths[:, :-1]).sum(axis=1)
        srt = np.sort(paths, axis=1)
        distinct = 1 + (np.diff(srt, axis=1) > 0).sum(axis=1)
        return (seg - distinct).astype(float)
    if isinstance(feature, TokenLabelFeature):
        ts = feature.positions(inst)
        if not ts:
            return np.zeros(paths.shape[0])
        return (paths[:, ts] == feature.label).sum(axis=1).astype(float)
    if isinstance(feature, SelfTransitionFeature):
        return (paths[:, 1:] == paths[:, :-1]).sum(axis=1).astype(float)
    if isinstance(feature, StartLabelFeature):
        return (paths[:, 0] == feature.label).astype(float)
    if isinstance(feature, TransitionPredicateFeature):
        ts = np.asarray(feature.positions(inst), dtype=np.int64)
        if not ts.size:
            return np.zeros(paths.shape[0])
        return (paths[:, ts - 1] != paths[:, ts]).sum(axis=1).astype(float)
    return np.array([feature.value(inst, y) for y in paths], dtype=float)


def gibbs_expectations(lam: ParamVector, mu, bounds, inst: SequenceInstance,
                       sampler: SamplerConfig, *, instance_index: int = 0,
                       rng=None) -> SampleEstimate:
    """Sample-average expectations under q ∝ exp(lam·f + mu·f').

    The chain is initialized at the Viterbi path of the edge-factored part
    of the score, swept left to right, and read out every ``thinning``-th
    sweep after burn-in.  ``rng`` defaults to a fresh generator seeded with
    ``sampler.seed ^ instance_index`` so per-instance chains are independent
    and reproducible; pass a persistent generator to draw fresh sweeps
    across repeated calls.
    """
    if not isinstance(inst, SequenceInstance):
        raise DataError("the sampling estimator only handles sequences")
    mu = dual_vector(mu, len(bounds))
    factored, rep_weight, customs, applicable = split_constraint_terms(
        bounds, mu, inst, instance_index)
    node, edge = aux_score_tables(lam, factored, inst)
    K = node.shape[1]
    init = kernels.viterbi_path(node, edge)
    if rng is None:
        rng = np.random.default_rng(sampler.seed ^ instance_index)
    total = sampler.burn_in + sampler.sample_sweeps
    uniforms = rng.random((total, len(inst)))
    extra = _custom_callback(customs, inst, K)
    paths = kernels.gibbs_paths(node, edge, rep_weight, init, uniforms,
                                sampler.burn_in, sampler.thinning, extra)
    n = paths.shape[0]

    node_marg, edge_marg = empirical_marginals(paths, K)
    post = Posterior(log_z=float("nan"), node_marginals=node_marg,
                     edge_marginals=edge_marg)
    dense = np.zeros(lam.layout.size)
    add_expected_features(post, inst, lam.layout, dense)
    ids = np.nonzero(dense)[0]
    feats = SparseFeatures(ids, dense[ids])

    means = np.zeros(len(bounds))
    errs = np.zeros(len(bounds))
    for g in applicable:
        vals = path_feature_values(bounds[g].feature, inst, paths)
        means[g] = float(vals.mean())
        if n > 1:
            errs[g] = float(vals.std(ddof=1) / np.sqrt(n))
    return SampleEstimate(feats, means, errs, n, node_marg, edge_marg, paths)


def conditional_site_distribution(lam: ParamVector, mu, bounds,
                                  inst: SequenceInstance, y, position: int,
                                  *, instance_index: int = 0) -> np.ndarray:
    """Exact single-site conditional of the auxiliary distribution.

    Reference implementation used to validate the sampling kernel: every
    candidate label at ``position`` is scored with all other labels held
    fixed — global features re-evaluated in full on the modified path —
    and the scores renormalized.
    """
    if not isinstance(inst, SequenceInstance):
        raise DataError("conditionals are defined over sequences")
    mu = dual_vector(mu, len(bounds))
    y = np.asarray(y, dtype=np.int64)
    L = len(inst)
    if y.shape != (L,):
        raise DataError("need a complete label assignment")
    if not 0 <= position < L:
        raise DataError("position out of range")
    factored, rep_weight, customs, _ = split_constraint_terms(
        bounds, mu, inst, instance_index)
    node, edge = aux_score_tables(lam, factored, inst)
    K = node.shape[1]
    t = position
    scores = node[t].copy()
    if t > 0:
        scores += edge[t - 1, y[t - 1], :]
    if t < L - 1:
        scores += edge[t, :, y[t + 1]]
    trial = y.copy()
    for k in range(K):
        trial[t] = k
        if rep_weight != 0.0:
            seg = 1 + int((trial[1:] != trial[:-1]).sum())
            scores[k] += rep_weight * float(seg - np.unique(trial).size)
        for feature, w in customs:
            if w != 0.0:
                scores[k] += w * feature.value(inst, trial)
    probs, _ = softmax_with_logz(scores)
    return probs
