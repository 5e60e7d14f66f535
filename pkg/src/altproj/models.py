"""Log-linear models over labels and label chains.

Both model families share one parameterization (see FeatureLayout): every
input feature is conjoined with each label, and chain models add one weight
per label pair.  Scores are linear in the weights, so posteriors are
softmax / forward-backward normalizations of the score tables.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import kernels
from .data import (FeatureLayout, Instance, LabelSpace, ParamVector,
                   SequenceInstance, as_label_array)
from .errors import DataError, StateSpaceError
from .oracles import enumerate_chain_scores

MAX_ENUMERATION = 1_000_000


@dataclass
class Posterior:
    """Exact posterior under a (possibly constraint-augmented) score table.

    Classification posteriors carry ``probs``; chain posteriors carry node
    and edge marginals.  ``log_z`` is the log normalizer in both cases.
    """

    log_z: float
    probs: np.ndarray | None = None
    node_marginals: np.ndarray | None = None
    edge_marginals: np.ndarray | None = None

    @property
    def is_chain(self) -> bool:
        return self.node_marginals is not None


def _check_labels(params: ParamVector, labels: LabelSpace):
    if params.layout.n_labels != labels.size:
        raise DataError("parameter layout and label space disagree on K")


def label_scores(params: ParamVector, inst: Instance) -> np.ndarray:
    """(K,) unnormalized log-scores for a classification instance."""
    feats = inst.features
    if feats.nnz == 0:
        return np.zeros(params.layout.n_labels)
    if feats.ids[-1] >= params.layout.n_inputs:
        raise DataError("feature id out of range for layout")
    return params.node_matrix()[:, feats.ids] @ feats.values


def chain_score_tables(params: ParamVector, inst: SequenceInstance):
    """Node (L,K) and edge (L-1,K,K) log-score tables for a sequence."""
    if not params.layout.chain:
        raise DataError("sequence instance requires a chain layout")
    L = len(inst)
    K = params.layout.n_labels
    V = params.layout.n_inputs
    W = params.node_matrix()
    pos, ids, vals, indptr = inst.packed()
    if ids.size and inst.max_feature_id() >= V:
        raise DataError("feature id out of range for layout")
    if ids.size >= V:
        # long sequence over a modest vocabulary: one sparse matmul
        node = inst.feature_matrix(V).dot(np.ascontiguousarray(W.T))
    else:
        node = np.zeros((L, K))
        if ids.size:
            contrib = W.T[ids] * vals[:, None]
            # positions with entries are contiguous in the packed order, so
            # a reduceat over their start offsets segment-sums per position
            occupied = np.flatnonzero(np.diff(indptr))
            node[occupied] = np.add.reduceat(contrib, indptr[occupied],
                                             axis=0)
    edge = np.empty((max(L - 1, 0), K, K))
    if L > 1:
        edge[:] = params.trans_matrix()[None, :, :]
    return node, edge


def softmax_with_logz(scores: np.ndarray):
    mx = scores.max()
    e = np.exp(scores - mx)
    z = e.sum()
    return e / z, float(mx + np.log(z))


def softmax_rows(scores: np.ndarray):
    """Row-wise softmax of an (n, K) score matrix plus per-row log Z."""
    mx = scores.max(axis=1)
    e = np.exp(scores - mx[:, None])
    z = e.sum(axis=1)
    return e / z[:, None], mx + np.log(z)


def dataset_matrix(instances, n_inputs: int) -> sp.csr_matrix:
    """CSR matrix stacking classification feature vectors row-wise."""
    rows = [inst.features for inst in instances]
    indptr = np.zeros(len(rows) + 1, dtype=np.int64)
    if rows:
        indptr[1:] = np.cumsum([f.nnz for f in rows])
    if indptr[-1]:
        ids = np.concatenate([f.ids for f in rows if f.nnz])
        vals = np.concatenate([f.values for f in rows if f.nnz])
        if ids.max() >= n_inputs:
            raise DataError("feature id out of range for layout")
    else:
        ids = np.zeros(0, dtype=np.int64)
        vals = np.zeros(0)
    return sp.csr_matrix((vals, ids, indptr), shape=(len(rows), n_inputs))


def classify_posterior(params: ParamVector, inst: Instance,
                       labels: LabelSpace) -> Posterior:
    """Exact label posterior p(y|x) with a max-subtracted softmax."""
    _check_labels(params, labels)
    probs, log_z = softmax_with_logz(label_scores(params, inst))
    return Posterior(log_z=log_z, probs=probs)


def chain_posterior(params: ParamVector, inst: SequenceInstance,
                    labels: LabelSpace) -> Posterior:
    """Exact node/edge marginals and log Z via forward-backward."""
    _check_labels(params, labels)
    node, edge = chain_score_tables(params, inst)
    node_marg, edge_marg, log_z = kernels.forward_backward(node, edge)
    return Posterior(log_z=float(log_z), node_marginals=node_marg,
                     edge_marginals=edge_marg)


def viterbi(params: ParamVector, inst: SequenceInstance,
            labels: LabelSpace) -> np.ndarray:
    """Best label path; ties break toward the lowest label index."""
    _check_labels(params, labels)
    node, edge = chain_score_tables(params, inst)
    return kernels.viterbi_path(node, edge)


def posterior_from_tables(node: np.ndarray, edge: np.ndarray) -> Posterior:
    node_marg, edge_marg, log_z = kernels.forward_backward(node, edge)
    return Posterior(log_z=float(log_z), node_marginals=node_marg,
                     edge_marginals=edge_marg)


def brute_force_posterior(params: ParamVector, inst: SequenceInstance,
                          labels: LabelSpace) -> Posterior:
    """Posterior by exhaustive path enumeration (testing oracle).

    Refuses state spaces above MAX_ENUMERATION paths.
    """
    _check_labels(params, labels)
    K = labels.size
    L = len(inst)
    if K ** L > MAX_ENUMERATION:
        raise StateSpaceError(f"{K}^{L} paths exceed the enumeration guard")
    node, edge = chain_score_tables(params, inst)
    node_marg, edge_marg, log_z = enumerate_chain_scores(node, edge)
    return Posterior(log_z=log_z, node_marginals=node_marg,
                     edge_marginals=edge_marg)


# ---------------------------------------------------------------------------
# feature accumulation


def add_gold_features(inst, layout: FeatureLayout, out: np.ndarray,
                      scale: float = 1.0):
    """Accumulate scale * f(x, y_gold) into a dense vector."""
    V = layout.n_inputs
    if isinstance(inst, Instance):
        if inst.label is None:
            raise DataError("instance has no gold label")
        feats = inst.features
        out[inst.label * V + feats.ids] += scale * feats.values
        return
    if inst.labels is None:
        raise DataError("sequence has no gold labels")
    labels = as_label_array(inst.labels)
    pos, ids, vals, _ = inst.packed()
    np.add.at(out, labels[pos] * V + ids, scale * vals)
    if labels.size > 1:
        off = layout.trans_offset
        K = layout.n_labels
        np.add.at(out, off + labels[:-1] * K + labels[1:], scale)


def add_expected_features(post: Posterior, inst, layout: FeatureLayout,
                          out: np.ndarray, scale: float = 1.0):
    """Accumulate scale * E[f(x, y)] under ``post`` into a dense vector."""
    V = layout.n_inputs
    if not post.is_chain:
        if not isinstance(inst, Instance):
            raise DataError("classification posterior with sequence instance")
        feats = inst.features
        if feats.nnz:
            block = out[: layout.n_labels * V].reshape(layout.n_labels, V)
            block[:, feats.ids] += (scale * post.probs)[:, None] * feats.values
        return
    marg = post.node_marginals
    block = out[: layout.n_labels * V].reshape(layout.n_labels, V)
    pos, ids, vals, _ = inst.packed()
    if ids.size >= V:
        block += inst.feature_matrix(V).T.dot(scale * marg).T
    elif ids.size:
        # (nnz, K) per-entry expected counts, segment-summed per feature id
        # so the final column update has no duplicate indices
        order, starts, unique_ids = inst.feature_groups()
        M = (scale * marg[pos]) * vals[:, None]
        block[:, unique_ids] += np.add.reduceat(M[order], starts, axis=0).T
    if len(inst) > 1:
        em = post.edge_marginals
        # dgemv against ones beats a strided axis-0 reduction here
        totals = np.ones(em.shape[0]) @ em.reshape(em.shape[0], -1)
        out[layout.trans_offset:] += scale * totals


def expected_model_features(post: Posterior, inst, layout: FeatureLayout):
    """E[f(x, y)] under ``post`` as a SparseFeatures over parameter ids."""
    from .data import SparseFeatures

    dense = np.zeros(layout.size)
    add_expected_features(post, inst, layout, dense)
    ids = np.nonzero(dense)[0]
    return SparseFeatures(ids, dense[ids])


def instance_gold_score(params: ParamVector, inst) -> float:
    """Linear score of the gold assignment."""
    dense = np.zeros(params.layout.size)
    add_gold_features(inst, params.layout, dense)
    return float(dense @ params.weights)


def supervised_loss_and_gradient(params: ParamVector, data, alpha: float):
    """Penalized negative log-likelihood and its gradient.

    loss = sum_i -log p(y_i | x_i) + alpha/2 ||w||^2
    grad = sum_i (E_p[f] - f(x_i, y_i)) + alpha w
    """
    if alpha < 0:
        raise DataError("alpha must be non-negative")
    layout = params.layout
    loss = 0.0
    grad = np.zeros(layout.size)
    for inst in data:
        if isinstance(inst, Instance):
            if inst.label is None:
                raise DataError("unlabeled instance in supervised objective")
            scores = label_scores(params, inst)
            probs, log_z = softmax_with_logz(scores)
            post = Posterior(log_z=log_z, probs=probs)
            loss += log_z - float(scores[inst.label])
        else:
            if inst.labels is None:
                raise DataError("unlabeled sequence in supervised objective")
            node, edge = chain_score_tables(params, inst)
            node_marg, edge_marg, log_z = kernels.forward_backward(node, edge)
            post = Posterior(log_z=float(log_z), node_marginals=node_marg,
                             edge_marginals=edge_marg)
            labels = as_label_array(inst.labels)
            gold = float(node[np.arange(len(inst)), labels].sum())
            if len(inst) > 1:
                gold += float(params.trans_matrix()[labels[:-1], labels[1:]].sum())
            loss += log_z - gold
        add_expected_features(post, inst, layout, grad)
        add_gold_features(inst, layout, grad, scale=-1.0)
    loss += 0.5 * alpha * float(params.weights @ params.weights)
    grad += alpha * params.weights
    return float(loss), grad
