"""Trainer-level checks: both projections, the joint objective, both modes.

Enumeration oracles validate every exact quantity; the supervised fit and
hand arithmetic validate the stochastic updates.  Expected optima are either
computed inline by an independent route (root finding, enumeration) or
checked through optimality conditions, never copied from the code under
test.
"""
import numpy as np
import pytest
from scipy.optimize import brentq

from altproj.constraints import (AuxParams, BoundConstraint, ConstraintSpec,
                                 PenaltyFamily, RepetitionCountFeature,
                                 SelfTransitionFeature, TokenLabelFeature,
                                 WordLabelFeature, scale_targets)
from altproj.data import (FeatureLayout, Instance, ParamVector,
                          SequenceInstance, SparseFeatures)
from altproj.errors import ConfigError, RoutingError
from altproj.gibbs import SamplerConfig
from altproj.models import (chain_score_tables, classify_posterior,
                            label_scores, softmax_with_logz)
from altproj.oracles import (all_paths, finite_difference_gradient,
                             path_scores, relative_gradient_error)
from altproj.projections import (APState, TrainConfig, _DualPack, _MEvaluator,
                                 _labeled_loss, _make_engine, _neg_dual,
                                 ap_train, aux_posterior, i_projection,
                                 joint_objective, joint_objective_flagged,
                                 m_projection, online_ap_step,
                                 supervised_train)

LN9 = float(np.log(9.0))


def l2(beta=1.0):
    return PenaltyFamily("l2", beta)


def clf_layout(V=2, K=2):
    return FeatureLayout(n_inputs=V, n_labels=K, chain=False)


def seq_layout(V=3, K=3):
    return FeatureLayout(n_inputs=V, n_labels=K, chain=True)


def random_doc(rng, V, K=None):
    ids = np.sort(rng.choice(V, size=min(2, V), replace=False))
    label = int(rng.integers(K)) if K is not None else None
    return Instance(SparseFeatures(ids, np.ones(ids.size)), label)


def random_seq(rng, L, V, K=None):
    pos = tuple(SparseFeatures([int(rng.integers(V))], [1.0])
                for _ in range(L))
    labels = tuple(int(rng.integers(K)) for _ in range(L)) if K else None
    return SequenceInstance(pos, labels)


# ---------------------------------------------------------------------------
# aux_posterior


def test_aux_posterior_zero_duals_is_model_posterior():
    rng = np.random.default_rng(1)
    layout = clf_layout(V=3, K=3)
    lam = ParamVector(rng.standard_normal(layout.size), layout)
    inst = random_doc(rng, 3)
    feat = WordLabelFeature(fid=0, trigger=int(inst.features.ids[0]), label=1)
    bounds = [BoundConstraint(feat, l2(), 0.5, None)]
    post = aux_posterior(lam, np.zeros(1), bounds, inst)
    probs, log_z = softmax_with_logz(label_scores(lam, inst))
    assert np.max(np.abs(post.probs - probs)) == 0.0
    assert post.log_z == log_z


def test_aux_posterior_sigmoid_example():
    # lam = 0, f' = I(y=1) on one binary instance, mu = ln 9 -> q(1) = 0.9
    layout = clf_layout(V=1, K=2)
    lam = ParamVector.zeros(layout)
    inst = Instance(SparseFeatures([0], [1.0]))
    feat = WordLabelFeature(fid=0, trigger=0, label=1)
    bounds = [BoundConstraint(feat, l2(), 0.9, None)]
    post = aux_posterior(lam, np.array([LN9]), bounds, inst)
    assert post.probs[1] == pytest.approx(0.9, abs=1e-12)


def test_aux_posterior_chain_matches_enumeration():
    # the feature's own value() on whole paths is the independent route
    rng = np.random.default_rng(6)
    layout = seq_layout(V=3, K=3)
    for trial in range(8):
        lam = ParamVector(0.8 * rng.standard_normal(layout.size), layout)
        inst = random_seq(rng, int(rng.integers(2, 5)), 3)
        feats = [TokenLabelFeature(fid=0, trigger=int(rng.integers(3)),
                                   label=int(rng.integers(3))),
                 SelfTransitionFeature(fid=1)]
        bounds = [BoundConstraint(f, l2(), 1.0, None) for f in feats]
        mu = rng.normal(0, 0.7, size=2)
        post = aux_posterior(lam, mu, bounds, inst)

        node, edge = chain_score_tables(lam, inst)
        paths = all_paths(len(inst), 3)
        scores = path_scores(node, edge, paths)
        scores += np.array([sum(m * f.value(inst, p)
                                for m, f in zip(mu, feats)) for p in paths])
        w = np.exp(scores - scores.max())
        w /= w.sum()
        for t in range(len(inst)):
            for k in range(3):
                assert post.node_marginals[t, k] == pytest.approx(
                    float(w[paths[:, t] == k].sum()), abs=1e-9)


def test_aux_posterior_routes_global_features_away():
    layout = seq_layout()
    lam = ParamVector.zeros(layout)
    inst = random_seq(np.random.default_rng(0), 4, 3)
    bounds = [BoundConstraint(RepetitionCountFeature(fid=0, scope="per-instance"),
                              l2(), 0.5, 0)]
    with pytest.raises(RoutingError):
        aux_posterior(lam, np.array([-0.5]), bounds, inst, 0)


def test_aux_posterior_ignores_other_instances_bounds():
    layout = clf_layout(V=1, K=2)
    lam = ParamVector.zeros(layout)
    inst = Instance(SparseFeatures([0], [1.0]))
    feat = WordLabelFeature(fid=0, trigger=0, label=1)
    bounds = [BoundConstraint(feat, l2(), 0.9, instance_index=3)]
    post = aux_posterior(lam, np.array([5.0]), bounds, inst, instance_index=0)
    assert post.probs[1] == pytest.approx(0.5, abs=1e-12)


# ---------------------------------------------------------------------------
# i_projection


def test_i_projection_no_constraints_is_empty():
    layout = clf_layout()
    lam = ParamVector.zeros(layout)
    mu = i_projection(lam, [], [Instance(SparseFeatures([0], [1.0]))],
                      TrainConfig())
    assert mu.size == 0


def test_i_projection_sigmoid_inversion():
    # uniform p, one l2 constraint with u = 0.9, beta = 1e-8: the dual
    # optimum inverts the sigmoid, mu ~ ln 9
    layout = clf_layout(V=1, K=2)
    lam = ParamVector.zeros(layout)
    inst = Instance(SparseFeatures([0], [1.0]))
    feat = WordLabelFeature(fid=0, trigger=0, label=1)
    bounds = [BoundConstraint(feat, l2(1e-8), 0.9, None)]
    mu = i_projection(lam, bounds, [inst], TrainConfig())
    assert mu.mu[0] == pytest.approx(LN9, abs=1e-3)
    post = aux_posterior(lam, mu, bounds, inst)
    assert post.probs[1] == pytest.approx(0.9, abs=1e-3)


def test_i_projection_l2_kkt_residual():
    # stationarity: u - sum_j E_q[f'] - beta*mu = 0 within the inner tol
    rng = np.random.default_rng(9)
    layout = seq_layout(V=3, K=3)
    lam = ParamVector(0.5 * rng.standard_normal(layout.size), layout)
    unlabeled = [random_seq(rng, int(rng.integers(2, 5)), 3) for _ in range(4)]
    specs = [ConstraintSpec(TokenLabelFeature(fid=0, trigger=1, label=2),
                            0.7, "proportion", l2(0.2)),
             ConstraintSpec(SelfTransitionFeature(fid=1),
                            0.6, "proportion", l2(0.5))]
    bounds = scale_targets(specs, unlabeled)
    config = TrainConfig(inner_tol=1e-8)
    mu = i_projection(lam, bounds, unlabeled, config)
    engine = _make_engine(lam, bounds, unlabeled, None)
    engine.set_duals(mu.mu)
    E = engine.expectations()
    for g, b in enumerate(bounds):
        assert abs(b.u - E[g] - b.penalty.beta * mu.mu[g]) < 1e-5


def test_i_projection_tiny_beta_meets_target():
    rng = np.random.default_rng(14)
    layout = clf_layout(V=4, K=3)
    lam = ParamVector(0.3 * rng.standard_normal(layout.size), layout)
    unlabeled = [random_doc(rng, 4) for _ in range(12)]
    spec = ConstraintSpec(WordLabelFeature(fid=0, trigger=0, label=1),
                          0.8, "proportion", l2(1e-6))
    bounds = scale_targets([spec], unlabeled)
    mu = i_projection(lam, bounds, unlabeled, TrainConfig(inner_tol=1e-8))
    engine = _make_engine(lam, bounds, unlabeled, None)
    engine.set_duals(mu.mu)
    E = engine.expectations()
    assert abs(E[0] - bounds[0].u) <= 1e-3


def test_i_projection_affine_kkt():
    layout = seq_layout(V=2, K=2)
    lam = ParamVector.zeros(layout)
    inst = random_seq(np.random.default_rng(2), 4, 2)
    feat = SelfTransitionFeature(fid=0)
    # uniform p has E[self-transitions] = (L-1)/K = 1.5
    loose = [BoundConstraint(feat, PenaltyFamily("affine"), 2.5, None)]
    mu = i_projection(lam, loose, [inst], TrainConfig())
    assert abs(mu.mu[0]) <= 1e-6          # inactive: nu = 0, q = p

    tight = [BoundConstraint(feat, PenaltyFamily("affine"), 0.8, None)]
    mu = i_projection(lam, tight, [inst], TrainConfig(inner_tol=1e-9))
    assert mu.mu[0] < 0.0                 # active: pushes repetitions down
    engine = _make_engine(lam, tight, [inst], None)
    engine.set_duals(mu.mu)
    E = engine.expectations()
    assert E[0] <= 0.8 + 1e-3
    assert abs(E[0] - 0.8) <= 1e-3        # complementary slackness


def test_i_projection_l1box_slack():
    layout = clf_layout(V=1, K=2)
    lam = ParamVector.zeros(layout)
    inst = Instance(SparseFeatures([0], [1.0]))
    feat = WordLabelFeature(fid=0, trigger=0, label=1)
    cfg = TrainConfig(inner_tol=1e-10)

    # target above the box: dual active at the upper kink, E = u - beta
    active = [BoundConstraint(feat, PenaltyFamily("l1box", 0.05), 0.8, None)]
    mu = i_projection(lam, active, [inst], cfg)
    post = aux_posterior(lam, mu, active, inst)
    assert post.probs[1] == pytest.approx(0.75, abs=1e-6)

    # box already contains E_p: duals stay at zero
    inside = [BoundConstraint(feat, PenaltyFamily("l1box", 0.05), 0.52, None)]
    mu = i_projection(lam, inside, [inst], cfg)
    assert abs(mu.mu[0]) <= 1e-8


def test_i_dual_gradient_matches_fd():
    # packed-variable dual gradient against central differences
    rng = np.random.default_rng(23)
    layout = clf_layout(V=3, K=3)
    lam = ParamVector(0.4 * rng.standard_normal(layout.size), layout)
    unlabeled = [random_doc(rng, 3) for _ in range(6)]
    bounds = [
        BoundConstraint(WordLabelFeature(fid=0, trigger=0, label=1),
                        l2(0.3), 2.0, None),
        BoundConstraint(WordLabelFeature(fid=1, trigger=1, label=2),
                        PenaltyFamily("l1box", 0.2), 1.5, None),
        BoundConstraint(WordLabelFeature(fid=2, trigger=2, label=0),
                        PenaltyFamily("affine"), 1.0, None),
    ]
    engine = _make_engine(lam, bounds, unlabeled, None)
    pack = _DualPack(bounds)
    x0 = np.array([0.4, 0.3, 0.1, -0.6])    # l2; l1box split; affine <= 0
    _, grad = _neg_dual(x0, pack, engine)
    fd = finite_difference_gradient(
        lambda x: _neg_dual(x, pack, engine)[0], x0, step=1e-6)
    assert relative_gradient_error(grad, fd) < 1e-6


# ---------------------------------------------------------------------------
# m_projection


def test_m_projection_gamma_zero_is_supervised():
    # one binary instance, one feature, alpha = 1: the optimum puts
    # +-d/2 on the two label blocks with  sigma(d) + d/2 = 1
    layout = clf_layout(V=1, K=2)
    inst = Instance(SparseFeatures([0], [1.0]), label=1)
    lam = m_projection(None, [inst], [], layout, TrainConfig(alpha=1.0))
    d_star = brentq(lambda d: d / 2 + 1 / (1 + np.exp(-d)) - 1, 0.0, 2.0,
                    xtol=1e-14)
    assert lam.weights[1] == pytest.approx(d_star / 2, abs=1e-7)
    assert lam.weights[0] == pytest.approx(-d_star / 2, abs=1e-7)

    via_helper = supervised_train([inst], layout, TrainConfig(alpha=1.0))
    assert np.max(np.abs(lam.weights - via_helper.weights)) < 1e-9


def test_m_projection_point_mass_q_equals_supervised():
    # q concentrated on fixed labels with gamma = 1 and no labeled data is
    # the same fit as supervising on those labels
    rng = np.random.default_rng(4)
    layout = seq_layout(V=3, K=2)
    seqs = [random_seq(rng, int(rng.integers(2, 5)), 3, K=2)
            for _ in range(5)]
    from altproj.models import add_gold_features

    q_sum = np.zeros(layout.size)
    for s in seqs:
        add_gold_features(s, layout, q_sum)
    unlabeled = [SequenceInstance(s.positions) for s in seqs]
    cfg = TrainConfig(alpha=0.7, gamma=1.0)
    lam_q = m_projection(q_sum, [], unlabeled, layout, cfg)
    lam_s = supervised_train(seqs, layout, TrainConfig(alpha=0.7))
    assert np.max(np.abs(lam_q.weights - lam_s.weights)) < 1e-5


def test_m_projection_gradient_matches_fd():
    rng = np.random.default_rng(12)
    for chain in (False, True):
        if chain:
            layout = seq_layout(V=3, K=2)
            labeled = [random_seq(rng, 3, 3, K=2) for _ in range(3)]
            unlabeled = [random_seq(rng, 4, 3) for _ in range(3)]
        else:
            layout = clf_layout(V=3, K=3)
            labeled = [random_doc(rng, 3, K=3) for _ in range(4)]
            unlabeled = [random_doc(rng, 3) for _ in range(4)]
        q_sum = rng.normal(0, 0.5, layout.size)
        ev = _MEvaluator(labeled, unlabeled, layout, alpha=0.8, gamma=0.4,
                         q_sum=q_sum)
        w0 = 0.5 * rng.standard_normal(layout.size)
        _, grad = ev(w0)
        fd = finite_difference_gradient(lambda w: ev(w)[0], w0, step=1e-5)
        assert relative_gradient_error(grad, fd) < 1e-6


def test_m_projection_accepts_per_instance_expectations():
    rng = np.random.default_rng(19)
    layout = clf_layout(V=3, K=2)
    labeled = [random_doc(rng, 3, K=2) for _ in range(3)]
    unlabeled = [random_doc(rng, 3) for _ in range(3)]
    lam0 = ParamVector(0.3 * rng.standard_normal(layout.size), layout)
    from altproj.models import expected_model_features

    posts = [classify_posterior(lam0, i, _two_three_labels(2))
             for i in unlabeled]
    feats = [expected_model_features(p, i, layout)
             for p, i in zip(posts, unlabeled)]
    dense = np.zeros(layout.size)
    for f in feats:
        dense[f.ids] += f.values
    cfg = TrainConfig(alpha=1.0, gamma=0.6)
    a = m_projection(feats, labeled, unlabeled, layout, cfg)
    b = m_projection(dense, labeled, unlabeled, layout, cfg)
    assert np.max(np.abs(a.weights - b.weights)) < 1e-9


def _two_three_labels(K):
    from altproj.data import LabelSpace

    return LabelSpace.from_names([f"L{i}" for i in range(K)])


# ---------------------------------------------------------------------------
# joint objective


def test_joint_objective_single_labeled_instance_log2():
    layout = clf_layout(V=1, K=2)
    lam = ParamVector.zeros(layout)
    inst = Instance(SparseFeatures([0], [1.0]), label=1)
    cfg = TrainConfig(alpha=0.0, gamma=0.0)
    val = joint_objective(lam, None, [], [inst], [], cfg)
    assert val == pytest.approx(np.log(2.0), abs=1e-12)


def test_joint_objective_no_constraints_is_regularizer():
    layout = clf_layout(V=2, K=2)
    lam = ParamVector(np.array([0.3, -0.2, 0.5, 0.1]), layout)
    inst = Instance(SparseFeatures([0], [1.0]))
    val = joint_objective(lam, None, [], [], [inst], TrainConfig(gamma=0.4))
    assert val == pytest.approx(0.5 * float(lam.weights @ lam.weights),
                                abs=1e-12)


def test_joint_objective_matches_enumeration():
    # KL and penalty bookkeeping against a full path enumeration
    rng = np.random.default_rng(33)
    layout = seq_layout(V=3, K=3)
    lam = ParamVector(0.6 * rng.standard_normal(layout.size), layout)
    labeled = [random_seq(rng, 3, 3, K=3)]
    unlabeled = [random_seq(rng, int(rng.integers(2, 5)), 3)
                 for _ in range(3)]
    feats = [TokenLabelFeature(fid=0, trigger=1, label=0),
             SelfTransitionFeature(fid=1)]
    bounds = [BoundConstraint(feats[0], l2(0.4), 1.3, None),
              BoundConstraint(feats[1], l2(0.7), 2.0, None)]
    mu = np.array([0.5, -0.4])
    cfg = TrainConfig(alpha=0.9, gamma=0.3)
    got = joint_objective(lam, mu, bounds, labeled, unlabeled, cfg)

    expected = _labeled_loss(lam, labeled) \
        + 0.45 * float(lam.weights @ lam.weights)
    E = np.zeros(2)
    kl = 0.0
    for inst in unlabeled:
        node, edge = chain_score_tables(lam, inst)
        paths = all_paths(len(inst), 3)
        base = path_scores(node, edge, paths)
        aux = base + np.array([sum(m * f.value(inst, p)
                                   for m, f in zip(mu, feats))
                               for p in paths])
        wq = np.exp(aux - aux.max())
        wq /= wq.sum()
        wp = np.exp(base - base.max())
        wp /= wp.sum()
        kl += float((wq * (np.log(wq) - np.log(wp))).sum())
        for g, f in enumerate(feats):
            E[g] += float(wq @ np.array([f.value(inst, p) for p in paths]))
    for g, b in enumerate(bounds):
        kl += (b.u - E[g]) ** 2 / (2.0 * b.penalty.beta)
    expected += cfg.gamma * kl
    assert got == pytest.approx(expected, abs=1e-9)


def test_joint_objective_hard_penalty_infeasible_is_inf():
    layout = clf_layout(V=1, K=2)
    lam = ParamVector.zeros(layout)
    inst = Instance(SparseFeatures([0], [1.0]))
    feat = WordLabelFeature(fid=0, trigger=0, label=1)
    cfg = TrainConfig(gamma=1.0)
    # E_p = 0.5 violates both an upper bound at 0.2 and a box [0.75, 0.85]
    aff = [BoundConstraint(feat, PenaltyFamily("affine"), 0.2, None)]
    assert joint_objective(lam, None, aff, [], [inst], cfg) == np.inf
    box = [BoundConstraint(feat, PenaltyFamily("l1box", 0.05), 0.8, None)]
    assert joint_objective(lam, None, box, [], [inst], cfg) == np.inf
    # and the satisfied versions are finite
    ok = [BoundConstraint(feat, PenaltyFamily("affine"), 0.6, None)]
    assert np.isfinite(joint_objective(lam, None, ok, [], [inst], cfg))


# ---------------------------------------------------------------------------
# batch trainer


def test_ap_train_gamma_zero_reduces_to_supervised():
    rng = np.random.default_rng(8)
    layout = clf_layout(V=3, K=3)
    labeled = [random_doc(rng, 3, K=3) for _ in range(8)]
    unlabeled = [random_doc(rng, 3) for _ in range(4)]
    spec = ConstraintSpec(WordLabelFeature(fid=0, trigger=0, label=1),
                          0.7, "proportion", l2(0.1))
    cfg = TrainConfig(alpha=1.0, gamma=0.0, T=3)
    state = ap_train(labeled, unlabeled, [spec], layout, cfg)
    lam_s = supervised_train(labeled, layout, cfg)
    assert np.max(np.abs(state.lam.weights - lam_s.weights)) < 1e-6
    assert np.all(state.mu.mu == 0.0)
    diffs = np.diff(state.objective_trace)
    assert np.all(diffs <= 1e-8)


def test_ap_train_requires_unlabeled_when_weighted():
    layout = clf_layout()
    with pytest.raises(ConfigError):
        ap_train([Instance(SparseFeatures([0], [1.0]), 0)], [], [],
                 layout, TrainConfig(gamma=0.5))


def test_ap_train_monotone_on_random_l2_problems():
    rng = np.random.default_rng(42)
    for trial in range(6):
        chain = trial % 2 == 1
        if chain:
            layout = seq_layout(V=3, K=3)
            labeled = [random_seq(rng, int(rng.integers(2, 5)), 3, K=3)
                       for _ in range(3)]
            unlabeled = [random_seq(rng, int(rng.integers(2, 6)), 3)
                         for _ in range(4)]
            specs = [ConstraintSpec(TokenLabelFeature(
                fid=0, trigger=int(rng.integers(3)),
                label=int(rng.integers(3))), float(rng.uniform(0.2, 0.9)),
                "proportion", l2(float(rng.uniform(0.1, 1.0)))),
                ConstraintSpec(SelfTransitionFeature(fid=1),
                               float(rng.uniform(0.3, 0.8)),
                               "proportion", l2(0.5))]
        else:
            layout = clf_layout(V=4, K=3)
            labeled = [random_doc(rng, 4, K=3) for _ in range(5)]
            unlabeled = [random_doc(rng, 4) for _ in range(8)]
            specs = [ConstraintSpec(WordLabelFeature(
                fid=0, trigger=int(rng.integers(4)),
                label=int(rng.integers(3))), float(rng.uniform(0.2, 0.9)),
                "proportion", l2(float(rng.uniform(0.05, 0.5))))]
        cfg = TrainConfig(alpha=1.0, gamma=float(rng.uniform(0.2, 1.0)), T=4)
        state = ap_train(labeled, unlabeled, specs, layout, cfg)
        trace = np.asarray(state.objective_trace)
        assert trace.size == 2 * cfg.T
        assert np.all(np.isfinite(trace))
        assert np.all(np.diff(trace) <= 1e-8), trace
        assert not state.trace_approximate


def test_ap_train_minimally_supervised_runs():
    # no labeled data at all: the log-loss term drops, constraints drive fit
    rng = np.random.default_rng(15)
    layout = clf_layout(V=2, K=2)
    unlabeled = [random_doc(rng, 2) for _ in range(10)]
    spec = ConstraintSpec(WordLabelFeature(fid=0, trigger=0, label=1),
                          0.9, "proportion", l2(0.05))
    state = ap_train([], unlabeled, [spec], layout,
                     TrainConfig(alpha=1.0, gamma=1.0, T=5))
    trace = np.asarray(state.objective_trace)
    assert np.all(np.diff(trace) <= 1e-8)
    # the trained model itself should now favor label 1 on trigger docs
    trigger_doc = Instance(SparseFeatures([0], [1.0]))
    probs, _ = softmax_with_logz(label_scores(state.lam, trigger_doc))
    assert probs[1] > 0.6


def test_ap_train_sampled_constraints_deterministic():
    rng = np.random.default_rng(28)
    layout = seq_layout(V=3, K=3)
    labeled = [random_seq(rng, 4, 3, K=3) for _ in range(2)]
    unlabeled = [random_seq(rng, 5, 3) for _ in range(3)]
    spec = ConstraintSpec(RepetitionCountFeature(fid=0, scope="per-instance"),
                          1.0, "count", PenaltyFamily("affine"))
    cfg = TrainConfig(alpha=1.0, gamma=0.3, T=2,
                      sampler=SamplerConfig(burn_in=20, sample_sweeps=60,
                                            seed=5))
    a = ap_train(labeled, unlabeled, [spec], layout, cfg)
    b = ap_train(labeled, unlabeled, [spec], layout, cfg)
    assert a.objective_trace == b.objective_trace
    assert np.array_equal(a.lam.weights, b.lam.weights)
    assert np.array_equal(a.mu.mu, b.mu.mu)
    assert a.trace_approximate
    assert np.all(np.isfinite(a.objective_trace))
    # affine duals never escape their sign constraint
    assert np.all(a.mu.mu <= 0.0)


def test_ap_train_warm_start_matches_cold_optimum():
    rng = np.random.default_rng(51)
    layout = clf_layout(V=3, K=2)
    labeled = [random_doc(rng, 3, K=2) for _ in range(6)]
    unlabeled = [random_doc(rng, 3) for _ in range(6)]
    spec = ConstraintSpec(WordLabelFeature(fid=0, trigger=1, label=0),
                          0.6, "proportion", l2(0.2))
    cold = ap_train(labeled, unlabeled, [spec], layout,
                    TrainConfig(alpha=1.0, gamma=0.5, T=8))
    warm = ap_train(labeled, unlabeled, [spec], layout,
                    TrainConfig(alpha=1.0, gamma=0.5, T=8, warm_start=True))
    assert np.max(np.abs(cold.lam.weights - warm.lam.weights)) < 1e-4
    assert np.all(np.diff(warm.objective_trace) <= 1e-8)


# ---------------------------------------------------------------------------
# online trainer


def test_online_step_labeled_hand_arithmetic():
    # lam = 0, eta = 0.1: lam += 0.1 * (f(x,y) - E_uniform[f])
    layout = clf_layout(V=2, K=2)
    cfg = TrainConfig(alpha=0.0, eta0=1.0 / 9.0, n_total=4, n_labeled=2)
    state = APState(ParamVector.zeros(layout), AuxParams.zeros([]))
    inst = Instance(SparseFeatures([0], [1.0]), label=1)
    online_ap_step(state, inst, [], cfg, t=1)
    assert np.allclose(state.lam.weights, [-0.05, 0.0, 0.05, 0.0],
                       atol=1e-15)


def test_online_step_unlabeled_without_constraints_only_shrinks():
    layout = clf_layout(V=2, K=2)
    cfg = TrainConfig(alpha=1.0, gamma=0.5, eta0=0.5, n_total=5, n_labeled=1)
    w0 = np.array([0.4, -0.3, 0.2, 0.1])
    state = APState(ParamVector(w0.copy(), layout), AuxParams.zeros([]))
    online_ap_step(state, Instance(SparseFeatures([1], [1.0])), [], cfg, t=3)
    eta = 1.0 / (3 + 2.0)
    assert np.allclose(state.lam.weights, w0 * (1 - eta / 5), atol=1e-14)


def test_online_step_requires_counts():
    layout = clf_layout()
    state = APState(ParamVector.zeros(layout), AuxParams.zeros([]))
    inst = Instance(SparseFeatures([0], [1.0]), label=0)
    with pytest.raises(ConfigError):
        online_ap_step(state, inst, [], TrainConfig(), t=1)
    with pytest.raises(ConfigError):
        online_ap_step(state, inst, [],
                       TrainConfig(n_total=4, n_labeled=1), t=0)


def test_online_dual_update_hand_arithmetic():
    # one unlabeled doc, one dataset-level l2 bound: mu moves by
    # eta * (u/(n-m) - beta*mu/(n-m) - E_q[f']) with q at the old duals
    layout = clf_layout(V=1, K=2)
    feat = WordLabelFeature(fid=0, trigger=0, label=1)
    bounds = [BoundConstraint(feat, l2(0.5), 0.9, None)]
    cfg = TrainConfig(alpha=0.0, gamma=1.0, eta0=1.0 / 9.0,
                      n_total=2, n_labeled=1)
    state = APState(ParamVector.zeros(layout),
                    AuxParams.zeros(bounds))
    state.mu.mu[0] = 0.2
    inst = Instance(SparseFeatures([0], [1.0]))
    online_ap_step(state, inst, bounds, cfg, t=1, instance_index=0)
    eta = 0.1
    e_q = 1.0 / (1.0 + np.exp(-0.2))
    want = 0.2 + eta * ((0.9 - 0.5 * 0.2) / 1 - e_q)
    assert state.mu.mu[0] == pytest.approx(want, abs=1e-12)


def test_online_matches_batch_value():
    rng = np.random.default_rng(11)
    V, K = 5, 3
    layout = clf_layout(V=V, K=K)
    true_W = rng.normal(0, 1.5, (K, V))

    def doc(labeled):
        ids = np.sort(rng.choice(V, size=2, replace=False))
        s = true_W[:, ids] @ np.ones(2)
        p = np.exp(s - s.max())
        p /= p.sum()
        return Instance(SparseFeatures(ids, np.ones(2)),
                        int(rng.choice(K, p=p)) if labeled else None)

    labeled = [doc(True) for _ in range(40)]
    unlabeled = [doc(False) for _ in range(40)]
    spec = ConstraintSpec(WordLabelFeature(fid=0, trigger=0, label=1),
                          0.6, "proportion", l2(0.1))
    cfg = TrainConfig(alpha=1.0, gamma=1.0, T=12)
    batch = ap_train(labeled, unlabeled, [spec], layout, cfg)
    from dataclasses import replace

    online = ap_train(labeled, unlabeled, [spec], layout,
                      replace(cfg, mode="online", T=50, eta0=0.1, seed=3,
                              trace_every=0))
    b, o = batch.objective_trace[-1], online.objective_trace[-1]
    assert abs(o - b) / abs(b) < 0.01


def test_online_deterministic():
    rng = np.random.default_rng(62)
    layout = clf_layout(V=3, K=2)
    labeled = [random_doc(rng, 3, K=2) for _ in range(4)]
    unlabeled = [random_doc(rng, 3) for _ in range(6)]
    spec = ConstraintSpec(WordLabelFeature(fid=0, trigger=0, label=1),
                          0.8, "proportion", l2(0.1))
    cfg = TrainConfig(alpha=1.0, gamma=0.5, T=6, mode="online", seed=9)
    a = ap_train(labeled, unlabeled, [spec], layout, cfg)
    b = ap_train(labeled, unlabeled, [spec], layout, cfg)
    assert a.objective_trace == b.objective_trace
    assert np.array_equal(a.lam.weights, b.lam.weights)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(alpha=-0.1)
    with pytest.raises(ConfigError):
        TrainConfig(T=0)
    with pytest.raises(ConfigError):
        TrainConfig(mode="minibatch")
    with pytest.raises(ConfigError):
        TrainConfig(eta0=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(inner_tol=0.0)
