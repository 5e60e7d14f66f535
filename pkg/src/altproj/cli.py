"""Command-line surface: train, label, eval, synth, oracle-check.

Exit codes: 0 success, 1 usage/configuration, 2 data problem,
3 optimization failure, 4 invariant failure.
"""
from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace

import numpy as np

from .constraints import scale_targets
from .data import Instance, ParamVector, SequenceInstance, SparseFeatures
from .dataio import (CLASSIFICATION, SEQUENCE, ChainSynthSpec, ClfSynthSpec,
                     Dataset, decode, evaluate, load_checkpoint,
                     parse_classification_file, parse_constraints,
                     parse_sequence_file, save_checkpoint, synth_generate,
                     write_classification_file, write_constraint_file,
                     write_sequence_file)
from .errors import (AltprojError, ConfigError, DataError, InvariantError,
                     OptimizationError)
from .gibbs import SamplerConfig
from .projections import TrainConfig, ap_train, supervised_train

_TASK_KIND = {"clf": CLASSIFICATION, "seq": SEQUENCE}


def _build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="altproj")
    sub = top.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="fit a model and write a checkpoint")
    tr.add_argument("--task", choices=("clf", "seq"), required=True)
    tr.add_argument("--trainer", choices=("ap", "ge", "sup"), default="ap")
    tr.add_argument("--mode", choices=("batch", "online"), default="batch")
    duct = tr.add_mutually_exclusive_group()
    duct.add_argument("--transductive", action="store_true")
    duct.add_argument("--inductive", dest="transductive",
                      action="store_false")
    tr.add_argument("--constraints", metavar="FILE")
    tr.add_argument("--labeled", metavar="FILE")
    tr.add_argument("--unlabeled", metavar="FILE")
    tr.add_argument("--test", metavar="FILE",
                    help="test inputs; joined to the unlabeled pool "
                         "(labels stripped) under --transductive")
    tr.add_argument("--alpha", type=float, default=1.0)
    tr.add_argument("--beta", type=float, default=None,
                    help="default penalty curvature for constraints "
                         "without their own (0.01 clf, 1.0 seq)")
    tr.add_argument("--gamma", type=float, default=None,
                    help="constraint-term weight (1.0 clf, 0.1 seq)")
    tr.add_argument("--T", type=int, default=10)
    tr.add_argument("--eta0", type=float, default=0.1)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--burn-in", type=int, default=100)
    tr.add_argument("--sample-sweeps", type=int, default=1000)
    tr.add_argument("--out", metavar="CKPT", required=True)

    lb = sub.add_parser("label", help="decode inputs with a checkpoint")
    lb.add_argument("checkpoint")
    lb.add_argument("--input", metavar="FILE", required=True)
    lb.add_argument("--out", metavar="FILE")

    ev = sub.add_parser("eval", help="score a checkpoint on labeled data")
    ev.add_argument("checkpoint")
    ev.add_argument("--test", metavar="FILE", required=True)

    sy = sub.add_parser("synth", help="write a synthetic corpus")
    sy.add_argument("--task", choices=("clf", "seq"), required=True)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--out-dir", required=True)
    sy.add_argument("--n-labels", type=int)
    sy.add_argument("--n-labeled", type=int)
    sy.add_argument("--n-unlabeled", type=int)
    sy.add_argument("--n-test", type=int)
    sy.add_argument("--p-hit", type=float)
    sy.add_argument("--self-prob", type=float)
    sy.add_argument("--segment-unique", action="store_true", default=None)

    oc = sub.add_parser("oracle-check",
                        help="run the enumeration/finite-difference suite")
    oc.add_argument("--seed", type=int, default=0)
    return top


# ---------------------------------------------------------------------------
# train


def _load_partitions(args):
    kind = _TASK_KIND[args.task]
    parse = (parse_classification_file if kind == CLASSIFICATION
             else parse_sequence_file)
    ds = Dataset(kind)
    labeled, unlabeled = [], []
    if args.labeled:
        part = parse(args.labeled, into=ds)
        labeled += part.labeled
        unlabeled += part.unlabeled
    if args.unlabeled:
        part = parse(args.unlabeled, into=ds)
        labeled += part.labeled
        unlabeled += part.unlabeled
    if args.transductive:
        if not args.test:
            raise ConfigError("--transductive needs --test inputs to fold "
                              "into the unlabeled pool")
        part = parse(args.test, into=ds)
        for inst in part.labeled + part.unlabeled:
            if kind == CLASSIFICATION:
                unlabeled.append(Instance(inst.features, None))
            else:
                unlabeled.append(SequenceInstance(inst.positions))
    ds.labeled, ds.unlabeled = labeled, unlabeled
    return ds


def _cmd_train(args) -> int:
    if args.beta is None:
        args.beta = 0.01 if args.task == "clf" else 1.0
    if args.gamma is None:
        args.gamma = 1.0 if args.task == "clf" else 0.1
    ds = _load_partitions(args)
    specs = (parse_constraints(args.constraints, ds, default_beta=args.beta)
             if args.constraints else [])
    layout = ds.layout()
    config = TrainConfig(
        alpha=args.alpha, gamma=args.gamma, T=args.T, eta0=args.eta0,
        mode=args.mode, seed=args.seed,
        sampler=SamplerConfig(burn_in=args.burn_in,
                              sample_sweeps=args.sample_sweeps,
                              seed=args.seed))
    t0 = time.perf_counter()
    if args.trainer == "sup":
        lam = supervised_train(ds.labeled, layout, config)
        trace = []
    elif args.trainer == "ge":
        from .ge import ge_train, terms_from_bounds

        terms = terms_from_bounds(scale_targets(specs, ds.unlabeled),
                                  gamma=config.gamma)
        lam = ge_train(terms, ds.labeled, ds.unlabeled, layout, config)
        trace = []
    else:
        state = ap_train(ds.labeled, ds.unlabeled, specs, layout, config)
        lam, trace = state.lam, state.objective_trace
    elapsed = time.perf_counter() - t0
    save_checkpoint(args.out, lam, ds)
    print(f"trained {args.trainer} ({args.task}) on "
          f"{len(ds.labeled)} labeled / {len(ds.unlabeled)} unlabeled "
          f"in {elapsed:.2f}s -> {args.out}")
    if trace:
        print(f"objective\t{trace[-1]:.10g}")
    return 0


# ---------------------------------------------------------------------------
# label / eval


def _restrict(instances, n_inputs):
    """Drop feature ids outside the checkpoint's vocabulary."""
    out = []
    for inst in instances:
        if isinstance(inst, SequenceInstance):
            pos = []
            for f in inst.positions:
                keep = f.ids < n_inputs
                pos.append(SparseFeatures(f.ids[keep], f.values[keep]))
            out.append(SequenceInstance(tuple(pos), inst.labels))
        else:
            keep = inst.features.ids < n_inputs
            out.append(Instance(
                SparseFeatures(inst.features.ids[keep],
                               inst.features.values[keep]), inst.label))
    return out


def _cmd_label(args) -> int:
    lam, shell = load_checkpoint(args.checkpoint)
    n_inputs = lam.layout.n_inputs
    parse = (parse_classification_file if shell.kind == CLASSIFICATION
             else parse_sequence_file)
    part = parse(args.input, into=shell)
    insts = _restrict(part.labeled + part.unlabeled, n_inputs)
    labels = shell.labels
    lines = []
    for inst in insts:
        if isinstance(inst, SequenceInstance):
            path = decode(lam, inst, labels)
            lines.extend(shell.label_names[k] for k in path)
            lines.append("")
        else:
            lines.append(shell.label_names[decode(lam, inst, labels)])
    text = "\n".join(lines).rstrip("\n") + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_eval(args) -> int:
    lam, shell = load_checkpoint(args.checkpoint)
    parse = (parse_classification_file if shell.kind == CLASSIFICATION
             else parse_sequence_file)
    part = parse(args.test, into=shell)
    if len(shell.label_names) != lam.layout.n_labels:
        raise DataError("test data uses labels the checkpoint never saw")
    test = Dataset(shell.kind, vocab=shell.vocab,
                   label_names=shell.label_names)
    test.labeled = _restrict(part.labeled, lam.layout.n_inputs)
    report = evaluate(lam, test)
    sys.stdout.write(report.as_text())
    return 0


# ---------------------------------------------------------------------------
# synth


def _cmd_synth(args) -> int:
    import os

    kind = _TASK_KIND[args.task]
    base = ClfSynthSpec() if kind == CLASSIFICATION else ChainSynthSpec()
    overrides = {}
    for name in ("n_labels", "n_labeled", "n_unlabeled", "n_test", "p_hit"):
        v = getattr(args, name)
        if v is not None:
            overrides[name] = v
    if kind == SEQUENCE:
        if args.self_prob is not None:
            overrides["self_prob"] = args.self_prob
        if args.segment_unique is not None:
            overrides["segment_unique"] = args.segment_unique
    elif args.self_prob is not None or args.segment_unique is not None:
        raise ConfigError("--self-prob/--segment-unique are sequence knobs")
    result = synth_generate(kind, replace(base, **overrides), seed=args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    write = (write_classification_file if kind == CLASSIFICATION
             else write_sequence_file)
    paths = {}
    for name, insts, labeled in (("labeled", result.train.labeled, True),
                                 ("unlabeled", result.train.unlabeled, False),
                                 ("test", result.test.labeled, True)):
        ds = Dataset(kind, vocab=result.train.vocab,
                     label_names=result.train.label_names)
        if labeled:
            ds.labeled = insts
        else:
            ds.unlabeled = insts
        paths[name] = os.path.join(args.out_dir, f"{name}.txt")
        write(paths[name], ds)
    paths["constraints"] = os.path.join(args.out_dir, "constraints.txt")
    write_constraint_file(paths["constraints"], result.records)
    for name in ("labeled", "unlabeled", "test", "constraints"):
        print(f"{name}\t{paths[name]}")
    return 0


# ---------------------------------------------------------------------------
# oracle-check


def _oracle_checks(seed: int):
    """Enumeration and finite-difference spot checks; yields (name, ok)."""
    from .constraints import (BoundConstraint, PenaltyFamily,
                              SelfTransitionFeature, TokenLabelFeature,
                              WordLabelFeature)
    from .data import FeatureLayout
    from .ge import GETerm, ge_gradient, ge_objective
    from .models import (brute_force_posterior, chain_posterior,
                         supervised_loss_and_gradient, viterbi)
    from .oracles import (all_paths, enumerate_chain_scores,
                          finite_difference_gradient, path_scores,
                          relative_gradient_error)
    from .projections import (_DualPack, _make_engine, _MEvaluator,
                              _neg_dual, aux_posterior)

    rng = np.random.default_rng(seed)

    def rand_seq(L, V, K, labeled=False):
        pos = tuple(SparseFeatures(np.array([rng.integers(V)]), np.ones(1))
                    for _ in range(L))
        labels = tuple(int(rng.integers(K)) for _ in range(L)) \
            if labeled else None
        return SequenceInstance(pos, labels)

    def rand_doc(V, K=None):
        ids = np.sort(rng.choice(V, 2, replace=False))
        lab = int(rng.integers(K)) if K is not None else None
        return Instance(SparseFeatures(ids, np.ones(2)), lab)

    from .data import LabelSpace

    ok = True
    for _ in range(25):
        K = int(rng.integers(2, 5))
        L = int(rng.integers(2, 6))
        layout = FeatureLayout(n_inputs=3, n_labels=K, chain=True)
        lam = ParamVector(rng.standard_normal(layout.size), layout)
        inst = rand_seq(L, 3, K)
        space = LabelSpace.from_names([f"y{k}" for k in range(K)])
        post = chain_posterior(lam, inst, space)
        brute = brute_force_posterior(lam, inst, space)
        ok &= abs(post.log_z - brute.log_z) < 1e-9
        ok &= np.max(np.abs(post.node_marginals
                            - brute.node_marginals)) < 1e-9
        ok &= np.max(np.abs(post.edge_marginals
                            - brute.edge_marginals)) < 1e-9
        from .models import chain_score_tables

        node, edge = chain_score_tables(lam, inst)
        paths = all_paths(L, K)
        best = paths[int(np.argmax(path_scores(node, edge, paths)))]
        ok &= np.array_equal(viterbi(lam, inst, space), best)
    yield "chain inference matches enumeration", ok

    ok = True
    for _ in range(6):
        layout = FeatureLayout(n_inputs=4, n_labels=3, chain=True)
        data = [rand_seq(3, 4, 3, labeled=True) for _ in range(3)]
        w0 = rng.normal(0, 0.5, layout.size)
        _, g = supervised_loss_and_gradient(ParamVector(w0, layout), data,
                                            0.7)
        fd = finite_difference_gradient(
            lambda w: supervised_loss_and_gradient(
                ParamVector(w, layout), data, 0.7)[0], w0)
        ok &= relative_gradient_error(g, fd) < 1e-4
    yield "supervised gradient matches finite differences", ok

    ok = True
    for _ in range(6):
        layout = FeatureLayout(n_inputs=4, n_labels=3, chain=False)
        labeled = [rand_doc(4, 3) for _ in range(3)]
        unlabeled = [rand_doc(4) for _ in range(3)]
        ev = _MEvaluator(labeled, unlabeled, layout, alpha=0.9, gamma=0.4,
                         q_sum=rng.normal(0, 0.5, layout.size))
        w0 = rng.normal(0, 0.5, layout.size)
        _, g = ev(w0)
        fd = finite_difference_gradient(lambda w: ev(w)[0], w0)
        ok &= relative_gradient_error(g, fd) < 1e-4
    yield "moment-step gradient matches finite differences", ok

    ok = True
    for _ in range(6):
        layout = FeatureLayout(n_inputs=4, n_labels=3, chain=False)
        lam = ParamVector(rng.normal(0, 0.5, layout.size), layout)
        unlabeled = [rand_doc(4) for _ in range(4)]
        bounds = [BoundConstraint(WordLabelFeature(fid=0, trigger=0, label=1),
                                  PenaltyFamily("l2", 0.3), 1.5, None),
                  BoundConstraint(WordLabelFeature(fid=1, trigger=1, label=2),
                                  PenaltyFamily("affine"), 1.0, None)]
        engine = _make_engine(lam, bounds, unlabeled, None)
        pack = _DualPack(bounds)
        x0 = np.array([rng.normal(0, 0.4), -abs(rng.normal(0, 0.4))])
        _, g = _neg_dual(x0, pack, engine)
        fd = finite_difference_gradient(
            lambda x: _neg_dual(x, pack, engine)[0], x0, step=1e-6)
        ok &= relative_gradient_error(g, fd) < 1e-4
    yield "constraint-dual gradient matches finite differences", ok

    ok = True
    for _ in range(6):
        layout = FeatureLayout(n_inputs=4, n_labels=3, chain=False)
        lam = ParamVector(rng.normal(0, 0.5, layout.size), layout)
        unlabeled = [rand_doc(4) for _ in range(4)]
        terms = [GETerm(WordLabelFeature(fid=0, trigger=0, label=1), 1.2,
                        1.5)]
        w0 = lam.weights
        g = ge_gradient(lam, terms, unlabeled)
        fd = finite_difference_gradient(
            lambda w: ge_objective(ParamVector(w, layout), terms, [],
                                   unlabeled, 0.0), w0)
        ok &= relative_gradient_error(g, fd) < 1e-4
    yield "expectation-penalty gradient matches finite differences", ok

    ok = True
    for _ in range(8):
        K, L = 3, 3
        layout = FeatureLayout(n_inputs=3, n_labels=K, chain=True)
        lam = ParamVector(rng.normal(0, 0.6, layout.size), layout)
        inst = rand_seq(L, 3, K)
        feats = [TokenLabelFeature(fid=0, trigger=int(rng.integers(3)),
                                   label=int(rng.integers(K))),
                 SelfTransitionFeature(fid=1)]
        bounds = [BoundConstraint(f, PenaltyFamily("l2", 1.0), 1.0, None)
                  for f in feats]
        mu = rng.normal(0, 0.5, 2)
        post = aux_posterior(lam, mu, bounds, inst)
        from .models import chain_score_tables

        node, edge = chain_score_tables(lam, inst)
        paths = all_paths(L, K)
        sc = path_scores(node, edge, paths)
        sc = sc + np.array([sum(m * f.value(inst, p)
                                for m, f in zip(mu, feats)) for p in paths])
        w = np.exp(sc - sc.max())
        w /= w.sum()
        for t in range(L):
            for k in range(K):
                ok &= abs(post.node_marginals[t, k]
                          - float(w[paths[:, t] == k].sum())) < 1e-9
    yield "tilted posterior matches enumeration", ok


def _cmd_oracle_check(args) -> int:
    failures = 0
    for name, ok in _oracle_checks(args.seed):
        print(f"{'ok' if ok else 'FAIL'}\t{name}")
        failures += not ok
    if failures:
        raise InvariantError(f"{failures} oracle check(s) failed")
    return 0


# ---------------------------------------------------------------------------


def cli_main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as ex:
        # argparse uses status 2 for usage problems; our contract says 1
        return 1 if ex.code else 0
    handlers = {"train": _cmd_train, "label": _cmd_label,
                "eval": _cmd_eval, "synth": _cmd_synth,
                "oracle-check": _cmd_oracle_check}
    try:
        return handlers[args.command](args)
    except ConfigError as ex:
        print(f"error: {ex}", file=sys.stderr)
        return 1
    except (DataError, OSError) as ex:
        print(f"error: {ex}", file=sys.stderr)
        return 2
    except OptimizationError as ex:
        print(f"error: {ex}", file=sys.stderr)
        return 3
    except (InvariantError, AltprojError) as ex:
        print(f"error: {ex}", file=sys.stderr)
        return 4


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
