"""Scaling measurements for the per-sequence training cost.

The dominant per-sequence work during constrained training is one pass of
score-table construction, forward-backward, and expected-feature
accumulation.  ``gradient_time_slope`` measures that cost across label-set
sizes and reports the log-log slope; quadratic inference should land near
2 regardless of machine speed.
"""
from __future__ import annotations

import time

import numpy as np

from .data import FeatureLayout, ParamVector, SequenceInstance, SparseFeatures
from .models import add_expected_features, chain_score_tables
from .models import posterior_from_tables


def _instance(length, n_inputs, rng):
    pos = tuple(
        SparseFeatures(np.array([int(rng.integers(n_inputs))]), np.ones(1))
        for _ in range(length))
    return SequenceInstance(pos)


def _one_pass_fn(n_labels, length, n_inputs, rng):
    layout = FeatureLayout(n_inputs=n_inputs, n_labels=n_labels, chain=True)
    lam = ParamVector(0.1 * rng.standard_normal(layout.size), layout)
    inst = _instance(length, n_inputs, rng)
    buf = np.zeros(layout.size)

    def one_pass():
        node, edge = chain_score_tables(lam, inst)
        post = posterior_from_tables(node, edge)
        add_expected_features(post, inst, layout, buf)

    return one_pass


def per_sequence_gradient_seconds(n_labels, length=4000, n_inputs=8, reps=5,
                                  seed=0):
    """Best-of-reps wall time of one per-sequence gradient contribution."""
    rng = np.random.default_rng(seed)
    one_pass = _one_pass_fn(n_labels, length, n_inputs, rng)
    one_pass()  # warm caches and allocator
    best = np.inf
    for _ in range(reps):
        t0 = time.perf_counter()
        one_pass()
        best = min(best, time.perf_counter() - t0)
    return best


def gradient_time_slope(label_sizes=(2, 4, 8, 16), length=4000, reps=3,
                        rounds=5, seed=0):
    """Log-log slope of per-sequence gradient time against label count.

    Timings interleave the label sizes across several rounds and keep the
    per-size minimum, so a transient system stall inflates at most one
    round instead of one size's whole measurement.  Returns
    (slope, {K: seconds}).
    """
    rng = np.random.default_rng(seed)
    passes = {k: _one_pass_fn(k, length, 8, rng) for k in label_sizes}
    times = {}
    for k, fn in passes.items():
        fn()  # warm caches and allocator
        times[k] = np.inf
    for _ in range(rounds):
        for k, fn in passes.items():
            for _ in range(reps):
                t0 = time.perf_counter()
                fn()
                times[k] = min(times[k], time.perf_counter() - t0)
    ks = np.log(np.array(sorted(times)))
    ts = np.log(np.array([times[k] for k in sorted(times)]))
    slope = float(np.polyfit(ks, ts, 1)[0])
    return slope, times
