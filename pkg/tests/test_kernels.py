"""Kernel-level checks: forward-backward, Viterbi, Gibbs sweeps.

The enumeration oracle in altproj.oracles is the reference for everything
here; the compiled and pure backends must also agree with each other.
"""
import numpy as np
import pytest

from altproj import kernels
from altproj.kernels import _pykernels
from altproj.oracles import enumerate_chain_scores

HAVE_C = kernels.BACKEND == "c"


def random_tables(rng, L, K, scale=1.5):
    node = scale * rng.standard_normal((L, K))
    edge = scale * rng.standard_normal((max(L - 1, 0), K, K))
    return node, edge


def test_zero_potentials_uniform():
    node = np.zeros((3, 2))
    edge = np.zeros((2, 2, 2))
    nm, em, lz = kernels.forward_backward(node, edge)
    assert lz == pytest.approx(3 * np.log(2), abs=1e-12)
    assert np.allclose(nm, 0.5, atol=1e-12)
    assert np.allclose(em, 0.25, atol=1e-12)


def test_forward_backward_matches_enumeration():
    rng = np.random.default_rng(7)
    for trial in range(40):
        L = int(rng.integers(1, 6))
        K = int(rng.integers(2, 5))
        node, edge = random_tables(rng, L, K)
        nm, em, lz = kernels.forward_backward(node, edge)
        nm0, em0, lz0 = enumerate_chain_scores(node, edge)
        assert lz == pytest.approx(lz0, abs=1e-9)
        assert np.max(np.abs(nm - nm0)) < 1e-9
        if L > 1:
            assert np.max(np.abs(em - em0)) < 1e-9


def test_marginal_identities():
    rng = np.random.default_rng(11)
    for trial in range(20):
        L = int(rng.integers(2, 9))
        K = int(rng.integers(2, 6))
        node, edge = random_tables(rng, L, K)
        nm, em, lz = kernels.forward_backward(node, edge)
        assert np.allclose(nm.sum(axis=1), 1.0, atol=1e-10)
        # edge marginals marginalize onto both endpoints
        assert np.max(np.abs(em.sum(axis=2) - nm[:-1])) < 1e-10
        assert np.max(np.abs(em.sum(axis=1) - nm[1:])) < 1e-10


def test_constant_node_shift_invariance():
    rng = np.random.default_rng(3)
    node, edge = random_tables(rng, 5, 3)
    nm, em, lz = kernels.forward_backward(node, edge)
    c = 0.7351
    nm2, em2, lz2 = kernels.forward_backward(node + c, edge)
    assert lz2 == pytest.approx(lz + 5 * c, abs=1e-9)
    assert np.max(np.abs(nm - nm2)) < 1e-10
    assert np.max(np.abs(em - em2)) < 1e-10


def test_viterbi_matches_enumeration():
    from altproj.oracles import all_paths, path_scores

    rng = np.random.default_rng(23)
    for trial in range(30):
        L = int(rng.integers(1, 6))
        K = int(rng.integers(2, 4))
        node, edge = random_tables(rng, L, K)
        tied = trial % 3 == 0
        if tied:
            # quantized scores force ties; the returned path must still be
            # optimal (tie order itself is pinned by the all-zeros test)
            node = np.round(node)
            edge = np.round(edge)
        best = kernels.viterbi_path(node, edge)
        paths = all_paths(L, K)
        scores = path_scores(node, edge, paths)
        top = float(scores.max())
        got = float(path_scores(node, edge, best[None, :])[0])
        assert got == pytest.approx(top, abs=1e-9)
        if not tied:
            # continuous scores: the argmax is unique, paths must coincide
            assert np.array_equal(best, paths[int(scores.argmax())])


def test_viterbi_all_zero_scores_picks_label_zero():
    node = np.zeros((4, 3))
    edge = np.zeros((3, 3, 3))
    assert np.array_equal(kernels.viterbi_path(node, edge), np.zeros(4, np.int64))


@pytest.mark.skipif(not HAVE_C, reason="compiled kernels not built")
def test_backends_agree_forward_backward():
    rng = np.random.default_rng(5)
    for trial in range(25):
        L = int(rng.integers(1, 12))
        K = int(rng.integers(2, 7))
        node, edge = random_tables(rng, L, K)
        nm_c, em_c, lz_c = kernels._compiled.forward_backward(node, edge)
        nm_p, em_p, lz_p = _pykernels.forward_backward(node, edge)
        assert lz_c == pytest.approx(lz_p, abs=1e-12)
        assert np.max(np.abs(nm_c - nm_p)) < 1e-12
        if L > 1:
            assert np.max(np.abs(em_c - em_p)) < 1e-12


@pytest.mark.skipif(not HAVE_C, reason="compiled kernels not built")
def test_backends_agree_viterbi():
    rng = np.random.default_rng(13)
    for trial in range(25):
        L = int(rng.integers(1, 10))
        K = int(rng.integers(2, 6))
        node, edge = random_tables(rng, L, K)
        assert np.array_equal(kernels._compiled.viterbi_path(node, edge),
                              _pykernels.viterbi_path(node, edge))


@pytest.mark.skipif(not HAVE_C, reason="compiled kernels not built")
def test_backends_agree_gibbs_paths():
    rng = np.random.default_rng(41)
    for trial in range(6):
        L = int(rng.integers(2, 8))
        K = int(rng.integers(2, 5))
        node, edge = random_tables(rng, L, K, scale=0.8)
        init = rng.integers(0, K, size=L).astype(np.int64)
        sweeps = 60
        uniforms = rng.random((sweeps, L))
        rep_w = float(rng.normal()) if trial % 2 else 0.0
        p_c = kernels._compiled.gibbs_paths(node, edge, rep_w, init,
                                            uniforms, 10, 5)
        p_p = _pykernels.gibbs_paths(node, edge, rep_w, init, uniforms, 10, 5)
        assert np.array_equal(p_c, p_p)


def test_gibbs_paths_shape_and_determinism():
    rng = np.random.default_rng(9)
    node, edge = random_tables(rng, 5, 3, scale=0.5)
    init = np.zeros(5, dtype=np.int64)
    uniforms = np.random.default_rng(123).random((110, 5))
    a = kernels.gibbs_paths(node, edge, 0.0, init, uniforms, 10, 2)
    b = kernels.gibbs_paths(node, edge, 0.0, init, uniforms, 10, 2)
    assert a.shape == (50, 5)
    assert np.array_equal(a, b)
