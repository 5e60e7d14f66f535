"""Chain inference kernels with a compiled fast path.

``forward_backward``, ``viterbi_path`` and ``gibbs_paths`` run hot inside
the trainers, so a Cython extension implements them; a NumPy fallback with
identical contracts is selected at import time when the extension is not
built.  Set ALTPROJ_BACKEND=pure to force the fallback, or ALTPROJ_BACKEND=c
to require the extension.
"""
from __future__ import annotations

import os

import numpy as np

from . import _pykernels

_requested = os.environ.get("ALTPROJ_BACKEND", "auto").strip().lower()
_compiled = None
if _requested in ("auto", "c"):
    try:
        from . import _ckernels as _compiled  # type: ignore[attr-defined]
    except ImportError:
        _compiled = None
if _requested == "c" and _compiled is None:
    raise ImportError("ALTPROJ_BACKEND=c requested but the compiled kernels "
                      "are not built; run pip install -e . --no-build-isolation")

BACKEND = "c" if _compiled is not None else "pure"


def _prep(node, edge):
    node = np.ascontiguousarray(node, dtype=np.float64)
    L, K = node.shape
    if edge is None:
        edge = np.zeros((0, K, K))
    edge = np.ascontiguousarray(edge, dtype=np.float64)
    if edge.shape != (max(L - 1, 0), K, K):
        raise ValueError(f"edge table shape {edge.shape} does not match "
                         f"node table shape {node.shape}")
    return node, edge


def forward_backward(node, edge):
    """Exact chain marginals and log-partition from log-score tables."""
    node, edge = _prep(node, edge)
    impl = _compiled if _compiled is not None else _pykernels
    return impl.forward_backward(node, edge)


def viterbi_path(node, edge):
    """Best label path under log-score tables (ties: lowest label index)."""
    node, edge = _prep(node, edge)
    impl = _compiled if _compiled is not None else _pykernels
    return impl.viterbi_path(node, edge)


def gibbs_paths(node, edge, rep_weight, init, uniforms, burn_in, thinning,
                extra=None):
    """Retained Gibbs sample paths; see the reference implementation."""
    node, edge = _prep(node, edge)
    init = np.ascontiguousarray(init, dtype=np.int64)
    uniforms = np.ascontiguousarray(uniforms, dtype=np.float64)
    if uniforms.shape != (uniforms.shape[0], node.shape[0]):
        raise ValueError("uniforms must have shape (sweeps, sequence length)")
    if extra is None and _compiled is not None:
        return _compiled.gibbs_paths(node, edge, float(rep_weight), init,
                                     uniforms, int(burn_in), int(thinning))
    return _pykernels.gibbs_paths(node, edge, float(rep_weight), init,
                                  uniforms, int(burn_in), int(thinning),
                                  extra=extra)
